//! Pure computational kernels shared by the tape and by inference-only paths.
//!
//! Convolution is implemented as im2col followed by a matrix multiply; the
//! backward pass reuses the same column buffers via col2im. Everything here
//! is sequential and deterministic.

use crate::error::{Error, Result};

/// C[m,n] = A[m,k] * B[k,n]. `c` is accumulated into (callers zero it first
/// when they want a plain product). ikj loop order so the inner loop runs
/// over contiguous rows of B and C.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

/// Plain matrix product returning a fresh buffer.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A[m,k] * B[n,k]^T  (B given row-major as [n,k]).
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]  (A given row-major as [k,m]).
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_pi * b_v;
            }
        }
    }
}

/// Output spatial extents of a conv over a zero-padded input.
pub fn conv2d_output_shape(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if kh > hp || kw > wp {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: vec![kh, kw],
            reason: format!("kernel exceeds padded input {}x{}", hp, wp),
        });
    }
    Ok(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

/// Gather conv patches of one image [C,H,W] into columns [C*kh*kw, OH*OW].
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    col: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ospatial = oh * ow;
    for c in 0..c_in {
        let img_c = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let col_row = &mut col[((c * kh + ky) * kw + kx) * ospatial..][..ospatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut col_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &img_c[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns [C*kh*kw, OH*OW] back into one image gradient [C,H,W].
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    col: &[f64],
    img: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ospatial = oh * ow;
    for c in 0..c_in {
        let img_c = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let col_row = &col[((c * kh + ky) * kw + kx) * ospatial..][..ospatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut img_c[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation: input [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,OH,OW].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let patch = c_in * kh * kw;
    let ospatial = oh * ow;
    let mut out = vec![0.0; n * f * ospatial];
    let mut col = vec![0.0; patch * ospatial];
    for ni in 0..n {
        let img = &input[ni * c_in * h * w..(ni + 1) * c_in * h * w];
        im2col(img, &mut col, c_in, h, w, kh, kw, stride, pad, oh, ow);
        let dst = &mut out[ni * f * ospatial..(ni + 1) * f * ospatial];
        matmul_acc(kernel, &col, dst, f, patch, ospatial);
    }
    out
}

/// Backward pass of conv2d: returns (d_input, d_kernel).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>) {
    let patch = c_in * kh * kw;
    let ospatial = oh * ow;
    let mut d_input = vec![0.0; n * c_in * h * w];
    let mut d_kernel = vec![0.0; f * patch];
    let mut col = vec![0.0; patch * ospatial];
    let mut d_col = vec![0.0; patch * ospatial];
    for ni in 0..n {
        let img = &input[ni * c_in * h * w..(ni + 1) * c_in * h * w];
        let d_out_n = &d_out[ni * f * ospatial..(ni + 1) * f * ospatial];
        // dK += dOut * col^T
        im2col(img, &mut col, c_in, h, w, kh, kw, stride, pad, oh, ow);
        matmul_nt_acc(d_out_n, &col, &mut d_kernel, f, ospatial, patch);
        // dcol = K^T * dOut, scattered back to the image
        d_col.fill(0.0);
        matmul_tn_acc(kernel, d_out_n, &mut d_col, patch, f, ospatial);
        let d_img = &mut d_input[ni * c_in * h * w..(ni + 1) * c_in * h * w];
        col2im_acc(&d_col, d_img, c_in, h, w, kh, kw, stride, pad, oh, ow);
    }
    (d_input, d_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = vec![1.0, 0.0, 0.0, 1.0];
        let c = matmul_raw(&i2, &i2, 2, 2, 2);
        assert_eq!(c, i2);
    }

    #[test]
    fn matmul_row_sums() {
        // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![1.0, 1.0];
        let c = matmul_raw(&a, &b, 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4 or 4x3

        // nt: A[2,3] * (B[4,3])^T
        let mut c = vec![0.0; 8];
        matmul_nt_acc(&a, &b, &mut c, 2, 3, 4);
        let mut bt = vec![0.0; 12];
        for r in 0..4 {
            for col in 0..3 {
                bt[col * 4 + r] = b[r * 3 + col];
            }
        }
        let want = matmul_raw(&a, &bt, 2, 3, 4);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: (A[3,2] as [k,m])^T * B[3,4]
        let a32: Vec<f64> = (0..6).map(|v| (v as f64).cos()).collect();
        let mut c2 = vec![0.0; 8];
        matmul_tn_acc(&a32, &b, &mut c2, 2, 3, 4);
        let mut at = vec![0.0; 6];
        for r in 0..3 {
            for col in 0..2 {
                at[col * 3 + r] = a32[r * 2 + col];
            }
        }
        let want2 = matmul_raw(&at, &b, 2, 3, 4);
        for (x, y) in c2.iter().zip(&want2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_all_ones_is_patch_count() {
        // 1x1x3x3 ones, 1x1x3x3 ones kernel, stride 1 pad 0 -> single value 9
        let input = vec![1.0; 9];
        let kernel = vec![1.0; 9];
        let (oh, ow) = conv2d_output_shape(3, 3, 3, 3, 1, 0).unwrap();
        assert_eq!((oh, ow), (1, 1));
        let out = conv2d_forward(&input, &kernel, 1, 1, 3, 3, 1, 3, 3, 1, 0, oh, ow);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        // centered 1 in a 3x3 kernel with pad 1 keeps the image unchanged
        let input: Vec<f64> = (0..2 * 4 * 4).map(|v| v as f64 * 0.25 - 2.0).collect();
        let mut kernel = vec![0.0; 2 * 2 * 9];
        // identity maps channel c -> filter c
        kernel[4] = 1.0; // f0,c0 center
        kernel[(2 + 1) * 9 + 4] = 1.0; // f1,c1 center
        let (oh, ow) = conv2d_output_shape(4, 4, 3, 3, 1, 1).unwrap();
        assert_eq!((oh, ow), (4, 4));
        let out = conv2d_forward(&input, &kernel, 1, 2, 4, 4, 2, 3, 3, 1, 1, oh, ow);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_rejects_kernel_larger_than_padded_input() {
        assert!(conv2d_output_shape(3, 3, 5, 5, 1, 0).is_err());
        assert!(conv2d_output_shape(3, 3, 5, 5, 1, 1).is_ok());
    }
}
