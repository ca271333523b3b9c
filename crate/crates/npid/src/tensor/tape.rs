//! Reverse-mode gradient tape.
//!
//! Operations append nodes in execution order, so the tape is always
//! topologically sorted and the backward pass is a single reverse sweep.
//! A tape belongs to exactly one training step; evaluation passes that do
//! not need gradients use the raw kernels in `ops` directly.

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    BiasRows(Var, Var),
    BiasChannels(Var, Var),
    ScaleChannels(Var, Var),
    /// Row-wise L2 normalization; saves the pre-normalization row norms.
    L2NormRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Floor applied to `log` inputs so loss terms never produce -inf.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-30;

/// Minimum pre-normalization row norm accepted by `l2norm_rows`.
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    log_floor: f64,
    norm_eps: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            log_floor: DEFAULT_LOG_FLOOR,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn with_log_floor(mut self, floor: f64) -> Self {
        self.log_floor = floor;
        self
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; guaranteed a gradient (zero if unused) after backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_shape_check(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(sa.to_vec());
        }
        // scalar-tensor broadcast only
        if self.value(a).is_scalar() {
            return Ok(sb.to_vec());
        }
        if self.value(b).is_scalar() {
            return Ok(sa.to_vec());
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape_check("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.is_scalar() && !vb.is_scalar() {
            let s = va.item();
            vb.data().iter().map(|x| s + x).collect()
        } else if vb.is_scalar() && !va.is_scalar() {
            let s = vb.item();
            va.data().iter().map(|x| x + s).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect()
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape_check("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.is_scalar() && !vb.is_scalar() {
            let s = va.item();
            vb.data().iter().map(|x| s * x).collect()
        } else if vb.is_scalar() && !va.is_scalar() {
            let s = vb.item();
            va.data().iter().map(|x| x * s).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect()
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| c * x).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(t, Op::Exp(a), rg)
    }

    /// Natural log of `max(x, log_floor)`.
    pub fn log(&mut self, a: Var) -> Var {
        let floor = self.log_floor;
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.max(floor).ln()).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        let rg = self.requires(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = ops::matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.requires(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Cross-correlation of input [N,C,H,W] with kernel [F,C,kh,kw].
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = ops::conv2d_output_shape(h, w, kh, kw, stride, pad)?;
        let data = ops::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        let rg = self.requires(input) || self.requires(kernel);
        Ok(self.push(
            Tensor::new(vec![n, f, oh, ow], data)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// x[N,D] + b[D], broadcast over rows.
    pub fn bias_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "bias_rows",
                lhs: sx,
                rhs: sb,
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in 0..n {
            for j in 0..d {
                data[row * d + j] += bias[j];
            }
        }
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::BiasRows(x, b), rg))
    }

    /// x[N,C,H,W] + b[C], broadcast over batch and spatial axes.
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "bias_channels",
                lhs: sx,
                rhs: sb,
            });
        }
        let (n, c, spatial) = (sx[0], sx[1], sx[2] * sx[3]);
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let bv = bias[ci];
                for v in &mut data[base..base + spatial] {
                    *v += bv;
                }
            }
        }
        let rg = self.requires(x) || self.requires(b);
        Ok(self.push(Tensor::new(sx, data)?, Op::BiasChannels(x, b), rg))
    }

    /// x[N,C,H,W] * s[C], the per-channel affine scale.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let ss = self.value(s).shape().to_vec();
        if sx.len() != 4 || ss.len() != 1 || ss[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: sx,
                rhs: ss,
            });
        }
        let (n, c, spatial) = (sx[0], sx[1], sx[2] * sx[3]);
        let scale = self.value(s).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let sv = scale[ci];
                for v in &mut data[base..base + spatial] {
                    *v *= sv;
                }
            }
        }
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(Tensor::new(sx, data)?, Op::ScaleChannels(x, s), rg))
    }

    /// Normalize each row of x[N,D] to unit L2 norm. Errors on any row whose
    /// norm is at or below the epsilon (degenerate input; see encoder).
    pub fn l2norm_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(Error::InvalidShape {
                op: "l2norm_rows",
                shape: sx,
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for row in 0..n {
            let r = &src[row * d..(row + 1) * d];
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= self.norm_eps {
                return Err(Error::numeric(format!(
                    "degenerate pre-normalization vector at row {row}: norm {norm:.3e} <= {:.0e}; \
                     re-initialize the encoder weights",
                    self.norm_eps
                )));
            }
            norms[row] = norm;
            for j in 0..d {
                data[row * d + j] = r[j] / norm;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(sx, data)?, Op::L2NormRows(x, norms), rg))
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulate `delta` into `v`'s gradient, reducing to a scalar when the
    /// operand was a broadcast scalar.
    fn accumulate_matched(&mut self, v: Var, delta: Tensor) {
        if self.value(v).is_scalar() && !delta.is_scalar() {
            let s: f64 = delta.data().iter().sum();
            self.accumulate(v, Tensor::scalar(s));
        } else {
            self.accumulate(v, delta);
        }
    }

    /// Backward from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.value(root).shape().to_vec(),
                reason: "root must be a scalar; use backward_seeded otherwise".into(),
            });
        }
        self.backward_seeded(root, &Tensor::scalar(1.0))
    }

    /// Backward from any root, seeding its gradient explicitly. Used when the
    /// loss and its gradient w.r.t. network output are computed off-tape.
    pub fn backward_seeded(&mut self, root: Var, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward_seeded",
                lhs: seed.shape().to_vec(),
                rhs: self.value(root).shape().to_vec(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        // Parameters always end up with a gradient, even if disconnected.
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                self.grads[i] = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }
        self.accumulate(root, seed.clone());

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].clone() else {
                continue;
            };
            self.propagate(idx, &g)?;
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        // Decompose immutably first; ops needing saved values clone cheap refs.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.accumulate_matched(a, g.clone());
                }
                if self.requires(b) {
                    self.accumulate_matched(b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let other = self.value(b);
                    let d = mul_broadcast(g, other);
                    self.accumulate_matched(a, d);
                }
                if self.requires(b) {
                    let other = self.value(a);
                    let d = mul_broadcast(g, other);
                    self.accumulate_matched(b, d);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if self.requires(a) {
                    let data = g.data().iter().map(|v| v * c).collect();
                    self.accumulate(a, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.requires(a) {
                    let x = self.value(a).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(a, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if self.requires(a) {
                    let y = self.nodes[idx].value.data();
                    let data = g.data().iter().zip(y).map(|(gv, yv)| gv * yv).collect();
                    self.accumulate(a, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Log(a) => {
                let a = *a;
                if self.requires(a) {
                    let floor = self.log_floor;
                    let x = self.value(a).data();
                    // Inside the clamp region the output is constant.
                    let data = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > floor { gv / xv } else { 0.0 })
                        .collect();
                    self.accumulate(a, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if self.requires(a) {
                    let d = Tensor::filled(self.value(a).shape(), g.item());
                    self.accumulate(a, d);
                }
            }
            Op::Mean(a) => {
                let a = *a;
                if self.requires(a) {
                    let n = self.value(a).numel() as f64;
                    let d = Tensor::filled(self.value(a).shape(), g.item() / n);
                    self.accumulate(a, d);
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(a) {
                    // dA = dC * B^T
                    let mut d = vec![0.0; m * k];
                    ops::matmul_nt_acc(g.data(), self.value(b).data(), &mut d, m, n, k);
                    self.accumulate(a, Tensor::new(vec![m, k], d)?);
                }
                if self.requires(b) {
                    // dB = A^T * dC
                    let mut d = vec![0.0; k * n];
                    ops::matmul_tn_acc(self.value(a).data(), g.data(), &mut d, k, m, n);
                    self.accumulate(b, Tensor::new(vec![k, n], d)?);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                if self.requires(a) {
                    let s = g.shape();
                    let (r, c) = (s[0], s[1]);
                    let mut data = vec![0.0; r * c];
                    let src = g.data();
                    for i in 0..r {
                        for j in 0..c {
                            data[j * r + i] = src[i * c + j];
                        }
                    }
                    self.accumulate(a, Tensor::new(vec![c, r], data)?);
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if self.requires(a) {
                    let d = g.reshaped(self.value(a).shape())?;
                    self.accumulate(a, d);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
                let si = self.value(input).shape().to_vec();
                let sk = self.value(kernel).shape().to_vec();
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (f, kh, kw) = (sk[0], sk[2], sk[3]);
                let (oh, ow) = ops::conv2d_output_shape(h, w, kh, kw, stride, pad)?;
                let (d_in, d_k) = ops::conv2d_backward(
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g.data(),
                    n,
                    c,
                    h,
                    w,
                    f,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                );
                if self.requires(input) {
                    self.accumulate(input, Tensor::new(si, d_in)?);
                }
                if self.requires(kernel) {
                    self.accumulate(kernel, Tensor::new(sk, d_k)?);
                }
            }
            Op::BiasRows(x, b) => {
                let (x, b) = (*x, *b);
                let s = g.shape().to_vec();
                let (n, d) = (s[0], s[1]);
                if self.requires(x) {
                    self.accumulate(x, g.clone());
                }
                if self.requires(b) {
                    let mut db = vec![0.0; d];
                    for row in 0..n {
                        for j in 0..d {
                            db[j] += g.data()[row * d + j];
                        }
                    }
                    self.accumulate(b, Tensor::new(vec![d], db)?);
                }
            }
            Op::BiasChannels(x, b) => {
                let (x, b) = (*x, *b);
                let s = g.shape().to_vec();
                let (n, c, spatial) = (s[0], s[1], s[2] * s[3]);
                if self.requires(x) {
                    self.accumulate(x, g.clone());
                }
                if self.requires(b) {
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * spatial;
                            db[ci] += g.data()[base..base + spatial].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(b, Tensor::new(vec![c], db)?);
                }
            }
            Op::ScaleChannels(x, sv) => {
                let (x, sv) = (*x, *sv);
                let s = g.shape().to_vec();
                let (n, c, spatial) = (s[0], s[1], s[2] * s[3]);
                if self.requires(x) {
                    let scale = self.value(sv).data().to_vec();
                    let mut d = g.data().to_vec();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * spatial;
                            for v in &mut d[base..base + spatial] {
                                *v *= scale[ci];
                            }
                        }
                    }
                    self.accumulate(x, Tensor::new(s.clone(), d)?);
                }
                if self.requires(sv) {
                    let xd = self.value(x).data();
                    let mut ds = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * spatial;
                            let mut acc = 0.0;
                            for off in 0..spatial {
                                acc += g.data()[base + off] * xd[base + off];
                            }
                            ds[ci] += acc;
                        }
                    }
                    self.accumulate(sv, Tensor::new(vec![c], ds)?);
                }
            }
            Op::L2NormRows(x, norms) => {
                let x = *x;
                let norms = norms.clone();
                if self.requires(x) {
                    let s = g.shape().to_vec();
                    let (n, d) = (s[0], s[1]);
                    let y = self.nodes[idx].value.data();
                    let mut dx = vec![0.0; n * d];
                    // dx = (g - (g . v) v) / ||x||, v the normalized row
                    for row in 0..n {
                        let gr = &g.data()[row * d..(row + 1) * d];
                        let vr = &y[row * d..(row + 1) * d];
                        let dot: f64 = gr.iter().zip(vr).map(|(a, b)| a * b).sum();
                        let inv = 1.0 / norms[row];
                        for j in 0..d {
                            dx[row * d + j] = (gr[j] - dot * vr[j]) * inv;
                        }
                    }
                    self.accumulate(x, Tensor::new(s, dx)?);
                }
            }
        }
        Ok(())
    }
}

/// g * other with scalar broadcast on `other`.
fn mul_broadcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.is_scalar() && !g.is_scalar() {
        let s = other.item();
        let data = g.data().iter().map(|v| v * s).collect();
        Tensor::new(g.shape().to_vec(), data).expect("same shape")
    } else if g.is_scalar() && !other.is_scalar() {
        // g is the upstream scalar; product with the tensor operand
        let s = g.item();
        let data = other.data().iter().map(|v| v * s).collect();
        Tensor::new(other.shape().to_vec(), data).expect("same shape")
    } else {
        let data = g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::new(g.shape().to_vec(), data).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sum_of_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[3, 4], 1.0));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item(), 12.0);
    }

    #[test]
    fn exp_log_inverse_pair() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![0.5, 1.0, 2.5, 10.0]).unwrap());
        let l = tape.log(x);
        let y = tape.exp(l);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_trivial_cases() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::filled(&[3], 2.0));
        let unused = tape.param(Tensor::filled(&[2], 1.0));
        let s = tape.sum(used);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(used).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, c).unwrap();
        let z = tape.add(y, c).unwrap();
        let s = tape.sum(z);
        assert_eq!(tape.value(s).item(), 2.0 + 4.0 + 6.0 + 3.0 * 2.0);
        tape.backward(s).unwrap();
        // d/dx = c = 2 each; d/dc = sum(x) + 3 = 9
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(c).unwrap().item(), 9.0);
    }

    #[test]
    fn l2norm_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = tape.l2norm_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2norm_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]));
        assert!(tape.l2norm_rows(x).is_err());
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.05]).unwrap());
            let w = tape.param(Tensor::new(vec![2, 2], vec![0.9, 0.2, -0.4, 0.6]).unwrap());
            let p = tape.matmul(x, w).unwrap();
            let r = tape.relu(p);
            let s = tape.sum(r);
            tape.backward(s).unwrap();
            (
                tape.value(s).item().to_bits(),
                tape.grad(x)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
