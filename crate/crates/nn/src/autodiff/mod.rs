//! Reverse-mode automatic differentiation over dense float64 tensors.
//!
//! Tensors are row-major `[batch, channels, x, y, z]` (z fastest). A [`Tape`]
//! records every operation; [`Tape::backward`] walks it in reverse and
//! *adds* `d loss / d node` into each node's gradient, so calling it twice
//! without [`Tape::zero_grads`] doubles every gradient.

mod adam;
mod container;
mod conv;
mod upsample;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use container::{decode_container, encode_container, read_container, write_container, Container, ContainerError};

use thiserror::Error;

use conv::{col2im, gemm, im2col, shifted_backward, shifted_forward, ConvGeom, Scratch};
use upsample::{resize_axis, resize_axis_adjoint, taps};

/// Smoothing term of the soft dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape { op, detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn five_d(&self, op: &'static str) -> Result<[usize; 5], AutodiffError> {
        <[usize; 5]>::try_from(self.shape.as_slice())
            .map_err(|_| shape_err(op, format!("expected [batch, channels, x, y, z], got {:?}", self.shape)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeom },
    LeakyRelu { x: Var, slope: f64 },
    Scale { x: Var, factor: f64 },
    Concat { parts: Vec<Var> },
    Upsample { x: Var, factor: usize },
    Softmax { x: Var },
    DiceLoss { logits: Var, target: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, grad: None, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, grad: None, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, `None` if backward never reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Cross-correlation of `x [B, C, X, Y, Z]` with `w [O, C, KX, KY, KZ]`
    /// plus bias `b [O]`, zero padding `pad` on every side.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let [bn, c, nx, ny, nz] = self.value(x).five_d("conv3d")?;
        let [o, wc, kx, ky, kz] = self.value(w).five_d("conv3d weights")?;
        if wc != c {
            return Err(shape_err("conv3d", format!("input has {c} channels, weights expect {wc}")));
        }
        if self.value(b).shape() != [o] {
            return Err(shape_err("conv3d", format!("bias shape {:?}, expected [{o}]", self.value(b).shape())));
        }
        if stride == 0 {
            return Err(shape_err("conv3d", "stride must be at least 1"));
        }
        let geom = ConvGeom::new(c, [nx, ny, nz], [kx, ky, kz], stride, pad)
            .ok_or_else(|| shape_err("conv3d", "kernel larger than padded input"))?;
        let (k, m, n_in) = (geom.rows(), geom.cols(), geom.input_len());
        let mut out = vec![0.0; bn * o * m];
        let mut cols = if geom.is_pointwise() || geom.is_shifted() { Vec::new() } else { vec![0.0; k * m] };
        let mut scratch = Scratch::default();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for bi in 0..bn {
                let xin = &xv[bi * n_in..(bi + 1) * n_in];
                let y = &mut out[bi * o * m..(bi + 1) * o * m];
                for (oc, chunk) in y.chunks_exact_mut(m).enumerate() {
                    chunk.fill(bv[oc]);
                }
                if geom.is_shifted() {
                    shifted_forward(&geom, xin, wv, o, y, &mut scratch);
                    continue;
                }
                let colref: &[f64] = if geom.is_pointwise() {
                    xin
                } else {
                    im2col(&geom, xin, &mut cols);
                    &cols
                };
                gemm(o, k, m, wv, false, colref, false, 1.0, y);
            }
        }
        let [ox, oy, oz] = geom.output;
        let value = Tensor { shape: vec![bn, o, ox, oy, oz], data: out };
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, &[x, w, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { slope * a }).collect();
        let value = Tensor { shape: v.shape.clone(), data };
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    /// `factor * x`.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let value = Tensor { shape: v.shape.clone(), data: v.data().iter().map(|a| factor * a).collect() };
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "nothing to concatenate"))?;
        let [bn, _, nx, ny, nz] = self.value(*first).five_d("concat")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let [b2, c, x2, y2, z2] = self.value(*p).five_d("concat")?;
            if (b2, x2, y2, z2) != (bn, nx, ny, nz) {
                return Err(shape_err("concat", format!("shape {:?} does not match", self.value(*p).shape())));
            }
            channels.push(c);
        }
        let total: usize = channels.iter().sum();
        let vox = nx * ny * nz;
        let mut data = Vec::with_capacity(bn * total * vox);
        for bi in 0..bn {
            for (p, &c) in parts.iter().zip(&channels) {
                data.extend_from_slice(&self.value(*p).data()[bi * c * vox..(bi + 1) * c * vox]);
            }
        }
        let value = Tensor { shape: vec![bn, total, nx, ny, nz], data };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Corner-aligned trilinear upsampling of every spatial axis by `factor`.
    pub fn upsample_trilinear(&mut self, x: Var, factor: usize) -> Result<Var, AutodiffError> {
        let [bn, c, nx, ny, nz] = self.value(x).five_d("upsample")?;
        if factor < 2 {
            return Err(shape_err("upsample", format!("factor {factor} < 2")));
        }
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(shape_err("upsample", "every spatial axis needs at least 2 samples"));
        }
        let (mx, my, mz) = (nx * factor, ny * factor, nz * factor);
        let v = self.value(x).data();
        let a = resize_axis(v, bn * c * nx * ny, nz, 1, &taps(nz, mz));
        let a = resize_axis(&a, bn * c * nx, ny, mz, &taps(ny, my));
        let a = resize_axis(&a, bn * c, nx, my * mz, &taps(nx, mx));
        let value = Tensor { shape: vec![bn, c, mx, my, mz], data: a };
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Softmax over the channel axis at every voxel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let [bn, c, nx, ny, nz] = self.value(x).five_d("softmax")?;
        let data = softmax(self.value(x).data(), bn, c, nx * ny * nz);
        let value = Tensor { shape: vec![bn, c, nx, ny, nz], data };
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` over the whole
    /// batch, with `p` the softmax probability of channel 1 and `g` the
    /// target (`[B, X, Y, Z]` flattened).
    pub fn dice_loss(&mut self, logits: Var, target: &[f64]) -> Result<Var, AutodiffError> {
        let [bn, c, nx, ny, nz] = self.value(logits).five_d("dice_loss")?;
        if c < 2 {
            return Err(shape_err("dice_loss", "need at least two classes"));
        }
        let vox = nx * ny * nz;
        if target.len() != bn * vox {
            return Err(shape_err("dice_loss", format!("target has {} values, expected {}", target.len(), bn * vox)));
        }
        let probs = softmax(self.value(logits).data(), bn, c, vox);
        let (inter, sum_p, sum_g) = dice_sums(&probs, target, bn, c, vox);
        let loss = 1.0 - (2.0 * inter + DICE_EPS) / (sum_p + sum_g + DICE_EPS);
        Ok(self.push(Tensor::scalar(loss), Op::DiceLoss { logits, target: target.to_vec() }, &[logits]))
    }

    /// Scalar `sum(weights * x)`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var, AutodiffError> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err("weighted_sum", "weights and input differ in length"));
        }
        let s = self.value(x).data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() }, &[x]))
    }

    /// Adds `d loss / d v` into the gradient of every node `v` that
    /// depends on a leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut local: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let add = |v: Var, local: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = local[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                add(*x, local, &mut |d| {
                    for ((d, &a), &gi) in d.iter_mut().zip(xv).zip(g) {
                        *d += if a > 0.0 { gi } else { slope * gi };
                    }
                });
            }
            Op::Scale { x, factor } => {
                add(*x, local, &mut |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += factor * gi));
            }
            Op::WeightedSum { x, weights } => {
                add(*x, local, &mut |d| d.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w));
            }
            Op::Concat { parts } => {
                let shape = self.nodes[i].value.shape();
                let (bn, total, vox) = (shape[0], shape[1], shape[2] * shape[3] * shape[4]);
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    if wants(*p) {
                        add(*p, local, &mut |d| {
                            for bi in 0..bn {
                                let src = &g[(bi * total + offset) * vox..(bi * total + offset + c) * vox];
                                let dst = &mut d[bi * c * vox..(bi + 1) * c * vox];
                                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::Upsample { x, factor } => {
                let [bn, c, nx, ny, nz] = self.value(*x).five_d("upsample").expect("checked in forward");
                let (mx, my, mz) = (nx * factor, ny * factor, nz * factor);
                let a = resize_axis_adjoint(g, bn * c, nx, my * mz, &taps(nx, mx));
                let a = resize_axis_adjoint(&a, bn * c * nx, ny, mz, &taps(ny, my));
                let a = resize_axis_adjoint(&a, bn * c * nx * ny, nz, 1, &taps(nz, mz));
                add(*x, local, &mut |d| d.iter_mut().zip(&a).for_each(|(d, v)| *d += v));
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let s = self.nodes[i].value.shape();
                let (bn, c, vox) = (s[0], s[1], s[2] * s[3] * s[4]);
                add(*x, local, &mut |d| {
                    for bi in 0..bn {
                        let base = bi * c * vox;
                        for v in 0..vox {
                            let dot: f64 = (0..c).map(|k| g[base + k * vox + v] * y[base + k * vox + v]).sum();
                            for k in 0..c {
                                let j = base + k * vox + v;
                                d[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::DiceLoss { logits, target } => {
                let s = self.value(*logits).shape();
                let (bn, c, vox) = (s[0], s[1], s[2] * s[3] * s[4]);
                let p = softmax(self.value(*logits).data(), bn, c, vox);
                let (inter, sum_p, sum_g) = dice_sums(&p, target, bn, c, vox);
                let den = sum_p + sum_g + DICE_EPS;
                let num = 2.0 * inter + DICE_EPS;
                add(*logits, local, &mut |d| {
                    for bi in 0..bn {
                        let base = bi * c * vox;
                        for v in 0..vox {
                            let gt = target[bi * vox + v];
                            let p1 = p[base + vox + v];
                            let dl_dp1 = -(2.0 * gt * den - num) / (den * den) * g[0];
                            for k in 0..c {
                                let j = base + k * vox + v;
                                let delta = if k == 1 { 1.0 } else { 0.0 };
                                d[j] += dl_dp1 * p1 * (delta - p[j]);
                            }
                        }
                    }
                });
            }
            Op::Conv3d { x, w, b, geom } => {
                let s = self.nodes[i].value.shape();
                let (bn, o) = (s[0], s[1]);
                let (k, m, n_in) = (geom.rows(), geom.cols(), geom.input_len());
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if wants(*b) {
                    add(*b, local, &mut |d| {
                        for bi in 0..bn {
                            for (oc, dd) in d.iter_mut().enumerate() {
                                *dd += g[(bi * o + oc) * m..(bi * o + oc + 1) * m].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let im2col_path = !geom.is_pointwise() && !geom.is_shifted();
                let mut cols = if im2col_path { vec![0.0; k * m] } else { Vec::new() };
                let mut dw = if wants(*w) { vec![0.0; o * k] } else { Vec::new() };
                let mut dx = if wants(*x) { vec![0.0; bn * n_in] } else { Vec::new() };
                let mut dcols = if wants(*x) && im2col_path { vec![0.0; k * m] } else { Vec::new() };
                let mut scratch = Scratch::default();
                for bi in 0..bn {
                    let gy = &g[bi * o * m..(bi + 1) * o * m];
                    if geom.is_shifted() {
                        let xin = &xv[bi * n_in..(bi + 1) * n_in];
                        let dxb = if dx.is_empty() { &mut [][..] } else { &mut dx[bi * n_in..(bi + 1) * n_in] };
                        shifted_backward(geom, xin, wv, o, gy, &mut dw, dxb, &mut scratch);
                        continue;
                    }
                    if wants(*w) {
                        let xin = &xv[bi * n_in..(bi + 1) * n_in];
                        let colref: &[f64] = if geom.is_pointwise() {
                            xin
                        } else {
                            im2col(geom, xin, &mut cols);
                            &cols
                        };
                        gemm(o, m, k, gy, false, colref, true, 1.0, &mut dw);
                    }
                    if wants(*x) {
                        let dxb = &mut dx[bi * n_in..(bi + 1) * n_in];
                        if geom.is_pointwise() {
                            gemm(k, o, m, wv, true, gy, false, 1.0, dxb);
                        } else {
                            gemm(k, o, m, wv, true, gy, false, 0.0, &mut dcols);
                            col2im(geom, &dcols, dxb);
                        }
                    }
                }
                if wants(*w) {
                    add(*w, local, &mut |d| d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                }
                if wants(*x) {
                    add(*x, local, &mut |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
            }
        }
    }
}

fn softmax(x: &[f64], bn: usize, c: usize, vox: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..bn {
        let base = bi * c * vox;
        for v in 0..vox {
            let mx = (0..c).map(|k| x[base + k * vox + v]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (x[base + k * vox + v] - mx).exp();
                out[base + k * vox + v] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * vox + v] /= z;
            }
        }
    }
    out
}

/// `(sum(p g), sum(p), sum(g))` for the channel-1 probabilities.
fn dice_sums(p: &[f64], target: &[f64], bn: usize, c: usize, vox: usize) -> (f64, f64, f64) {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for bi in 0..bn {
        let fg = &p[(bi * c + 1) * vox..(bi * c + 2) * vox];
        let gt = &target[bi * vox..(bi + 1) * vox];
        for (a, b) in fg.iter().zip(gt) {
            inter += a * b;
            sp += a;
            sg += b;
        }
    }
    (inter, sp, sg)
}
