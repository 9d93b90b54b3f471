//! Dense f64 arrays and the hand-differentiated layer set used by the network.
//!
//! Feature maps are `(channels, height, width)` row-major; there is no batch
//! dimension (training uses one frame per step). Each layer exposes a forward
//! function and an explicit backward function; there is no tape.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, expected: expected.to_vec(), got: got.to_vec() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(TensorError::Invalid { op: "chw", msg: format!("expected rank 3, got shape {s:?}") }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        for (a, b) in self.grad_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Geometry of a 2D convolution. `transposed` selects the fractionally
/// strided (up-)convolution whose forward pass is the adjoint of the plain
/// convolution with the same parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            dilation: 1,
            padding: 0,
            transposed: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    /// `(out, in, kh, kw)` for convolutions, `(in, out, kh, kw)` when transposed.
    pub fn weight_shape(&self) -> [usize; 4] {
        let (kh, kw) = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, kh, kw]
        } else {
            [self.out_channels, self.in_channels, kh, kw]
        }
    }

    fn validate(&self) -> Result<(), TensorError> {
        let (kh, kw) = self.kernel;
        if [self.in_channels, self.out_channels, kh, kw, self.stride, self.dilation].contains(&0) {
            return Err(TensorError::Invalid { op: "conv2d", msg: format!("all counts must be >= 1: {self:?}") });
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        self.validate()?;
        let (kh, kw) = self.kernel;
        let span = |k: usize| self.dilation * (k - 1) + 1;
        if self.transposed {
            let out = |n: usize, k: usize| ((n - 1) * self.stride + span(k)).checked_sub(2 * self.padding);
            match (out(h, kh), out(w, kw)) {
                (Some(oh), Some(ow)) if oh > 0 && ow > 0 && h > 0 && w > 0 => Ok((oh, ow)),
                _ => Err(TensorError::Invalid { op: "conv2d", msg: format!("input {h}x{w} too small for {self:?}") }),
            }
        } else {
            let out = |n: usize, k: usize| (n + 2 * self.padding).checked_sub(span(k)).map(|v| v / self.stride + 1);
            match (out(h, kh), out(w, kw)) {
                (Some(oh), Some(ow)) => Ok((oh, ow)),
                _ => Err(TensorError::Invalid { op: "conv2d", msg: format!("input {h}x{w} too small for {self:?}") }),
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable with these
    // dimensions and strides; c does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry shared by im2col / col2im.
struct Patch {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
}

impl Patch {
    fn conv(spec: &ConvSpec, channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Patch {
            channels,
            h,
            w,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            oh,
            ow,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Input column index for output column `o` and kernel tap `k`, if in range.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.oh * self.ow;
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        match self.src(oy, ki, self.h) {
                            None => dst.iter_mut().for_each(|v| *v = 0.0),
                            Some(iy) => {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = self.src(ox, kj, self.w).map_or(0.0, |ix| plane[iy * self.w + ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let p = self.oh * self.ow;
        for c in 0..self.channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ki, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                plane[iy * self.w + ix] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<(usize, usize, usize), TensorError> {
    let (c, h, wd) = x.chw()?;
    if c != spec.in_channels {
        return Err(mismatch("conv2d input", &[spec.in_channels, h, wd], x.shape()));
    }
    if w.shape() != spec.weight_shape() {
        return Err(mismatch("conv2d weight", &spec.weight_shape(), w.shape()));
    }
    if b.shape() != [spec.out_channels] {
        return Err(mismatch("conv2d bias", &[spec.out_channels], b.shape()));
    }
    Ok((c, h, wd))
}

/// 2D cross-correlation with zero padding (or its transpose).
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<Tensor, TensorError> {
    let (cin, h, wd) = check_conv_shapes(x, w, b, spec)?;
    let (oh, ow) = spec.output_size(h, wd)?;
    let cout = spec.out_channels;
    let mut out = vec![0.0; cout * oh * ow];
    if spec.transposed {
        let patch = Patch::conv(spec, cout, oh, ow, h, wd);
        let mut cols = vec![0.0; patch.rows() * h * wd];
        gemm(patch.rows(), cin, h * wd, w.data(), true, x.data(), false, 0.0, &mut cols);
        patch.col2im(&cols, &mut out);
    } else if spec.is_pointwise() {
        gemm(cout, cin, h * wd, w.data(), false, x.data(), false, 0.0, &mut out);
    } else {
        let patch = Patch::conv(spec, cin, h, wd, oh, ow);
        let mut cols = vec![0.0; patch.rows() * oh * ow];
        patch.im2col(x.data(), &mut cols);
        gemm(cout, patch.rows(), oh * ow, w.data(), false, &cols, false, 0.0, &mut out);
    }
    for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
        let bias = b.data()[co];
        plane.iter_mut().for_each(|v| *v += bias);
    }
    Tensor::from_vec(&[cout, oh, ow], out)
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, spec: &ConvSpec, dy: &Tensor) -> Result<ConvGrads, TensorError> {
    let (dx, dw, db) = conv_backward_impl(x, w, spec, dy, true)?;
    Ok(ConvGrads { dx: dx.expect("requested"), dw, db })
}

/// Weight and bias gradients only, for layers whose input needs no gradient.
pub fn conv2d_backward_params(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    let (_, dw, db) = conv_backward_impl(x, w, spec, dy, false)?;
    Ok((dw, db))
}

fn conv_backward_impl(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
    want_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor), TensorError> {
    let (cin, h, wd) = x.chw()?;
    let (oh, ow) = spec.output_size(h, wd)?;
    let cout = spec.out_channels;
    if dy.shape() != [cout, oh, ow] {
        return Err(mismatch("conv2d_backward", &[cout, oh, ow], dy.shape()));
    }
    let db: Vec<f64> = dy.data().chunks(oh * ow).map(|p| p.iter().sum()).collect();
    let mut dx = vec![0.0; if want_dx { cin * h * wd } else { 0 }];
    let mut dw = vec![0.0; w.len()];
    if spec.transposed {
        let patch = Patch::conv(spec, cout, oh, ow, h, wd);
        let mut dcols = vec![0.0; patch.rows() * h * wd];
        patch.im2col(dy.data(), &mut dcols);
        if want_dx {
            gemm(cin, patch.rows(), h * wd, w.data(), false, &dcols, false, 0.0, &mut dx);
        }
        gemm(cin, h * wd, patch.rows(), x.data(), false, &dcols, true, 0.0, &mut dw);
    } else if spec.is_pointwise() {
        if want_dx {
            gemm(cin, cout, h * wd, w.data(), true, dy.data(), false, 0.0, &mut dx);
        }
        gemm(cout, h * wd, cin, dy.data(), false, x.data(), true, 0.0, &mut dw);
    } else {
        let patch = Patch::conv(spec, cin, h, wd, oh, ow);
        let mut cols = vec![0.0; patch.rows() * oh * ow];
        patch.im2col(x.data(), &mut cols);
        gemm(cout, oh * ow, patch.rows(), dy.data(), false, &cols, true, 0.0, &mut dw);
        if want_dx {
            let mut dcols = cols;
            gemm(patch.rows(), cout, oh * ow, w.data(), true, dy.data(), false, 0.0, &mut dcols);
            patch.col2im(&dcols, &mut dx);
        }
    }
    let dx = if want_dx { Some(Tensor::from_vec(x.shape(), dx)?) } else { None };
    Ok((dx, Tensor::from_vec(w.shape(), dw)?, Tensor::from_vec(&[cout], db)?))
}

pub fn elu(x: &Tensor, alpha: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() })
}

/// ELU backward expressed through the forward output `y`.
pub fn elu_backward(y: &Tensor, dy: &Tensor, alpha: f64) -> Tensor {
    let data = y.data().iter().zip(dy.data()).map(|(&y, &g)| if y > 0.0 { g } else { g * (y + alpha) }).collect();
    Tensor { shape: y.shape().to_vec(), data, grad: None }
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(TensorError::Invalid { op: "log_softmax", msg: format!("bad class axis {axis} for {shape:?}") });
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

/// Numerically stable log-softmax along `axis`.
pub fn log_softmax(logits: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    let (outer, classes, inner) = axis_layout(logits.shape(), axis)?;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * classes + c) * inner + i;
            let max = (0..classes).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..classes).map(|c| (x[at(c)] - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..classes {
                out[at(c)] = x[at(c)] - lse;
            }
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Backward of [`log_softmax`] given its output.
pub fn log_softmax_backward(out: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    let (outer, classes, inner) = axis_layout(out.shape(), axis)?;
    let (y, g) = (out.data(), dy.data());
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * classes + c) * inner + i;
            let total: f64 = (0..classes).map(|c| g[at(c)]).sum();
            for c in 0..classes {
                dx[at(c)] = g[at(c)] - y[at(c)].exp() * total;
            }
        }
    }
    Tensor::from_vec(out.shape(), dx)
}

/// Elementwise `scale * x + shift`.
pub fn affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor, TensorError> {
    if scale.shape() != x.shape() {
        return Err(mismatch("affine scale", x.shape(), scale.shape()));
    }
    if shift.shape() != x.shape() {
        return Err(mismatch("affine shift", x.shape(), shift.shape()));
    }
    let data = x.data().iter().zip(scale.data()).zip(shift.data()).map(|((x, s), b)| s * x + b).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Concatenates rank-3 tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = parts.first().ok_or(TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return Err(mismatch("concat", &[c, h, w], p.shape()));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Splits a channel-axis gradient back into the concatenated parts' sizes.
pub fn split_channels(t: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>, TensorError> {
    let (c, h, w) = t.chw()?;
    if channels.iter().sum::<usize>() != c {
        return Err(mismatch("split", &[channels.iter().sum(), h, w], t.shape()));
    }
    let mut start = 0;
    channels
        .iter()
        .map(|&n| {
            let part = t.data()[start * h * w..(start + n) * h * w].to_vec();
            start += n;
            Tensor::from_vec(&[n, h, w], part)
        })
        .collect()
}

/// One-hot expansion of an `h x w` label map into `(classes, h, w)`.
pub fn one_hot(labels: &[usize], classes: usize, h: usize, w: usize) -> Result<Tensor, TensorError> {
    if labels.len() != h * w {
        return Err(mismatch("one_hot", &[h, w], &[labels.len()]));
    }
    let mut t = Tensor::zeros(&[classes, h, w]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(TensorError::Invalid { op: "one_hot", msg: format!("label {l} >= class count {classes}") });
        }
        t.data[l * h * w + i] = 1.0;
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig, t: u64) {
    assert!(t >= 1, "Adam steps are 1-based");
    assert_eq!(params.len(), grads.len());
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error used by the gradient checker.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn grad_check(f: impl FnMut(&Tensor) -> f64, analytic: &Tensor, x: &Tensor, h: f64) -> GradCheck {
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, analytic, x, h, &all)
}

/// [`grad_check`] restricted to the given coordinates.
pub fn grad_check_at(
    mut f: impl FnMut(&Tensor) -> f64,
    analytic: &Tensor,
    x: &Tensor,
    h: f64,
    indices: &[usize],
) -> GradCheck {
    let mut probe = x.clone();
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: 0, checked: 0 };
    for &i in indices {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic.data[i], numeric);
        worst.checked += 1;
        if err > worst.max_rel_error || err.is_nan() {
            worst.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            worst.worst_index = i;
        }
    }
    worst
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HSCN";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Writes named tensors: magic, version byte, then per tensor
/// `u32 name length, name bytes, u32 rank, u64 dims, f64 values`, all little-endian.
pub fn write_checkpoint<'a>(
    mut out: impl Write,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), TensorError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    for (name, t) in params {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 8);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let bad = |m: &str| TensorError::Checkpoint(m.to_string());
    if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing HSCN magic"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {}", bytes[4])));
    }
    let mut pos = 5;
    let mut take = |n: usize| -> Result<&[u8], TensorError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated record"))?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint<'a>(
    path: impl AsRef<Path>,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), TensorError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>, TensorError> {
    read_checkpoint(std::fs::File::open(path)?)
}

/// Direct nested-loop references, kept independent of the im2col path.
#[cfg(test)]
pub(crate) mod reference {
    use super::*;

    pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
        let (cin, h, wd) = x.chw().unwrap();
        let (kh, kw) = spec.kernel;
        let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
        if spec.transposed {
            let (oh, ow) = spec.output_size(h, wd).unwrap();
            let mut out = Tensor::zeros(&[spec.out_channels, oh, ow]);
            for co in 0..spec.out_channels {
                for i in 0..oh * ow {
                    out.data[co * oh * ow + i] = b.data()[co];
                }
            }
            // scatter: every input pixel spreads through the kernel
            for ci in 0..cin {
                for iy in 0..h as isize {
                    for ix in 0..wd as isize {
                        for co in 0..spec.out_channels {
                            for ky in 0..kh as isize {
                                for kx in 0..kw as isize {
                                    let oy = iy * s + ky * d - p;
                                    let ox = ix * s + kx * d - p;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    let wv = w.data()[((ci * spec.out_channels + co) * kh + ky as usize) * kw + kx as usize];
                                    out.data[(co * oh + oy as usize) * ow + ox as usize] +=
                                        wv * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            return out;
        }
        let (oh, ow) = spec.output_size(h, wd).unwrap();
        let mut out = Tensor::zeros(&[spec.out_channels, oh, ow]);
        for co in 0..spec.out_channels {
            for oy in 0..oh as isize {
                for ox in 0..ow as isize {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh as isize {
                            for kx in 0..kw as isize {
                                let iy = oy * s + ky * d - p;
                                let ix = ox * s + kx * d - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * kh + ky as usize) * kw + kx as usize]
                                    * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out.data[(co * oh + oy as usize) * ow + ox as usize] = acc;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn random_spec(rng: &mut ChaCha8Rng) -> ConvSpec {
        let k = rng.gen_range(1..=3);
        let mut spec = ConvSpec::new(rng.gen_range(1..=3), rng.gen_range(1..=3), k)
            .stride(rng.gen_range(1..=2))
            .dilation(rng.gen_range(1..=2))
            .padding(rng.gen_range(0..=2));
        spec.kernel.1 = rng.gen_range(1..=3);
        if rng.gen_bool(0.4) {
            spec = spec.transposed();
        }
        spec
    }

    #[test]
    fn pointwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[1, 5, 4]);
        let spec = ConvSpec::new(1, 1, 1);
        let y = conv2d(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_filter_interior() {
        let x = Tensor::full(&[1, 6, 6], 2.5);
        let spec = ConvSpec::new(1, 1, 3);
        let y = conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 22.5));
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let spec = ConvSpec::new(2, 3, 3);
        let err = conv2d(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3]), &spec)
            .unwrap_err();
        assert!(err.to_string().contains("[1, 4, 4]"), "{err}");
        assert!(conv2d(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[3, 2, 3, 1]), &Tensor::zeros(&[3]), &spec).is_err());
        assert!(conv2d(&Tensor::zeros(&[2, 2, 2]), &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3]), &spec).is_err());
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let spec = random_spec(&mut rng);
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            if spec.output_size(h, w).is_err() {
                continue;
            }
            let x = rand_tensor(&mut rng, &[spec.in_channels, h, w]);
            let wt = rand_tensor(&mut rng, &spec.weight_shape());
            let b = rand_tensor(&mut rng, &[spec.out_channels]);
            let fast = conv2d(&x, &wt, &b, &spec).unwrap();
            let slow = reference::conv2d(&x, &wt, &b, &spec);
            assert_eq!(fast.shape(), slow.shape(), "{spec:?}");
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn transposed_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut spec = random_spec(&mut rng);
            spec.transposed = false;
            let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
            let Ok((oh, ow)) = spec.output_size(h, w) else { continue };
            let wt = rand_tensor(&mut rng, &spec.weight_shape());
            let zero = Tensor::zeros(&[spec.out_channels]);
            let x = rand_tensor(&mut rng, &[spec.in_channels, h, w]);
            let y = rand_tensor(&mut rng, &[spec.out_channels, oh, ow]);
            // transposed layer mapping out_channels -> in_channels with the same weights
            let mut t = spec;
            t.transposed = true;
            std::mem::swap(&mut t.in_channels, &mut t.out_channels);
            let Ok(size) = t.output_size(oh, ow) else { continue };
            if size != (h, w) {
                continue;
            }
            let lhs = conv2d(&x, &wt, &zero, &spec).unwrap().dot(&y);
            let rhs = x.dot(&conv2d(&y, &wt, &Tensor::zeros(&[spec.in_channels]), &t).unwrap());
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new(3, 4, 3).stride(2).padding(1);
        let wt = rand_tensor(&mut rng, &spec.weight_shape());
        let zero = Tensor::zeros(&[4]);
        let x1 = rand_tensor(&mut rng, &[3, 9, 8]);
        let x2 = rand_tensor(&mut rng, &[3, 9, 8]);
        let alpha = 1.7;
        let mix = Tensor::from_fn(&[3, 9, 8], |i| alpha * x1.data()[i] + x2.data()[i]);
        let lhs = conv2d(&mix, &wt, &zero, &spec).unwrap();
        let (a, b) = (conv2d(&x1, &wt, &zero, &spec).unwrap(), conv2d(&x2, &wt, &zero, &spec).unwrap());
        let rhs = Tensor::from_fn(lhs.shape(), |i| alpha * a.data()[i] + b.data()[i]);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let spec = random_spec(&mut rng);
            let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let Ok((oh, ow)) = spec.output_size(h, w) else { continue };
            let x = rand_tensor(&mut rng, &[spec.in_channels, h, w]);
            let wt = rand_tensor(&mut rng, &spec.weight_shape());
            let b = rand_tensor(&mut rng, &[spec.out_channels]);
            let probe = rand_tensor(&mut rng, &[spec.out_channels, oh, ow]);
            let g = conv2d_backward(&x, &wt, &spec, &probe).unwrap();
            let cx = grad_check(|x| conv2d(x, &wt, &b, &spec).unwrap().dot(&probe), &g.dx, &x, 1e-5);
            let cw = grad_check(|w| conv2d(&x, w, &b, &spec).unwrap().dot(&probe), &g.dw, &wt, 1e-5);
            let cb = grad_check(|b| conv2d(&x, &wt, b, &spec).unwrap().dot(&probe), &g.db, &b, 1e-5);
            for c in [cx, cw, cb] {
                assert!(c.max_rel_error < 1e-6, "{spec:?} {c:?}");
            }
        }
    }

    #[test]
    fn elu_values() {
        let x = Tensor::from_vec(&[3], vec![0.0, 1.0, -20.0]).unwrap();
        let y = elu(&x, 1.0);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 1.0);
        assert!((y.data()[2] + 1.0).abs() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 3, 3]);
        let probe = rand_tensor(&mut rng, &[2, 3, 3]);
        let g = elu_backward(&elu(&x, 1.0), &probe, 1.0);
        assert!(grad_check(|x| elu(x, 1.0).dot(&probe), &g, &x, 1e-5).max_rel_error < 1e-6);
    }

    #[test]
    fn log_softmax_values() {
        let y = log_softmax(&Tensor::from_vec(&[2, 1, 1], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5f64.ln()).abs() < 1e-15));
        let y = log_softmax(&Tensor::from_vec(&[2, 1, 1], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(y.data()[0].abs() < 1e-12);
        assert!((y.data()[1] + 1000.0).abs() < 1e-9);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_normalizes_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_fn(&[5, 3, 4], |_| rng.gen_range(-30.0..30.0));
        let y = log_softmax(&x, 0).unwrap();
        for p in 0..12 {
            let s: f64 = (0..5).map(|c| y.data()[c * 12 + p].exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let x = rand_tensor(&mut rng, &[4, 2, 3]);
        let probe = rand_tensor(&mut rng, &[4, 2, 3]);
        let g = log_softmax_backward(&log_softmax(&x, 0).unwrap(), &probe, 0).unwrap();
        assert!(grad_check(|x| log_softmax(x, 0).unwrap().dot(&probe), &g, &x, 1e-5).max_rel_error < 1e-6);
        assert!(log_softmax(&x, 3).is_err());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = [0.5];
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, 1e-3, &AdamConfig::default(), 1);
            assert!((p[0] - 0.5 + 1e-3 * g.signum()).abs() < 1e-3 * 1e-4);
        }
        let mut p = [0.25, -1.0];
        let mut st = AdamState::new(2);
        for t in 1..=100 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, 1e-2, &AdamConfig::default(), t);
        }
        assert_eq!(p, [0.25, -1.0]);
    }

    #[test]
    fn adam_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let (lr, b1, b2, eps) = (3e-3, 0.9f64, 0.999f64, 1e-8);
        let mut expected = p.clone();
        for i in 0..5 {
            let (mut m, mut v) = (0.0, 0.0);
            for (t, g) in grads.iter().enumerate() {
                let t = (t + 1) as i32;
                m = b1 * m + (1.0 - b1) * g[i];
                v = b2 * v + (1.0 - b2) * g[i] * g[i];
                let mh = m / (1.0 - b1.powi(t));
                let vh = v / (1.0 - b2.powi(t));
                expected[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        let mut st = AdamState::new(5);
        for (t, g) in grads.iter().enumerate() {
            adam_step(&mut p, g, &mut st, lr, &AdamConfig::default(), t as u64 + 1);
        }
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_harness() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let f = |x: &Tensor| x.data().iter().map(|v| v * v).sum::<f64>();
        let good = x.map(|v| 2.0 * v);
        assert!(grad_check(f, &good, &x, 1e-5).max_rel_error < 1e-8);
        let mut bad = good.clone();
        bad.data_mut()[5] *= 1.5;
        assert!(grad_check(f, &bad, &x, 1e-5).max_rel_error > 1e-2);
    }

    #[test]
    fn one_hot_and_concat() {
        let t = one_hot(&[0, 2, 1, 2], 3, 2, 2).unwrap();
        assert_eq!(t.data(), &[1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 1.]);
        assert!(one_hot(&[3], 3, 1, 1).is_err());
        let a = Tensor::full(&[1, 2, 2], 1.0);
        let b = Tensor::full(&[2, 2, 2], 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        let parts = split_channels(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = Tensor::from_vec(&[3], vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("a", &a), ("layer.bias", &b)]).unwrap();
        assert_eq!(&buf[..5], b"HSCN\x01");
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].0, "layer.bias");
        for ((_, x), y) in back.iter().zip([&a, &b]) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
            assert_eq!(x.shape(), y.shape());
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, back.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(again, buf);
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(read_checkpoint(&b"NOPE\x01"[..]).is_err());
    }
}
