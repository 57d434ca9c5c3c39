//! Minimal feed-forward network engine.
//!
//! Networks are fully connected with Swish hidden activations and a linear
//! output layer. Parameters live in a single flat vector whose layout is
//! `layer 0 weights, layer 0 biases, layer 1 weights, ...`; weight blocks are
//! stored row-major with shape `(fan_in, fan_out)` so a batch `X` maps to
//! `X · W + b`. Gradients share the exact same layout, which is what the
//! ensemble clipping routines compute their norms over.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale of the fan-in uniform initializer: weights are drawn from
/// `U(-INIT_GAIN * sqrt(3 / fan_in), INIT_GAIN * sqrt(3 / fan_in))`, biases start at zero.
pub const INIT_GAIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Swish,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Swish => x * sigmoid(x),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Swish => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub weight_decay: f64,
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_layers,
            activation: Activation::Swish,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::Config(format!("network widths must be positive: {self:?}")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Number of affine layers (hidden layers + output layer).
    pub fn num_layers(&self) -> usize {
        self.hidden_layers.len() + 1
    }

    pub fn layout(&self) -> Layout {
        let mut dims = Vec::with_capacity(self.num_layers() + 1);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.output_dim);
        let mut offset = 0;
        let segments = dims
            .windows(2)
            .enumerate()
            .map(|(layer, w)| {
                let seg = LayerSegment {
                    layer,
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += seg.len();
                seg
            })
            .collect();
        Layout { segments }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total_len()
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.layout())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = self.zeros();
        for seg in p.layout.segments.clone() {
            let bound = INIT_GAIN * (3.0 / seg.fan_in as f64).sqrt();
            for w in &mut p.values[seg.weight_range()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout != self.layout() {
            return Err(Error::Layout(format!(
                "parameter layout does not match architecture {:?}",
                self
            )));
        }
        Ok(())
    }

    /// Single-input forward pass.
    pub fn forward(&self, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if input.len() != self.input_dim {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim,
                found: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite network input"));
        }
        let x = ArrayView2::from_shape((1, self.input_dim), input).expect("shape checked");
        Ok(self.forward_batch(params.as_slice(), x).into_raw_vec_and_offset().0)
    }

    /// Batched forward pass without recording intermediates.
    pub fn forward_batch(&self, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let layout = self.layout();
        let last = layout.segments.len() - 1;
        let mut a = x.to_owned();
        for (l, seg) in layout.segments.iter().enumerate() {
            let mut z = affine(seg, params, a.view());
            if l < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            a = z;
        }
        a
    }

    /// Batched forward pass that keeps what [`MlpArch::backward_batch`] needs.
    pub fn forward_tape(&self, params: &[f64], x: ArrayView2<f64>) -> Tape {
        let layout = self.layout();
        let last = layout.segments.len() - 1;
        let mut inputs = Vec::with_capacity(layout.segments.len());
        let mut preacts = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (l, seg) in layout.segments.iter().enumerate() {
            let z = affine(seg, params, a.view());
            inputs.push(a);
            if l < last {
                let act = z.mapv(|v| self.activation.apply(v));
                preacts.push(z);
                a = act;
            } else {
                a = z;
            }
        }
        Tape {
            inputs,
            preacts,
            output: a,
        }
    }

    /// Reverse pass. Accumulates `d loss / d params` into `grad` (which must
    /// have the parameter layout) given `d_out = d loss / d output`, and returns
    /// `d loss / d input` when requested.
    pub fn backward_batch(
        &self,
        params: &[f64],
        tape: &Tape,
        d_out: Array2<f64>,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let layout = self.layout();
        let mut delta = d_out;
        for (l, seg) in layout.segments.iter().enumerate().rev() {
            let a_in = &tape.inputs[l];
            {
                let (gw, gb) = grad[seg.range()].split_at_mut(seg.fan_in * seg.fan_out);
                let mut gw = ArrayViewMut2::from_shape((seg.fan_in, seg.fan_out), gw)
                    .expect("segment shape");
                general_mat_mul(1.0, &a_in.t(), &delta, 1.0, &mut gw);
                let mut gb = ArrayViewMut1::from(gb);
                gb += &delta.sum_axis(Axis(0));
            }
            if l > 0 || want_input_grad {
                let w = weight_view(seg, params);
                let mut d_a = delta.dot(&w.t());
                if l > 0 {
                    let z = &tape.preacts[l - 1];
                    ndarray::Zip::from(&mut d_a)
                        .and(z)
                        .for_each(|d, &zv| *d *= self.activation.derivative(zv));
                    delta = d_a;
                } else {
                    return Some(d_a);
                }
            }
        }
        None
    }

    /// Batch-mean diagonal Gaussian negative log-likelihood plus
    /// `weight_decay * ½‖weights‖²`, and its exact gradient.
    ///
    /// The network output is `[mean (d), raw log-variance (d)]` with
    /// `d = targets.ncols()`; when `bounds` is given the raw log-variance is
    /// passed through its soft clamp first.
    pub fn gaussian_nll_backward(
        &self,
        params: &ParamVector,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        bounds: Option<LogVarBounds>,
    ) -> Result<(f64, GradVector)> {
        self.check_params(params)?;
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::domain("empty batch"));
        }
        if n != targets.nrows() {
            return Err(Error::Dimension {
                what: "targets rows",
                expected: n,
                found: targets.nrows(),
            });
        }
        let d = targets.ncols();
        if self.output_dim != 2 * d {
            return Err(Error::Dimension {
                what: "gaussian head width",
                expected: 2 * d,
                found: self.output_dim,
            });
        }
        let tape = self.forward_tape(params.as_slice(), inputs);
        let out = &tape.output;
        let inv_n = 1.0 / n as f64;
        let mut d_out = Array2::<f64>::zeros((n, 2 * d));
        let mut loss = 0.0;
        for r in 0..n {
            for j in 0..d {
                let mean = out[[r, j]];
                let raw = out[[r, d + j]];
                let (lv, dlv) = match bounds {
                    Some(b) => (b.apply(raw), b.derivative(raw)),
                    None => (raw, 1.0),
                };
                let resid = targets[[r, j]] - mean;
                let inv_var = (-lv).exp();
                loss += 0.5 * (resid * resid * inv_var + lv);
                d_out[[r, j]] = -resid * inv_var * inv_n;
                d_out[[r, d + j]] = 0.5 * (1.0 - resid * resid * inv_var) * dlv * inv_n;
            }
        }
        loss *= inv_n;
        let mut grad = ParamVector::zeros(params.layout.clone());
        self.backward_batch(params.as_slice(), &tape, d_out, grad.as_mut_slice(), false);
        if self.weight_decay > 0.0 {
            for seg in &params.layout.segments {
                let w = &params.values[seg.weight_range()];
                loss += 0.5 * self.weight_decay * w.iter().map(|v| v * v).sum::<f64>();
                for (g, &wv) in grad.values[seg.weight_range()].iter_mut().zip(w) {
                    *g += self.weight_decay * wv;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        Ok((loss, grad))
    }

    /// Convenience form of [`MlpArch::gaussian_nll_backward`] over a list of
    /// `(input, target)` pairs.
    pub fn backward(
        &self,
        params: &ParamVector,
        batch: &[(Vec<f64>, Vec<f64>)],
        bounds: Option<LogVarBounds>,
    ) -> Result<(f64, GradVector)> {
        let (inputs, targets) = stack_pairs(batch, self.input_dim)?;
        self.gaussian_nll_backward(params, inputs.view(), targets.view(), bounds)
    }
}

fn stack_pairs(batch: &[(Vec<f64>, Vec<f64>)], input_dim: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let tdim = batch[0].1.len();
    let mut x = Array2::zeros((batch.len(), input_dim));
    let mut y = Array2::zeros((batch.len(), tdim));
    for (r, (i, t)) in batch.iter().enumerate() {
        if i.len() != input_dim {
            return Err(Error::Dimension {
                what: "batch input",
                expected: input_dim,
                found: i.len(),
            });
        }
        if t.len() != tdim {
            return Err(Error::Dimension {
                what: "batch target",
                expected: tdim,
                found: t.len(),
            });
        }
        x.row_mut(r).assign(&ArrayView1::from(i.as_slice()));
        y.row_mut(r).assign(&ArrayView1::from(t.as_slice()));
    }
    Ok((x, y))
}

fn weight_view<'a>(seg: &LayerSegment, params: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((seg.fan_in, seg.fan_out), &params[seg.weight_range()])
        .expect("segment shape")
}

fn affine(seg: &LayerSegment, params: &[f64], a: ArrayView2<f64>) -> Array2<f64> {
    let w = weight_view(seg, params);
    let b = ArrayView1::from(&params[seg.bias_range()]);
    let mut z = a.dot(&w);
    z += &b;
    z
}

/// Intermediates of a batched forward pass.
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Smooth clamp of a raw log-variance into `(lo, hi)`:
/// `v = hi - softplus(hi - raw); v = lo + softplus(v - lo)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogVarBounds {
    pub lo: f64,
    pub hi: f64,
}

impl LogVarBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("log-variance bounds need lo < hi, got ({lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn apply(&self, raw: f64) -> f64 {
        let upper = self.hi - softplus(self.hi - raw);
        self.lo + softplus(upper - self.lo)
    }

    #[inline]
    pub fn derivative(&self, raw: f64) -> f64 {
        let upper = self.hi - softplus(self.hi - raw);
        sigmoid(self.hi - raw) * sigmoid(upper - self.lo)
    }
}

impl Default for LogVarBounds {
    fn default() -> Self {
        Self { lo: -10.0, hi: 0.5 }
    }
}

/// Diagonal Gaussian NLL with the constant term dropped:
/// `½ Σ_j [(target_j − mean_j)² · exp(−log_var_j) + log_var_j]`.
pub fn gaussian_nll(mean: &[f64], log_var: &[f64], target: &[f64]) -> f64 {
    debug_assert!(mean.len() == log_var.len() && mean.len() == target.len());
    mean.iter()
        .zip(log_var)
        .zip(target)
        .map(|((m, lv), t)| 0.5 * ((t - m) * (t - m) * (-lv).exp() + lv))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSegment {
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSegment {
    pub fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.offset + self.fan_in * self.fan_out..self.offset + self.len()
    }
}

/// Canonical ordering of layer segments inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<LayerSegment>,
}

impl Layout {
    pub fn segments(&self) -> &[LayerSegment] {
        &self.segments
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map(|s| s.offset + s.len()).unwrap_or(0)
    }
}

/// Flat network parameters together with their layer layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

/// Gradients and parameter displacements use the parameter layout verbatim.
pub type GradVector = ParamVector;

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn from_flat(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Dimension {
                what: "flat parameter vector",
                expected: layout.total_len(),
                found: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn segment(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.segments[layer].range()]
    }

    pub fn segment_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout.segments[layer].range();
        &mut self.values[r]
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn segment_norms(&self) -> Vec<f64> {
        (0..self.layout.num_layers())
            .map(|l| l2_norm(self.segment(l)))
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.layout, other.layout);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    /// `self - other`.
    pub fn difference(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.layout, other.layout);
        ParamVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `params − lr · grad`.
pub fn sgd_step(params: &ParamVector, grad: &GradVector, lr: f64) -> Result<ParamVector> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::domain(format!("learning rate must be positive, got {lr}")));
    }
    if params.layout != grad.layout {
        return Err(Error::Layout("gradient layout differs from parameters".into()));
    }
    let mut out = params.clone();
    out.axpy(-lr, grad);
    Ok(out)
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr * bc2.sqrt() / bc1;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}
