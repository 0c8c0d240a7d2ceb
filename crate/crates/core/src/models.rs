//! Differentiable predictors with hand-written gradients.
//!
//! All architectures share one dense feed-forward layout. A point in
//! parameter space is a flat vector laid out layer by layer: the weight
//! matrix of layer `l` (row-major, `out_l x in_l`) followed by its bias
//! vector, then layer `l + 1`. Hidden layers use ReLU with subgradient 0 at
//! the kink; the output layer is linear and feeds either a squared loss or a
//! max-shifted softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, Example, Label};
use crate::numerics::{check_finite, RealVec, RunningMean};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    LinearRegression,
    SoftmaxRegression,
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surrogate {
    /// `Σ_k (y_k - ŷ_k)²`, no 1/2 factor.
    Squared,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalLoss {
    Squared,
    ZeroOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub surrogate: Surrogate,
    pub eval_loss: EvalLoss,
}

impl ModelSpec {
    pub fn new(
        architecture: Architecture,
        input_dim: usize,
        output_dim: usize,
        surrogate: Surrogate,
        eval_loss: EvalLoss,
    ) -> Result<Self> {
        let spec = Self {
            architecture,
            input_dim,
            output_dim,
            surrogate,
            eval_loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Scalar squared-loss mean estimator: one bias parameter, no features.
    pub fn scalar_mean() -> Self {
        Self {
            architecture: Architecture::LinearRegression,
            input_dim: 0,
            output_dim: 1,
            surrogate: Surrogate::Squared,
            eval_loss: EvalLoss::Squared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::invalid("output_dim must be >= 1"));
        }
        match &self.architecture {
            Architecture::LinearRegression => {
                if self.surrogate != Surrogate::Squared {
                    return Err(Error::invalid("linear-regression uses the squared surrogate"));
                }
            }
            Architecture::SoftmaxRegression => {
                if self.surrogate != Surrogate::CrossEntropy {
                    return Err(Error::invalid("softmax-regression uses the cross-entropy surrogate"));
                }
            }
            Architecture::Mlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::invalid("mlp needs at least one hidden layer of positive width"));
                }
            }
        }
        if self.surrogate == Surrogate::CrossEntropy && self.output_dim < 2 {
            return Err(Error::invalid("cross-entropy needs output_dim >= 2"));
        }
        if self.eval_loss == EvalLoss::ZeroOne && self.surrogate == Surrogate::Squared && self.output_dim < 2 {
            return Err(Error::invalid("zero-one evaluation needs class scores (output_dim >= 2)"));
        }
        Ok(())
    }

    /// `[input, hidden..., output]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        if let Architecture::Mlp { hidden } = &self.architecture {
            dims.extend(hidden);
        }
        dims.push(self.output_dim);
        dims
    }

    pub fn param_dim(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn uses_class_labels(&self) -> bool {
        self.surrogate == Surrogate::CrossEntropy || self.eval_loss == EvalLoss::ZeroOne
    }

    pub fn check_example(&self, z: &Example) -> Result<()> {
        if z.features.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "example has {} features, model expects {}",
                z.features.len(),
                self.input_dim
            )));
        }
        match (&z.label, self.uses_class_labels()) {
            (Label::Class(c), true) if *c < self.output_dim => Ok(()),
            (Label::Class(c), true) => Err(Error::Dimension(format!(
                "class {c} out of range for {} outputs",
                self.output_dim
            ))),
            (Label::Real(y), false) if y.len() == self.output_dim => Ok(()),
            (Label::Real(y), false) => Err(Error::Dimension(format!(
                "target has length {}, model has {} outputs",
                y.len(),
                self.output_dim
            ))),
            (Label::Real(_), true) => Err(Error::invalid("cross-entropy / zero-one need class labels")),
            (Label::Class(_), false) => Err(Error::invalid("squared loss needs real-valued labels")),
        }
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        ds.examples().iter().try_for_each(|z| self.check_example(z))
    }

    pub fn check_point(&self, w: &ParamPoint) -> Result<()> {
        if w.len() != self.param_dim() {
            return Err(Error::Dimension(format!(
                "parameter vector has length {}, layout needs {}",
                w.len(),
                self.param_dim()
            )));
        }
        Ok(())
    }
}

/// A flat parameter vector laid out per [`ModelSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamPoint(pub RealVec);

impl ParamPoint {
    pub fn new(spec: &ModelSpec, weights: Vec<f64>) -> Result<Self> {
        let p = Self(RealVec::new(weights)?);
        spec.check_point(&p)?;
        Ok(p)
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self(RealVec::zeros(spec.param_dim()))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Scratch buffers for forward/backward passes; reuse across examples.
#[derive(Clone, Debug)]
pub struct Workspace {
    dims: Vec<usize>,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    grad: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &ModelSpec) -> Self {
        let dims = spec.layer_dims();
        let widest = *dims.iter().max().unwrap_or(&1);
        Self {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
            grad: vec![0.0; spec.param_dim()],
            dims,
        }
    }

    fn forward(&mut self, w: &[f64], x: &[f64]) {
        let layers = self.dims.len() - 1;
        self.acts[0].copy_from_slice(x);
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (weights, rest) = w[offset..].split_at(n_out * n_in);
            let bias = &rest[..n_out];
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let input = &head[l];
            let output = &mut tail[0];
            for i in 0..n_out {
                let row = &weights[i * n_in..(i + 1) * n_in];
                let z = bias[i] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                // Hidden activations keep the pre-activation sign for the
                // backward pass: relu(z) > 0 iff z > 0.
                output[i] = if l + 1 < layers { z.max(0.0) } else { z };
            }
            offset += n_out * (n_in + 1);
        }
    }

    fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }

    /// Surrogate loss; leaves `dL/d output` in `self.delta`.
    fn surrogate_with_delta(&mut self, surrogate: Surrogate, label: &Label) -> f64 {
        let out_dim = *self.dims.last().unwrap();
        let out = self.acts.last().unwrap();
        match (surrogate, label) {
            (Surrogate::Squared, Label::Real(y)) => {
                let mut loss = 0.0;
                for k in 0..out_dim {
                    let r = out[k] - y[k];
                    loss += r * r;
                    self.delta[k] = 2.0 * r;
                }
                loss
            }
            (Surrogate::CrossEntropy, Label::Class(c)) => {
                let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = out.iter().map(|o| (o - max).exp()).sum();
                let lse = max + sum.ln();
                for (k, (d, o)) in self.delta.iter_mut().zip(out).enumerate() {
                    *d = (o - lse).exp() - if k == *c { 1.0 } else { 0.0 };
                }
                lse - out[*c]
            }
            _ => unreachable!("labels are checked before evaluation"),
        }
    }

    fn backward(&mut self, w: &[f64]) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        let layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.dims[l + 1] * (self.dims[l] + 1);
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let input = &self.acts[l];
            for i in 0..n_out {
                let d = self.delta[i];
                if d == 0.0 {
                    continue;
                }
                let row = &mut self.grad[off + i * n_in..off + (i + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                self.grad[off + n_out * n_in + i] += d;
            }
            if l > 0 {
                let weights = &w[off..off + n_out * n_in];
                for j in 0..n_in {
                    // ReLU derivative with the kink assigned to 0.
                    self.delta_prev[j] = if input[j] > 0.0 {
                        (0..n_out).map(|i| weights[i * n_in + j] * self.delta[i]).sum()
                    } else {
                        0.0
                    };
                }
                std::mem::swap(&mut self.delta, &mut self.delta_prev);
            }
        }
    }

    /// Loss and gradient of one example; the gradient lives in the workspace
    /// until the next call. Inputs are assumed validated.
    pub(crate) fn loss_and_grad(&mut self, spec: &ModelSpec, w: &[f64], z: &Example) -> (f64, &[f64]) {
        self.forward(w, &z.features);
        let loss = self.surrogate_with_delta(spec.surrogate, &z.label);
        self.backward(w);
        (loss, &self.grad)
    }

    pub(crate) fn loss(&mut self, spec: &ModelSpec, w: &[f64], z: &Example) -> f64 {
        self.forward(w, &z.features);
        self.surrogate_with_delta(spec.surrogate, &z.label)
    }

    pub(crate) fn eval_loss(&mut self, spec: &ModelSpec, w: &[f64], z: &Example) -> f64 {
        self.forward(w, &z.features);
        match (spec.eval_loss, &z.label) {
            (EvalLoss::ZeroOne, Label::Class(c)) => {
                let out = self.output();
                // Ties resolve to the lowest index.
                let mut best = 0;
                for k in 1..out.len() {
                    if out[k] > out[best] {
                        best = k;
                    }
                }
                (best != *c) as u8 as f64
            }
            (EvalLoss::Squared, Label::Real(y)) => {
                self.output().iter().zip(y.iter()).map(|(o, t)| (o - t) * (o - t)).sum()
            }
            (EvalLoss::ZeroOne, Label::Real(_)) | (EvalLoss::Squared, Label::Class(_)) => {
                unreachable!("labels are checked before evaluation")
            }
        }
    }

    /// Smallest |pre-activation| over hidden units; `inf` without hidden layers.
    pub(crate) fn min_abs_preactivation(&mut self, w: &[f64], x: &[f64]) -> f64 {
        let layers = self.dims.len() - 1;
        let mut offset = 0;
        let mut min = f64::INFINITY;
        let mut input = x.to_vec();
        for l in 0..layers - 1 {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let weights = &w[offset..offset + n_out * n_in];
            let bias = &w[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            let next: Vec<f64> = (0..n_out)
                .map(|i| bias[i] + (0..n_in).map(|j| weights[i * n_in + j] * input[j]).sum::<f64>())
                .collect();
            min = next.iter().fold(min, |m, z| m.min(z.abs()));
            input = next.into_iter().map(|z| z.max(0.0)).collect();
            offset += n_out * (n_in + 1);
        }
        min
    }
}

fn check_inputs(spec: &ModelSpec, w: &ParamPoint, z: &Example) -> Result<()> {
    spec.check_point(w)?;
    spec.check_example(z)
}

pub fn surrogate_loss(spec: &ModelSpec, w: &ParamPoint, z: &Example) -> Result<f64> {
    check_inputs(spec, w, z)?;
    let loss = Workspace::new(spec).loss(spec, w.as_slice(), z);
    if !loss.is_finite() {
        return Err(Error::NonFinite("surrogate loss".into()));
    }
    Ok(loss)
}

pub fn surrogate_grad(spec: &ModelSpec, w: &ParamPoint, z: &Example) -> Result<RealVec> {
    check_inputs(spec, w, z)?;
    let mut ws = Workspace::new(spec);
    let (_, g) = ws.loss_and_grad(spec, w.as_slice(), z);
    RealVec::new(g.to_vec())
}

/// Mean of per-example surrogate gradients over `batch`.
pub fn batch_grad(spec: &ModelSpec, w: &ParamPoint, batch: &[&Example]) -> Result<RealVec> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_grad needs a non-empty batch"));
    }
    spec.check_point(w)?;
    let mut ws = Workspace::new(spec);
    let mut mean = RunningMean::new(spec.param_dim());
    for z in batch {
        spec.check_example(z)?;
        let (_, g) = ws.loss_and_grad(spec, w.as_slice(), z);
        mean.push(g);
    }
    RealVec::new(mean.mean().to_vec())
}

/// Mean evaluation loss over `ds`.
pub fn eval_risk(spec: &ModelSpec, w: &ParamPoint, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("eval_risk needs a non-empty dataset"));
    }
    spec.check_point(w)?;
    spec.check_dataset(ds)?;
    let mut ws = Workspace::new(spec);
    let total: f64 = ds
        .examples()
        .iter()
        .map(|z| ws.eval_loss(spec, w.as_slice(), z))
        .sum();
    let risk = total / ds.len() as f64;
    check_finite(&[risk], "eval risk")?;
    Ok(risk)
}

/// Mean surrogate loss over `ds`.
pub fn surrogate_risk(spec: &ModelSpec, w: &ParamPoint, ds: &Dataset) -> Result<f64> {
    spec.check_point(w)?;
    spec.check_dataset(ds)?;
    let mut ws = Workspace::new(spec);
    let total: f64 = ds.examples().iter().map(|z| ws.loss(spec, w.as_slice(), z)).sum();
    let risk = total / ds.len() as f64;
    check_finite(&[risk], "surrogate risk")?;
    Ok(risk)
}

/// Distance of `x` to the nearest ReLU kink, measured in pre-activation units.
pub fn min_abs_preactivation(spec: &ModelSpec, w: &ParamPoint, x: &[f64]) -> f64 {
    Workspace::new(spec).min_abs_preactivation(w.as_slice(), x)
}

/// Central finite-difference gradient of the surrogate loss.
pub fn finite_difference_grad(spec: &ModelSpec, w: &ParamPoint, z: &Example, h: f64) -> Result<Vec<f64>> {
    check_inputs(spec, w, z)?;
    let mut ws = Workspace::new(spec);
    let mut probe = w.as_slice().to_vec();
    let mut out = vec![0.0; probe.len()];
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = ws.loss(spec, &probe, z);
        probe[i] = orig - h;
        let down = ws.loss(spec, &probe, z);
        probe[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}
