//! Held-in forecast prior, incoherence `ξ_t`, and trajectory KL accounting.
//!
//! At step `t` the batch `K_t` splits into held-in indices `J ∩ K_t`
//! (`b'_t` of them) and held-out indices (`b^c_t`). The prior forecasts the
//! held-out part of the minibatch gradient with a gradient computable from
//! `S_J` alone, so
//!
//! ```text
//! ξ_t   = (b^c_t / b_t) (∇R̃_{S^c_t}(W_t) - forecast(W_t))
//! μ_P   = W_t - η_t [(b'_t / b_t) ∇R̃_{S_Jt}(W_t) + (b^c_t / b_t) forecast(W_t)]
//! KL_t  = kl_const · β_t η_t ||ξ_t||²
//! ```
//!
//! With the default [`PriorForecast::HeldInMean`] the forecast is
//! `∇R̃_{S_J}`. [`PriorForecast::ReferenceExample`] forecasts with the
//! gradient at a fixed example instead.

use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, Example};
use crate::models::{ModelSpec, ParamPoint, Workspace};
use crate::numerics::{self, CompensatedSum, RealVec, RunningMean, RunningTrace};
use crate::subset_stats::{oracle, SubsetIndex};
use crate::{Error, Result};

/// Default per-step KL constant.
pub const KL_CONST_DEFAULT: f64 = 0.25;

/// How the prior forecasts the held-out gradient.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorForecast {
    /// Mean surrogate gradient over the held-in data `S_J`.
    #[default]
    HeldInMean,
    /// Surrogate gradient at a fixed example independent of `S`.
    ReferenceExample { example: Example },
}

/// Held-in / held-out split of one minibatch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchSplit {
    pub held_in: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl BatchSplit {
    pub fn new(subset: &SubsetIndex, batch: &[usize]) -> Self {
        let (held_in, held_out) = batch.iter().partition(|&&i| subset.contains(i));
        Self { held_in, held_out }
    }

    pub fn b(&self) -> usize {
        self.held_in.len() + self.held_out.len()
    }

    pub fn b_in(&self) -> usize {
        self.held_in.len()
    }

    pub fn b_out(&self) -> usize {
        self.held_out.len()
    }
}

/// `(b_out / b)(held_out_mean - forecast)`.
pub fn xi_from_means(b: usize, b_out: usize, held_out_mean: &[f64], forecast: &[f64]) -> Vec<f64> {
    if b_out == 0 {
        return vec![0.0; forecast.len()];
    }
    let scale = b_out as f64 / b as f64;
    held_out_mean
        .iter()
        .zip(forecast)
        .map(|(g, f)| scale * (g - f))
        .collect()
}

fn mean_of(grads: &[RealVec], idx: &[usize], d: usize) -> Vec<f64> {
    let mut acc = RunningMean::new(d);
    for &i in idx {
        acc.push(&grads[i]);
    }
    acc.mean().to_vec()
}

/// `ξ` for given per-index gradient vectors, with the held-in-mean forecast.
pub fn xi_from_gradients(grads: &[RealVec], subset: &SubsetIndex, batch: &[usize]) -> Result<Vec<f64>> {
    let d = grads.first().map(|g| g.len()).ok_or_else(|| Error::invalid("no gradients"))?;
    if grads.len() != subset.population() {
        return Err(Error::Dimension("one gradient per index is required".into()));
    }
    let split = BatchSplit::new(subset, batch);
    let forecast = mean_of(grads, subset.indices(), d);
    let held_out = mean_of(grads, &split.held_out, d);
    Ok(xi_from_means(split.b(), split.b_out(), &held_out, &forecast))
}

/// `E ||ξ||²` over every size-`m` subset `J` and size-`b` batch `K`.
pub fn enumerate_xi_second_moment(grads: &[RealVec], m: usize, b: usize) -> Result<f64> {
    let n = grads.len();
    let mut total = CompensatedSum::default();
    let mut count = 0usize;
    for j in oracle::combinations(n, m) {
        let subset = SubsetIndex::new(n, j)?;
        for k in oracle::combinations(n, b) {
            total.add(numerics::norm_sq(&xi_from_gradients(grads, &subset, &k)?));
            count += 1;
        }
    }
    Ok(total.value() / count as f64)
}

/// `kl_const · β η ||ξ||²`.
pub fn kl_increment(eta: f64, beta: f64, xi: &[f64], kl_const: f64) -> Result<f64> {
    kl_increment_from_sq(eta, beta, numerics::norm_sq(xi), kl_const)
}

pub fn kl_increment_from_sq(eta: f64, beta: f64, xi_sq: f64, kl_const: f64) -> Result<f64> {
    if !(eta > 0.0 && beta > 0.0 && kl_const > 0.0) || xi_sq < 0.0 {
        return Err(Error::invalid(format!(
            "kl_increment needs eta, beta, kl_const > 0, got eta={eta}, beta={beta}, kl_const={kl_const}"
        )));
    }
    let kl = kl_const * beta * eta * xi_sq;
    if !kl.is_finite() {
        return Err(Error::NonFinite("kl increment".into()));
    }
    Ok(kl)
}

/// Running trajectory KL total.
#[derive(Clone, Debug, PartialEq)]
pub struct KlLedger {
    kl_const: f64,
    increments: Vec<f64>,
    total: CompensatedSum,
}

impl KlLedger {
    pub fn new(kl_const: f64) -> Result<Self> {
        if !(kl_const > 0.0 && kl_const.is_finite()) {
            return Err(Error::invalid(format!("kl_const must be positive, got {kl_const}")));
        }
        Ok(Self {
            kl_const,
            increments: Vec::new(),
            total: CompensatedSum::default(),
        })
    }

    pub fn kl_const(&self) -> f64 {
        self.kl_const
    }

    pub fn accumulate(&mut self, increment: f64) -> Result<()> {
        if !(increment >= 0.0) || !increment.is_finite() {
            return Err(Error::invalid(format!("KL increments must be finite and nonnegative, got {increment}")));
        }
        self.increments.push(increment);
        self.total.add(increment);
        Ok(())
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn total(&self) -> f64 {
        self.total.value()
    }
}

/// Per-step quantities from one pass over the minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTerms {
    pub batch_grad: Vec<f64>,
    pub xi: Vec<f64>,
    pub b: usize,
    pub b_out: usize,
    /// `||∇R̃_{S^c_t}||`, zero when no index is held out.
    pub held_out_norm: f64,
    /// Norm of the forecast gradient; zero when it was not needed.
    pub forecast_norm: f64,
}

/// The data-dependent prior for one `(S, J)`.
#[derive(Clone, Debug)]
pub struct PriorContext<'a> {
    ds: &'a Dataset,
    subset: &'a SubsetIndex,
    forecast: PriorForecast,
}

impl<'a> PriorContext<'a> {
    pub fn new(ds: &'a Dataset, subset: &'a SubsetIndex, forecast: PriorForecast) -> Result<Self> {
        if subset.population() != ds.len() {
            return Err(Error::Dimension(format!(
                "subset is over {} indices but the dataset has {}",
                subset.population(),
                ds.len()
            )));
        }
        Ok(Self { ds, subset, forecast })
    }

    pub fn subset(&self) -> &SubsetIndex {
        self.subset
    }

    pub fn forecast(&self) -> &PriorForecast {
        &self.forecast
    }

    pub fn split(&self, batch: &[usize]) -> BatchSplit {
        BatchSplit::new(self.subset, batch)
    }

    fn forecast_grad(&self, spec: &ModelSpec, ws: &mut Workspace, w: &[f64]) -> Vec<f64> {
        let mut acc = RunningMean::new(spec.param_dim());
        match &self.forecast {
            PriorForecast::HeldInMean => {
                for &i in self.subset.indices() {
                    acc.push(ws.loss_and_grad(spec, w, self.ds.get(i)).1);
                }
            }
            PriorForecast::ReferenceExample { example } => {
                acc.push(ws.loss_and_grad(spec, w, example).1);
            }
        }
        acc.mean().to_vec()
    }

    fn check(&self, spec: &ModelSpec, w: &ParamPoint, batch: &[usize]) -> Result<()> {
        spec.check_point(w)?;
        if batch.is_empty() || batch.iter().any(|&i| i >= self.ds.len()) {
            return Err(Error::invalid("batch must be nonempty with indices below n"));
        }
        if let PriorForecast::ReferenceExample { example } = &self.forecast {
            spec.check_example(example)?;
        }
        Ok(())
    }

    /// Minibatch gradient and `ξ` from one pass over the batch. The forecast
    /// gradient is only evaluated when some batch index is held out.
    pub fn step_terms(&self, spec: &ModelSpec, ws: &mut Workspace, w: &[f64], batch: &[usize]) -> StepTerms {
        let d = spec.param_dim();
        let split = self.split(batch);
        let mut held_in = RunningMean::new(d);
        let mut held_out = RunningMean::new(d);
        for &i in &split.held_in {
            held_in.push(ws.loss_and_grad(spec, w, self.ds.get(i)).1);
        }
        for &i in &split.held_out {
            held_out.push(ws.loss_and_grad(spec, w, self.ds.get(i)).1);
        }
        let (b, b_in, b_out) = (split.b(), split.b_in(), split.b_out());
        let batch_grad: Vec<f64> = (0..d)
            .map(|k| (b_in as f64 * held_in.mean()[k] + b_out as f64 * held_out.mean()[k]) / b as f64)
            .collect();
        if b_out == 0 {
            return StepTerms {
                batch_grad,
                xi: vec![0.0; d],
                b,
                b_out,
                held_out_norm: 0.0,
                forecast_norm: 0.0,
            };
        }
        let forecast = self.forecast_grad(spec, ws, w);
        StepTerms {
            xi: xi_from_means(b, b_out, held_out.mean(), &forecast),
            batch_grad,
            b,
            b_out,
            held_out_norm: numerics::norm_sq(held_out.mean()).sqrt(),
            forecast_norm: numerics::norm_sq(&forecast).sqrt(),
        }
    }

    pub fn xi(&self, spec: &ModelSpec, w: &ParamPoint, batch: &[usize]) -> Result<RealVec> {
        self.check(spec, w, batch)?;
        let terms = self.step_terms(spec, &mut Workspace::new(spec), w.as_slice(), batch);
        RealVec::new(terms.xi)
    }

    /// `μ_P`; satisfies `μ_P - μ_Q = η ξ` with `μ_Q = w - η ∇R̃_{S_t}(w)`.
    pub fn prior_mean(&self, spec: &ModelSpec, w: &ParamPoint, eta: f64, batch: &[usize]) -> Result<RealVec> {
        self.check(spec, w, batch)?;
        if !(eta > 0.0) {
            return Err(Error::invalid("eta must be positive"));
        }
        let mut ws = Workspace::new(spec);
        let d = spec.param_dim();
        let split = self.split(batch);
        let mut held_in = RunningMean::new(d);
        for &i in &split.held_in {
            held_in.push(ws.loss_and_grad(spec, w.as_slice(), self.ds.get(i)).1);
        }
        let forecast = if split.b_out() > 0 {
            self.forecast_grad(spec, &mut ws, w.as_slice())
        } else {
            vec![0.0; d]
        };
        let (b, b_in, b_out) = (split.b() as f64, split.b_in() as f64, split.b_out() as f64);
        let mean = (0..d)
            .map(|k| w.as_slice()[k] - eta * ((b_in / b) * held_in.mean()[k] + (b_out / b) * forecast[k]))
            .collect();
        RealVec::new(mean)
    }
}

/// `tr Σ̂(w) = (1/n) Σ ||g_i - ḡ||²` and `max_i ||g_i||` over the full dataset.
pub fn trace_sigma_hat(spec: &ModelSpec, ws: &mut Workspace, w: &[f64], ds: &Dataset) -> (f64, f64) {
    let mut acc = RunningTrace::new(spec.param_dim());
    let mut max_norm_sq: f64 = 0.0;
    for z in ds.examples() {
        let g = ws.loss_and_grad(spec, w, z).1;
        max_norm_sq = max_norm_sq.max(numerics::norm_sq(g));
        acc.push(g);
    }
    (acc.population_trace(), max_norm_sq.sqrt())
}
