//! Nested Monte-Carlo bound estimators, closed-form asymptotic bounds and the
//! gradient-norm / Lipschitz baselines.
//!
//! Every simulation estimator reads a [`SampleTable`]: `R_outer` outer
//! replicas, each fixing `(J, U, W_0)` (and `S_J` in synthetic mode), times
//! `R_inner` inner replicas that redraw the injected noise (and `S_J^c` in
//! synthetic mode). Estimators computed from one table share random numbers,
//! so their differences are paired.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{draw_examples, Dataset, SyntheticSpec};
use crate::dynamics::{self, Hooks, InitSpec, RunOptions, ScheduleSpec, TrajectoryRecord, TrajectorySeeds, WeightRetention};
use crate::incoherence::{PriorContext, PriorForecast, KL_CONST_DEFAULT};
use crate::models::ModelSpec;
use crate::numerics::{self, mean_and_std_error, streams, LossKind, RngStream};
use crate::subset_stats::{draw_subset, MinibatchPlan, SubsetIndex};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorId {
    Mi,
    Dmi,
    Klb,
    SgldBounded,
    SgldSubgauss,
    LdSubgauss,
    LdBoundedTrace,
    TraceForm,
    AsymptoticGeometric,
    AsymptoticPolynomial,
    HighProb,
    BaselineGradnorm,
    BaselineLipschitz,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochComponent {
    pub epoch: usize,
    pub t_last: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundEstimate {
    pub estimator_id: EstimatorId,
    pub value: f64,
    pub std_error: f64,
    #[serde(rename = "R_outer")]
    pub r_outer: usize,
    #[serde(rename = "R_inner")]
    pub r_inner: usize,
    pub config_echo: serde_json::Value,
    pub per_epoch_components: Vec<EpochComponent>,
}

fn default_r() -> usize {
    10
}

fn default_kl_const() -> f64 {
    KL_CONST_DEFAULT
}

fn default_gradnorm_constant() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub m: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub schedule: ScheduleSpec,
    pub loss: LossKind,
    #[serde(default = "default_r")]
    pub r_outer: usize,
    #[serde(default = "default_r")]
    pub r_inner: usize,
    #[serde(default = "default_kl_const")]
    pub kl_const: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub forecast: PriorForecast,
    /// Constant `C` of the gradient-norm baseline.
    #[serde(default = "default_gradnorm_constant")]
    pub gradnorm_constant: f64,
}

impl EstimatorConfig {
    pub fn new(m: usize, batch_size: usize, steps: usize, schedule: ScheduleSpec, loss: LossKind, master_seed: u64) -> Self {
        Self {
            m,
            batch_size,
            steps,
            schedule,
            loss,
            r_outer: default_r(),
            r_inner: default_r(),
            kl_const: KL_CONST_DEFAULT,
            master_seed,
            init: InitSpec::Zero,
            forecast: PriorForecast::HeldInMean,
            gradnorm_constant: 1.0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.m == 0 || self.m >= n {
            return Err(Error::invalid(format!("m must satisfy 1 <= m <= n-1, got m = {}, n = {n}", self.m)));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::invalid(format!("b must satisfy 1 <= b <= n, got {}", self.batch_size)));
        }
        if self.r_outer == 0 || self.r_inner == 0 {
            return Err(Error::invalid("R_outer and R_inner must be at least 1"));
        }
        if !(self.kl_const > 0.0) || !(self.gradnorm_constant > 0.0) {
            return Err(Error::invalid("kl_const and gradnorm_constant must be positive"));
        }
        numerics::subgaussian_sigma(&self.loss)?;
        self.schedule.validate()
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn range_width(&self) -> Result<f64> {
        match self.loss.range() {
            Some((lo, hi)) if hi > lo => Ok(hi - lo),
            _ => Err(Error::Unsupported("this estimator needs a bounded evaluation loss".into())),
        }
    }
}

/// Diagnostics of one trajectory kept in a [`SampleTable`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub kl: Vec<f64>,
    pub xi_sq: Vec<f64>,
    pub grad_sq: Vec<f64>,
    pub b_out: Vec<usize>,
    pub held_out_norm: Vec<f64>,
    pub forecast_norm: Vec<f64>,
    pub trace: Option<Vec<f64>>,
    pub max_grad_norm: f64,
    pub kl_total: f64,
}

impl From<&TrajectoryRecord> for TrajectorySummary {
    fn from(rec: &TrajectoryRecord) -> Self {
        let inc = |f: fn(&dynamics::IncoherenceStep) -> f64| -> Vec<f64> {
            rec.steps
                .iter()
                .map(|s| s.incoherence.as_ref().map_or(0.0, f))
                .collect()
        };
        let trace = rec.steps.iter().map(|s| s.trace_sigma).collect::<Option<Vec<f64>>>();
        Self {
            kl: inc(|i| i.kl_increment),
            xi_sq: inc(|i| i.xi_sq),
            grad_sq: rec.steps.iter().map(|s| s.grad_sq).collect(),
            b_out: rec
                .steps
                .iter()
                .map(|s| s.incoherence.as_ref().map_or(0, |i| i.b_out))
                .collect(),
            held_out_norm: inc(|i| i.held_out_norm),
            forecast_norm: inc(|i| i.forecast_norm),
            trace: if rec.steps.is_empty() { None } else { trace },
            max_grad_norm: rec
                .steps
                .iter()
                .filter_map(|s| s.max_grad_norm)
                .fold(0.0, f64::max),
            kl_total: rec.kl_total,
        }
    }
}

/// Where the data comes from.
#[derive(Clone, Copy, Debug)]
pub enum DataMode<'a> {
    /// One dataset; outer replicas integrate over `(J, U, W_0)`.
    Fixed(&'a Dataset),
    /// Synthetic family: `S_J` is drawn per outer replica and `S_J^c` per
    /// inner replica.
    Synthetic(&'a SyntheticSpec),
}

impl DataMode<'_> {
    fn n(&self) -> usize {
        match self {
            DataMode::Fixed(ds) => ds.len(),
            DataMode::Synthetic(spec) => spec.n,
        }
    }
}

/// Outer x inner trajectory diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleTable {
    pub n: usize,
    pub m: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub eta: Vec<f64>,
    pub beta: Vec<f64>,
    pub cells: Vec<Vec<TrajectorySummary>>,
}

/// Root stream of outer replica `o`.
pub fn outer_root(master_seed: u64, o: usize) -> RngStream {
    RngStream::root(master_seed).derive(streams::OUTER).derive(o as u64)
}

fn run_options(cfg: &EstimatorConfig, track_trace: bool) -> RunOptions {
    RunOptions {
        init: cfg.init,
        kl_const: cfg.kl_const,
        retention: WeightRetention::Endpoints,
        track_trace,
        ..RunOptions::new(cfg.steps, cfg.batch_size)
    }
}

fn plan_for(n: usize, cfg: &EstimatorConfig, root: &RngStream) -> Result<Option<MinibatchPlan>> {
    if cfg.batch_size == n {
        return Ok(None);
    }
    Ok(Some(MinibatchPlan::draw(n, cfg.batch_size, cfg.steps, &mut root.derive(streams::MINIBATCH))?))
}

#[allow(clippy::too_many_arguments)]
fn one_trajectory(
    model: &ModelSpec,
    ds: &Dataset,
    subset: &SubsetIndex,
    plan: Option<&MinibatchPlan>,
    cfg: &EstimatorConfig,
    root: &RngStream,
    inner: usize,
    track_trace: bool,
) -> Result<TrajectorySummary> {
    let prior = PriorContext::new(ds, subset, cfg.forecast.clone())?;
    let hooks = Hooks {
        plan,
        prior: Some(&prior),
        observers: Vec::new(),
    };
    let seeds = TrajectorySeeds::from_root(root).with_noise_replica(inner as u64);
    let rec = dynamics::run_sgld(model, ds, &cfg.schedule, &run_options(cfg, track_trace), seeds, hooks)?;
    Ok(TrajectorySummary::from(&rec))
}

/// Inner replicas for fixed `(S, J, U)` and outer root stream.
pub fn inner_summaries(
    model: &ModelSpec,
    ds: &Dataset,
    subset: &SubsetIndex,
    plan: Option<&MinibatchPlan>,
    cfg: &EstimatorConfig,
    root: &RngStream,
    track_trace: bool,
) -> Result<Vec<TrajectorySummary>> {
    (0..cfg.r_inner)
        .map(|i| one_trajectory(model, ds, subset, plan, cfg, root, i, track_trace))
        .collect()
}

/// Per-step `Ê^{S,J,U}[KL_t]`: mean over `R_inner` noise paths with data,
/// subset and minibatch plan held fixed.
pub fn inner_kl_expectation(
    model: &ModelSpec,
    ds: &Dataset,
    subset: &SubsetIndex,
    plan: Option<&MinibatchPlan>,
    cfg: &EstimatorConfig,
    root: &RngStream,
) -> Result<Vec<f64>> {
    cfg.validate(ds.len())?;
    let cells = inner_summaries(model, ds, subset, plan, cfg, root, false)?;
    Ok(per_step_mean(&cells, |c| &c.kl, cfg.steps))
}

fn per_step_mean(cells: &[TrajectorySummary], f: impl Fn(&TrajectorySummary) -> &Vec<f64>, steps: usize) -> Vec<f64> {
    let mut out = vec![0.0; steps];
    for c in cells {
        for (o, v) in out.iter_mut().zip(f(c)) {
            *o += v / cells.len() as f64;
        }
    }
    out
}

fn outer_fixed(model: &ModelSpec, ds: &Dataset, cfg: &EstimatorConfig, o: usize, track_trace: bool) -> Result<Vec<TrajectorySummary>> {
    let root = outer_root(cfg.master_seed, o);
    let subset = draw_subset(ds.len(), cfg.m, &mut root.derive(streams::SUBSET))?;
    let plan = plan_for(ds.len(), cfg, &root)?;
    inner_summaries(model, ds, &subset, plan.as_ref(), cfg, &root, track_trace)
}

fn outer_synthetic(
    model: &ModelSpec,
    spec: &SyntheticSpec,
    cfg: &EstimatorConfig,
    o: usize,
    track_trace: bool,
) -> Result<Vec<TrajectorySummary>> {
    let n = spec.n;
    let root = RngStream::root(spec.seed).derive(streams::OUTER).derive(o as u64);
    let root = root.derive(cfg.master_seed);
    let subset = draw_subset(n, cfg.m, &mut root.derive(streams::SUBSET))?;
    let plan = plan_for(n, cfg, &root)?;
    let data_root = root.derive(streams::DATA);
    let held_in = draw_examples(&spec.family, cfg.m, &mut data_root.clone())?;
    let complement = subset.complement();
    (0..cfg.r_inner)
        .map(|i| {
            let mut rng = data_root.derive(streams::INNER).derive(i as u64);
            let held_out = draw_examples(&spec.family, n - cfg.m, &mut rng)?;
            let mut slots: Vec<Option<crate::data_io::Example>> = vec![None; n];
            for (&j, z) in subset.indices().iter().zip(&held_in) {
                slots[j] = Some(z.clone());
            }
            for (&j, z) in complement.iter().zip(held_out) {
                slots[j] = Some(z);
            }
            let ds = Dataset::from_examples(slots.into_iter().map(|z| z.expect("every slot filled")).collect())?;
            one_trajectory(model, &ds, &subset, plan.as_ref(), cfg, &root, i, track_trace)
        })
        .collect()
}

/// Runs all `R_outer x R_inner` trajectories; outer replicas run on the
/// current rayon pool and are collected in replica order.
pub fn sample_table(model: &ModelSpec, data: DataMode<'_>, cfg: &EstimatorConfig, track_trace: bool) -> Result<SampleTable> {
    let n = data.n();
    cfg.validate(n)?;
    if let DataMode::Fixed(ds) = data {
        model.check_dataset(ds)?;
    }
    let cells = (0..cfg.r_outer)
        .into_par_iter()
        .map(|o| match data {
            DataMode::Fixed(ds) => outer_fixed(model, ds, cfg, o, track_trace),
            DataMode::Synthetic(spec) => outer_synthetic(model, spec, cfg, o, track_trace),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleTable {
        n,
        m: cfg.m,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        eta: (1..=cfg.steps).map(|t| cfg.schedule.eta(t)).collect(),
        beta: (1..=cfg.steps).map(|t| cfg.schedule.beta(t)).collect(),
        cells,
    })
}

/// `⌈n / b⌉`
pub fn epoch_length(n: usize, b: usize) -> usize {
    n.div_ceil(b)
}

fn epoch_components(steps: &[f64], n: usize, b: usize) -> Vec<EpochComponent> {
    let len = epoch_length(n, b);
    steps
        .chunks(len)
        .enumerate()
        .map(|(e, chunk)| EpochComponent {
            epoch: e + 1,
            t_last: (e * len + chunk.len()),
            value: chunk.iter().sum(),
        })
        .collect()
}

impl SampleTable {
    pub fn r_outer(&self) -> usize {
        self.cells.len()
    }

    pub fn r_inner(&self) -> usize {
        self.cells.first().map_or(0, |c| c.len())
    }

    /// `Σ_t Ê^{inner}[KL_t]` per outer replica.
    pub fn inner_mean_kl_totals(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| c.iter().map(|s| s.kl_total).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Trajectory KL totals, `[outer][inner]`.
    pub fn kl_totals(&self) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|c| c.iter().map(|s| s.kl_total).collect())
            .collect()
    }

    fn mean_per_step(&self, f: impl Fn(&TrajectorySummary) -> &Vec<f64> + Copy) -> Vec<f64> {
        let mut out = vec![0.0; self.steps];
        for c in &self.cells {
            for (o, v) in out.iter_mut().zip(per_step_mean(c, f, self.steps)) {
                *o += v / self.cells.len() as f64;
            }
        }
        out
    }

    fn estimate(&self, id: EstimatorId, per_outer: &[f64], cfg: &EstimatorConfig, components: Vec<EpochComponent>) -> Result<BoundEstimate> {
        let (value, std_error) = mean_and_std_error(per_outer);
        finish(id, value, std_error, self.r_outer(), self.r_inner(), cfg, components)
    }

    fn sqrt_kl_estimate(&self, id: EstimatorId, constant: f64, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
        let per_outer: Vec<f64> = self
            .inner_mean_kl_totals()
            .iter()
            .map(|k| (constant * k).sqrt())
            .collect();
        let components = epoch_components(&self.mean_per_step(|c| &c.kl), self.n, self.batch_size);
        self.estimate(id, &per_outer, cfg, components)
    }

    /// `mean_o sqrt(((a2-a1)²/4) Σ_t Ê^{inner} KL_t)`; needs `m = n-1`.
    pub fn sgld_bounded(&self, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
        if self.m + 1 != self.n {
            return Err(Error::Unsupported(format!("sgld-bounded needs m = n-1, got m = {}, n = {}", self.m, self.n)));
        }
        let width = cfg.range_width()?;
        self.sqrt_kl_estimate(EstimatorId::SgldBounded, width * width / 4.0, cfg)
    }

    /// `mean_o sqrt((σ²/(n-m)) Σ_t Ê^{inner} KL_t)`.
    pub fn sgld_subgauss(&self, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
        let sigma = numerics::subgaussian_sigma(&cfg.loss)?;
        self.sqrt_kl_estimate(EstimatorId::SgldSubgauss, sigma * sigma / (self.n - self.m) as f64, cfg)
    }

    /// Per trajectory `Σ_t c_t tr Σ̂_t` with the step weights `c_t` of the
    /// trace form.
    fn weighted_trace_sums(&self, weights: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.cells
            .iter()
            .map(|c| {
                c.iter()
                    .map(|s| {
                        let tr = s
                            .trace
                            .as_ref()
                            .ok_or_else(|| Error::Unsupported("the sample table has no trace diagnostics".into()))?;
                        Ok(tr.iter().zip(weights).map(|(a, w)| a * w).sum())
                    })
                    .collect()
            })
            .collect()
    }

    /// `scale · sqrt(E[X])` with a delta-method standard error over outer
    /// replicas, where `X` is the weighted trace sum of one trajectory.
    fn sqrt_of_mean_trace(&self, id: EstimatorId, scale: f64, weights: &[f64], cfg: &EstimatorConfig) -> Result<BoundEstimate> {
        if self.steps == 0 {
            return finish(id, 0.0, 0.0, self.r_outer(), self.r_inner(), cfg, Vec::new());
        }
        let sums = self.weighted_trace_sums(weights)?;
        let per_outer: Vec<f64> = sums.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let (mean, se) = mean_and_std_error(&per_outer);
        let value = scale * mean.sqrt();
        let std_error = if mean > 0.0 { scale * se / (2.0 * mean.sqrt()) } else { 0.0 };
        let tr = self.mean_per_step(|c| c.trace.as_ref().expect("checked above"));
        let comps: Vec<f64> = tr.iter().zip(weights).map(|(a, w)| a * w).collect();
        finish(id, value, std_error, self.r_outer(), self.r_inner(), cfg, epoch_components(&comps, self.n, self.batch_size))
    }

    /// `(σ/2) sqrt((n/(n-1)²) Σ_t (1/b + (n-m-1)/(n m)) β_t η_t Ê tr Σ̂_t)`.
    pub fn trace_form(&self, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
        let sigma = numerics::subgaussian_sigma(&cfg.loss)?;
        let (n, m, b) = (self.n as f64, self.m as f64, self.batch_size as f64);
        let c = 1.0 / b + (n - m - 1.0) / (n * m);
        let weights: Vec<f64> = self.eta.iter().zip(&self.beta).map(|(e, be)| c * be * e).collect();
        self.sqrt_of_mean_trace(EstimatorId::TraceForm, sigma / 2.0 * (n / ((n - 1.0) * (n - 1.0))).sqrt(), &weights, cfg)
    }

    /// `sqrt((σ²/((n-1) m)) Σ_t (β_t η_t / 4) Ê tr Σ̂_t)`; needs `b = n`.
    pub fn ld_subgauss(&self, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
        if self.batch_size != self.n {
            return Err(Error::Unsupported("ld-subgauss needs b = n".into()));
        }
        let sigma = numerics::subgaussian_sigma(&cfg.loss)?;
        let (n, m) = (self.n as f64, self.m as f64);
        let weights: Vec<f64> = self.eta.iter().zip(&self.beta).map(|(e, b)| b * e / 4.0).collect();
        self.sqrt_of_mean_trace(EstimatorId::LdSubgauss, (sigma * sigma / ((n - 1.0) * m)).sqrt(), &weights, cfg)
    }

    /// `((a2-a1)/(2(n-1))) mean_o sqrt(Σ_t (β_t η_t / 4) Ê^{inner} tr Σ̂_t)`.
    pub fn ld_bounded_trace(&self, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
        let width = cfg.range_width()?;
        let weights: Vec<f64> = self.eta.iter().zip(&self.beta).map(|(e, b)| b * e / 4.0).collect();
        let sums = self.weighted_trace_sums(&weights)?;
        let scale = width / (2.0 * (self.n as f64 - 1.0));
        let per_outer: Vec<f64> = sums
            .iter()
            .map(|c| scale * (c.iter().sum::<f64>() / c.len() as f64).sqrt())
            .collect();
        self.estimate(EstimatorId::LdBoundedTrace, &per_outer, cfg, Vec::new())
    }

    /// `mean_o sqrt(C (1/n) Σ_t β_t η_t Ê^{inner} ||∇̂_t||²)`.
    pub fn baseline_gradnorm(&self, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
        let c = cfg.gradnorm_constant / self.n as f64;
        let weights: Vec<f64> = self.eta.iter().zip(&self.beta).map(|(e, b)| b * e).collect();
        let per_outer: Vec<f64> = self
            .cells
            .iter()
            .map(|cell| {
                let mean = per_step_mean(cell, |s| &s.grad_sq, self.steps);
                (c * mean.iter().zip(&weights).map(|(g, w)| g * w).sum::<f64>()).sqrt()
            })
            .collect();
        let steps: Vec<f64> = self
            .mean_per_step(|s| &s.grad_sq)
            .iter()
            .zip(&weights)
            .map(|(g, w)| c * g * w)
            .collect();
        self.estimate(EstimatorId::BaselineGradnorm, &per_outer, cfg, epoch_components(&steps, self.n, self.batch_size))
    }

    /// Lipschitz baseline with `L` set to the largest per-example gradient
    /// norm seen along the sampled trajectories; needs trace diagnostics.
    pub fn empirical_lipschitz(&self) -> Result<f64> {
        let mut max: f64 = 0.0;
        for c in self.cells.iter().flatten() {
            if c.trace.is_none() && self.steps > 0 {
                return Err(Error::Unsupported("the sample table has no gradient-norm diagnostics".into()));
            }
            max = max.max(c.max_grad_norm);
        }
        Ok(max)
    }

    /// Jensen triple on the table's trajectory KL totals.
    pub fn jensen_triple(&self, cfg: &EstimatorConfig) -> Result<JensenTriple> {
        let width = cfg.range_width()?;
        jensen_ordering_triple(&self.kl_totals(), width * width / 2.0)
    }

    /// The Jensen triple as estimate records. `dmi` and `klb` report the
    /// standard error of their outer / trajectory means, `mi` a delta-method
    /// standard error of the pooled mean.
    pub fn jensen_estimates(&self, cfg: &EstimatorConfig) -> Result<Vec<BoundEstimate>> {
        let width = cfg.range_width()?;
        let c = width * width / 2.0;
        let triple = jensen_ordering_triple(&self.kl_totals(), c)?;
        let per_outer: Vec<f64> = self.inner_mean_kl_totals();
        let (mean, se) = mean_and_std_error(&per_outer);
        let mi_se = if mean > 0.0 { c.sqrt() * se / (2.0 * mean.sqrt()) } else { 0.0 };
        let dmi_vals: Vec<f64> = per_outer.iter().map(|k| (c * k).sqrt()).collect();
        let klb_vals: Vec<f64> = self.kl_totals().iter().flatten().map(|k| (c * k).sqrt()).collect();
        let (ro, ri) = (self.r_outer(), self.r_inner());
        Ok(vec![
            finish(EstimatorId::Mi, triple.mi, mi_se, ro, ri, cfg, Vec::new())?,
            finish(EstimatorId::Dmi, triple.dmi, mean_and_std_error(&dmi_vals).1, ro, ri, cfg, Vec::new())?,
            finish(EstimatorId::Klb, triple.klb, mean_and_std_error(&klb_vals).1, ro, ri, cfg, Vec::new())?,
        ])
    }

    /// Mean over trajectories of the high-probability radius.
    pub fn high_prob(&self, cfg: &EstimatorConfig, delta: f64) -> Result<BoundEstimate> {
        let width = cfg.range_width()?;
        if width > 1.0 {
            return Err(Error::Unsupported("high-prob needs a loss with range width at most 1".into()));
        }
        let per_outer = self
            .cells
            .iter()
            .map(|c| {
                let vals = c
                    .iter()
                    .map(|s| high_prob_bound(s.kl_total, self.n, self.m, delta))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        self.estimate(EstimatorId::HighProb, &per_outer, cfg, Vec::new())
    }

    /// Per-epoch summand series of each trajectory, averaged over the table.
    pub fn epoch_series(&self) -> EpochSeries {
        let all: Vec<EpochSeries> = self
            .cells
            .iter()
            .flatten()
            .map(|s| epoch_series_of(s, &self.eta, &self.beta, self.n, self.batch_size))
            .collect();
        EpochSeries::mean(&all)
    }
}

fn finish(
    id: EstimatorId,
    value: f64,
    std_error: f64,
    r_outer: usize,
    r_inner: usize,
    cfg: &EstimatorConfig,
    per_epoch_components: Vec<EpochComponent>,
) -> Result<BoundEstimate> {
    if !value.is_finite() || !std_error.is_finite() {
        return Err(Error::NonFinite(format!("{id:?} estimate")));
    }
    Ok(BoundEstimate {
        estimator_id: id,
        value: value.max(0.0),
        std_error,
        r_outer,
        r_inner,
        config_echo: cfg.echo(),
        per_epoch_components,
    })
}

/// [`SampleTable::sgld_bounded`] on a fresh table over a fixed dataset.
pub fn estimate_sgld_bounded(model: &ModelSpec, ds: &Dataset, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
    if cfg.m + 1 != ds.len() {
        return Err(Error::Unsupported(format!("sgld-bounded needs m = n-1, got m = {}, n = {}", cfg.m, ds.len())));
    }
    cfg.range_width()?;
    sample_table(model, DataMode::Fixed(ds), cfg, false)?.sgld_bounded(cfg)
}

/// First-form subgaussian bound; the inner expectation redraws `S_J^c`, so
/// the data distribution must be known.
pub fn estimate_sgld_subgaussian(model: &ModelSpec, data: DataMode<'_>, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
    match data {
        DataMode::Synthetic(_) => sample_table(model, data, cfg, false)?.sgld_subgauss(cfg),
        DataMode::Fixed(_) => Err(Error::Unsupported(
            "sgld-subgauss integrates over fresh held-out data and needs a synthetic distribution".into(),
        )),
    }
}

pub fn estimate_trace_form(model: &ModelSpec, data: DataMode<'_>, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
    sample_table(model, data, cfg, true)?.trace_form(cfg)
}

/// Langevin-dynamics specializations from one table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LdBounds {
    pub ld_subgauss: BoundEstimate,
    /// Only for `m = n-1` and a bounded loss.
    pub bounded: Option<BoundEstimate>,
    /// Only for a bounded loss.
    pub bounded_trace: Option<BoundEstimate>,
}

pub fn estimate_ld_bounds(model: &ModelSpec, ds: &Dataset, cfg: &EstimatorConfig) -> Result<LdBounds> {
    if cfg.batch_size != ds.len() {
        return Err(Error::Unsupported("LD bounds need b = n".into()));
    }
    let table = sample_table(model, DataMode::Fixed(ds), cfg, true)?;
    let bounded_loss = cfg.loss.range().is_some();
    Ok(LdBounds {
        ld_subgauss: table.ld_subgauss(cfg)?,
        bounded: if bounded_loss && cfg.m + 1 == ds.len() {
            Some(table.sgld_bounded(cfg)?)
        } else {
            None
        },
        bounded_trace: if bounded_loss { Some(table.ld_bounded_trace(cfg)?) } else { None },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JensenTriple {
    pub mi: f64,
    pub dmi: f64,
    pub klb: f64,
}

/// From a `[outer][inner]` KL table and constant `c`:
/// `mi = sqrt(c E KL)`, `dmi = E_o sqrt(c E_i KL)`, `klb = E sqrt(c KL)`.
pub fn jensen_ordering_triple(table: &[Vec<f64>], constant: f64) -> Result<JensenTriple> {
    if table.is_empty() || table.iter().any(|r| r.is_empty()) {
        return Err(Error::invalid("empty KL table"));
    }
    if table.iter().flatten().any(|k| !(*k >= 0.0) || !k.is_finite()) || !(constant > 0.0) {
        return Err(Error::invalid("KL entries must be finite and nonnegative, constant positive"));
    }
    let count: usize = table.iter().map(|r| r.len()).sum();
    let total: f64 = table.iter().flatten().sum();
    let mi = (constant * total / count as f64).sqrt();
    let dmi = table
        .iter()
        .map(|r| (constant * r.iter().sum::<f64>() / r.len() as f64).sqrt())
        .sum::<f64>()
        / table.len() as f64;
    let klb = table.iter().flatten().map(|k| (constant * k).sqrt()).sum::<f64>() / count as f64;
    Ok(JensenTriple { mi, dmi, klb })
}

/// `(L / (2 (n-1)^{1-θ})) sqrt(β₀ η₀ ρ(1-ν) / ((1-ρ)(1-ρν)))`
pub fn asymptotic_geometric(l: f64, n: usize, theta: f64, beta0: f64, eta0: f64, rho: f64, nu: f64) -> Result<f64> {
    if !(l > 0.0 && n >= 2 && theta > 0.0 && theta < 1.0 && beta0 > 0.0 && eta0 > 0.0 && rho > 0.0 && rho < 1.0 && (0.0..1.0).contains(&nu)) {
        return Err(Error::invalid("asymptotic-geometric needs L, β₀, η₀ > 0, n >= 2, 0 < θ, ρ < 1, 0 <= ν < 1"));
    }
    let nm1 = (n - 1) as f64;
    Ok(l / (2.0 * nm1.powf(1.0 - theta)) * (beta0 * eta0 * rho * (1.0 - nu) / ((1.0 - rho) * (1.0 - rho * nu))).sqrt())
}

/// Case-split bound for `η_t = t^{-α}`, `β_t = (n-1)^p`. The `α < 1` case
/// uses `sqrt(1 + T^{1-α} / (1-α))`.
pub fn asymptotic_polynomial(l: f64, n: usize, p: f64, alpha: f64, steps: usize) -> Result<f64> {
    if !(l > 0.0 && n >= 2 && alpha > 0.0 && p > 0.0 && p < 1.0) || steps == 0 {
        return Err(Error::invalid("asymptotic-polynomial needs L, α > 0, 0 < p < 1, n >= 2, T >= 1"));
    }
    let pre = l / (2.0 * ((n - 1) as f64).powf(1.0 - p));
    let t = steps as f64;
    Ok(if alpha > 1.0 {
        pre * alpha / (alpha - 1.0)
    } else if alpha == 1.0 {
        pre * (1.0 + t.ln()).sqrt()
    } else {
        pre * (1.0 + t.powf(1.0 - alpha) / (1.0 - alpha)).sqrt()
    })
}

/// `sqrt((KL + ln((n-m)/δ)) / (2(n-m-1)))` for losses in `[0, 1]`.
pub fn high_prob_bound(kl_total: f64, n: usize, m: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) || !(kl_total >= 0.0) || !kl_total.is_finite() {
        return Err(Error::invalid("high-prob needs 0 < δ < 1 and a finite KL >= 0"));
    }
    if m + 2 > n {
        return Err(Error::invalid(format!("high-prob needs m <= n-2, got m = {m}, n = {n}")));
    }
    let held_out = (n - m) as f64;
    Ok(((kl_total + (held_out / delta).ln()) / (2.0 * (held_out - 1.0))).sqrt())
}

/// `(L / (2(n-1))) sqrt(Σ_t β_t η_t)`
pub fn baseline_lipschitz(l: f64, schedule: &ScheduleSpec, steps: usize, n: usize) -> Result<f64> {
    if !(l > 0.0) || n < 2 {
        return Err(Error::invalid("baseline-lipschitz needs L > 0 and n >= 2"));
    }
    schedule.validate()?;
    Ok(l / (2.0 * (n - 1) as f64) * schedule.sum_beta_eta(steps).sqrt())
}

/// Per-epoch means of the step summands, plus run-cumulative sums.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochSeries {
    pub t_last: Vec<usize>,
    /// Mean of `sqrt(η β) ||ξ_t|| / b` over the epoch.
    pub xi_summand: Vec<f64>,
    /// Mean of `sqrt(η β) ||∇̂_t|| / b`.
    pub grad_summand: Vec<f64>,
    /// Mean of `sqrt(η β) (b^c/b)(||∇̂_{S^c_t}|| + ||forecast||) / b`.
    pub envelope: Vec<f64>,
    pub mean_xi_sq: Vec<f64>,
    pub mean_grad_sq: Vec<f64>,
    /// `Σ_t β_t η_t ||ξ_t||²` through the end of each epoch.
    pub cum_xi_weighted: Vec<f64>,
    /// `Σ_t β_t η_t ||∇̂_t||²` through the end of each epoch.
    pub cum_grad_weighted: Vec<f64>,
    /// `Σ_t KL_t` through the end of each epoch.
    pub kl_cum: Vec<f64>,
}

impl EpochSeries {
    fn mean(all: &[EpochSeries]) -> Self {
        let Some(first) = all.first() else {
            return Self::default();
        };
        let avg = |f: fn(&EpochSeries) -> &Vec<f64>| -> Vec<f64> {
            (0..f(first).len())
                .map(|e| all.iter().map(|s| f(s)[e]).sum::<f64>() / all.len() as f64)
                .collect()
        };
        Self {
            t_last: first.t_last.clone(),
            xi_summand: avg(|s| &s.xi_summand),
            grad_summand: avg(|s| &s.grad_summand),
            envelope: avg(|s| &s.envelope),
            mean_xi_sq: avg(|s| &s.mean_xi_sq),
            mean_grad_sq: avg(|s| &s.mean_grad_sq),
            cum_xi_weighted: avg(|s| &s.cum_xi_weighted),
            cum_grad_weighted: avg(|s| &s.cum_grad_weighted),
            kl_cum: avg(|s| &s.kl_cum),
        }
    }
}

fn epoch_series_of(s: &TrajectorySummary, eta: &[f64], beta: &[f64], n: usize, b: usize) -> EpochSeries {
    let len = epoch_length(n, b);
    let steps = s.kl.len();
    let bf = b as f64;
    let mut out = EpochSeries::default();
    let (mut cx, mut cg, mut ck) = (numerics::CompensatedSum::default(), numerics::CompensatedSum::default(), numerics::CompensatedSum::default());
    for start in (0..steps).step_by(len) {
        let end = (start + len).min(steps);
        let k = (end - start) as f64;
        let (mut xs, mut gs, mut es, mut xq, mut gq) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for t in start..end {
            let root = (eta[t] * beta[t]).sqrt();
            xs += root * s.xi_sq[t].sqrt() / bf;
            gs += root * s.grad_sq[t].sqrt() / bf;
            es += root * (s.b_out[t] as f64 / bf) * (s.held_out_norm[t] + s.forecast_norm[t]) / bf;
            xq += s.xi_sq[t];
            gq += s.grad_sq[t];
            cx.add(beta[t] * eta[t] * s.xi_sq[t]);
            cg.add(beta[t] * eta[t] * s.grad_sq[t]);
            ck.add(s.kl[t]);
        }
        out.t_last.push(end);
        out.xi_summand.push(xs / k);
        out.grad_summand.push(gs / k);
        out.envelope.push(es / k);
        out.mean_xi_sq.push(xq / k);
        out.mean_grad_sq.push(gq / k);
        out.cum_xi_weighted.push(cx.value());
        out.cum_grad_weighted.push(cg.value());
        out.kl_cum.push(ck.value());
    }
    out
}

/// Epoch series of one recorded trajectory; needs incoherence diagnostics.
pub fn baseline_gradnorm_summand(rec: &TrajectoryRecord, n: usize, batch_size: usize) -> Result<EpochSeries> {
    if rec.steps.iter().any(|s| s.incoherence.is_none()) {
        return Err(Error::invalid("trajectory has no incoherence diagnostics; run it with a prior"));
    }
    let eta: Vec<f64> = rec.steps.iter().map(|s| s.eta).collect();
    let beta: Vec<f64> = rec.steps.iter().map(|s| s.beta).collect();
    Ok(epoch_series_of(&TrajectorySummary::from(rec), &eta, &beta, n, batch_size))
}

/// `sqrt(C (1/n) Σ_t β_t η_t ||∇̂_t||²)` for one trajectory.
pub fn gradnorm_bound(rec: &TrajectoryRecord, n: usize, constant: f64) -> f64 {
    let s: f64 = rec.steps.iter().map(|s| s.beta * s.eta * s.grad_sq).sum();
    (constant * s / n as f64).sqrt()
}
