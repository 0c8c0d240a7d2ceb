//! Experiment harness behind the `genbound` binary.
//!
//! Each subcommand takes an [`ExperimentConfig`] (JSON, unknown keys
//! rejected) and returns its artifact as a string; the caller writes it.
//! Every artifact embeds the resolved config and master seed.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{self, AnalyticSetup, PriorVariant, Verdict};
use crate::bounds::{
    self, epoch_length, outer_root, sample_table, BoundEstimate, DataMode, EstimatorConfig, EstimatorId, SampleTable,
};
use crate::data_io::{self, Dataset, SyntheticSpec};
use crate::dynamics::{
    self, BetaSchedule, EtaSchedule, Hooks, InitSpec, RunOptions, ScheduleSpec, StepObserver, StepView, TrajectorySeeds,
    WeightRetention,
};
use crate::incoherence::{PriorContext, PriorForecast, KL_CONST_DEFAULT};
use crate::models::{self, Architecture, EvalLoss, ModelSpec, ParamPoint, Surrogate};
use crate::numerics::{streams, LossKind, RealVec, RngStream};
use crate::report::{format_f64, to_json_line, to_json_string};
use crate::subset_stats::{self, draw_subset, oracle, population_variance};
use crate::{incoherence, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` examples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// Model without dimensions; they are read off the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub surrogate: Surrogate,
    pub eval_loss: EvalLoss,
}

/// Which expectation the inner Monte-Carlo replicas integrate over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    /// Noise only; the dataset is fixed.
    #[default]
    Fixed,
    /// Noise and fresh held-out data; needs a synthetic dataset.
    Distributional,
}

fn default_r() -> usize {
    10
}

fn default_runs() -> usize {
    1
}

fn default_kl_const() -> f64 {
    KL_CONST_DEFAULT
}

fn default_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    /// Number of epochs of `⌈n/b⌉` steps; exclusive with `steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub batch_size: usize,
    /// Held-in subset size; defaults to `n - 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default)]
    pub estimators: Vec<EstimatorId>,
    #[serde(default = "default_r", rename = "R_outer")]
    pub r_outer: usize,
    #[serde(default = "default_r", rename = "R_inner")]
    pub r_inner: usize,
    #[serde(default = "default_kl_const")]
    pub kl_const: f64,
    pub loss: LossKind,
    pub master_seed: u64,
    /// Confidence level of the high-probability bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub forecast: PriorForecast,
    #[serde(default)]
    pub expectation: Expectation,
    /// Fraction of the data held back for `eval_err`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_fraction: Option<f64>,
    /// Independent trajectories emitted by `train`.
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Lipschitz constant for the closed-form estimators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(default = "default_one")]
    pub gradnorm_constant: f64,
    /// Default output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        parse_json(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Loads, applies an optional seed override and checks consistency.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Resolved> {
        if let Some(s) = seed {
            self.master_seed = s;
        }
        Resolved::new(self)
    }
}

/// A validated config bound to its dataset and model.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub eval: Option<Dataset>,
    pub model: ModelSpec,
    pub estimator: EstimatorConfig,
}

impl Resolved {
    fn new(config: ExperimentConfig) -> Result<Self> {
        let full = match &config.dataset {
            DatasetConfig::Synthetic(spec) => data_io::generate(spec).map_err(|e| Error::config("dataset.synthetic", e.to_string()))?,
            DatasetConfig::Idx { images, labels, limit } => {
                let ds = data_io::read_idx(images, labels)?;
                match *limit {
                    Some(k) if k < ds.len() => ds.subset(&(0..k).collect::<Vec<_>>(), "first examples")?,
                    _ => ds,
                }
            }
        };
        let (train, eval) = match config.eval_fraction {
            Some(f) => {
                if config.expectation == Expectation::Distributional {
                    return Err(Error::config("eval_fraction", "not available with distributional expectation"));
                }
                let mut rng = RngStream::root(config.master_seed).derive(streams::SPLIT);
                let (t, e) = data_io::holdout_split(&full, f, &mut rng).map_err(|e| Error::config("eval_fraction", e.to_string()))?;
                (t, Some(e))
            }
            None => (full, None),
        };
        let n = train.len();
        let output_dim = if train.is_classification() {
            train.output_dim().max(2)
        } else {
            train.output_dim()
        };
        let m = &config.model;
        let model = ModelSpec::new(m.architecture.clone(), train.feature_dim(), output_dim, m.surrogate, m.eval_loss)
            .map_err(|e| Error::config("model", e.to_string()))?;
        model
            .check_dataset(&train)
            .map_err(|e| Error::config("model", e.to_string()))?;

        let b = config.batch_size;
        if b == 0 || b > n {
            return Err(Error::config("batch_size", format!("need 1 <= b <= n = {n}, got {b}")));
        }
        let steps = match (config.epochs, config.steps) {
            (Some(e), None) => e * epoch_length(n, b),
            (None, Some(s)) => s,
            _ => return Err(Error::config("epochs", "exactly one of `epochs` and `steps` is required")),
        };
        let subset = config.m.unwrap_or(n - 1);
        if subset == 0 || subset >= n {
            return Err(Error::config("m", format!("need 1 <= m <= n-1 = {}, got {subset}", n - 1)));
        }
        config
            .schedule
            .validate()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        if config.runs == 0 {
            return Err(Error::config("runs", "need at least one run"));
        }
        let estimator = EstimatorConfig {
            m: subset,
            batch_size: b,
            steps,
            schedule: config.schedule.clone(),
            loss: config.loss,
            r_outer: config.r_outer,
            r_inner: config.r_inner,
            kl_const: config.kl_const,
            master_seed: config.master_seed,
            init: config.init,
            forecast: config.forecast.clone(),
            gradnorm_constant: config.gradnorm_constant,
        };
        estimator.validate(n).map_err(|e| Error::config("", e.to_string()))?;
        let resolved = Self {
            config,
            train,
            eval,
            model,
            estimator,
        };
        resolved.check_estimators()?;
        Ok(resolved)
    }

    pub fn n(&self) -> usize {
        self.train.len()
    }

    pub fn steps(&self) -> usize {
        self.estimator.steps
    }

    /// Requested estimators, with `high-prob` appended when `delta` is set.
    pub fn estimator_list(&self) -> Vec<EstimatorId> {
        let mut list = self.config.estimators.clone();
        if self.config.delta.is_some() && !list.contains(&EstimatorId::HighProb) {
            list.push(EstimatorId::HighProb);
        }
        list
    }

    fn check_estimators(&self) -> Result<()> {
        let cfg = &self.config;
        let (n, m, b) = (self.n(), self.estimator.m, self.estimator.batch_size);
        let width = cfg.loss.range().map(|(lo, hi)| hi - lo);
        for (i, id) in self.estimator_list().iter().enumerate() {
            let path = format!("estimators[{i}]");
            let fail = |msg: &str| Err(Error::config(path.clone(), format!("{}: {msg}", estimator_name(*id))));
            let needs_range = matches!(
                id,
                EstimatorId::SgldBounded | EstimatorId::LdBoundedTrace | EstimatorId::Mi | EstimatorId::Dmi | EstimatorId::Klb | EstimatorId::HighProb
            );
            if needs_range && width.is_none() {
                return fail("needs a bounded loss");
            }
            match id {
                EstimatorId::SgldBounded if m + 1 != n => return fail("needs m = n-1"),
                EstimatorId::SgldSubgauss if cfg.expectation != Expectation::Distributional => {
                    return fail("needs `expectation: distributional` on a synthetic dataset")
                }
                EstimatorId::LdSubgauss | EstimatorId::LdBoundedTrace if b != n => return fail("needs b = n"),
                EstimatorId::HighProb => {
                    let Some(delta) = cfg.delta else {
                        return fail("needs `delta`");
                    };
                    if !(delta > 0.0 && delta < 1.0) {
                        return Err(Error::config("delta", "need 0 < delta < 1"));
                    }
                    if m + 2 > n {
                        return fail("needs m <= n-2");
                    }
                    if width.is_some_and(|w| w > 1.0) {
                        return fail("needs a loss range of width at most 1");
                    }
                }
                EstimatorId::AsymptoticGeometric => {
                    if cfg.lipschitz.is_none() {
                        return fail("needs `lipschitz`");
                    }
                    match (&cfg.schedule.eta, &cfg.schedule.beta) {
                        (EtaSchedule::Geometric { .. }, BetaSchedule::Ramp { n: bn, .. }) if *bn == n => {}
                        _ => return fail("needs a geometric eta and a ramp beta with n equal to the dataset size"),
                    }
                }
                EstimatorId::AsymptoticPolynomial => {
                    if cfg.lipschitz.is_none() {
                        return fail("needs `lipschitz`");
                    }
                    match (&cfg.schedule.eta, &cfg.schedule.beta) {
                        (EtaSchedule::Polynomial { .. }, BetaSchedule::Ramp { n: bn, nu, .. }) if *bn == n && *nu == 0.0 => {}
                        _ => return fail("needs a polynomial eta and a ramp beta with nu = 0 and n equal to the dataset size"),
                    }
                }
                _ => {}
            }
            if *id == EstimatorId::SgldSubgauss && !matches!(cfg.dataset, DatasetConfig::Synthetic(_)) {
                return fail("needs a synthetic dataset");
            }
        }
        if cfg.expectation == Expectation::Distributional && !matches!(cfg.dataset, DatasetConfig::Synthetic(_)) {
            return Err(Error::config("expectation", "distributional expectation needs a synthetic dataset"));
        }
        Ok(())
    }

    fn data_mode(&self) -> DataMode<'_> {
        match (&self.config.dataset, self.config.expectation) {
            (DatasetConfig::Synthetic(spec), Expectation::Distributional) => DataMode::Synthetic(spec),
            _ => DataMode::Fixed(&self.train),
        }
    }

    fn table(&self, track_trace: bool) -> Result<SampleTable> {
        sample_table(&self.model, self.data_mode(), &self.estimator, track_trace)
    }

    fn header_lines(&self, command: &str) -> Result<String> {
        Ok(format!(
            "# genbound {command}\n# config: {}\n# master_seed: {}\n# n: {}\n# steps: {}\n# dataset_checksum: {}\n",
            to_json_line(&self.config)?,
            self.config.master_seed,
            self.n(),
            self.steps(),
            self.train.checksum()
        ))
    }
}

fn estimator_name(id: EstimatorId) -> String {
    serde_json::to_value(id)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

struct EpochErrors<'a> {
    model: &'a ModelSpec,
    train: &'a Dataset,
    eval: Option<&'a Dataset>,
    epoch_len: usize,
    steps: usize,
    errors: Vec<(f64, Option<f64>)>,
}

impl StepObserver for EpochErrors<'_> {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        if view.t.is_multiple_of(self.epoch_len) || view.t == self.steps {
            let w = ParamPoint(RealVec::new(view.w_next.to_vec())?);
            let train = models::eval_risk(self.model, &w, self.train)?;
            let eval = self.eval.map(|ds| models::eval_risk(self.model, &w, ds)).transpose()?;
            self.errors.push((train, eval));
        }
        Ok(())
    }
}

pub const TRAIN_COLUMNS: &str =
    "run_id,epoch,t_last,eta,beta,mean_xi_sq,mean_grad_sq,xi_summand,grad_summand,kl_cum,train_err,eval_err";

fn train_run(r: &Resolved, run: usize) -> Result<Vec<String>> {
    let (n, b, steps) = (r.n(), r.estimator.batch_size, r.steps());
    let root = outer_root(r.config.master_seed, run);
    let subset = draw_subset(n, r.estimator.m, &mut root.derive(streams::SUBSET))?;
    let prior = PriorContext::new(&r.train, &subset, r.config.forecast.clone())?;
    let mut errors = EpochErrors {
        model: &r.model,
        train: &r.train,
        eval: r.eval.as_ref(),
        epoch_len: epoch_length(n, b),
        steps,
        errors: Vec::new(),
    };
    let opts = RunOptions {
        init: r.config.init,
        kl_const: r.config.kl_const,
        retention: WeightRetention::Endpoints,
        ..RunOptions::new(steps, b)
    };
    let hooks = Hooks {
        plan: None,
        prior: Some(&prior),
        observers: vec![&mut errors],
    };
    let rec = dynamics::run_sgld(&r.model, &r.train, &r.config.schedule, &opts, TrajectorySeeds::from_root(&root), hooks)?;
    let series = bounds::baseline_gradnorm_summand(&rec, n, b)?;
    Ok((0..series.t_last.len())
        .map(|e| {
            let t = series.t_last[e];
            let (train_err, eval_err) = errors.errors[e];
            format!(
                "{run},{},{t},{},{},{},{},{},{},{},{},{}",
                e + 1,
                format_f64(r.config.schedule.eta(t)),
                format_f64(r.config.schedule.beta(t)),
                format_f64(series.mean_xi_sq[e]),
                format_f64(series.mean_grad_sq[e]),
                format_f64(series.xi_summand[e]),
                format_f64(series.grad_summand[e]),
                format_f64(series.kl_cum[e]),
                format_f64(train_err),
                eval_err.map(format_f64).unwrap_or_default(),
            )
        })
        .collect())
}

/// Per-epoch trajectory diagnostics as CSV, one block of rows per run.
pub fn cmd_train(r: &Resolved) -> Result<String> {
    let mut out = r.header_lines("train")?;
    out.push_str(TRAIN_COLUMNS);
    out.push('\n');
    if r.steps() == 0 {
        return Ok(out);
    }
    let runs = (0..r.config.runs)
        .into_par_iter()
        .map(|run| train_run(r, run))
        .collect::<Result<Vec<_>>>()?;
    for line in runs.into_iter().flatten() {
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub command: &'static str,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub n: usize,
    pub steps: usize,
    pub dataset_checksum: String,
    /// All simulation estimates share one sample table, so differences
    /// between records are paired under common random numbers.
    pub estimates: Vec<BoundEstimate>,
}

fn closed_form(id: EstimatorId, value: f64, cfg: &EstimatorConfig) -> Result<BoundEstimate> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{} value", estimator_name(id))));
    }
    Ok(BoundEstimate {
        estimator_id: id,
        value,
        std_error: 0.0,
        r_outer: 0,
        r_inner: 0,
        config_echo: serde_json::to_value(cfg).map_err(|e| Error::invalid(e.to_string()))?,
        per_epoch_components: Vec::new(),
    })
}

fn needs_table(id: EstimatorId, have_lipschitz: bool) -> bool {
    match id {
        EstimatorId::AsymptoticGeometric | EstimatorId::AsymptoticPolynomial => false,
        EstimatorId::BaselineLipschitz => !have_lipschitz,
        _ => true,
    }
}

fn needs_trace(id: EstimatorId, have_lipschitz: bool) -> bool {
    match id {
        EstimatorId::TraceForm | EstimatorId::LdSubgauss | EstimatorId::LdBoundedTrace => true,
        EstimatorId::BaselineLipschitz => !have_lipschitz,
        _ => false,
    }
}

pub fn bound_report(r: &Resolved) -> Result<BoundReport> {
    let list = r.estimator_list();
    let cfg = &r.estimator;
    let lipschitz = r.config.lipschitz;
    let table = if list.iter().any(|id| needs_table(*id, lipschitz.is_some())) {
        Some(r.table(list.iter().any(|id| needs_trace(*id, lipschitz.is_some())))?)
    } else {
        None
    };
    let tab = || table.as_ref().expect("table built for simulation estimators");
    let mut estimates = Vec::new();
    for id in list {
        match id {
            EstimatorId::Mi | EstimatorId::Dmi | EstimatorId::Klb => {
                let all = tab().jensen_estimates(cfg)?;
                estimates.extend(all.into_iter().filter(|e| e.estimator_id == id));
            }
            EstimatorId::SgldBounded => estimates.push(tab().sgld_bounded(cfg)?),
            EstimatorId::SgldSubgauss => estimates.push(tab().sgld_subgauss(cfg)?),
            EstimatorId::LdSubgauss => estimates.push(tab().ld_subgauss(cfg)?),
            EstimatorId::LdBoundedTrace => estimates.push(tab().ld_bounded_trace(cfg)?),
            EstimatorId::TraceForm => estimates.push(tab().trace_form(cfg)?),
            EstimatorId::BaselineGradnorm => estimates.push(tab().baseline_gradnorm(cfg)?),
            EstimatorId::HighProb => {
                let delta = r.config.delta.expect("checked at resolve");
                estimates.push(tab().high_prob(cfg, delta)?);
            }
            EstimatorId::BaselineLipschitz => {
                let l = match lipschitz {
                    Some(l) => l,
                    None => tab().empirical_lipschitz()?,
                };
                let value = bounds::baseline_lipschitz(l, &cfg.schedule, cfg.steps, r.n())?;
                estimates.push(closed_form(id, value, cfg)?);
            }
            EstimatorId::AsymptoticGeometric => {
                let (EtaSchedule::Geometric { eta0, rho }, BetaSchedule::Ramp { beta0, theta, nu, .. }) =
                    (&cfg.schedule.eta, &cfg.schedule.beta)
                else {
                    unreachable!("checked at resolve")
                };
                let l = lipschitz.expect("checked at resolve");
                let value = bounds::asymptotic_geometric(l, r.n(), *theta, *beta0, *eta0, *rho, *nu)?;
                estimates.push(closed_form(id, value, cfg)?);
            }
            EstimatorId::AsymptoticPolynomial => {
                let (EtaSchedule::Polynomial { eta0, alpha }, BetaSchedule::Ramp { beta0, theta, .. }) =
                    (&cfg.schedule.eta, &cfg.schedule.beta)
                else {
                    unreachable!("checked at resolve")
                };
                let l = lipschitz.expect("checked at resolve");
                let value = bounds::asymptotic_polynomial(l, r.n(), *theta, *alpha, cfg.steps)? * (beta0 * eta0).sqrt();
                estimates.push(closed_form(id, value, cfg)?);
            }
        }
    }
    Ok(BoundReport {
        command: "bound",
        config: r.config.clone(),
        master_seed: r.config.master_seed,
        n: r.n(),
        steps: r.steps(),
        dataset_checksum: r.train.checksum(),
        estimates,
    })
}

/// One bound record per requested estimator, as JSON.
pub fn cmd_bound(r: &Resolved) -> Result<String> {
    to_json_string(&bound_report(r)?)
}

pub const COMPARE_COLUMNS: &str =
    "epoch,t_last,xi_summand,grad_summand,ratio,envelope,cum_xi_weighted,cum_grad_weighted,kl_cum";

/// Paired per-epoch incoherence and gradient-norm summands, averaged over
/// the sample table.
pub fn cmd_compare(r: &Resolved) -> Result<String> {
    let mut out = r.header_lines("compare")?;
    out.push_str(COMPARE_COLUMNS);
    out.push('\n');
    if r.steps() == 0 {
        return Ok(out);
    }
    let s = r.table(false)?.epoch_series();
    for e in 0..s.t_last.len() {
        let ratio = if s.grad_summand[e] > 0.0 {
            s.xi_summand[e] / s.grad_summand[e]
        } else {
            f64::NAN
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e + 1,
            s.t_last[e],
            format_f64(s.xi_summand[e]),
            format_f64(s.grad_summand[e]),
            format_f64(ratio),
            format_f64(s.envelope[e]),
            format_f64(s.cum_xi_weighted[e]),
            format_f64(s.cum_grad_weighted[e]),
            format_f64(s.kl_cum[e]),
        ));
    }
    Ok(out)
}

/// The finite-population identities checked against enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Lemma {
    HypergeometricMoments,
    BatchWithinSubset,
    DisjointSampleCovariance,
    XiSecondMoment,
}

pub const STATS_TOLERANCE: f64 = 1e-10;

/// Scales one closed form by `1 + relative` before comparing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Perturbation {
    pub lemma: Lemma,
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub lemma: Lemma,
    pub cases: usize,
    pub max_abs_discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsReport {
    pub command: &'static str,
    pub master_seed: u64,
    pub perturbation: Option<Perturbation>,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

fn random_population(rng: &mut RngStream, size: usize, dim: usize) -> Vec<RealVec> {
    (0..size)
        .map(|_| RealVec::new((0..dim).map(|_| rng.standard_normal()).collect()).expect("finite draws"))
        .collect()
}

struct Tracker {
    cases: usize,
    max: f64,
}

impl Tracker {
    fn new() -> Self {
        Self { cases: 0, max: 0.0 }
    }

    fn see(&mut self, a: f64, b: f64) {
        self.cases += 1;
        self.max = self.max.max((a - b).abs());
    }

    fn finish(self, lemma: Lemma) -> CheckResult {
        CheckResult {
            lemma,
            cases: self.cases,
            max_abs_discrepancy: self.max,
            tolerance: STATS_TOLERANCE,
            pass: self.max <= STATS_TOLERANCE,
        }
    }
}

/// Enumeration checks: hypergeometric moments and `Pr[K ⊆ J]` for
/// `n <= 12`, disjoint-sample covariance for `N <= 8`, the ξ second-moment
/// coefficient for `n <= 8`.
pub fn stats_report(master_seed: u64, perturbation: Option<Perturbation>) -> Result<StatsReport> {
    let factor = |lemma: Lemma| match perturbation {
        Some(p) if p.lemma == lemma => 1.0 + p.relative,
        _ => 1.0,
    };
    let root = RngStream::root(master_seed).derive(streams::DATA);
    let mut checks = Vec::new();

    let mut hg = Tracker::new();
    let mut within = Tracker::new();
    for n in 1..=12 {
        for b in 1..=n {
            let all = oracle::combinations(n, b);
            for m in 0..=n {
                let (mean, var) = subset_stats::hypergeom_moments(n, m, b)?;
                let (em, ev) = oracle::enumerate_hypergeom(n, m, b);
                let f = factor(Lemma::HypergeometricMoments);
                hg.see(mean * f, em);
                hg.see(var * f, ev);
                let p = subset_stats::prob_batch_within_subset(n, m, b)? * factor(Lemma::BatchWithinSubset);
                let hits = all.iter().filter(|k| k.iter().all(|&i| i < m)).count();
                within.see(p, hits as f64 / all.len() as f64);
            }
        }
    }
    checks.push(hg.finish(Lemma::HypergeometricMoments));
    checks.push(within.finish(Lemma::BatchWithinSubset));

    let mut dc = Tracker::new();
    for big_n in 2..=8 {
        let pop = random_population(&mut root.derive(big_n as u64), big_n, 2);
        for n1 in 1..big_n {
            for n2 in 1..=big_n - n1 {
                let f = factor(Lemma::DisjointSampleCovariance);
                let closed = subset_stats::disjoint_sample_cov(&pop, n1, n2)?;
                let exact = oracle::enumerate_disjoint_cov(&pop, n1, n2);
                for (a, e) in [(&closed.var1, &exact.var1), (&closed.var2, &exact.var2), (&closed.cov, &exact.cov)] {
                    dc.see(0.0, a.scaled(f).max_abs_diff(e));
                }
            }
        }
    }
    checks.push(dc.finish(Lemma::DisjointSampleCovariance));

    let mut xi = Tracker::new();
    for n in 2..=8 {
        let grads = random_population(&mut root.derive(100 + n as u64), n, 2);
        let tr = population_variance(&grads)?.trace();
        for m in 1..n {
            for b in 1..=n {
                let closed = subset_stats::xi_second_moment_coeff(n, m, b)? * tr * factor(Lemma::XiSecondMoment);
                xi.see(closed, incoherence::enumerate_xi_second_moment(&grads, m, b)?);
            }
        }
    }
    checks.push(xi.finish(Lemma::XiSecondMoment));

    let pass = checks.iter().all(|c| c.pass);
    Ok(StatsReport {
        command: "stats-check",
        master_seed,
        perturbation,
        checks,
        pass,
    })
}

pub fn cmd_stats_check(master_seed: u64, perturbation: Option<Perturbation>) -> Result<(String, bool)> {
    let report = stats_report(master_seed, perturbation)?;
    Ok((to_json_string(&report)?, report.pass))
}

fn default_analytic_outer() -> usize {
    200
}

fn default_z_limit() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticConfig {
    pub setup: AnalyticSetup,
    #[serde(default)]
    pub variant: PriorVariant,
    #[serde(default = "default_analytic_outer", rename = "R_outer")]
    pub r_outer: usize,
    #[serde(default = "default_runs", rename = "R_inner")]
    pub r_inner: usize,
    pub master_seed: u64,
    /// The verdict fails when `|z_score|` exceeds this.
    #[serde(default = "default_z_limit")]
    pub z_limit: f64,
}

impl AnalyticConfig {
    pub fn parse(text: &str) -> Result<Self> {
        parse_json(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalyticReport {
    pub command: &'static str,
    pub config: AnalyticConfig,
    pub verdict: Verdict,
    /// The gradient-norm style comparison value for the same setup.
    pub comparison_bound: f64,
    pub pass: bool,
}

pub fn analytic_report(cfg: &AnalyticConfig) -> Result<AnalyticReport> {
    let verdict = analytic::simulate_and_verify(&cfg.setup, cfg.variant, cfg.r_outer, cfg.r_inner, cfg.master_seed)?;
    Ok(AnalyticReport {
        command: "analytic",
        config: cfg.clone(),
        comparison_bound: analytic::comparison_bound(&cfg.setup)?,
        pass: verdict.z_score.abs() <= cfg.z_limit,
        verdict,
    })
}

pub fn cmd_analytic(cfg: &AnalyticConfig) -> Result<(String, bool)> {
    let report = analytic_report(cfg)?;
    Ok((to_json_string(&report)?, report.pass))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_config(epochs: usize) -> String {
        format!(
            r#"{{
                "dataset": {{"synthetic": {{"family": {{"kind": "two-blob", "separation": 3.0, "dim": 2, "noise": 1.0}}, "n": 40, "seed": 3}}}},
                "model": {{"architecture": {{"kind": "softmax-regression"}}, "surrogate": "cross-entropy", "eval_loss": "zero-one"}},
                "schedule": {{"eta": {{"kind": "constant", "eta0": 0.05}}, "beta": {{"kind": "constant", "beta0": 200.0}}}},
                "epochs": {epochs},
                "batch_size": 8,
                "estimators": ["sgld-bounded", "baseline-gradnorm"],
                "R_outer": 3,
                "R_inner": 2,
                "loss": {{"kind": "zero-one"}},
                "master_seed": 11,
                "eval_fraction": 0.25,
                "runs": 2
            }}"#
        )
    }

    fn resolved(text: &str) -> Resolved {
        ExperimentConfig::parse(text).unwrap().resolve(None).unwrap()
    }

    #[test]
    fn unknown_key_reports_path() {
        let text = blob_config(1).replace("\"eta0\"", "\"eta_0\"");
        match ExperimentConfig::parse(&text) {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("schedule.eta"), "{path}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_m_rejected() {
        let text = blob_config(1).replace("\"runs\": 2", "\"runs\": 2, \"m\": 30");
        match ExperimentConfig::parse(&text).unwrap().resolve(None) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "m"),
            other => panic!("{other:?}"),
        }
        let text = blob_config(1).replace("\"runs\": 2", "\"runs\": 2, \"m\": 20");
        match ExperimentConfig::parse(&text).unwrap().resolve(None) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "estimators[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_epochs_header_only() {
        let csv = cmd_train(&resolved(&blob_config(0))).unwrap();
        let last = csv.lines().last().unwrap();
        assert_eq!(last, TRAIN_COLUMNS);
        assert!(csv.lines().all(|l| l.starts_with('#') || l == TRAIN_COLUMNS));
    }

    #[test]
    fn train_emits_rows_per_run_and_epoch() {
        let r = resolved(&blob_config(2));
        let csv = cmd_train(&r).unwrap();
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), 4);
        let fields: Vec<&str> = rows[3].split(',').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(fields[0], "1");
        assert_eq!(fields[1], "2");
        assert_eq!(fields[2], (2 * epoch_length(r.n(), 8)).to_string());
        assert!(!fields[11].is_empty());
    }

    #[test]
    fn identical_examples_zero_xi() {
        let text = r#"{
            "dataset": {"synthetic": {"family": {"kind": "point-mass", "value": [1.5]}, "n": 12, "seed": 0}},
            "model": {"architecture": {"kind": "linear-regression"}, "surrogate": "squared", "eval_loss": "squared"},
            "schedule": {"eta": {"kind": "constant", "eta0": 0.01}, "beta": {"kind": "constant", "beta0": 50.0}},
            "epochs": 3, "batch_size": 4, "loss": {"kind": "subgaussian", "sigma": 1.0}, "master_seed": 2
        }"#;
        let csv = cmd_train(&resolved(text)).unwrap();
        for row in csv.lines().filter(|l| !l.starts_with('#')).skip(1) {
            let f: Vec<&str> = row.split(',').collect();
            assert_eq!(f[7].parse::<f64>().unwrap(), 0.0);
            assert_eq!(f[5].parse::<f64>().unwrap(), 0.0);
        }
    }

    #[test]
    fn bound_records_and_delta() {
        let r = resolved(&blob_config(1));
        let report = bound_report(&r).unwrap();
        assert_eq!(report.estimates.len(), 2);
        assert_eq!(report.estimates[0].estimator_id, EstimatorId::SgldBounded);
        assert_eq!(report.estimates[1].estimator_id, EstimatorId::BaselineGradnorm);
        let text = blob_config(1)
            .replace("\"sgld-bounded\", ", "")
            .replace("\"runs\": 2", "\"runs\": 2, \"m\": 20, \"delta\": 0.05");
        let report = bound_report(&resolved(&text)).unwrap();
        assert_eq!(report.estimates.last().unwrap().estimator_id, EstimatorId::HighProb);
    }

    #[test]
    fn seed_override_changes_echo() {
        let r = ExperimentConfig::parse(&blob_config(1)).unwrap().resolve(Some(99)).unwrap();
        assert_eq!(r.estimator.master_seed, 99);
        assert!(r.header_lines("train").unwrap().contains("\"master_seed\":99"));
    }

    #[test]
    fn stats_check_passes_and_detects_perturbation() {
        let clean = stats_report(0, None).unwrap();
        assert!(clean.pass, "{clean:?}");
        for lemma in [
            Lemma::HypergeometricMoments,
            Lemma::BatchWithinSubset,
            Lemma::DisjointSampleCovariance,
            Lemma::XiSecondMoment,
        ] {
            let bad = stats_report(0, Some(Perturbation { lemma, relative: 1e-6 })).unwrap();
            assert!(!bad.pass);
            let failed: Vec<Lemma> = bad.checks.iter().filter(|c| !c.pass).map(|c| c.lemma).collect();
            assert_eq!(failed, vec![lemma]);
        }
    }
}
