//! Learning-rate and inverse-temperature schedules and the SGLD / LD simulator.
//!
//! Steps are numbered `t = 1..=T`; step `t` maps `W_{t-1}` to `W_t` with
//! `η_t`, `β_t` and batch `K_t`:
//!
//! ```text
//! W_t = W_{t-1} - η_t ∇R̃_{K_t}(W_{t-1}) + sqrt(2 η_t / β_t) ε_t
//! ```
//!
//! Initialization, minibatch selection and injected noise each draw from their
//! own [`RngStream`], so two runs with equal seeds share batches and noise.
//! Full-batch runs (`b = n`) never touch the minibatch stream.

use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::incoherence::{self, KlLedger, PriorContext, KL_CONST_DEFAULT};
use crate::models::{ModelSpec, ParamPoint, Workspace};
use crate::numerics::{self, streams, RngStream, RunningMean};
use crate::subset_stats::{BatchSampler, MinibatchPlan};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EtaSchedule {
    Constant { eta0: f64 },
    /// `η₀ ρ^t`
    Geometric { eta0: f64, rho: f64 },
    /// `η₀ t^{-α}`
    Polynomial { eta0: f64, alpha: f64 },
    /// `η₀ rate^{t / decay_steps}`, floored exponent when `staircase`.
    StepDecay {
        eta0: f64,
        decay_steps: f64,
        decay_rate: f64,
        #[serde(default)]
        staircase: bool,
    },
}

impl EtaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        let tf = t as f64;
        match *self {
            EtaSchedule::Constant { eta0 } => eta0,
            EtaSchedule::Geometric { eta0, rho } => eta0 * rho.powf(tf),
            EtaSchedule::Polynomial { eta0, alpha } => eta0 * tf.powf(-alpha),
            EtaSchedule::StepDecay {
                eta0,
                decay_steps,
                decay_rate,
                staircase,
            } => {
                let e = tf / decay_steps;
                eta0 * decay_rate.powf(if staircase { e.floor() } else { e })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EtaSchedule::Constant { eta0 } => eta0 > 0.0,
            EtaSchedule::Geometric { eta0, rho } => eta0 > 0.0 && rho > 0.0 && rho < 1.0,
            EtaSchedule::Polynomial { eta0, alpha } => eta0 > 0.0 && alpha > 0.0,
            EtaSchedule::StepDecay {
                eta0,
                decay_steps,
                decay_rate,
                ..
            } => eta0 > 0.0 && decay_steps > 0.0 && decay_rate > 0.0 && decay_rate <= 1.0,
        };
        let finite = match *self {
            EtaSchedule::Constant { eta0 } => eta0.is_finite(),
            EtaSchedule::Geometric { eta0, rho } => eta0.is_finite() && rho.is_finite(),
            EtaSchedule::Polynomial { eta0, alpha } => eta0.is_finite() && alpha.is_finite(),
            EtaSchedule::StepDecay {
                eta0,
                decay_steps,
                decay_rate,
                ..
            } => eta0.is_finite() && decay_steps.is_finite() && decay_rate.is_finite(),
        };
        if ok && finite {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BetaSchedule {
    Constant { beta0: f64 },
    /// `min{c exp(t / k), cap}`
    CappedExponential { c: f64, k: f64, cap: f64 },
    /// `β₀ (n-1)^θ (1 - ν^t)`
    Ramp { beta0: f64, n: usize, theta: f64, nu: f64 },
}

impl BetaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        let tf = t as f64;
        match *self {
            BetaSchedule::Constant { beta0 } => beta0,
            BetaSchedule::CappedExponential { c, k, cap } => (c * (tf / k).exp()).min(cap),
            BetaSchedule::Ramp { beta0, n, theta, nu } => beta0 * ((n - 1) as f64).powf(theta) * (1.0 - nu.powf(tf)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BetaSchedule::Constant { beta0 } => beta0 > 0.0 && beta0.is_finite(),
            BetaSchedule::CappedExponential { c, k, cap } => {
                c > 0.0 && k > 0.0 && cap > 0.0 && c.is_finite() && k.is_finite() && cap.is_finite()
            }
            BetaSchedule::Ramp { beta0, n, theta, nu } => {
                beta0 > 0.0 && beta0.is_finite() && n >= 2 && theta.is_finite() && (0.0..1.0).contains(&nu)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid inverse-temperature schedule {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub eta: EtaSchedule,
    pub beta: BetaSchedule,
}

impl ScheduleSpec {
    pub fn constant(eta0: f64, beta0: f64) -> Self {
        Self {
            eta: EtaSchedule::Constant { eta0 },
            beta: BetaSchedule::Constant { beta0 },
        }
    }

    pub fn eta(&self, t: usize) -> f64 {
        self.eta.at(t)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta.at(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.eta.validate()?;
        self.beta.validate()
    }

    /// `Σ_{t=1}^{T} β_t η_t`
    pub fn sum_beta_eta(&self, steps: usize) -> f64 {
        let mut s = numerics::CompensatedSum::default();
        (1..=steps).for_each(|t| s.add(self.beta(t) * self.eta(t)));
        s.value()
    }

    pub fn sum_eta(&self, steps: usize) -> f64 {
        let mut s = numerics::CompensatedSum::default();
        (1..=steps).for_each(|t| s.add(self.eta(t)));
        s.value()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Zero,
    Gaussian { std: f64 },
}

impl InitSpec {
    /// `W_0`; never looks at the data.
    pub fn draw(&self, spec: &ModelSpec, rng: &mut RngStream) -> Result<ParamPoint> {
        match *self {
            InitSpec::Zero => Ok(ParamPoint::zeros(spec)),
            InitSpec::Gaussian { std } => {
                if !(std > 0.0 && std.is_finite()) {
                    return Err(Error::invalid(format!("init std must be positive, got {std}")));
                }
                let w = numerics::gauss_vec(rng, spec.param_dim())?
                    .iter()
                    .map(|e| std * e)
                    .collect();
                ParamPoint::new(spec, w)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRetention {
    /// Every iterate `W_0..W_T`.
    #[default]
    All,
    /// Only `W_0` and `W_T`.
    Endpoints,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub init: InitSpec,
    pub kl_const: f64,
    pub retention: WeightRetention,
    /// Record `tr Σ̂` at every iterate (one full pass over the data per step).
    pub track_trace: bool,
}

impl RunOptions {
    pub fn new(steps: usize, batch_size: usize) -> Self {
        Self {
            steps,
            batch_size,
            init: InitSpec::Zero,
            kl_const: KL_CONST_DEFAULT,
            retention: WeightRetention::All,
            track_trace: false,
        }
    }
}

/// The three independent streams that drive one trajectory.
#[derive(Clone, Debug)]
pub struct TrajectorySeeds {
    pub init: RngStream,
    pub minibatch: RngStream,
    pub noise: RngStream,
}

impl TrajectorySeeds {
    pub fn new(init: RngStream, minibatch: RngStream, noise: RngStream) -> Self {
        Self { init, minibatch, noise }
    }

    pub fn from_root(root: &RngStream) -> Self {
        Self {
            init: root.derive(streams::INIT),
            minibatch: root.derive(streams::MINIBATCH),
            noise: root.derive(streams::NOISE),
        }
    }

    pub fn from_master(master_seed: u64) -> Self {
        Self::from_root(&RngStream::root(master_seed))
    }

    /// Same init and batches, noise re-keyed by `inner`.
    pub fn with_noise_replica(&self, inner: u64) -> Self {
        Self {
            init: self.init.clone(),
            minibatch: self.minibatch.clone(),
            noise: self.noise.derive(streams::INNER).derive(inner),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SeedEcho {
    pub master_seed: u64,
    pub init_stream: u64,
    pub minibatch_stream: u64,
    pub noise_stream: u64,
}

impl From<&TrajectorySeeds> for SeedEcho {
    fn from(s: &TrajectorySeeds) -> Self {
        Self {
            master_seed: s.noise.master_seed(),
            init_stream: s.init.stream_id(),
            minibatch_stream: s.minibatch.stream_id(),
            noise_stream: s.noise.stream_id(),
        }
    }
}

/// Incoherence diagnostics of one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IncoherenceStep {
    pub xi_sq: f64,
    pub kl_increment: f64,
    pub b_out: usize,
    pub held_out_norm: f64,
    pub forecast_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub eta: f64,
    pub beta: f64,
    pub batch: Vec<usize>,
    /// `||∇R̃_{K_t}(W_{t-1})||²`
    pub grad_sq: f64,
    pub incoherence: Option<IncoherenceStep>,
    /// `tr Σ̂(W_{t-1})` and the largest per-example gradient norm.
    pub trace_sigma: Option<f64>,
    pub max_grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub weights: Vec<ParamPoint>,
    pub steps: Vec<StepRecord>,
    pub kl_total: f64,
    pub seeds: SeedEcho,
}

impl TrajectoryRecord {
    pub fn final_weights(&self) -> &ParamPoint {
        self.weights.last().expect("W_0 is always retained")
    }

    pub fn kl_increments(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| s.incoherence.as_ref().map_or(0.0, |i| i.kl_increment))
            .collect()
    }
}

/// What an observer sees after step `t`.
#[derive(Debug)]
pub struct StepView<'a> {
    pub t: usize,
    pub eta: f64,
    pub beta: f64,
    pub w: &'a [f64],
    pub w_next: &'a [f64],
    pub batch: &'a [usize],
    pub batch_grad: &'a [f64],
    pub xi: Option<&'a [f64]>,
    pub record: &'a StepRecord,
}

pub trait StepObserver {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()>;
}

/// Optional machinery attached to a run.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Fixed batch sequence instead of sampling from the minibatch stream.
    pub plan: Option<&'a MinibatchPlan>,
    /// Prior for incoherence and KL tracking.
    pub prior: Option<&'a PriorContext<'a>>,
    pub observers: Vec<&'a mut dyn StepObserver>,
}

impl<'a> Hooks<'a> {
    pub fn with_prior(prior: &'a PriorContext<'a>) -> Self {
        Self {
            prior: Some(prior),
            ..Self::default()
        }
    }
}

fn noisy_update(w: &[f64], grad: &[f64], eta: f64, beta: f64, rng: &mut RngStream, out: &mut Vec<f64>) {
    let scale = (2.0 * eta / beta).sqrt();
    out.clear();
    out.extend(
        w.iter()
            .zip(grad)
            .map(|(wi, gi)| wi - eta * gi + scale * rng.standard_normal()),
    );
}

fn check_rates(eta: f64, beta: f64, t: usize) -> Result<()> {
    if eta > 0.0 && beta > 0.0 && eta.is_finite() && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("step {t}: need finite eta, beta > 0, got eta={eta}, beta={beta}")))
    }
}

/// One SGLD update from `w` on the given batch.
pub fn sgld_step(
    spec: &ModelSpec,
    w: &ParamPoint,
    batch: &[&crate::data_io::Example],
    eta: f64,
    beta: f64,
    rng: &mut RngStream,
) -> Result<ParamPoint> {
    check_rates(eta, beta, 0)?;
    let g = crate::models::batch_grad(spec, w, batch)?;
    let mut out = Vec::with_capacity(w.len());
    noisy_update(w.as_slice(), &g, eta, beta, rng, &mut out);
    numerics::check_finite(&out, "weights after SGLD step")?;
    ParamPoint::new(spec, out)
}

/// Runs `opts.steps` SGLD steps with batch size `opts.batch_size`.
pub fn run_sgld(
    spec: &ModelSpec,
    ds: &Dataset,
    schedule: &ScheduleSpec,
    opts: &RunOptions,
    seeds: TrajectorySeeds,
    mut hooks: Hooks<'_>,
) -> Result<TrajectoryRecord> {
    let n = ds.len();
    let b = opts.batch_size;
    if b == 0 || b > n {
        return Err(Error::invalid(format!("batch size must satisfy 1 <= b <= n, got b = {b}, n = {n}")));
    }
    spec.check_dataset(ds)?;
    schedule.validate()?;
    if let Some(plan) = hooks.plan {
        if plan.population() != n || plan.len() < opts.steps {
            return Err(Error::invalid(format!(
                "minibatch plan covers {} steps over {} indices; need {} steps over {n}",
                plan.len(),
                plan.population(),
                opts.steps
            )));
        }
    }
    let seed_echo = SeedEcho::from(&seeds);
    let TrajectorySeeds {
        mut init,
        mut minibatch,
        mut noise,
    } = seeds;

    let d = spec.param_dim();
    let w0 = opts.init.draw(spec, &mut init)?;
    let mut ledger = KlLedger::new(opts.kl_const)?;
    let mut sampler = BatchSampler::new(n, b)?;
    let full: Vec<usize> = (0..n).collect();
    let mut ws = Workspace::new(spec);
    let mut grad_acc = RunningMean::new(d);

    let mut weights = vec![w0.clone()];
    let mut steps = Vec::with_capacity(opts.steps);
    let mut w = w0.0.into_inner();
    let mut w_next = Vec::with_capacity(d);

    for t in 1..=opts.steps {
        let eta = schedule.eta(t);
        let beta = schedule.beta(t);
        check_rates(eta, beta, t)?;
        let batch: &[usize] = match hooks.plan {
            Some(plan) => plan.batch(t),
            None if b == n => &full,
            None => sampler.next(&mut minibatch),
        };

        let (grad, xi, incoherence) = match hooks.prior {
            Some(prior) => {
                let terms = prior.step_terms(spec, &mut ws, &w, batch);
                let xi_sq = numerics::norm_sq(&terms.xi);
                let kl = incoherence::kl_increment_from_sq(eta, beta, xi_sq, opts.kl_const)?;
                ledger.accumulate(kl)?;
                let step = IncoherenceStep {
                    xi_sq,
                    kl_increment: kl,
                    b_out: terms.b_out,
                    held_out_norm: terms.held_out_norm,
                    forecast_norm: terms.forecast_norm,
                };
                (terms.batch_grad, Some(terms.xi), Some(step))
            }
            None => {
                grad_acc.reset();
                for &i in batch {
                    grad_acc.push(ws.loss_and_grad(spec, &w, ds.get(i)).1);
                }
                (grad_acc.mean().to_vec(), None, None)
            }
        };
        numerics::check_finite(&grad, &format!("gradient at step {t}"))?;

        let (trace_sigma, max_grad_norm) = if opts.track_trace {
            let (tr, max) = incoherence::trace_sigma_hat(spec, &mut ws, &w, ds);
            (Some(tr), Some(max))
        } else {
            (None, None)
        };

        noisy_update(&w, &grad, eta, beta, &mut noise, &mut w_next);
        if w_next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("weights became non-finite at step {t}")));
        }

        let record = StepRecord {
            t,
            eta,
            beta,
            batch: batch.to_vec(),
            grad_sq: numerics::norm_sq(&grad),
            incoherence,
            trace_sigma,
            max_grad_norm,
        };
        for obs in hooks.observers.iter_mut() {
            obs.observe(&StepView {
                t,
                eta,
                beta,
                w: &w,
                w_next: &w_next,
                batch,
                batch_grad: &grad,
                xi: xi.as_deref(),
                record: &record,
            })?;
        }
        steps.push(record);
        std::mem::swap(&mut w, &mut w_next);
        if opts.retention == WeightRetention::All {
            weights.push(ParamPoint::new(spec, w.clone())?);
        }
    }
    if opts.retention == WeightRetention::Endpoints && opts.steps > 0 {
        weights.push(ParamPoint::new(spec, w)?);
    }
    Ok(TrajectoryRecord {
        weights,
        steps,
        kl_total: ledger.total(),
        seeds: seed_echo,
    })
}

/// Full-batch Langevin dynamics: [`run_sgld`] with `b = n`.
pub fn run_ld(
    spec: &ModelSpec,
    ds: &Dataset,
    schedule: &ScheduleSpec,
    opts: &RunOptions,
    seeds: TrajectorySeeds,
    hooks: Hooks<'_>,
) -> Result<TrajectoryRecord> {
    let opts = RunOptions {
        batch_size: ds.len(),
        ..opts.clone()
    };
    run_sgld(spec, ds, schedule, &opts, seeds, hooks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Example;
    use crate::models::{Architecture, EvalLoss, Surrogate};

    fn scalar_ds(zs: &[f64]) -> Dataset {
        Dataset::from_examples(zs.iter().map(|&z| Example::scalar_target(z).unwrap()).collect()).unwrap()
    }

    fn softmax() -> ModelSpec {
        ModelSpec::new(Architecture::SoftmaxRegression, 2, 2, Surrogate::CrossEntropy, EvalLoss::ZeroOne).unwrap()
    }

    fn blobs(n: usize) -> Dataset {
        let mut rng = RngStream::new(5, 5);
        Dataset::from_examples(
            (0..n)
                .map(|i| {
                    let c = i % 2;
                    let s = if c == 1 { 1.0 } else { -1.0 };
                    Example::classified(vec![s + rng.standard_normal(), s + rng.standard_normal()], c).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn schedule_values() {
        let s = EtaSchedule::Geometric { eta0: 2.0, rho: 0.5 };
        assert_eq!(s.at(3), 0.25);
        let p = EtaSchedule::Polynomial { eta0: 1.0, alpha: 2.0 };
        assert_eq!(p.at(4), 1.0 / 16.0);
        let sd = EtaSchedule::StepDecay {
            eta0: 1.0,
            decay_steps: 10.0,
            decay_rate: 0.5,
            staircase: true,
        };
        assert_eq!(sd.at(19), 0.5);
        let b = BetaSchedule::CappedExponential {
            c: 10.0,
            k: 100.0,
            cap: 55000.0,
        };
        assert!((b.at(100) - 10.0 * 1f64.exp()).abs() < 1e-12);
        assert_eq!(b.at(100_000), 55000.0);
        let r = BetaSchedule::Ramp {
            beta0: 1.0,
            n: 101,
            theta: 0.5,
            nu: 0.5,
        };
        assert!((r.at(1) - 5.0).abs() < 1e-12);
        assert!(EtaSchedule::Geometric { eta0: 1.0, rho: 1.0 }.validate().is_err());
        assert!(BetaSchedule::Constant { beta0: 0.0 }.validate().is_err());
    }

    #[test]
    fn geometric_partial_sums_converge() {
        let s = ScheduleSpec {
            eta: EtaSchedule::Geometric { eta0: 1.0, rho: 0.9 },
            beta: BetaSchedule::Constant { beta0: 1.0 },
        };
        let limit = 0.9 / 0.1;
        let mut prev = 0.0;
        for steps in [1, 10, 100, 1000] {
            let sum = s.sum_eta(steps);
            assert!(sum > prev && sum <= limit + 1e-12);
            prev = sum;
        }
        assert!((limit - prev).abs() < 1e-10);
    }

    #[test]
    fn huge_beta_is_gradient_descent() {
        let spec = ModelSpec::scalar_mean();
        let z = Example::scalar_target(1.5).unwrap();
        let w = ParamPoint::new(&spec, vec![0.25]).unwrap();
        let beta: f64 = 1e40;
        assert!((2.0 * 0.1 / beta).sqrt() < 1e-15);
        let next = sgld_step(&spec, &w, &[&z], 0.1, beta, &mut RngStream::root(1)).unwrap();
        let sgd = 0.25 - 0.1 * 2.0 * (0.25 - 1.5);
        assert!((next.as_slice()[0] - sgd).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_noise_covariance() {
        let spec = ModelSpec::new(Architecture::LinearRegression, 0, 3, Surrogate::Squared, EvalLoss::Squared).unwrap();
        let z = Example::regression(vec![], vec![0.0; 3]).unwrap();
        let w = ParamPoint::zeros(&spec);
        let (eta, beta) = (0.3, 2.0);
        let var = 2.0 * eta / beta;
        let reps = 10_000;
        let mut rng = RngStream::root(44);
        let draws: Vec<Vec<f64>> = (0..reps)
            .map(|_| sgld_step(&spec, &w, &[&z], eta, beta, &mut rng).unwrap().as_slice().to_vec())
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let c: f64 = draws.iter().map(|x| x[i] * x[j]).sum::<f64>() / reps as f64;
                let expected = if i == j { var } else { 0.0 };
                let se = if i == j { var * (2.0 / reps as f64).sqrt() } else { var / (reps as f64).sqrt() };
                assert!((c - expected).abs() < 5.0 * se, "{i} {j} {c}");
            }
        }
    }

    #[test]
    fn single_example_affine_recursion() {
        let spec = ModelSpec::scalar_mean();
        let z = Example::scalar_target(0.8).unwrap();
        let eta = EtaSchedule::Polynomial { eta0: 0.2, alpha: 0.5 };
        let beta = 30.0;
        let mut rng = RngStream::root(9);
        let mut replay = rng.clone();
        let mut w = ParamPoint::new(&spec, vec![-1.3]).unwrap();
        let mut expected = -1.3;
        for t in 1..=20 {
            let eta_t = eta.at(t);
            w = sgld_step(&spec, &w, &[&z], eta_t, beta, &mut rng).unwrap();
            expected = (1.0 - 2.0 * eta_t) * expected
                + 2.0 * eta_t * 0.8
                + (2.0 * eta_t / beta).sqrt() * replay.standard_normal();
            assert!((w.as_slice()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ld_mean_follows_affine_map() {
        let spec = ModelSpec::scalar_mean();
        let zs = [1.0, -0.5, 2.0, 0.3];
        let zbar = zs.iter().sum::<f64>() / 4.0;
        let ds = scalar_ds(&zs);
        let schedule = ScheduleSpec::constant(0.05, 20.0);
        let opts = RunOptions::new(30, 4);
        let reps = 4000;
        let finals: Vec<f64> = (0..reps)
            .map(|r| {
                let rec = run_ld(&spec, &ds, &schedule, &opts, TrajectorySeeds::from_master(r), Hooks::default()).unwrap();
                rec.final_weights().as_slice()[0]
            })
            .collect();
        let mut mean = 0.0;
        let mut var: f64 = 0.0;
        for _ in 0..30 {
            mean = (1.0 - 2.0 * 0.05) * mean + 2.0 * 0.05 * zbar;
            var = (1.0 - 0.1f64).powi(2) * var + 2.0 * 0.05 / 20.0;
        }
        let (mc, _) = numerics::mean_and_std_error(&finals);
        let se = (var / reps as f64).sqrt();
        assert!((mc - mean).abs() < 4.0 * se, "{mc} {mean} {se}");
    }

    #[test]
    fn full_batch_sgld_equals_ld() {
        let spec = softmax();
        let ds = blobs(12);
        let schedule = ScheduleSpec::constant(0.1, 50.0);
        let opts = RunOptions {
            init: InitSpec::Gaussian { std: 0.1 },
            ..RunOptions::new(15, 12)
        };
        let a = run_sgld(&spec, &ds, &schedule, &opts, TrajectorySeeds::from_master(3), Hooks::default()).unwrap();
        let ld_opts = RunOptions {
            batch_size: 1,
            ..opts.clone()
        };
        let b = run_ld(&spec, &ds, &schedule, &ld_opts, TrajectorySeeds::from_master(3), Hooks::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.steps.iter().all(|s| s.batch.len() == 12));
    }

    #[test]
    fn zero_steps_is_initialization() {
        let spec = softmax();
        let ds = blobs(6);
        let rec = run_sgld(&spec, &ds, &ScheduleSpec::constant(0.1, 1.0), &RunOptions::new(0, 2), TrajectorySeeds::from_master(1), Hooks::default()).unwrap();
        assert_eq!(rec.weights.len(), 1);
        assert!(rec.steps.is_empty());
        assert_eq!(rec.kl_total, 0.0);
    }

    #[test]
    fn reproducible_and_validated() {
        let spec = softmax();
        let ds = blobs(20);
        let schedule = ScheduleSpec::constant(0.1, 100.0);
        let opts = RunOptions::new(25, 4);
        let a = run_sgld(&spec, &ds, &schedule, &opts, TrajectorySeeds::from_master(8), Hooks::default()).unwrap();
        let b = run_sgld(&spec, &ds, &schedule, &opts, TrajectorySeeds::from_master(8), Hooks::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weights.len(), 26);
        assert!(a.steps.iter().all(|s| s.batch.len() == 4));
        assert!(run_sgld(&spec, &ds, &schedule, &RunOptions::new(5, 21), TrajectorySeeds::from_master(8), Hooks::default()).is_err());
    }

    #[test]
    fn noise_replica_shares_batches() {
        let spec = softmax();
        let ds = blobs(20);
        let schedule = ScheduleSpec::constant(0.1, 100.0);
        let opts = RunOptions::new(10, 3);
        let base = TrajectorySeeds::from_master(8);
        let a = run_sgld(&spec, &ds, &schedule, &opts, base.with_noise_replica(0), Hooks::default()).unwrap();
        let b = run_sgld(&spec, &ds, &schedule, &opts, base.with_noise_replica(1), Hooks::default()).unwrap();
        assert!(a.steps.iter().zip(&b.steps).all(|(x, y)| x.batch == y.batch));
        assert_ne!(a.final_weights(), b.final_weights());
    }

    #[test]
    fn non_finite_weights_are_reported() {
        let spec = ModelSpec::scalar_mean();
        let ds = scalar_ds(&[1e300, 1e300]);
        let err = run_ld(&spec, &ds, &ScheduleSpec::constant(1e10, 1.0), &RunOptions::new(5, 2), TrajectorySeeds::from_master(1), Hooks::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
