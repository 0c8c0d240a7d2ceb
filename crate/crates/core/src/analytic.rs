//! Langevin mean estimation with squared loss `(z - w)²`: closed forms and an
//! end-to-end Monte-Carlo check of the bound pipeline.
//!
//! The model is a single scalar `w` predicting the target `z`; training is
//! full-batch LD with `m = n - 1`. Two priors are supported:
//!
//! * [`PriorVariant::ReferenceExample`]: the held-out gradient is forecast at
//!   the reference example `z = 0`, so `KL_t = (β/n²) z*² η_t`.
//! * [`PriorVariant::HeldInMean`]: the general held-in-mean forecast, with
//!   `KL_t = (β/n²)(z* - z̄_J)² η_t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::bounds::{self, EstimatorConfig};
use crate::data_io::{draw_examples, Dataset, Example, Family};
use crate::dynamics::{BetaSchedule, EtaSchedule, ScheduleSpec};
use crate::incoherence::PriorForecast;
use crate::models::ModelSpec;
use crate::numerics::{mean_and_std_error, streams, LossKind, RngStream};
use crate::subset_stats::draw_subset;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScalarFamily {
    Normal { mean: f64, std: f64 },
    /// Closed forms only; cannot be simulated.
    Moments { abs_mean: f64, second_moment: f64 },
}

impl ScalarFamily {
    pub fn abs_mean(&self) -> f64 {
        match *self {
            ScalarFamily::Normal { mean, std } => folded_normal_mean(mean, std),
            ScalarFamily::Moments { abs_mean, .. } => abs_mean,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            ScalarFamily::Normal { mean, std } => mean * mean + std * std,
            ScalarFamily::Moments { second_moment, .. } => second_moment,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalarFamily::Normal { mean, std } => mean.is_finite() && std > 0.0 && std.is_finite(),
            ScalarFamily::Moments { abs_mean, second_moment } => {
                abs_mean >= 0.0 && second_moment.is_finite() && abs_mean * abs_mean <= second_moment
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid scalar family {self:?}")))
        }
    }
}

/// `E|X|` for `X ~ N(μ, s²)`.
pub fn folded_normal_mean(mu: f64, s: f64) -> f64 {
    let phi_neg = 0.5 * (1.0 + erf(-mu / (s * std::f64::consts::SQRT_2)));
    s * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * s * s)).exp() + mu * (1.0 - 2.0 * phi_neg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorVariant {
    #[default]
    ReferenceExample,
    HeldInMean,
}

impl PriorVariant {
    pub fn forecast(&self) -> PriorForecast {
        match self {
            PriorVariant::ReferenceExample => PriorForecast::ReferenceExample {
                example: Example::scalar_target(0.0).expect("finite"),
            },
            PriorVariant::HeldInMean => PriorForecast::HeldInMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticSetup {
    pub n: usize,
    pub family: ScalarFamily,
    pub beta: f64,
    pub eta: EtaSchedule,
    pub steps: usize,
    /// Subgaussian constant of the loss, supplied by the caller.
    pub sigma: f64,
}

impl AnalyticSetup {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || !(self.beta > 0.0) || !self.beta.is_finite() || !(self.sigma > 0.0) {
            return Err(Error::invalid("analytic setup needs n >= 2, β > 0, σ > 0"));
        }
        self.family.validate()?;
        self.eta.validate()
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            eta: self.eta.clone(),
            beta: BetaSchedule::Constant { beta0: self.beta },
        }
    }

    pub fn sum_eta(&self) -> f64 {
        self.schedule().sum_eta(self.steps)
    }

    fn n_sq(&self) -> f64 {
        (self.n * self.n) as f64
    }
}

/// `(β/n²) z*² η`
pub fn closed_form_step_kl(setup: &AnalyticSetup, z_star: f64, eta: f64) -> f64 {
    setup.beta / setup.n_sq() * z_star * z_star * eta
}

/// `(β/n²)(z* - z̄_J)² η`
pub fn held_in_mean_step_kl(setup: &AnalyticSetup, z_star: f64, held_in_mean: f64, eta: f64) -> f64 {
    setup.beta / setup.n_sq() * (z_star - held_in_mean).powi(2) * eta
}

/// `E|z| sqrt(2σ² (β/n²) Σ_t η_t)`
pub fn closed_form_bound(setup: &AnalyticSetup) -> Result<f64> {
    setup.validate()?;
    Ok(setup.family.abs_mean() * scale(setup))
}

fn scale(setup: &AnalyticSetup) -> f64 {
    (2.0 * setup.sigma * setup.sigma * setup.beta / setup.n_sq() * setup.sum_eta()).sqrt()
}

/// `sqrt(2σ² (β/n²) E[z²] Σ_t η_t)`
pub fn comparison_bound(setup: &AnalyticSetup) -> Result<f64> {
    setup.validate()?;
    Ok(setup.family.second_moment().sqrt() * scale(setup))
}

/// Held-in-mean analogue of [`closed_form_bound`] for a normal family:
/// `z* - z̄_J ~ N(0, s² n/(n-1))`.
pub fn held_in_mean_bound(setup: &AnalyticSetup) -> Result<f64> {
    setup.validate()?;
    match setup.family {
        ScalarFamily::Normal { std, .. } => {
            let n = setup.n as f64;
            Ok(folded_normal_mean(0.0, std * (n / (n - 1.0)).sqrt()) * scale(setup))
        }
        ScalarFamily::Moments { .. } => Err(Error::Unsupported("held-in-mean closed form needs a normal family".into())),
    }
}

/// Exact bound for one fixed sample, averaging over the held-out index.
pub fn fixed_sample_bound(setup: &AnalyticSetup, zs: &[f64], variant: PriorVariant) -> Result<f64> {
    setup.validate()?;
    if zs.len() != setup.n {
        return Err(Error::Dimension(format!("expected {} values, got {}", setup.n, zs.len())));
    }
    let total: f64 = zs.iter().sum();
    let n = setup.n as f64;
    let gap = |z: f64| match variant {
        PriorVariant::ReferenceExample => z.abs(),
        PriorVariant::HeldInMean => (z - (total - z) / (n - 1.0)).abs(),
    };
    Ok(zs.iter().map(|&z| gap(z)).sum::<f64>() / n * scale(setup))
}

fn estimator_config(setup: &AnalyticSetup, variant: PriorVariant, r_inner: usize, master_seed: u64) -> EstimatorConfig {
    EstimatorConfig {
        r_outer: 1,
        r_inner,
        forecast: variant.forecast(),
        ..EstimatorConfig::new(
            setup.n - 1,
            setup.n,
            setup.steps,
            setup.schedule(),
            LossKind::Subgaussian { sigma: setup.sigma },
            master_seed,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub mc_estimate: f64,
    pub std_error: f64,
    pub closed_form: f64,
    pub z_score: f64,
    pub variant: PriorVariant,
    /// Largest `|MC KL_t - closed-form KL_t|` over all steps and replicas.
    pub max_step_kl_error: f64,
    #[serde(rename = "R_outer")]
    pub r_outer: usize,
    #[serde(rename = "R_inner")]
    pub r_inner: usize,
}

/// Runs the general SGLD / incoherence pipeline on the mean-estimation model.
/// Each outer replica draws a fresh sample `S` and held-out index; inner
/// replicas redraw the noise. The estimate is the mean over outer replicas of
/// `sqrt(2σ² Σ_t Ê^{inner} KL_t)`.
pub fn simulate_and_verify(
    setup: &AnalyticSetup,
    variant: PriorVariant,
    r_outer: usize,
    r_inner: usize,
    master_seed: u64,
) -> Result<Verdict> {
    setup.validate()?;
    if r_outer == 0 || r_inner == 0 {
        return Err(Error::invalid("R_outer and R_inner must be at least 1"));
    }
    let (mean, std) = match setup.family {
        ScalarFamily::Normal { mean, std } => (mean, std),
        ScalarFamily::Moments { .. } => return Err(Error::Unsupported("simulation needs a normal family".into())),
    };
    let closed_form = match variant {
        PriorVariant::ReferenceExample => closed_form_bound(setup)?,
        PriorVariant::HeldInMean => held_in_mean_bound(setup)?,
    };
    let model = ModelSpec::scalar_mean();
    let cfg = estimator_config(setup, variant, r_inner, master_seed);
    let family = Family::GaussianMean { mean, std, dim: 1 };
    let eta: Vec<f64> = (1..=setup.steps).map(|t| setup.eta.at(t)).collect();
    let two_sigma_sq = 2.0 * setup.sigma * setup.sigma;

    let per_outer = (0..r_outer)
        .into_par_iter()
        .map(|o| -> Result<(f64, f64)> {
            let root = bounds::outer_root(master_seed, o);
            let examples = draw_examples(&family, setup.n, &mut root.derive(streams::DATA))?;
            let zs: Vec<f64> = examples.iter().map(target).collect();
            let ds = Dataset::from_examples(examples)?;
            let subset = draw_subset(setup.n, setup.n - 1, &mut root.derive(streams::SUBSET))?;
            let held_out = subset.complement()[0];
            let z_star = zs[held_out];
            let held_in_mean = subset.indices().iter().map(|&i| zs[i]).sum::<f64>() / (setup.n - 1) as f64;
            let cells = bounds::inner_summaries(&model, &ds, &subset, None, &cfg, &root, false)?;
            let mut max_err: f64 = 0.0;
            for c in &cells {
                for (kl, &e) in c.kl.iter().zip(&eta) {
                    let exact = match variant {
                        PriorVariant::ReferenceExample => closed_form_step_kl(setup, z_star, e),
                        PriorVariant::HeldInMean => held_in_mean_step_kl(setup, z_star, held_in_mean, e),
                    };
                    max_err = max_err.max((kl - exact).abs());
                }
            }
            let inner_total = cells.iter().map(|c| c.kl_total).sum::<f64>() / cells.len() as f64;
            Ok(((two_sigma_sq * inner_total).sqrt(), max_err))
        })
        .collect::<Result<Vec<_>>>()?;

    let values: Vec<f64> = per_outer.iter().map(|v| v.0).collect();
    let max_step_kl_error = per_outer.iter().map(|v| v.1).fold(0.0, f64::max);
    let (mc_estimate, std_error) = mean_and_std_error(&values);
    let z_score = if std_error > 0.0 {
        (mc_estimate - closed_form) / std_error
    } else if mc_estimate == closed_form {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(Verdict {
        mc_estimate,
        std_error,
        closed_form,
        z_score,
        variant,
        max_step_kl_error,
        r_outer,
        r_inner,
    })
}

fn target(z: &Example) -> f64 {
    match &z.label {
        crate::data_io::Label::Real(y) => y[0],
        crate::data_io::Label::Class(c) => *c as f64,
    }
}

/// Random setups for checking [`closed_form_bound`] against
/// [`comparison_bound`].
pub fn random_setup(rng: &mut RngStream) -> AnalyticSetup {
    AnalyticSetup {
        n: 2 + rng.below(200) as usize,
        family: ScalarFamily::Normal {
            mean: 4.0 * (rng.uniform() - 0.5),
            std: 0.05 + 3.0 * rng.uniform(),
        },
        beta: 10f64.powf(4.0 * rng.uniform() - 1.0),
        eta: EtaSchedule::Constant {
            eta0: 10f64.powf(-3.0 * rng.uniform() - 0.5),
        },
        steps: 1 + rng.below(500) as usize,
        sigma: 0.1 + 2.0 * rng.uniform(),
    }
}
