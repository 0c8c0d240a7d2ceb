//! SGLD on two Gaussian blobs with the held-in forecast prior attached:
//! per-epoch incoherence and gradient-norm summands, plus the KL total.

use genbound::bounds::baseline_gradnorm_summand;
use genbound::data_io::{generate, Family, SyntheticSpec};
use genbound::dynamics::{run_sgld, BetaSchedule, EtaSchedule, Hooks, RunOptions, ScheduleSpec, TrajectorySeeds};
use genbound::incoherence::{PriorContext, PriorForecast};
use genbound::models::{eval_risk, Architecture, EvalLoss, ModelSpec, Surrogate};
use genbound::numerics::{streams, RngStream};
use genbound::subset_stats::draw_subset;

fn main() -> genbound::Result<()> {
    let n = 500;
    let ds = generate(&SyntheticSpec {
        family: Family::TwoBlob {
            separation: 2.0,
            dim: 5,
            noise: 1.0,
        },
        n,
        seed: 1,
    })?;
    let model = ModelSpec::new(Architecture::SoftmaxRegression, 5, 2, Surrogate::CrossEntropy, EvalLoss::ZeroOne)?;
    let schedule = ScheduleSpec {
        eta: EtaSchedule::StepDecay {
            eta0: 0.05,
            decay_steps: 200.0,
            decay_rate: 0.95,
            staircase: false,
        },
        beta: BetaSchedule::CappedExponential {
            c: 10.0,
            k: 100.0,
            cap: 5000.0,
        },
    };
    let b = 10;
    let steps = 5 * n / b;

    let root = RngStream::root(7);
    let subset = draw_subset(n, n - 1, &mut root.derive(streams::SUBSET))?;
    let prior = PriorContext::new(&ds, &subset, PriorForecast::HeldInMean)?;
    let rec = run_sgld(
        &model,
        &ds,
        &schedule,
        &RunOptions::new(steps, b),
        TrajectorySeeds::from_root(&root),
        Hooks::with_prior(&prior),
    )?;

    let series = baseline_gradnorm_summand(&rec, n, b)?;
    println!("epoch  t_last  xi_summand    grad_summand  kl_cum");
    for e in 0..series.t_last.len() {
        println!(
            "{:>5}  {:>6}  {:.4e}  {:.4e}  {:.4e}",
            e + 1,
            series.t_last[e],
            series.xi_summand[e],
            series.grad_summand[e],
            series.kl_cum[e]
        );
    }
    println!("KL total {:.4e}", rec.kl_total);
    println!("training error {:.3}", eval_risk(&model, rec.final_weights(), &ds)?);
    Ok(())
}
