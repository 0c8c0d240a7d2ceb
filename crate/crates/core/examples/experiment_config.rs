//! The JSON experiment harness used by the binary, driven from code.

use genbound::cli::{cmd_compare, bound_report, ExperimentConfig};

const CONFIG: &str = r#"{
  "dataset": {"synthetic": {"family": {"kind": "gaussian-mean", "mean": 0.0, "std": 1.0, "dim": 1}, "n": 50, "seed": 3}},
  "model": {"architecture": {"kind": "linear-regression"}, "surrogate": "squared", "eval_loss": "squared"},
  "schedule": {"eta": {"kind": "constant", "eta0": 0.01}, "beta": {"kind": "constant", "beta0": 100.0}},
  "steps": 100, "batch_size": 10, "m": 40,
  "expectation": "distributional",
  "estimators": ["sgld-subgauss", "trace-form", "baseline-gradnorm"],
  "loss": {"kind": "subgaussian", "sigma": 1.0},
  "master_seed": 9
}"#;

fn main() -> genbound::Result<()> {
    let resolved = ExperimentConfig::parse(CONFIG)?.resolve(None)?;
    for e in bound_report(&resolved)?.estimates {
        println!("{:?}: {:.5} ± {:.5}", e.estimator_id, e.value, e.std_error);
    }
    print!("{}", cmd_compare(&resolved)?);
    Ok(())
}
