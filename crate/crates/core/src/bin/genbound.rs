use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genbound::cli::{self, AnalyticConfig, ExperimentConfig, Lemma, Perturbation};
use genbound::Error;

#[derive(Parser)]
#[command(name = "genbound", version, about = "SGLD training with incoherence tracking and generalization bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; affects speed only.
    #[arg(long, env = "GENBOUND_WORKERS")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-epoch trajectory diagnostics (CSV).
    Train(Common),
    /// Monte-Carlo and closed-form bound estimates (JSON).
    Bound(Common),
    /// Mean-estimation closed form against simulation (JSON).
    Analytic(Common),
    /// Paired per-epoch incoherence vs gradient-norm table (CSV).
    Compare(Common),
    /// Finite-population formulas against exhaustive enumeration (JSON).
    StatsCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "GENBOUND_WORKERS")]
        workers: Option<usize>,
        /// Negative control: perturb one closed form.
        #[arg(long, value_enum)]
        perturb: Option<Lemma>,
        #[arg(long, default_value_t = 1e-6)]
        perturb_by: f64,
    },
}

fn emit(out: Option<&Path>, default_dir: Option<&Path>, file: &str, text: &str) -> Result<(), Error> {
    match out.or(default_dir) {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(file), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn experiment(c: &Common, file: &str, run: fn(&cli::Resolved) -> genbound::Result<String>) -> Result<bool, Error> {
    let config = ExperimentConfig::load(&c.config)?;
    let out_dir = config.out_dir.clone();
    let resolved = config.resolve(c.seed)?;
    let text = cli::with_workers(c.workers, || run(&resolved))??;
    emit(c.out.as_deref(), out_dir.as_deref(), file, &text)?;
    Ok(true)
}

fn dispatch(command: Command) -> Result<bool, Error> {
    match command {
        Command::Train(c) => experiment(&c, "train.csv", cli::cmd_train),
        Command::Bound(c) => experiment(&c, "bound.json", cli::cmd_bound),
        Command::Compare(c) => experiment(&c, "compare.csv", cli::cmd_compare),
        Command::Analytic(c) => {
            let mut config = AnalyticConfig::load(&c.config)?;
            if let Some(s) = c.seed {
                config.master_seed = s;
            }
            let (text, pass) = cli::with_workers(c.workers, || cli::cmd_analytic(&config))??;
            emit(c.out.as_deref(), None, "analytic.json", &text)?;
            Ok(pass)
        }
        Command::StatsCheck {
            seed,
            out,
            workers,
            perturb,
            perturb_by,
        } => {
            let perturbation = perturb.map(|lemma| Perturbation {
                lemma,
                relative: perturb_by,
            });
            let report = cli::with_workers(workers, || cli::stats_report(seed, perturbation))??;
            emit(out.as_deref(), None, "stats-check.json", &genbound::report::to_json_string(&report)?)?;
            for c in report.checks.iter().filter(|c| !c.pass) {
                eprintln!(
                    "FAIL {:?}: max abs discrepancy {:e} > {:e}",
                    c.lemma, c.max_abs_discrepancy, c.tolerance
                );
            }
            let pass = report.pass;
            Ok(pass)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("genbound: check failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("genbound: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
