//! Distribution-free closed forms: asymptotic schedules, the Lipschitz
//! baseline and the high-probability radius.

use genbound::bounds::{asymptotic_geometric, asymptotic_polynomial, baseline_lipschitz, high_prob_bound};
use genbound::dynamics::ScheduleSpec;

fn main() -> genbound::Result<()> {
    println!("geometric  L=2, n=101, θ=0.5, ρ=0.5: {:.6}", asymptotic_geometric(2.0, 101, 0.5, 1.0, 1.0, 0.5, 0.0)?);
    for alpha in [0.5, 1.0, 2.0] {
        println!(
            "polynomial L=1, n=101, p=0.5, α={alpha}, T=1e4: {:.6}",
            asymptotic_polynomial(1.0, 101, 0.5, alpha, 10_000)?
        );
    }
    let schedule = ScheduleSpec::constant(0.01, 100.0);
    println!("lipschitz  L=1, n=1000, T=500: {:.6}", baseline_lipschitz(1.0, &schedule, 500, 1000)?);
    for kl in [0.0, 1.0, 10.0] {
        println!("high-prob  KL={kl}, n-m=100, δ=0.01: {:.6}", high_prob_bound(kl, 1100, 1000, 0.01)?);
    }
    Ok(())
}
