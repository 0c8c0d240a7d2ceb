//! Finite-population identities against exhaustive enumeration.

use genbound::incoherence::enumerate_xi_second_moment;
use genbound::numerics::{RealVec, RngStream};
use genbound::subset_stats::{disjoint_sample_cov, hypergeom_moments, oracle, population_variance, xi_second_moment_coeff};

fn main() -> genbound::Result<()> {
    let (mean, var) = hypergeom_moments(10, 4, 3)?;
    let (em, ev) = oracle::enumerate_hypergeom(10, 4, 3);
    println!("HG(10, 4, 3): mean {mean:.6} / {em:.6}, var {var:.6} / {ev:.6}");

    let mut rng = RngStream::root(1);
    let pop: Vec<RealVec> = (0..7)
        .map(|_| RealVec::new(vec![rng.standard_normal(), rng.standard_normal()]))
        .collect::<genbound::Result<_>>()?;
    let closed = disjoint_sample_cov(&pop, 3, 2)?;
    let exact = oracle::enumerate_disjoint_cov(&pop, 3, 2);
    println!(
        "disjoint samples (3, 2) of 7: max diff var1 {:.1e}, var2 {:.1e}, cov {:.1e}",
        closed.var1.max_abs_diff(&exact.var1),
        closed.var2.max_abs_diff(&exact.var2),
        closed.cov.max_abs_diff(&exact.cov)
    );

    let tr = population_variance(&pop)?.trace();
    for (m, b) in [(6, 2), (4, 3), (3, 7)] {
        let closed = xi_second_moment_coeff(7, m, b)? * tr;
        let enumerated = enumerate_xi_second_moment(&pop, m, b)?;
        println!("E|ξ|² at n=7, m={m}, b={b}: {closed:.10} vs {enumerated:.10}");
    }
    Ok(())
}
