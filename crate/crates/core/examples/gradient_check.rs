//! Hand-written MLP gradients against central finite differences.

use genbound::data_io::Example;
use genbound::models::{finite_difference_grad, surrogate_grad, Architecture, EvalLoss, ModelSpec, ParamPoint, Surrogate};
use genbound::numerics::RngStream;

fn main() -> genbound::Result<()> {
    let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![32, 32] }, 10, 3, Surrogate::CrossEntropy, EvalLoss::ZeroOne)?;
    let mut rng = RngStream::root(4);
    let w = ParamPoint::new(&spec, (0..spec.param_dim()).map(|_| 0.3 * rng.standard_normal()).collect())?;
    let z = Example::classified((0..10).map(|_| rng.standard_normal()).collect(), 1)?;
    let g = surrogate_grad(&spec, &w, &z)?;
    let fd = finite_difference_grad(&spec, &w, &z, 1e-5)?;
    let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("{} parameters, max |analytic - finite difference| = {err:.2e}", spec.param_dim());
    Ok(())
}
