//! Least-squares backward induction on a linear-Gaussian model with a known
//! y₀, then the Picard coupling of the cash-flow example.

use riskflow::cashflow::{solve_cashflow, CashflowParams, CashflowSettings};
use riskflow::engine::{simulate_forward, SimulationSpec, ZeroSource};
use riskflow::fbsde::{martingale_residuals, picard_couple, solve_backward, PicardSettings};
use riskflow::model::{ControlDomain, ControlPolicy, GenericModel, MarkSet, TimeGrid};
use riskflow::regression::RegressionBasis;

fn main() -> riskflow::Result<()> {
    // dx = β dt + σ dW, dy = −(x + ½ y) dt + z dW, y_T = 0.2.
    let (beta, sigma, a) = (0.3, 0.4, 0.2);
    let model = GenericModel::new()
        .with_drift(move |_, _| beta)
        .with_diffusion(move |_, _| sigma)
        .with_generator(|p, _| p.x + 0.5 * p.y);
    let policy = ControlPolicy::constant(0.0, ControlDomain::unbounded());
    let spec = SimulationSpec::new(TimeGrid::new(1.0, 200)?, MarkSet::empty(), 1.0, 10_000, 11);
    let paths = simulate_forward(&model, &policy, &ZeroSource, &spec)?;
    let (solved, field) = solve_backward(&model, paths, a, RegressionBasis::default())?;
    let e = 0.5f64.exp();
    let exact = e * a + (e - 1.0) / 0.5 + beta * (e / 0.5 - (e - 1.0) / 0.25);
    println!("linear-Gaussian y0   {:.5} (exact {exact:.5})", field.y0());
    let worst = martingale_residuals(&model, &solved)?
        .iter()
        .map(|r| (r.mean.abs() - 1e-12).max(0.0) / r.std_error.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    println!("worst martingale residual  {worst:.2} SE");

    let params = CashflowParams::benchmark();
    let settings = CashflowSettings {
        steps: 100,
        pilot_paths: 5_000,
        ..CashflowSettings::default()
    };
    let sol = solve_cashflow(&params, &settings)?;
    let picard = PicardSettings::new(params.a, 20, 1e-4);
    let (_, field, report) = picard_couple(&sol.model, &sol.policy, &sol.main_spec(5_000), &picard)?;
    println!("\ncash-flow coupling: y0 {:.5}, converged {} after {} sweeps", field.y0(), report.converged, report.iterations);
    for (i, d) in report.deltas.iter().enumerate() {
        println!("  sweep {:>2}  delta {d:.3e}", i + 1);
    }
    Ok(())
}
