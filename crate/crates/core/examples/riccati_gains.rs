//! Feedback gains of the mean-variance example: A, B, ψ, φ on the grid and
//! the control they produce, with closed form and RK4 side by side.

use riskflow::cashflow::{feedback_control, solve_riccati, CashflowParams, RiccatiMethod};
use riskflow::model::TimeGrid;

fn main() -> riskflow::Result<()> {
    let params = CashflowParams::benchmark();
    let grid = TimeGrid::new(1.0, 1000)?;
    let y0 = -1.5;
    let ybar: Vec<f64> = grid.nodes().iter().map(|t| y0 + 0.3 * t).collect();
    let closed = solve_riccati(&params, &grid, y0, &ybar, RiccatiMethod::ClosedForm)?;
    let rk4 = solve_riccati(&params, &grid, y0, &ybar, RiccatiMethod::Rk4)?;

    println!("{:>6} {:>12} {:>12} {:>12} {:>12} {:>12}", "t", "A", "B", "psi", "phi", "u(1, ybar)");
    for k in (0..=1000).step_by(100) {
        let u = feedback_control(&params, &closed, k.min(999), params.m0, ybar[k])?;
        println!(
            "{:>6.2} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            grid.node(k),
            closed.a[k],
            closed.b[k],
            closed.psi[k],
            closed.phi[k],
            u
        );
    }
    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("\nmax |A_cf - A_rk4| {:.2e}", diff(&closed.a, &rk4.a));
    println!("max |B_cf - B_rk4| {:.2e}", diff(&closed.b, &rk4.b));
    Ok(())
}
