//! End-to-end mean-variance cash-flow experiment at the benchmark parameters.
//!
//! ```text
//! cargo run --release --example mean_variance -- [n_paths] [steps]
//! ```

use riskflow::cashflow::{run_mean_variance_experiment, CashflowParams, CashflowSettings, ExperimentSettings};

fn main() -> riskflow::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let n_paths = args.next().unwrap_or(10_000);
    let steps = args.next().unwrap_or(200);

    let params = CashflowParams::benchmark();
    let settings = CashflowSettings {
        steps,
        pilot_paths: n_paths.min(10_000),
        ..CashflowSettings::default()
    };
    let experiment = ExperimentSettings {
        n_paths,
        trajectory_paths: n_paths.min(2_000),
        ..ExperimentSettings::default()
    };
    let (report, _) = run_mean_variance_experiment(&params, &settings, &experiment)?;

    println!("y0                 {:.6}", report.y0);
    println!("fixed point        {} iterations, converged = {}", report.coupling.iterations, report.coupling.converged);
    println!("log J^theta        {:.6}", report.j_theta.log_j);
    println!("E[Psi_T]           {:.6} ± {:.2e}", report.mean_psi.value, report.mean_psi.std_error);
    println!("Var[Psi_T]         {:.6} ± {:.2e}", report.var_psi.value, report.var_psi.std_error);
    println!("max |dH/dv|        {:.3e}", report.necessary.max_abs_dh_dv);
    println!("H orientation      {}", report.necessary.orientation);
    println!("necessary          {}", report.necessary.verdict.verdict);
    println!("u01 - u02          {:.3e}", report.u01_u02_max_gap);
    println!("B source residual  {:.3e}", report.b_source_residual);
    println!("\n{:>8} {:>14} {:>12} {:>8}", "eps", "J - J*", "SE", "z");
    for c in &report.sufficient.cells {
        println!("{:>8.3} {:>14.6e} {:>12.3e} {:>8.2}", c.eps, c.diff, c.diff_std_error, c.z_score);
    }
    println!("sufficient         {}", report.sufficient.verdict.verdict);
    for w in &report.sufficient.verdict.warnings {
        println!("  warning: {w}");
    }
    Ok(())
}
