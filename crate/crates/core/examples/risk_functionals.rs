//! Risk-sensitive cost, certainty equivalent and its small-θ expansion, plus
//! the exponential-martingale density of the transformed measure.

use rand_distr::{Distribution, StandardNormal};
use riskflow::engine::{mc_estimate, simulate_forward, SimulationSpec, ZeroSource};
use riskflow::model::{ControlDomain, ControlPolicy, GenericModel, MarkSet, TimeGrid};
use riskflow::risk::{cost_j_theta, expansion_residual, girsanov_density, risk_loss, ConstantDrivers};
use riskflow::rng::RngSpec;

fn main() -> riskflow::Result<()> {
    let mut rng = RngSpec::new(1).brownian(0);
    let (mu, s) = (0.4, 0.8);
    let samples: Vec<f64> = (0..100_000)
        .map(|_| mu + s * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();

    println!("{:>6} {:>12} {:>12} {:>12}", "theta", "log J", "loss", "mu+θs²/2");
    for theta in [0.05, 0.1, 0.2, 0.4, 1.0] {
        let j = cost_j_theta(&samples, theta)?;
        let loss = risk_loss(&samples, theta)?;
        println!("{theta:>6} {:>12.5} {:>12.5} {:>12.5}", j.log_j, loss.value, mu + 0.5 * theta * s * s);
    }

    // Bernoulli(0.2) with exact frequencies: residual ~ θ².
    let bernoulli: Vec<f64> = (0..1000).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let report = expansion_residual(&bernoulli, &[0.05, 0.1, 0.2, 0.4])?;
    println!("\nBernoulli expansion residuals {:?}", report.residuals);
    println!("log-log slope {:.3}", report.slope.unwrap_or(f64::NAN));

    let model = GenericModel::new().with_diffusion(|_, _| 1.0);
    let policy = ControlPolicy::constant(0.0, ControlDomain::unbounded());
    let marks = MarkSet::new(vec![-1.0, 1.0], vec![1.0, 0.5])?;
    let spec = SimulationSpec::new(TimeGrid::new(1.0, 20)?, marks, 0.0, 100_000, 3);
    let paths = simulate_forward(&model, &policy, &ZeroSource, &spec)?;
    let drivers = ConstantDrivers { l: 0.3, big_l: vec![-0.4, -0.4] };
    let est = mc_estimate(&girsanov_density(&drivers, 1.0, &paths)?.terminal_density())?;
    println!("\nE[L_T] = {:.4} ± {:.4}", est.mean, est.std_error);
    Ok(())
}
