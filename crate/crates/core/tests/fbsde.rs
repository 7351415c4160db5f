use riskflow::cashflow::{solve_cashflow, CashflowModel, CashflowParams, CashflowSettings};
use riskflow::engine::{mc_estimate, simulate_forward, simulate_terminal, SimulationSpec, ZeroSource};
use riskflow::fbsde::{martingale_residuals, picard_couple, solve_backward, PicardSettings};
use riskflow::model::{ControlDomain, ControlPolicy, GenericModel, MarkSet, TimeGrid};
use riskflow::regression::RegressionBasis;
use riskflow::Error;

fn constant(u: f64) -> ControlPolicy {
    ControlPolicy::constant(u, ControlDomain::unbounded())
}

fn spec(steps: usize, n: usize, x0: f64, seed: u64) -> SimulationSpec {
    SimulationSpec::new(TimeGrid::new(1.0, steps).unwrap(), MarkSet::empty(), x0, n, seed)
}

#[test]
fn constant_martingale_and_deterministic_integrand() {
    let model = GenericModel::new().with_diffusion(|_, _| 1.0);
    let paths = simulate_forward(&model, &constant(0.0), &ZeroSource, &spec(20, 2000, 0.0, 1)).unwrap();
    let (solved, field) = solve_backward(&model, paths.clone(), 0.75, RegressionBasis::default()).unwrap();
    assert!(solved.y.iter().all(|y| (y - 0.75).abs() < 1e-10));
    assert!(solved.z.iter().all(|z| z.abs() < 1e-10));
    assert!((field.y0() - 0.75).abs() < 1e-10);

    let unit = GenericModel::new().with_diffusion(|_, _| 1.0).with_generator(|_, _| 1.0);
    let (solved, field) = solve_backward(&unit, paths, 0.0, RegressionBasis::default()).unwrap();
    assert!((field.y0() - 1.0).abs() < 1e-10);
    for k in 0..=20 {
        assert!((solved.y_at(7, k) - (1.0 - k as f64 / 20.0)).abs() < 1e-10);
    }
}

#[test]
fn jump_martingale_integrands_are_recovered() {
    // x is a martingale (σ = 0.5, compensated unit jumps), g = x, a = 0:
    // y_k = (N − k) dt x_k, so z_k = (N − k − 1) dt σ and r_k = (N − k − 1) dt.
    let model = GenericModel::new()
        .with_diffusion(|_, _| 0.5)
        .with_jump(|_, _, _| 1.0)
        .with_generator(|p, _| p.x);
    let marks = MarkSet::single(1.0, 2.0).unwrap();
    let steps = 10;
    let spec = SimulationSpec::new(TimeGrid::new(1.0, steps).unwrap(), marks, 0.0, 20_000, 4);
    let paths = simulate_forward(&model, &constant(0.0), &ZeroSource, &spec).unwrap();
    let (solved, _) = solve_backward(&model, paths, 0.0, RegressionBasis::default()).unwrap();
    let dt = 0.1;
    // With an intercept in the basis the node means of z and r equal sample
    // moments of (Δx)ΔW/dt and (Δx)ΔÑ/(w dt); their relative standard
    // errors are about 1.5% here, so allow 6%.
    let n = solved.n_paths as f64;
    for k in [0, 4, 8] {
        let left = (steps - k - 1) as f64 * dt;
        let z = (0..solved.n_paths).map(|p| solved.z_at(p, k)).sum::<f64>() / n;
        let r = (0..solved.n_paths).map(|p| solved.r_at(p, k)[0]).sum::<f64>() / n;
        assert!((z - 0.5 * left).abs() <= 0.06 * 0.5 * left, "z at {k}: {z}");
        assert!((r - left).abs() <= 0.06 * left, "r at {k}: {r}");
        for p in (0..solved.n_paths).step_by(997) {
            let y = (steps - k) as f64 * dt * solved.x_at(p, k);
            assert!((solved.y_at(p, k) - y).abs() < 0.02 * (1.0 + y.abs()), "y at {k}: {}", solved.y_at(p, k));
        }
    }
}

#[test]
fn linear_gaussian_y0_matches_closed_form() {
    // dx = β dt + σ dW, g = gx x + gy y, y_T = a:
    // y_0 = e^{gy T} a + gx ∫_0^T e^{gy s} (x0 + β s) ds.
    let (beta, sigma, gx, gy, a, x0) = (0.3, 0.4, 1.0, 0.5, 0.2, 1.0);
    let model = GenericModel::new()
        .with_drift(move |_, _| beta)
        .with_diffusion(move |_, _| sigma)
        .with_generator(move |p, _| gx * p.x + gy * p.y);
    let steps = 500;
    let paths = simulate_forward(&model, &constant(0.0), &ZeroSource, &spec(steps, 10_000, x0, 11)).unwrap();
    let (solved, field) = solve_backward(&model, paths, a, RegressionBasis::default()).unwrap();

    let e = gy.exp();
    let exact = e * a + gx * (x0 * (e - 1.0) / gy + beta * (e / gy - (e - 1.0) / (gy * gy)));
    // Standard error from the pathwise representation of y_0.
    let dt = 1.0 / steps as f64;
    let pathwise: Vec<f64> = (0..solved.n_paths)
        .map(|p| e * a + (0..steps).map(|k| (gy * k as f64 * dt).exp() * gx * solved.x_at(p, k) * dt).sum::<f64>())
        .collect();
    let se = mc_estimate(&pathwise).unwrap().std_error;
    assert!((field.y0() - exact).abs() <= 3.0 * se, "y0 {} vs {exact} (3 SE = {})", field.y0(), 3.0 * se);

    let residuals = martingale_residuals(&model, &solved).unwrap();
    // The last step is exact up to rounding.
    for (k, r) in residuals.iter().enumerate() {
        assert!(r.mean.abs() <= 3.0 * r.std_error + 1e-12, "node {k}: {} ± {}", r.mean, r.std_error);
    }
}

#[test]
fn example_backward_matches_nested_oracle() {
    // Cash-flow backward equation under u ≡ 1, checked against an
    // independent simulation of its discounted representation.
    let params = CashflowParams::benchmark();
    let model = CashflowModel::new(&params, 0.0);
    let steps = 100;
    let paths = simulate_forward(&model, &constant(1.0), &ZeroSource, &spec(steps, 10_000, params.m0, 3)).unwrap();
    let (_, field) = solve_backward(&model, paths, params.a, RegressionBasis::default()).unwrap();

    let oracle_spec = spec(steps, 20_000, params.m0, 99);
    let outer = simulate_forward(&model, &constant(1.0), &ZeroSource, &oracle_spec).unwrap();
    let dt = 1.0 / steps as f64;
    let grow = 1.0 + params.disc_rate * dt;
    let samples: Vec<f64> = (0..outer.n_paths)
        .map(|p| {
            let mut y = params.a;
            for k in (0..steps).rev() {
                y = grow * y + (params.rho - params.c * outer.x_at(p, k)) * dt;
            }
            y
        })
        .collect();
    let oracle = mc_estimate(&samples).unwrap();
    assert!(
        (field.y0() - oracle.mean).abs() <= 3.0 * oracle.std_error,
        "{} vs {} ± {}",
        field.y0(),
        oracle.mean,
        oracle.std_error
    );
}

#[test]
fn too_few_paths_is_a_usage_error() {
    let model = GenericModel::new().with_diffusion(|_, _| 1.0);
    let paths = simulate_forward(&model, &constant(0.0), &ZeroSource, &spec(5, 20, 0.0, 1)).unwrap();
    assert!(matches!(
        solve_backward(&model, paths, 0.0, RegressionBasis::default()),
        Err(Error::Usage(_))
    ));
}

#[test]
fn decoupled_model_converges_in_one_iteration() {
    let model = GenericModel::new()
        .with_drift(|p, _| -0.5 * p.x)
        .with_diffusion(|_, _| 0.3)
        .with_generator(|p, _| p.x);
    let settings = PicardSettings::new(1.0, 10, 1e-12);
    let (_, _, report) = picard_couple(&model, &constant(0.0), &spec(20, 2000, 1.0, 2), &settings).unwrap();
    assert!(report.converged);
    assert_eq!(report.iterations, 1);
    assert!(report.deltas[0] <= 1e-12);
}

#[test]
fn example_coupling_converges_quickly() {
    let params = CashflowParams::benchmark();
    let settings = CashflowSettings {
        steps: 50,
        pilot_paths: 10_000,
        ..CashflowSettings::default()
    };
    let sol = solve_cashflow(&params, &settings).unwrap();
    let picard = PicardSettings::new(params.a, 10, 1e-3);
    let spec = sol.main_spec(10_000);
    let (_, _, report) = picard_couple(&sol.model, &sol.policy, &spec, &picard).unwrap();
    assert!(report.converged, "{report:?}");
    assert!(report.iterations <= 3, "{report:?}");
}

#[test]
fn stiff_model_reports_non_convergence() {
    // Forward drift driven by y with a large Lipschitz constant.
    let model = GenericModel::new()
        .with_drift(|p, _| 100.0 * p.y)
        .with_diffusion(|_, _| 0.2)
        .with_generator(|p, _| 100.0 * p.x)
        .with_lipschitz(100.0);
    let settings = PicardSettings::new(1.0, 8, 1e-6);
    match picard_couple(&model, &constant(0.0), &spec(10, 500, 1.0, 6), &settings) {
        Ok((_, _, report)) => assert!(!report.converged, "{report:?}"),
        Err(Error::Divergence { report }) => assert!(!report.converged),
        Err(Error::Simulation { .. }) | Err(Error::SingularRegression { .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn terminal_sample_matches_full_bundle() {
    let model = GenericModel::new()
        .with_drift(|p, v| v - p.x)
        .with_diffusion(|_, _| 0.4)
        .with_running_cost(|p, _| p.x * p.x);
    let s = spec(25, 300, 0.5, 12);
    let policy = ControlPolicy::feedback(|a| 0.3 * a.x, ControlDomain::unbounded());
    let full = simulate_forward(&model, &policy, &ZeroSource, &s).unwrap();
    let ends = simulate_terminal(&model, &policy, &ZeroSource, &s).unwrap();
    assert_eq!(ends.x, full.terminal_x());
    for p in 0..300 {
        assert_eq!(ends.xi[p], full.xi_at(p, 25));
    }
}
