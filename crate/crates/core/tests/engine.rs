use rand_distr::{Distribution, StandardNormal};
use riskflow::engine::{mc_estimate, sample_jumps, simulate_forward, simulate_terminal, ConstantSource, ZeroSource, SimulationSpec};
use riskflow::model::{
    partials, Coefficient, ControlDomain, ControlPolicy, GenericModel, MarkSet, PartialMethod, StatePoint, TimeGrid,
    Variable,
};
use riskflow::rng::RngSpec;

fn zero_policy() -> ControlPolicy {
    ControlPolicy::constant(0.0, ControlDomain::unbounded())
}

#[test]
fn grid_nodes() {
    let g = TimeGrid::new(1.0, 4).unwrap();
    assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(TimeGrid::new(1.0, 1).unwrap().nodes(), vec![0.0, 1.0]);
    let g = TimeGrid::new(2.0, 1000).unwrap();
    assert!((g.dt() - 0.002).abs() < 1e-15);
    assert!((g.node(500) - 1.0).abs() < 1e-12);
    assert!(TimeGrid::new(0.0, 10).is_err());
    assert!(TimeGrid::new(1.0, 0).is_err());
}

#[test]
fn mark_set_intensities() {
    assert_eq!(MarkSet::new(vec![], vec![]).unwrap().total_intensity(), 0.0);
    assert_eq!(MarkSet::single(0.5, 2.0).unwrap().total_intensity(), 2.0);
    let m = MarkSet::new(vec![-0.2, 0.3], vec![1.0, 1.5]).unwrap();
    assert_eq!(m.total_intensity(), 2.5);
    let again = MarkSet::new(m.marks().to_vec(), m.weights().to_vec()).unwrap();
    assert_eq!(again, m);
    assert!(MarkSet::new(vec![1.0], vec![0.0]).is_err());
    assert!(MarkSet::new(vec![1.0, 2.0], vec![1.0]).is_err());
}

#[test]
fn finite_difference_partial_of_square() {
    let model = GenericModel::new().with_running_cost(|p, _| p.x * p.x);
    let p = StatePoint::new(0.0, 3.0, 0.0, 0.0, &[]);
    let d = partials(&model, Coefficient::RunningCost, Variable::X, &p, 0.0, &MarkSet::empty()).unwrap();
    assert_eq!(d.method, PartialMethod::CentralDifference);
    assert!((d.value - 6.0).abs() < 1e-6);

    let drift = GenericModel::new().with_drift(|p, v| 0.2 * v - 0.1 * p.x);
    let d = partials(&drift, Coefficient::Drift, Variable::X, &p, 1.0, &MarkSet::empty()).unwrap();
    assert!((d.value + 0.1).abs() < 1e-9);
    let constant = GenericModel::new().with_diffusion(|_, _| 0.7);
    for wrt in [Variable::X, Variable::Y, Variable::Z, Variable::Control] {
        let d = partials(&constant, Coefficient::Diffusion, wrt, &p, 1.0, &MarkSet::empty()).unwrap();
        assert_eq!(d.value, 0.0);
    }
}

#[test]
fn clamping_stays_in_domain() {
    let domain = ControlDomain::new(-1.0, 1.0).unwrap();
    let policy = ControlPolicy::feedback(|a| a.x, domain);
    let model = GenericModel::new().with_diffusion(|_, _| 2.0);
    let spec = SimulationSpec::new(TimeGrid::new(1.0, 20).unwrap(), MarkSet::empty(), 0.0, 200, 3);
    let paths = simulate_forward(&model, &policy, &ZeroSource, &spec).unwrap();
    assert!(paths.u.iter().all(|u| domain.contains(*u)));
    let expected = (0..paths.n_paths)
        .flat_map(|p| (0..20).map(move |k| (p, k)))
        .filter(|&(p, k)| paths.x_at(p, k).abs() > 1.0)
        .count() as u64;
    assert_eq!(paths.clamp_count, expected);
}

#[test]
fn zero_intensity_has_no_jumps_and_single_mark_is_index_zero() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let rng = RngSpec::new(9);
    for p in 0..100 {
        assert!(sample_jumps(&MarkSet::empty(), &grid, &rng, p).is_empty());
    }
    let single = MarkSet::single(0.4, 3.0).unwrap();
    for p in 0..100 {
        assert!(sample_jumps(&single, &grid, &rng, p).marks.iter().all(|&i| i == 0));
    }
}

#[test]
fn mean_jump_count_is_poisson() {
    let marks = MarkSet::new(vec![-0.5, 0.5], vec![0.5, 1.5]).unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let rng = RngSpec::new(2024);
    let counts: Vec<f64> = (0..100_000).map(|p| sample_jumps(&marks, &grid, &rng, p).len() as f64).collect();
    let est = mc_estimate(&counts).unwrap();
    assert!((est.mean - 2.0).abs() <= 3.0 * est.std_error, "{est:?}");
    // The mark frequencies follow w_i / Σ w.
    let (mut n0, mut total) = (0usize, 0usize);
    for p in 0..20_000 {
        let l = sample_jumps(&marks, &grid, &rng, p);
        n0 += l.marks.iter().filter(|&&i| i == 0).count();
        total += l.len();
    }
    let share = n0 as f64 / total as f64;
    let se = (0.25 * 0.75 / total as f64).sqrt();
    assert!((share - 0.25).abs() <= 4.0 * se);
}

#[test]
fn deterministic_dynamics() {
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let still = GenericModel::new();
    let spec = SimulationSpec::new(grid, MarkSet::empty(), 1.7, 5, 1);
    let paths = simulate_forward(&still, &zero_policy(), &ZeroSource, &spec).unwrap();
    assert!(paths.x.iter().all(|&x| x == 1.7));

    let unit = GenericModel::new().with_drift(|_, _| 1.0);
    let spec = SimulationSpec::new(grid, MarkSet::empty(), 0.0, 5, 1);
    let paths = simulate_forward(&unit, &zero_policy(), &ZeroSource, &spec).unwrap();
    for p in 0..5 {
        assert!((paths.x_at(p, 50) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn linear_mean_matches_ode() {
    // dx = (ρu − cx) dt + σu dW with u = 1: E[x_T] = ρ/c + (d − ρ/c) e^{−cT}.
    let (rho, c, sigma, d) = (0.2, 0.1, 0.3, 1.0);
    let model = GenericModel::new()
        .with_drift(move |p, v| rho * v - c * p.x)
        .with_diffusion(move |_, v| sigma * v);
    let steps = 200;
    let spec = SimulationSpec::new(TimeGrid::new(1.0, steps).unwrap(), MarkSet::empty(), d, 20_000, 77);
    let ends = simulate_terminal(&model, &ControlPolicy::constant(1.0, ControlDomain::unbounded()), &ZeroSource, &spec)
        .unwrap();
    let est = mc_estimate(&ends.x).unwrap();
    // Euler's mean recursion is the exact discrete solution; compare with the ODE.
    let exact = rho / c + (d - rho / c) * (-c).exp();
    let discrete = rho / c + (d - rho / c) * (1.0 - c / steps as f64).powi(steps as i32);
    assert!((exact - discrete).abs() < est.std_error);
    assert!((est.mean - exact).abs() <= 3.0 * est.std_error, "{} vs {exact} ± {}", est.mean, est.std_error);
}

#[test]
fn mc_estimate_examples() {
    let e = mc_estimate(&[1.0, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!((e.mean, e.std_error), (1.0, 0.0));
    let e = mc_estimate(&[0.0, 2.0]).unwrap();
    assert_eq!((e.mean, e.std_error), (1.0, 1.0));
    assert!(mc_estimate(&[1.0]).is_err());

    let mut rng = RngSpec::new(123).brownian(0);
    let z: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    assert!(mc_estimate(&z).unwrap().mean.abs() <= 0.02);
}

#[test]
fn compensated_jumps_have_zero_mean() {
    let model = GenericModel::new().with_jump(|_, _, _| 0.8);
    let marks = MarkSet::new(vec![1.0, 2.0], vec![1.2, 0.6]).unwrap();
    let spec = SimulationSpec::new(TimeGrid::new(1.0, 10).unwrap(), marks, 0.5, 100_000, 8);
    let ends = simulate_terminal(&model, &zero_policy(), &ZeroSource, &spec).unwrap();
    let moves: Vec<f64> = ends.x.iter().map(|x| x - 0.5).collect();
    let est = mc_estimate(&moves).unwrap();
    assert!(est.mean.abs() <= 3.0 * est.std_error, "{est:?}");
}

#[test]
fn jump_free_paths_match_reference_scheme() {
    // Reference Euler scheme fed by the same per-path normal streams.
    let (alpha, sigma, x0) = (-0.4, 0.25, 1.3);
    let model = GenericModel::new()
        .with_drift(move |p, _| alpha * p.x)
        .with_diffusion(move |p, _| sigma * (1.0 + p.x.abs()));
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let spec = SimulationSpec::new(grid, MarkSet::empty(), x0, 50, 31);
    let paths = simulate_forward(&model, &zero_policy(), &ZeroSource, &spec).unwrap();
    let dt = grid.dt();
    for p in 0..50 {
        let mut normals = spec.rng.brownian(p);
        let mut x: f64 = x0;
        for k in 0..64 {
            assert_eq!(paths.x_at(p, k).to_bits(), x.to_bits());
            let dw = dt.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut normals);
            x = x + alpha * x * dt + sigma * (1.0 + x.abs()) * dw;
        }
        assert_eq!(paths.x_at(p, 64).to_bits(), x.to_bits());
    }
}

#[test]
fn identical_seeds_give_identical_bundles() {
    let model = GenericModel::new()
        .with_diffusion(|_, _| 0.5)
        .with_jump(|p, _, m| 0.1 * m * p.x)
        .with_running_cost(|p, _| p.x * p.x);
    let marks = MarkSet::new(vec![-1.0, 1.0], vec![0.7, 0.9]).unwrap();
    let spec = SimulationSpec::new(TimeGrid::new(1.0, 30).unwrap(), marks, 1.0, 300, 5);
    let a = simulate_forward(&model, &zero_policy(), &ConstantSource(0.3), &spec).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = single.install(|| simulate_forward(&model, &zero_policy(), &ConstantSource(0.3), &spec).unwrap());
    assert_eq!(a, b);
    // ξ never decreases when f ≥ 0.
    for p in 0..a.n_paths {
        for k in 0..30 {
            assert!(a.xi_at(p, k + 1) >= a.xi_at(p, k));
        }
    }
    let other = simulate_forward(&model, &zero_policy(), &ConstantSource(0.3), &spec.with_rng(RngSpec::new(6))).unwrap();
    assert_ne!(a.x, other.x);
}

#[test]
fn non_finite_coefficients_name_path_and_node() {
    let model = GenericModel::new().with_drift(|p, _| if p.t > 0.5 { f64::NAN } else { 0.0 });
    let spec = SimulationSpec::new(TimeGrid::new(1.0, 10).unwrap(), MarkSet::empty(), 0.0, 4, 1);
    match simulate_forward(&model, &zero_policy(), &ZeroSource, &spec) {
        Err(riskflow::Error::Simulation { path, node, coefficient }) => {
            assert_eq!((path, node, coefficient.as_str()), (0, 6, "b"));
        }
        other => panic!("expected a simulation error, got {other:?}"),
    }
}
