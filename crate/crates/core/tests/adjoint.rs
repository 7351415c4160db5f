use riskflow::adjoint::{
    hamiltonian, hamiltonian_control_gap, hamiltonian_v_derivative, necessary_condition_check,
    simulate_transformed_adjoints_example, sufficient_condition_probe, Direction, HamiltonianInput,
    NecessarySettings, ProbeSettings, ZlSign,
};
use riskflow::cashflow::{solve_cashflow, CashflowModel, CashflowParams, CashflowSettings};
use riskflow::engine::{simulate_forward, SimulationSpec, ZeroSource};
use riskflow::model::{ControlDomain, ControlPolicy, GenericModel, MarkSet, StatePoint, TimeGrid};
use riskflow::risk::theta_t;

fn input<'a>(x: f64, y: f64, v: f64, pi2: &'a [f64], big_l: &'a [f64], r: &'a [f64]) -> HamiltonianInput<'a> {
    HamiltonianInput {
        point: StatePoint::new(0.3, x, y, 0.0, r),
        v,
        p2: 1.0,
        q2: 0.5,
        pi2,
        p3: 0.2,
        l: 0.0,
        big_l,
        theta: 0.5,
    }
}

fn example_params() -> CashflowParams {
    CashflowParams {
        rho: 0.2,
        c: 0.1,
        sigma: 0.3,
        ..CashflowParams::benchmark()
    }
}

#[test]
fn hand_evaluated_hamiltonian() {
    let params = example_params();
    let lam = params.disc_rate;
    let model = CashflowModel::new(&params, 0.0);
    let (x, y) = (1.5, -0.7);
    let inp = input(x, y, 1.0, &[], &[], &[]);
    let h = hamiltonian(&inp, &model, &MarkSet::empty(), ZlSign::Minus).unwrap();
    let expected = (0.2 - 0.1 * x) + 0.3 * 0.5 + (0.2 - 0.1 * x + lam * y) * 0.2;
    assert!((h - expected).abs() < 1e-14, "{h} vs {expected}");
    // ∂H/∂v = ρ p₂ + σ q₂ + ρ p₃.
    let d = hamiltonian_v_derivative(&inp, &model, &MarkSet::empty()).unwrap();
    assert!((d - (0.2 + 0.15 + 0.04)).abs() < 1e-9);
    // l = 0: the sign convention does not matter.
    assert_eq!(h, hamiltonian(&inp, &model, &MarkSet::empty(), ZlSign::Plus).unwrap());
}

#[test]
fn degenerate_hamiltonians() {
    let zero = GenericModel::new();
    let inp = input(0.4, 0.1, 2.0, &[], &[], &[]);
    assert_eq!(hamiltonian(&inp, &zero, &MarkSet::empty(), ZlSign::Minus).unwrap(), 0.0);
    let only_f = GenericModel::new().with_running_cost(|p, v| p.x + v * v);
    assert_eq!(hamiltonian(&inp, &only_f, &MarkSet::empty(), ZlSign::Minus).unwrap(), 0.4 + 4.0);

    // A single jump term: w (γ π₂ − g p₃) with g = 0 here.
    let jumpy = GenericModel::new().with_jump(|_, v, m| v * m);
    let marks = MarkSet::single(0.5, 2.0).unwrap();
    let inp = input(0.0, 0.0, 3.0, &[0.7], &[0.0], &[0.0]);
    let h = hamiltonian(&inp, &jumpy, &marks, ZlSign::Minus).unwrap();
    assert!((h - 2.0 * 1.5 * 0.7).abs() < 1e-14);
    // Wrong number of jump entries is rejected.
    assert!(hamiltonian(&input(0.0, 0.0, 3.0, &[], &[], &[]), &jumpy, &marks, ZlSign::Minus).is_err());
}

#[test]
fn control_gaps() {
    let model = CashflowModel::new(&example_params(), 0.0);
    let domain = ControlDomain::unbounded();
    let inp = input(1.0, 2.0, 0.7, &[], &[], &[]);
    let gap = hamiltonian_control_gap(&inp, &model, &MarkSet::empty(), ZlSign::Minus, domain, 0.7).unwrap();
    assert_eq!(gap, 0.0);

    let flat = GenericModel::new().with_drift(|p, _| p.x).with_running_cost(|p, _| p.y * p.y);
    for v in [-3.0, 0.0, 5.0] {
        let gap = hamiltonian_control_gap(&inp, &flat, &MarkSet::empty(), ZlSign::Minus, domain, v).unwrap();
        assert_eq!(gap, 0.0);
    }
    let bounded = ControlDomain::new(-1.0, 1.0).unwrap();
    assert!(hamiltonian_control_gap(&inp, &flat, &MarkSet::empty(), ZlSign::Minus, bounded, 2.0).is_err());
}

#[test]
fn first_order_condition_holds_along_the_example() {
    let params = CashflowParams::benchmark();
    let settings = CashflowSettings {
        steps: 100,
        pilot_paths: 5_000,
        ..CashflowSettings::default()
    };
    let sol = solve_cashflow(&params, &settings).unwrap();
    let paths = simulate_forward(&sol.model, &sol.policy, &sol.field, &sol.main_spec(100)).unwrap();
    let adjoints = simulate_transformed_adjoints_example(&params, Some(&sol.riccati), &paths).unwrap();
    let report = necessary_condition_check(
        &sol.model,
        &paths,
        &adjoints,
        ControlDomain::unbounded(),
        &NecessarySettings::default(),
    )
    .unwrap();
    assert!(report.max_abs_dh_dv <= 1e-10, "{}", report.max_abs_dh_dv);
    assert!(report.zero_gap_exact);
    assert!(report.curvature_checked && report.curvature_consistent);
    assert_eq!(report.nodes_checked, 100 * 100);
    assert!(report.verdict.passed);
}

/// dx = v dt + s dW, x₀ = 1, f = v², Φ = x²: among constant controls the
/// risk-sensitive cost e^{θv²} E[e^{θ(1+v+sW)²}] is minimised at
/// v* = −1/(k + 1) with k = 1 − 2θs².
fn toy() -> (GenericModel, SimulationSpec, f64) {
    let (s, theta) = (0.3, 0.5);
    let model = GenericModel::new()
        .with_drift(|_, v| v)
        .with_diffusion(move |_, _| s)
        .with_running_cost(|_, v| v * v)
        .with_terminal_forward(|x| x * x)
        .with_initial_backward(|_| 0.0);
    let spec = SimulationSpec::new(TimeGrid::new(1.0, 10).unwrap(), MarkSet::empty(), 1.0, 100_000, 17);
    let k = 1.0 - 2.0 * theta * s * s;
    (model, spec, -1.0 / (k + 1.0))
}

#[test]
fn probe_on_a_toy_problem() {
    let (model, spec, optimum) = toy();
    let mut evaluate = |policy: &ControlPolicy| {
        let paths = simulate_forward(&model, policy, &ZeroSource, &spec)?;
        theta_t(&paths, &model)
    };
    let directions = vec![("constant".to_string(), Direction::Constant)];
    let settings = ProbeSettings {
        eps: vec![-0.25, -0.1, 0.0, 0.1, 0.25],
        theta: 0.5,
        sigmas: 3.0,
    };
    let at_optimum = ControlPolicy::constant(optimum, ControlDomain::unbounded());
    let report = sufficient_condition_probe(&mut evaluate, &at_optimum, &directions, &settings, vec![]).unwrap();
    let zero = report.cells.iter().find(|c| c.eps == 0.0).unwrap();
    assert_eq!(zero.diff, 0.0);
    assert_eq!(Some(zero.log_j), Some(report.baseline_log_j));
    assert!(report.verdict.passed, "{:?}", report.cells);
    assert!(report.improving.is_none());

    let off = ControlPolicy::constant(optimum + 0.5, ControlDomain::unbounded());
    let report = sufficient_condition_probe(&mut evaluate, &off, &directions, &settings, vec![]).unwrap();
    assert!(!report.verdict.passed);
    let better = report.improving.expect("an improving direction");
    assert!(better.eps < 0.0, "{better:?}");
}
