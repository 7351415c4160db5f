use riskflow::adjoint::simulate_transformed_adjoints_example;
use riskflow::cashflow::{
    b_terminal, feedback_control, feedback_policy, g_of_t, run_mean_variance_experiment, solve_a, solve_b,
    solve_cashflow, solve_psi_phi, solve_riccati, CashflowParams, CashflowSettings, ExperimentSettings, Profile,
    RiccatiMethod,
};
use riskflow::engine::{mc_estimate, simulate_forward, simulate_terminal};
use riskflow::model::{FeedbackArgs, MarkSet, TimeGrid};
use riskflow::risk::{cost_j_theta, theta_t};
use riskflow::Error;
use serde_json::Value;

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(1.0, n).unwrap()
}

fn with_mark(sigma: f64, weight: f64, r: f64) -> CashflowParams {
    CashflowParams {
        sigma,
        marks: MarkSet::single(0.5, weight).unwrap(),
        r: vec![r],
        big_l: vec![Profile::Constant(0.0)],
        ..CashflowParams::benchmark()
    }
}

#[test]
fn g_examples() {
    let p = CashflowParams {
        sigma: 1.0,
        ..CashflowParams::benchmark()
    };
    assert_eq!(g_of_t(&p, 0.0).unwrap(), 1.0);
    assert!((g_of_t(&with_mark(2.0, 1.0, 0.0), 0.0).unwrap() - 3.0).abs() < 1e-15);
    assert!(matches!(g_of_t(&with_mark(1.0, 1.0, 0.0), 0.0), Err(Error::Config(_))));
    assert!(matches!(with_mark(1.0, 1.0, 0.0).validate(), Err(Error::Config(_))));
}

#[test]
fn psi_without_premium_matches_quadrature() {
    // ρ = 0, l = 0: ψ(t) = θ exp(−2λσ² ∫_0^t A) with A(s) = θ e^{2c (T − s)}.
    let params = CashflowParams {
        rho: 0.0,
        ..CashflowParams::benchmark()
    };
    let (theta, c, lam, s2) = (params.theta, params.c, params.disc_rate, params.sigma * params.sigma);
    let g = grid(1000);
    let (psi, phi) = solve_psi_phi(&params, &g, 0.3).unwrap();
    for k in 0..=1000 {
        let t = g.node(k);
        let int_a = theta / (2.0 * c) * ((2.0 * c).exp() - (2.0 * c * (1.0 - t)).exp());
        let exact = theta * (-2.0 * lam * s2 * int_a).exp();
        assert!((psi[k] - exact).abs() < 1e-10, "node {k}: {} vs {exact}", psi[k]);
        if k > 0 {
            assert!(psi[k] < psi[k - 1]);
        }
    }
    // φ' = −λ φ with φ(0) = 1 − θ(y₀ − a).
    let phi0 = 1.0 - theta * (0.3 - params.a);
    assert!((phi[1000] - phi0 * (-lam).exp()).abs() < 1e-10);
}

#[test]
fn b_without_payout_is_homogeneous() {
    // c = 0: B(t) = B(T) exp(∫_t^T ρ²/σ²).
    let params = CashflowParams {
        c: 0.0,
        ..CashflowParams::benchmark()
    };
    let g = grid(1000);
    let y0 = -0.8;
    let ybar = vec![0.4; 1001];
    let kappa = params.rho * params.rho / (params.sigma * params.sigma);
    for method in [RiccatiMethod::ClosedForm, RiccatiMethod::Rk4] {
        let b = solve_b(&params, &g, y0, &ybar, method).unwrap();
        for k in (0..=1000).step_by(50) {
            let exact = b_terminal(&params, y0) * (kappa * (1.0 - g.node(k))).exp();
            assert!((b[k] - exact).abs() < 1e-10, "{method:?} node {k}");
        }
    }
}

#[test]
fn b_vanishes_with_zero_terminal_and_source() {
    // a = 0, y₀ = 1/θ: B(T) = 0 and φ(0) = 0, so p̃₃ = ψ·0 + 0 with ȳ ≡ 0.
    let params = CashflowParams {
        a: 0.0,
        ..CashflowParams::benchmark()
    };
    let y0 = 1.0 / params.theta;
    let b = solve_b(&params, &grid(200), y0, &[0.0; 201], RiccatiMethod::Rk4).unwrap();
    assert!(b.iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn terminal_values_and_solver_agreement() {
    let params = CashflowParams::benchmark();
    let g = grid(1000);
    let a_cf = solve_a(&params, &g, RiccatiMethod::ClosedForm).unwrap();
    let a_rk = solve_a(&params, &g, RiccatiMethod::Rk4).unwrap();
    assert_eq!(a_cf[1000], params.theta);
    assert_eq!(a_rk[1000], params.theta);
    let worst = a_cf.iter().zip(&a_rk).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-8, "{worst}");
    let sol = solve_riccati(&params, &g, -1.2, &vec![-0.5; 1001], RiccatiMethod::ClosedForm).unwrap();
    assert_eq!(sol.b[1000], b_terminal(&params, -1.2));
    assert!(sol.a_cross_check <= 1e-8 && sol.b_cross_check <= 1e-8, "{} {}", sol.a_cross_check, sol.b_cross_check);
}

#[test]
fn feedback_matches_independent_fixture() {
    let fixture: Value =
        serde_json::from_str(include_str!("fixtures/feedback_oracle.json")).expect("fixture parses");
    let get = |k: &str| fixture[k].as_f64().unwrap();
    let params = CashflowParams::benchmark();
    let g = grid(1000);
    let y0 = get("y0");
    let ybar: Vec<f64> = g.nodes().iter().map(|t| y0 + get("ybar_slope") * t).collect();
    for method in [RiccatiMethod::ClosedForm, RiccatiMethod::Rk4] {
        let sol = solve_riccati(&params, &g, y0, &ybar, method).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        assert!(rel(sol.a[0], get("A0")) < 1e-9, "{method:?} A0 {}", sol.a[0]);
        assert!(rel(sol.b[0], get("B0")) < 1e-8, "{method:?} B0 {}", sol.b[0]);
        assert!(rel(sol.psi[1000], get("psiT")) < 1e-9);
        assert!(rel(sol.phi[1000], get("phiT")) < 1e-9);
        let u = feedback_control(&params, &sol, 0, params.m0, y0).unwrap();
        assert!(rel(u, get("u0")) < 1e-8, "{method:?} u0 {u} vs {}", get("u0"));
        let policy = feedback_policy(&params, &sol).unwrap();
        let args = FeedbackArgs {
            k: 0,
            t: 0.0,
            x: params.m0,
            y: y0,
            r: &[],
        };
        assert_eq!(policy.raw(&args), u);
    }
}

#[test]
fn zero_premium_gives_zero_control_and_zero_gain_is_rejected() {
    let params = CashflowParams {
        rho: 0.0,
        ..CashflowParams::benchmark()
    };
    let g = grid(100);
    let sol = solve_riccati(&params, &g, 0.2, &[0.1; 101], RiccatiMethod::ClosedForm).unwrap();
    for (k, x, y) in [(0, 1.0, 2.0), (50, -3.0, 0.5), (99, 10.0, -4.0)] {
        assert_eq!(feedback_control(&params, &sol, k, x, y).unwrap(), 0.0);
    }
    let mut broken = sol.clone();
    broken.a.iter_mut().for_each(|a| *a = 0.0);
    assert!(feedback_control(&params, &broken, 3, 1.0, 1.0).is_err());
    assert!(feedback_policy(&params, &broken).is_err());
    assert!(simulate_transformed_adjoints_example(&params, Some(&broken), &dummy_paths(&params)).is_err());
    assert!(simulate_transformed_adjoints_example(&params, None, &dummy_paths(&params)).is_err());
}

fn dummy_paths(params: &CashflowParams) -> riskflow::engine::PathBundle {
    let settings = CashflowSettings {
        steps: 100,
        pilot_paths: 200,
        max_iter: 2,
        ..CashflowSettings::default()
    };
    let sol = solve_cashflow(params, &settings).unwrap();
    simulate_forward(&sol.model, &sol.policy, &sol.field, &sol.main_spec(20)).unwrap()
}

#[test]
fn terminal_adjoint_formula() {
    let params = CashflowParams {
        theta: 0.1,
        ..CashflowParams::benchmark()
    };
    let sol = solve_riccati(&params, &grid(10), 0.5, &[0.5; 11], RiccatiMethod::ClosedForm).unwrap();
    assert!((sol.a[10] * 2.0 + sol.b[10] - 1.05).abs() < 1e-15);

    let params = CashflowParams::benchmark();
    let settings = CashflowSettings {
        steps: 50,
        pilot_paths: 5_000,
        ..CashflowSettings::default()
    };
    let sol = solve_cashflow(&params, &settings).unwrap();
    let paths = simulate_forward(&sol.model, &sol.policy, &sol.field, &sol.main_spec(300)).unwrap();
    let adj = simulate_transformed_adjoints_example(&params, Some(&sol.riccati), &paths).unwrap();
    for p in 0..paths.n_paths {
        let x = paths.x_at(p, 50);
        let expected = 1.0 + params.theta * (x - sol.y0 - params.a);
        assert!((adj.p2_at(p, 50) - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }

    // p⃗ = θ V p̃ with V(T) = A_T reproduces p₂(T) = θ Φ_x(x_T) A_T.
    let a_t: Vec<f64> = theta_t(&paths, &sol.model).unwrap().iter().map(|s| (params.theta * s).exp()).collect();
    let mut v = vec![1.0; paths.n_paths * 51];
    for p in 0..paths.n_paths {
        v[p * 51 + 50] = a_t[p];
    }
    let adj = adj.with_v_theta(v).unwrap();
    assert!(adj.transform_identity_error().unwrap() <= 1e-10);
    let raw = adj.raw.as_ref().unwrap();
    for p in 0..paths.n_paths {
        let phi_x = 1.0 + params.theta * (paths.x_at(p, 50) - sol.y0 - params.a);
        let expected = params.theta * phi_x * a_t[p];
        assert!((raw.p2[p * 51 + 50] - expected).abs() <= 1e-8 * expected.abs().max(1e-300));
    }
}

#[test]
fn small_theta_cost_is_first_order() {
    let params = CashflowParams {
        theta: 0.01,
        ..CashflowParams::benchmark()
    };
    let settings = CashflowSettings {
        steps: 50,
        pilot_paths: 5_000,
        ..CashflowSettings::default()
    };
    let sol = solve_cashflow(&params, &settings).unwrap();
    let paths = simulate_forward(&sol.model, &sol.policy, &sol.field, &sol.main_spec(5_000)).unwrap();
    let costs = theta_t(&paths, &sol.model).unwrap();
    let theta = params.theta;
    let j = cost_j_theta(&costs, theta).unwrap().j.unwrap();
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    // Taylor remainder: |e^{θs} − 1 − θs| ≤ (θs)²/2 · e^{θ|s|}.
    let remainder = costs.iter().map(|s| 0.5 * (theta * s).powi(2) * (theta * s.abs()).exp()).sum::<f64>()
        / costs.len() as f64;
    assert!((j - (1.0 + theta * mean)).abs() <= remainder);
}

#[test]
fn degenerate_noise_is_rejected_before_dividing_by_g() {
    let params = CashflowParams {
        sigma: 1e-8,
        ..CashflowParams::benchmark()
    };
    assert!(matches!(solve_cashflow(&params, &CashflowSettings::default()), Err(Error::Config(_))));
}

#[test]
fn refinement_of_terminal_mean() {
    // E[Ψ_T] under the computed feedback on grids N, 2N, 4N: successive
    // changes shrink like dt.
    let params = CashflowParams::benchmark();
    let means: Vec<f64> = [4usize, 8, 16]
        .iter()
        .map(|&steps| {
            let settings = CashflowSettings {
                steps,
                pilot_paths: 10_000,
                ..CashflowSettings::default()
            };
            let sol = solve_cashflow(&params, &settings).unwrap();
            let ends = simulate_terminal(&sol.model, &sol.policy, &sol.field, &sol.main_spec(400_000)).unwrap();
            let psi: Vec<f64> = ends.x.iter().map(|x| x + sol.y0).collect();
            mc_estimate(&psi).unwrap().mean
        })
        .collect();
    let (d1, d2) = ((means[0] - means[1]).abs(), (means[1] - means[2]).abs());
    let slope = (d1 / d2).log2();
    assert!(slope >= 0.8, "means {means:?}, slope {slope}");
}

#[test]
fn experiment_report_is_complete() {
    let params = CashflowParams::benchmark();
    let settings = CashflowSettings {
        steps: 50,
        pilot_paths: 2_000,
        ..CashflowSettings::default()
    };
    let experiment = ExperimentSettings {
        n_paths: 2_000,
        trajectory_paths: 200,
        ..ExperimentSettings::default()
    };
    let (report, paths) = run_mean_variance_experiment(&params, &settings, &experiment).unwrap();
    assert_eq!(paths.n_paths, 200);
    assert!(report.necessary.max_abs_dh_dv <= 1e-10);
    assert!(report.necessary.zero_gap_exact);
    assert_eq!(report.necessary.orientation, "minimum");
    assert!(report.necessary.curvature_consistent);
    // l ≡ 0 here, so the θ l z term vanishes and both conventions agree.
    assert_eq!(report.necessary.max_abs_dh_dv, report.necessary_flipped_sign.max_abs_dh_dv);
    assert_eq!(report.sufficient.cells.len(), 5);
    let zero = report.sufficient.cells.iter().find(|c| c.eps == 0.0).unwrap();
    assert_eq!(zero.diff, 0.0);
    assert_eq!(report.plot.t.len(), 51);
    let mut csv = Vec::new();
    report.plot.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 52);
}
