//! Transformed adjoints, the risk-sensitive Hamiltonian and numerical checks
//! of the first- and second-order optimality conditions.
//!
//! With adjoints `p̃₂, q̃₂, π̃₂, p̃₃` and transform inputs `l, L`,
//!
//! ```text
//! H = f + b p̃₂ + σ q̃₂ + (g ∓ θ l z) p̃₃ + Σ_i w_i [γ_i π̃₂,i − (g − θ L_i r_i) p̃₃]
//! ```
//!
//! where the sign of the `θ l z` term is selected by [`ZlSign`].

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cashflow::{g_of_t, CashflowParams, RiccatiSolution};
use crate::engine::{mc_estimate, PathBundle};
use crate::error::{Error, Result};
use crate::model::{
    evaluate, partials, Coefficient, CoefficientModel, ControlDomain, ControlPolicy, FeedbackArgs, MarkSet, StatePoint,
    Variable,
};
use crate::risk::cost_j_theta;
use crate::rng::RngSpec;

/// Sign in front of `θ l z` in the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZlSign {
    /// `g − θ l z`.
    #[default]
    Minus,
    /// `g + θ l z`.
    Plus,
}

impl ZlSign {
    fn factor(self) -> f64 {
        match self {
            ZlSign::Minus => -1.0,
            ZlSign::Plus => 1.0,
        }
    }
}

/// Arguments of the Hamiltonian at one `(path, node)`.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianInput<'a> {
    pub point: StatePoint<'a>,
    pub v: f64,
    pub p2: f64,
    pub q2: f64,
    /// One entry per mark.
    pub pi2: &'a [f64],
    pub p3: f64,
    pub l: f64,
    /// One entry per mark.
    pub big_l: &'a [f64],
    pub theta: f64,
}

impl HamiltonianInput<'_> {
    fn check(&self, marks: &MarkSet) -> Result<()> {
        let m = marks.len();
        if self.pi2.len() != m || self.big_l.len() != m || self.point.r.len() != m {
            return Err(Error::usage(format!(
                "Hamiltonian input needs {m} jump entries, got pi2 {}, L {}, r {}",
                self.pi2.len(),
                self.big_l.len(),
                self.point.r.len()
            )));
        }
        let scalars = [self.v, self.p2, self.q2, self.p3, self.l, self.theta];
        if !self.point.is_finite()
            || scalars.iter().any(|v| !v.is_finite())
            || self.pi2.iter().chain(self.big_l).any(|v| !v.is_finite())
        {
            return Err(Error::usage("Hamiltonian input is not finite"));
        }
        Ok(())
    }
}

/// The risk-sensitive Hamiltonian.
pub fn hamiltonian<M: CoefficientModel + ?Sized>(
    inp: &HamiltonianInput<'_>,
    model: &M,
    marks: &MarkSet,
    sign: ZlSign,
) -> Result<f64> {
    inp.check(marks)?;
    let p = &inp.point;
    let v = inp.v;
    let f = evaluate(model, Coefficient::RunningCost, p, v, marks)?;
    let b = evaluate(model, Coefficient::Drift, p, v, marks)?;
    let s = evaluate(model, Coefficient::Diffusion, p, v, marks)?;
    let g = evaluate(model, Coefficient::Generator, p, v, marks)?;
    let mut h = f + b * inp.p2 + s * inp.q2 + (g + sign.factor() * inp.theta * inp.l * p.z) * inp.p3;
    for (i, w) in marks.weights().iter().enumerate() {
        let gamma = evaluate(model, Coefficient::Jump(i), p, v, marks)?;
        h += w * (gamma * inp.pi2[i] - (g - inp.theta * inp.big_l[i] * p.r[i]) * inp.p3);
    }
    Ok(h)
}

/// `∂H/∂v` with the adjoints held fixed. The `θ l z` and `θ L r` terms do not
/// depend on `v`, so the sign convention does not enter.
pub fn hamiltonian_v_derivative<M: CoefficientModel + ?Sized>(
    inp: &HamiltonianInput<'_>,
    model: &M,
    marks: &MarkSet,
) -> Result<f64> {
    inp.check(marks)?;
    let d = |c: Coefficient| partials(model, c, Variable::Control, &inp.point, inp.v, marks).map(|p| p.value);
    let g_v = d(Coefficient::Generator)?;
    let mut h = d(Coefficient::RunningCost)?
        + d(Coefficient::Drift)? * inp.p2
        + d(Coefficient::Diffusion)? * inp.q2
        + g_v * inp.p3;
    for (i, w) in marks.weights().iter().enumerate() {
        h += w * (d(Coefficient::Jump(i))? * inp.pi2[i] - g_v * inp.p3);
    }
    Ok(h)
}

/// `H(v_alt) − H(v)` with state and adjoints held fixed.
pub fn hamiltonian_control_gap<M: CoefficientModel + ?Sized>(
    inp: &HamiltonianInput<'_>,
    model: &M,
    marks: &MarkSet,
    sign: ZlSign,
    domain: ControlDomain,
    v_alt: f64,
) -> Result<f64> {
    if !domain.contains(v_alt) {
        return Err(Error::usage(format!(
            "alternative control {v_alt} lies outside U = [{}, {}]",
            domain.lo, domain.hi
        )));
    }
    if v_alt == inp.v {
        inp.check(marks)?;
        return Ok(0.0);
    }
    let alt = HamiltonianInput { v: v_alt, ..*inp };
    Ok(hamiltonian(&alt, model, marks, sign)? - hamiltonian(inp, model, marks, sign)?)
}

/// Second-order response of the Hamiltonian to the control through the
/// identified adjoints `q̃₂ = θ l p̃₂ + σ v A`, `π̃₂ = θ L p̃₂ + (1 + r) v A`:
/// per step, `curvature = A (σ² + Σ w (1 + r)²)` and the expected sign of
/// the leading coefficient, `sign(A G)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseProfile {
    pub curvature: Vec<f64>,
    pub expected_sign: Vec<f64>,
}

/// Raw-scale adjoints `p⃗ = θ V p̃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAdjoints {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub p3: Vec<f64>,
}

/// Transformed adjoints along a path bundle. Node arrays are
/// `[p * (N + 1) + k]`, step arrays `[p * N + k]`, mark arrays add a trailing
/// mark index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointBundle {
    pub n_paths: usize,
    pub steps: usize,
    pub n_marks: usize,
    pub theta: f64,
    pub p2: Vec<f64>,
    pub p3: Vec<f64>,
    pub q2: Vec<f64>,
    pub pi2: Vec<f64>,
    /// `l` per step (shared by all paths in the example).
    pub l: Vec<f64>,
    /// `L` per step and mark.
    pub big_l: Vec<f64>,
    /// `V^θ` per node, when attached.
    pub v_theta: Option<Vec<f64>>,
    pub raw: Option<RawAdjoints>,
    pub response: Option<ResponseProfile>,
}

impl AdjointBundle {
    pub fn p2_at(&self, p: usize, k: usize) -> f64 {
        self.p2[p * (self.steps + 1) + k]
    }

    pub fn p3_at(&self, p: usize, k: usize) -> f64 {
        self.p3[p * (self.steps + 1) + k]
    }

    pub fn q2_at(&self, p: usize, k: usize) -> f64 {
        self.q2[p * self.steps + k]
    }

    pub fn pi2_at(&self, p: usize, k: usize) -> &[f64] {
        let m = self.n_marks;
        let i = (p * self.steps + k) * m;
        &self.pi2[i..i + m]
    }

    pub fn big_l_at(&self, k: usize) -> &[f64] {
        let m = self.n_marks;
        &self.big_l[k * m..(k + 1) * m]
    }

    /// `p̃₁ ≡ 1`.
    pub fn p1_at(&self, _p: usize, _k: usize) -> f64 {
        1.0
    }

    /// Attaches `V^θ` (node layout) and reconstructs `p⃗ = θ V p̃`.
    pub fn with_v_theta(mut self, v_theta: Vec<f64>) -> Result<Self> {
        if v_theta.len() != self.p2.len() {
            return Err(Error::usage(format!(
                "V^theta needs {} node values, got {}",
                self.p2.len(),
                v_theta.len()
            )));
        }
        if v_theta.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::numeric("V^theta must be positive and finite"));
        }
        let scale: Vec<f64> = v_theta.iter().map(|v| self.theta * v).collect();
        self.raw = Some(RawAdjoints {
            p1: scale.clone(),
            p2: scale.iter().zip(&self.p2).map(|(s, p)| s * p).collect(),
            p3: scale.iter().zip(&self.p3).map(|(s, p)| s * p).collect(),
        });
        self.v_theta = Some(v_theta);
        Ok(self)
    }

    /// Max node-wise `|p̃ − p⃗/(θV)|` over all components, `None` without `V`.
    pub fn transform_identity_error(&self) -> Option<f64> {
        let (raw, v) = (self.raw.as_ref()?, self.v_theta.as_ref()?);
        let mut worst: f64 = 0.0;
        for i in 0..v.len() {
            let s = self.theta * v[i];
            worst = worst
                .max((1.0 - raw.p1[i] / s).abs())
                .max((self.p2[i] - raw.p2[i] / s).abs())
                .max((self.p3[i] - raw.p3[i] / s).abs());
        }
        Some(worst)
    }

    fn check(&self, paths: &PathBundle) -> Result<()> {
        if self.n_paths != paths.n_paths || self.steps != paths.steps() || self.n_marks != paths.n_marks() {
            return Err(Error::usage("adjoint bundle does not match the path bundle"));
        }
        Ok(())
    }

    /// Hamiltonian input at `(p, k)`, `k < N`, with the applied control.
    pub fn input<'a>(&'a self, paths: &'a PathBundle, p: usize, k: usize) -> HamiltonianInput<'a> {
        HamiltonianInput {
            point: StatePoint::new(
                paths.grid.node(k),
                paths.x_at(p, k),
                paths.y_at(p, k),
                paths.z_at(p, k),
                paths.r_at(p, k),
            ),
            v: paths.u_at(p, k),
            p2: self.p2_at(p, k),
            q2: self.q2_at(p, k),
            pi2: self.pi2_at(p, k),
            p3: self.p3_at(p, k),
            l: self.l[k],
            big_l: self.big_l_at(k),
            theta: self.theta,
        }
    }
}

/// Adjoints of the cash-flow example from its gains:
/// `p̃₂ = A x + B`, `p̃₃ = ψ y + φ`, `q̃₂ = θ l p̃₂ + σ u A`,
/// `π̃₂,i = θ L_i p̃₂ + (1 + r_i) u A`.
pub fn simulate_transformed_adjoints_example(
    params: &CashflowParams,
    riccati: Option<&RiccatiSolution>,
    paths: &PathBundle,
) -> Result<AdjointBundle> {
    let sol = riccati.ok_or_else(|| Error::usage("transformed adjoints need a solved Riccati system"))?;
    let n = paths.steps();
    if sol.a.len() != n + 1 {
        return Err(Error::usage("Riccati grid does not match the path grid"));
    }
    if let Some(k) = sol.a.iter().position(|a| *a == 0.0 || !a.is_finite()) {
        return Err(Error::config(format!("gain A vanishes at node {k}")));
    }
    let g = g_of_t(params, 0.0)?;
    let m = paths.n_marks();
    let (n_paths, theta, horizon) = (paths.n_paths, params.theta, params.horizon);
    let mut out = AdjointBundle {
        n_paths,
        steps: n,
        n_marks: m,
        theta,
        p2: vec![0.0; n_paths * (n + 1)],
        p3: vec![0.0; n_paths * (n + 1)],
        q2: vec![0.0; n_paths * n],
        pi2: vec![0.0; n_paths * n * m],
        l: (0..n).map(|k| params.l.at(paths.grid.node(k), horizon)).collect(),
        big_l: (0..n)
            .flat_map(|k| params.big_l.iter().map(move |prof| (prof, k)))
            .map(|(prof, k)| prof.at(paths.grid.node(k), horizon))
            .collect(),
        v_theta: None,
        raw: None,
        response: None,
    };
    for p in 0..n_paths {
        for k in 0..=n {
            let i = paths.node_index(p, k);
            out.p2[i] = sol.a[k] * paths.x[i] + sol.b[k];
            out.p3[i] = sol.psi[k] * paths.y[i] + sol.phi[k];
            if k < n {
                let (u, a) = (paths.u_at(p, k), sol.a[k]);
                let j = p * n + k;
                out.q2[j] = theta * out.l[k] * out.p2[i] + params.sigma * u * a;
                for mi in 0..m {
                    out.pi2[j * m + mi] = theta * out.big_l[k * m + mi] * out.p2[i] + (1.0 + params.r[mi]) * u * a;
                }
            }
        }
    }
    let spread = params.sigma * params.sigma + params.marks.integrate(|i| (1.0 + params.r[i]).powi(2));
    out.response = Some(ResponseProfile {
        curvature: (0..n).map(|k| sol.a[k] * spread).collect(),
        expected_sign: (0..n).map(|k| (sol.a[k] * g).signum()).collect(),
    });
    Ok(out)
}

/// Where a diagnostic attained its worst value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub path: usize,
    pub node: usize,
    pub v_alt: Option<f64>,
    pub direction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// `"necessary"` or `"sufficient"`.
    pub condition: String,
    pub verdict: String,
    pub passed: bool,
    pub worst_gap: f64,
    pub worst_location: Option<Location>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessarySettings {
    pub max_paths: usize,
    /// Gap grid `u ± half_width` with `points` points.
    pub half_width: f64,
    pub points: usize,
    pub derivative_tol: f64,
    pub sign: ZlSign,
}

impl Default for NecessarySettings {
    fn default() -> Self {
        Self {
            max_paths: 100,
            half_width: 2.0,
            points: 41,
            derivative_tol: 1e-10,
            sign: ZlSign::Minus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessaryReport {
    pub verdict: Verdict,
    pub max_abs_dh_dv: f64,
    pub dh_dv_location: Option<Location>,
    /// Smallest and largest `H(v_alt) − H(u)` over the gap grids, including
    /// the second-order response when the bundle carries one.
    pub min_gap: f64,
    pub max_gap: f64,
    /// `"minimum"` if every gap is ≥ 0 (u minimizes H on the grid),
    /// `"maximum"` if every gap is ≤ 0, `"mixed"` otherwise.
    pub orientation: String,
    /// `gap(u, u) = 0` held exactly everywhere.
    pub zero_gap_exact: bool,
    pub curvature_checked: bool,
    pub curvature_consistent: bool,
    pub curvature_violations: usize,
    pub nodes_checked: usize,
}

/// Grid `u ± w` with `points` points, restricted to `U`.
fn gap_grid(u: f64, half_width: f64, points: usize, domain: ControlDomain) -> Vec<f64> {
    let points = points.max(3);
    (0..points)
        .map(|j| u - half_width + 2.0 * half_width * j as f64 / (points - 1) as f64)
        .filter(|v| domain.contains(*v))
        .collect()
}

/// First-order diagnostics along the first `max_paths` paths: analytic
/// `∂H/∂v` at the applied control, exact zero gap at `v = u`, signed gaps
/// over a control grid and the sign of their curvature.
pub fn necessary_condition_check<M: CoefficientModel + ?Sized>(
    model: &M,
    paths: &PathBundle,
    adjoints: &AdjointBundle,
    domain: ControlDomain,
    settings: &NecessarySettings,
) -> Result<NecessaryReport> {
    adjoints.check(paths)?;
    let marks = &paths.marks;
    let n_paths = paths.n_paths.min(settings.max_paths);
    let mut report = NecessaryReport {
        verdict: Verdict {
            condition: "necessary".into(),
            verdict: String::new(),
            passed: false,
            worst_gap: 0.0,
            worst_location: None,
            warnings: Vec::new(),
        },
        max_abs_dh_dv: 0.0,
        dh_dv_location: None,
        min_gap: f64::INFINITY,
        max_gap: f64::NEG_INFINITY,
        orientation: String::new(),
        zero_gap_exact: true,
        curvature_checked: adjoints.response.is_some(),
        curvature_consistent: true,
        curvature_violations: 0,
        nodes_checked: 0,
    };
    for p in 0..n_paths {
        for k in 0..paths.steps() {
            let inp = adjoints.input(paths, p, k);
            let u = inp.v;
            let dh = hamiltonian_v_derivative(&inp, model, marks)?;
            if dh.abs() > report.max_abs_dh_dv || report.dh_dv_location.is_none() {
                report.max_abs_dh_dv = report.max_abs_dh_dv.max(dh.abs());
                report.dh_dv_location = Some(Location {
                    path: p,
                    node: k,
                    v_alt: None,
                    direction: None,
                });
            }
            if hamiltonian_control_gap(&inp, model, marks, settings.sign, domain, u)? != 0.0 {
                report.zero_gap_exact = false;
            }
            let curvature = adjoints.response.as_ref().map(|r| r.curvature[k]);
            let grid = gap_grid(u, settings.half_width, settings.points, domain);
            let mut gaps = Vec::with_capacity(grid.len());
            for &v in &grid {
                let mut gap = hamiltonian_control_gap(&inp, model, marks, settings.sign, domain, v)?;
                if let Some(c) = curvature {
                    gap += c * (v - u).powi(2);
                }
                if gap < report.min_gap {
                    report.min_gap = gap;
                    report.verdict.worst_location = Some(Location {
                        path: p,
                        node: k,
                        v_alt: Some(v),
                        direction: None,
                    });
                }
                report.max_gap = report.max_gap.max(gap);
                gaps.push(gap);
            }
            if let Some(resp) = &adjoints.response {
                let expected = resp.expected_sign[k];
                let scale = gaps.iter().fold(1.0f64, |a, g| a.max(g.abs()));
                for w in gaps.windows(3) {
                    let second = w[0] - 2.0 * w[1] + w[2];
                    // Second differences that are pure rounding carry no sign.
                    if second.abs() > 1e-12 * scale && second.signum() != expected {
                        report.curvature_violations += 1;
                        report.curvature_consistent = false;
                    }
                }
            }
            report.nodes_checked += 1;
        }
    }
    if report.nodes_checked == 0 {
        return Err(Error::usage("no nodes to check"));
    }
    let tol = 1e-12 * (1.0 + report.max_gap.abs().max(report.min_gap.abs()));
    report.orientation = if report.min_gap >= -tol {
        "minimum"
    } else if report.max_gap <= tol {
        "maximum"
    } else {
        "mixed"
    }
    .into();
    let derivative_ok = report.max_abs_dh_dv <= settings.derivative_tol;
    report.verdict.worst_gap = report.min_gap;
    report.verdict.passed = derivative_ok && report.zero_gap_exact && report.curvature_consistent;
    if !derivative_ok {
        report.verdict.warnings.push(format!(
            "max |dH/dv| = {:e} exceeds {:e}",
            report.max_abs_dh_dv, settings.derivative_tol
        ));
    }
    if !report.curvature_consistent {
        report.verdict.warnings.push(format!(
            "{} second differences disagree with sign(A G)",
            report.curvature_violations
        ));
    }
    if !report.zero_gap_exact {
        report.verdict.warnings.push("gap(u, u) was not exactly zero".into());
    }
    report.verdict.verdict = if report.verdict.passed {
        format!("first-order condition holds; u is a {} of H on the grid", report.orientation)
    } else {
        "first-order condition violated".into()
    };
    Ok(report)
}

/// Outcome of randomized midpoint convexity tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityCheck {
    pub name: String,
    pub probes: usize,
    pub violations: usize,
    /// Largest `f(mid) − (f(a) + f(b))/2`.
    pub worst_excess: f64,
}

impl ConvexityCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Draws `probes` pairs uniformly in the box `[lo, hi]` and checks
/// `f((a + b)/2) ≤ (f(a) + f(b))/2` up to rounding.
pub fn midpoint_convexity(
    name: &str,
    f: &dyn Fn(&[f64]) -> f64,
    lo: &[f64],
    hi: &[f64],
    probes: usize,
    rng: RngSpec,
) -> ConvexityCheck {
    let mut gen = rng.brownian(0);
    let d = lo.len().min(hi.len());
    let mut check = ConvexityCheck {
        name: name.to_string(),
        probes,
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
    };
    let (mut a, mut b, mut mid) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for _ in 0..probes {
        for j in 0..d {
            a[j] = gen.random_range(lo[j]..=hi[j]);
            b[j] = gen.random_range(lo[j]..=hi[j]);
            mid[j] = 0.5 * (a[j] + b[j]);
        }
        let (fa, fb, fm) = (f(&a), f(&b), f(&mid));
        let excess = fm - 0.5 * (fa + fb);
        check.worst_excess = check.worst_excess.max(excess);
        if !excess.is_finite() || excess > 1e-12 * (1.0 + fa.abs().max(fb.abs())) {
            check.violations += 1;
        }
    }
    check
}

/// Midpoint convexity of the Hamiltonian (with its second-order control
/// response) in `(x, y, z, v)` around states sampled from the bundle.
pub fn hamiltonian_convexity<M: CoefficientModel + ?Sized>(
    model: &M,
    paths: &PathBundle,
    adjoints: &AdjointBundle,
    sign: ZlSign,
    probes: usize,
    rng: RngSpec,
) -> Result<ConvexityCheck> {
    adjoints.check(paths)?;
    let mut picker = rng.jumps(0);
    let marks = &paths.marks;
    let mut total = ConvexityCheck {
        name: "H".into(),
        probes: 0,
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
    };
    let anchors = 20.min(paths.n_paths * paths.steps()).max(1);
    let per_anchor = probes.div_ceil(anchors);
    for j in 0..anchors {
        let p = picker.random_range(0..paths.n_paths);
        let k = picker.random_range(0..paths.steps());
        let base = adjoints.input(paths, p, k);
        let curvature = adjoints.response.as_ref().map_or(0.0, |r| r.curvature[k]);
        let h = |s: &[f64]| {
            let inp = HamiltonianInput {
                point: StatePoint { x: s[0], y: s[1], z: s[2], ..base.point },
                v: s[3],
                ..base
            };
            hamiltonian(&inp, model, marks, sign).unwrap_or(f64::NAN) + curvature * (s[3] - base.v).powi(2)
        };
        let c = [base.point.x, base.point.y, base.point.z, base.v];
        let lo: Vec<f64> = c.iter().map(|v| v - 1.0).collect();
        let hi: Vec<f64> = c.iter().map(|v| v + 1.0).collect();
        let check = midpoint_convexity("H", &h, &lo, &hi, per_anchor, rng.child(j as u64));
        total.probes += check.probes;
        total.violations += check.violations;
        total.worst_excess = total.worst_excess.max(check.worst_excess);
    }
    Ok(total)
}

type DirectionFn = Arc<dyn Fn(&FeedbackArgs<'_>) -> f64 + Send + Sync>;

/// Perturbation direction of the sufficient-condition probe.
#[derive(Clone)]
pub enum Direction {
    /// `u + ε`.
    Constant,
    /// `u + ε d(t, x, y, r)`.
    Feedback(DirectionFn),
}

impl std::fmt::Debug for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Constant => write!(f, "Constant"),
            Direction::Feedback(_) => write!(f, "Feedback(..)"),
        }
    }
}

fn perturbed(base: &ControlPolicy, direction: &Direction, eps: f64) -> ControlPolicy {
    match direction {
        Direction::Constant => base.shifted(eps),
        Direction::Feedback(d) => {
            let (b, d) = (base.clone(), d.clone());
            ControlPolicy::feedback(move |args| b.raw(args) + eps * d(args), base.domain())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub eps: Vec<f64>,
    pub theta: f64,
    /// Cells count as dominated when `J(u_ε) − J(u) ≥ −sigmas · SE`.
    pub sigmas: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            eps: vec![-0.25, -0.1, 0.0, 0.1, 0.25],
            theta: 0.5,
            sigmas: 3.0,
        }
    }
}

/// One `(direction, ε)` entry of the cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub direction: String,
    pub eps: f64,
    pub j: Option<f64>,
    pub log_j: f64,
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// `J(u_ε) − J(u)` from paired samples.
    pub diff: f64,
    pub diff_std_error: f64,
    /// `diff / diff_std_error` (0 when both vanish).
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub theta: f64,
    pub baseline_j: Option<f64>,
    pub baseline_log_j: f64,
    pub baseline_std_error: Option<f64>,
    pub cells: Vec<ProbeCell>,
    pub convexity: Vec<ConvexityCheck>,
    pub verdict: Verdict,
    /// The cell with the most significant cost decrease, if any is
    /// significant.
    pub improving: Option<ProbeCell>,
}

/// Paired difference `mean(e^{θa} − e^{θb})` with its standard error,
/// computed on a common scale to avoid overflow.
fn paired_exp_difference(a: &[f64], b: &[f64], theta: f64) -> Result<(f64, f64)> {
    let shift = a.iter().chain(b).fold(f64::NEG_INFINITY, |m, v| m.max(theta * v));
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| (theta * x - shift).exp() - (theta * y - shift).exp())
        .collect();
    let est = mc_estimate(&d)?;
    let scale = shift.exp();
    if scale.is_finite() {
        Ok((est.mean * scale, est.std_error * scale))
    } else {
        // Only the sign and the z-score survive.
        Ok((est.mean, est.std_error))
    }
}

/// Cost table `J^θ(u + ε d)` over directions and `ε`, using common random
/// numbers through `evaluate`, which maps a policy to its `Θ_T` samples.
/// `ε = 0` cells evaluate `base` itself.
pub fn sufficient_condition_probe<E>(
    evaluate: &mut E,
    base: &ControlPolicy,
    directions: &[(String, Direction)],
    settings: &ProbeSettings,
    convexity: Vec<ConvexityCheck>,
) -> Result<ProbeReport>
where
    E: FnMut(&ControlPolicy) -> Result<Vec<f64>>,
{
    let theta = settings.theta;
    let baseline = evaluate(base)?;
    let base_est = cost_j_theta(&baseline, theta)?;
    let mut cells = Vec::new();
    for (name, direction) in directions {
        for &eps in &settings.eps {
            let samples = if eps == 0.0 {
                evaluate(base)?
            } else {
                evaluate(&perturbed(base, direction, eps))?
            };
            if samples.len() != baseline.len() {
                return Err(Error::usage("perturbed and baseline sample counts differ"));
            }
            let est = cost_j_theta(&samples, theta)?;
            let (diff, diff_se) = paired_exp_difference(&samples, &baseline, theta)?;
            let z_score = if diff_se > 0.0 { diff / diff_se } else { 0.0 };
            cells.push(ProbeCell {
                direction: name.clone(),
                eps,
                j: est.j,
                log_j: est.log_j,
                std_error: est.std_error,
                ci_low: est.ci_low,
                ci_high: est.ci_high,
                diff,
                diff_std_error: diff_se,
                z_score,
            });
        }
    }
    let worst = cells
        .iter()
        .min_by(|a, b| a.z_score.total_cmp(&b.z_score))
        .cloned();
    let consistent = cells.iter().all(|c| c.diff >= -settings.sigmas * c.diff_std_error);
    let improving = worst.clone().filter(|c| c.diff < -settings.sigmas * c.diff_std_error);
    let mut warnings: Vec<String> = convexity
        .iter()
        .filter(|c| !c.passed())
        .map(|c| {
            format!(
                "convexity of {} failed in {}/{} probes; the sufficient condition's hypotheses are not met",
                c.name, c.violations, c.probes
            )
        })
        .collect();
    if let Some(c) = &improving {
        warnings.push(format!("direction {} with eps = {} lowers the cost", c.direction, c.eps));
    }
    let verdict = Verdict {
        condition: "sufficient".into(),
        verdict: if consistent {
            "consistent with optimality".into()
        } else {
            "improving perturbation found".into()
        },
        passed: consistent,
        worst_gap: worst.as_ref().map_or(0.0, |c| c.diff),
        worst_location: worst.as_ref().map(|c| Location {
            path: 0,
            node: 0,
            v_alt: None,
            direction: Some(c.eps),
        }),
        warnings,
    };
    Ok(ProbeReport {
        theta,
        baseline_j: base_est.j,
        baseline_log_j: base_est.log_j,
        baseline_std_error: base_est.std_error,
        cells,
        convexity,
        verdict,
        improving,
    })
}
