//! Mean-variance cash-flow example.
//!
//! Wealth and value processes
//!
//! ```text
//! dx = (ρ v − c x) dt + σ v dW + Σ_i v (1 + r_i) dÑ_i,    x(0) = m₀
//! dy = −(ρ v − c x + λ y) dt + z dW + Σ_i r_i dÑ_i,       y(T) = a
//! ```
//!
//! with the state-feedback control built from the gains `A, B` (adjoint
//! `p̃₂ = A x + B`) and `ψ, φ` (adjoint `p̃₃ = ψ y + φ`):
//!
//! ```text
//! u = −[(ρ + σθl + Σ w_i (1+r_i) θ L_i)(A x + B) + ρ (ψ y + φ)] / (A G),
//! G = σ² − Σ w_i (1 + r_i)²
//! ```
//!
//! `B` needs a deterministic stand-in for `p̃₃`; it uses `ψ ȳ + φ` with `ȳ`
//! the mean backward trajectory of a pilot simulation, and `y₀`, `ȳ` are
//! iterated to a fixed point together with the forward-backward coupling.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adjoint::{
    midpoint_convexity, necessary_condition_check, simulate_transformed_adjoints_example, sufficient_condition_probe,
    ConvexityCheck, Direction, NecessaryReport, NecessarySettings, ProbeReport, ProbeSettings, ZlSign,
};
use crate::engine::{fmt_float, simulate_forward, simulate_terminal, BackwardSource, PathBundle, SimulationSpec};
use crate::error::{Error, Result};
use crate::fbsde::{picard_couple_from, solve_backward, sweep_delta, BackwardField, CouplingReport, PicardSettings};
use crate::model::{
    Coefficient, CoefficientModel, ControlDomain, ControlPolicy, FeedbackArgs, GenericModel, MarkSet, StatePoint, TimeGrid,
    Variable,
};
use crate::regression::RegressionBasis;
use crate::risk::{cost_j_theta, risk_loss, CostEstimate, RiskLoss};
use crate::rng::RngSpec;

/// `|G|` below this is treated as zero.
pub const G_FLOOR: f64 = 1e-8;
/// `|ψ|` above this is reported as a Riccati blow-up.
pub const BLOW_UP: f64 = 1e12;
const PILOT_TAG: u64 = 0x70_696c_6f74;

/// A deterministic function of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    /// Linear interpolation from `start` at `t = 0` to `end` at the horizon.
    Linear { start: f64, end: f64 },
}

impl Default for Profile {
    fn default() -> Self {
        Profile::Constant(0.0)
    }
}

impl Profile {
    pub fn at(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            Profile::Constant(v) => v,
            Profile::Linear { start, end } => start + (end - start) * t / horizon,
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Profile::Constant(v) => v.is_finite(),
            Profile::Linear { start, end } => start.is_finite() && end.is_finite(),
        }
    }
}

/// Which sign convention the `A` and `B` equations are integrated with.
///
/// The printed gain equations read `dA/dt = +κ_A A`, while the printed
/// explicit solution `A(t) = θ exp(+∫_t^T κ_A)` solves `dA/dt = −κ_A A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiOrientation {
    /// Follow the explicit solution: `A` grows backward from `A(T) = θ`.
    #[default]
    ExplicitSolution,
    /// Follow the differential equations as displayed.
    PrintedOde,
}

impl RiccatiOrientation {
    /// `s` in `dA/dt = s κ_A A`.
    pub fn sign(self) -> f64 {
        match self {
            RiccatiOrientation::ExplicitSolution => -1.0,
            RiccatiOrientation::PrintedOde => 1.0,
        }
    }
}

/// Where the `ψ, φ` boundary data are imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// `ψ(0) = θ`, `φ(0) = 1 − θ(y₀ − a)`, integrated forward.
    #[default]
    Initial,
    /// The same values imposed at `T`, integrated backward.
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiMethod {
    #[default]
    ClosedForm,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CashflowParams {
    /// Risk premium rate.
    pub rho: f64,
    /// Payout rate.
    pub c: f64,
    pub sigma: f64,
    /// Rate `λ` of the value process drift.
    pub disc_rate: f64,
    /// Target `a`, also the terminal value of `y`.
    pub a: f64,
    /// Initial wealth.
    pub m0: f64,
    pub theta: f64,
    pub horizon: f64,
    pub marks: MarkSet,
    /// Deterministic `r(λ_i)` entering the jump size `v (1 + r_i)` and `G`.
    pub r: Vec<f64>,
    pub l: Profile,
    pub big_l: Vec<Profile>,
    /// Source `K(t)` of the `φ` equation.
    pub k_source: Profile,
    pub orientation: RiccatiOrientation,
    pub boundary: BoundaryMode,
}

impl CashflowParams {
    /// ρ = 0.2, c = 0.1, σ = 0.3, λ = 0.05, θ = 0.5, a = 1, m₀ = 1, T = 1, no jumps.
    pub fn benchmark() -> Self {
        Self {
            rho: 0.2,
            c: 0.1,
            sigma: 0.3,
            disc_rate: 0.05,
            a: 1.0,
            m0: 1.0,
            theta: 0.5,
            horizon: 1.0,
            marks: MarkSet::empty(),
            r: Vec::new(),
            l: Profile::default(),
            big_l: Vec::new(),
            k_source: Profile::default(),
            orientation: RiccatiOrientation::default(),
            boundary: BoundaryMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("rho", self.rho),
            ("c", self.c),
            ("sigma", self.sigma),
            ("disc_rate", self.disc_rate),
            ("a", self.a),
            ("m0", self.m0),
            ("theta", self.theta),
            ("horizon", self.horizon),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.sigma <= 0.0 {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.theta <= 0.0 {
            return Err(Error::config(format!("theta must be positive, got {}", self.theta)));
        }
        if self.horizon <= 0.0 {
            return Err(Error::config(format!("horizon must be positive, got {}", self.horizon)));
        }
        let m = self.marks.len();
        if self.r.len() != m || self.big_l.len() != m {
            return Err(Error::config(format!(
                "r and big_l need one entry per mark ({m}), got {} and {}",
                self.r.len(),
                self.big_l.len()
            )));
        }
        if self.r.iter().any(|v| !v.is_finite())
            || !self.l.is_finite()
            || !self.k_source.is_finite()
            || self.big_l.iter().any(|p| !p.is_finite())
        {
            return Err(Error::config("r, l, big_l and k_source must be finite"));
        }
        g_of_t(self, 0.0).map(|_| ())
    }

    /// `ρ + σθl(t) + Σ_i w_i (1 + r_i) θ L_i(t)`.
    pub fn risk_factor(&self, t: f64) -> f64 {
        let jumps = self
            .marks
            .integrate(|i| (1.0 + self.r[i]) * self.theta * self.big_l[i].at(t, self.horizon));
        self.rho + self.sigma * self.theta * self.l.at(t, self.horizon) + jumps
    }

    fn kappa_a(&self, t: f64, g: f64) -> f64 {
        2.0 * self.c + self.risk_factor(t).powi(2) / g
    }

    fn kappa_b(&self, t: f64, g: f64) -> f64 {
        self.c + self.risk_factor(t).powi(2) / g
    }
}

/// `G(t) = σ² − Σ_i w_i (1 + r_i)²`. Rejects `|G| < 1e−8` and negative `G`.
pub fn g_of_t(params: &CashflowParams, _t: f64) -> Result<f64> {
    let g = params.sigma * params.sigma - params.marks.integrate(|i| (1.0 + params.r[i]).powi(2));
    if !g.is_finite() || g.abs() < G_FLOOR {
        return Err(Error::config(format!("G = {g:e} vanishes; the feedback law divides by G")));
    }
    if g < 0.0 {
        return Err(Error::config(format!(
            "G = {g} is negative (jump second moment exceeds sigma^2); refusing to extrapolate the feedback formulas"
        )));
    }
    Ok(g)
}

/// Times `t_0, t_0 + dt/2, t_1, …, t_N` of the half-step grid.
fn half_times(grid: &TimeGrid) -> Vec<f64> {
    let n = grid.steps();
    (0..=2 * n)
        .map(|j| {
            if j % 2 == 0 {
                grid.node(j / 2)
            } else {
                grid.node(j / 2) + 0.5 * grid.dt()
            }
        })
        .collect()
}

/// `∫_{t_j}^T f` at every half-step time, by Simpson's rule with two panels
/// per half step (four per grid step).
fn integral_to_end(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let times = half_times(grid);
    let mut out = vec![0.0; times.len()];
    for j in (0..times.len() - 1).rev() {
        let (t0, t1) = (times[j], times[j + 1]);
        let h = t1 - t0;
        out[j] = out[j + 1] + h / 6.0 * (f(t0) + 4.0 * f(0.5 * (t0 + t1)) + f(t1));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("exponent quadrature is not finite"));
    }
    Ok(out)
}

fn rk4_step(t: f64, y: f64, h: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    let k1 = f(t, y);
    let k2 = f(t + h / 2.0, y + h / 2.0 * k1);
    let k3 = f(t + h / 2.0, y + h / 2.0 * k2);
    let k4 = f(t + h, y + h * k3);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// `A` at every half-step time in closed form: `θ exp(−s ∫_t^T κ_A)`.
fn gain_a_half(params: &CashflowParams, grid: &TimeGrid) -> Result<Vec<f64>> {
    let g = g_of_t(params, 0.0)?;
    let s = params.orientation.sign();
    let integral = integral_to_end(grid, |t| params.kappa_a(t, g))?;
    let a: Vec<f64> = integral.iter().map(|i| params.theta * (-s * i).exp()).collect();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("gain A overflows"));
    }
    Ok(a)
}

/// Gain `A(t_k)` on the grid nodes, `A(T) = θ`.
pub fn solve_a(params: &CashflowParams, grid: &TimeGrid, method: RiccatiMethod) -> Result<Vec<f64>> {
    params.validate()?;
    match method {
        RiccatiMethod::ClosedForm => Ok(gain_a_half(params, grid)?.into_iter().step_by(2).collect()),
        RiccatiMethod::Rk4 => {
            let g = g_of_t(params, 0.0)?;
            let s = params.orientation.sign();
            let n = grid.steps();
            let mut a = vec![0.0; n + 1];
            a[n] = params.theta;
            for k in (0..n).rev() {
                a[k] = rk4_step(grid.node(k + 1), a[k + 1], -grid.dt(), |t, v| s * params.kappa_a(t, g) * v);
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("gain A overflows"));
            }
            Ok(a)
        }
    }
}

/// `ψ, φ` on the half-step grid.
#[derive(Debug, Clone, PartialEq)]
struct PsiPhi {
    psi: Vec<f64>,
    phi: Vec<f64>,
}

fn psi_phi_rhs(params: &CashflowParams, t: f64, a: f64, psi: f64, phi: f64) -> (f64, f64) {
    let l2 = params.theta * params.theta * params.l.at(t, params.horizon).powi(2);
    let lam = params.disc_rate;
    let sig2 = params.sigma * params.sigma;
    (
        params.rho * params.rho * psi * psi - (2.0 * lam * sig2 * a - l2) * psi,
        (params.rho * psi + l2 - lam) * phi + params.k_source.at(t, params.horizon),
    )
}

fn solve_psi_phi_half(params: &CashflowParams, grid: &TimeGrid, a_half: &[f64], phi_start: f64) -> Result<PsiPhi> {
    let n = grid.steps();
    let times = half_times(grid);
    let (mut psi, mut phi) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let forward = params.boundary == BoundaryMode::Initial;
    let start = if forward { 0 } else { n };
    psi[start] = params.theta;
    phi[start] = phi_start;
    let steps: Vec<usize> = if forward { (0..n).collect() } else { (0..n).rev().collect() };
    for k in steps {
        // Step from node `from` to node `to`, with A at the three RK4 stages.
        let (from, to) = if forward { (k, k + 1) } else { (k + 1, k) };
        let h = times[2 * to] - times[2 * from];
        let (a0, am, a1) = (a_half[2 * from], a_half[2 * k + 1], a_half[2 * to]);
        let t = times[2 * from];
        let (p, q) = (psi[from], phi[from]);
        let f = |tt: f64, aa: f64, p: f64, q: f64| psi_phi_rhs(params, tt, aa, p, q);
        let k1 = f(t, a0, p, q);
        let k2 = f(t + h / 2.0, am, p + h / 2.0 * k1.0, q + h / 2.0 * k1.1);
        let k3 = f(t + h / 2.0, am, p + h / 2.0 * k2.0, q + h / 2.0 * k2.1);
        let k4 = f(t + h, a1, p + h * k3.0, q + h * k3.1);
        psi[to] = p + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        phi[to] = q + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        if !(psi[to].abs() <= BLOW_UP) || !phi[to].is_finite() {
            return Err(Error::numeric(format!(
                "Riccati equation for psi blows up near t = {:.6}",
                times[2 * to]
            )));
        }
    }
    // Midpoints by cubic Hermite interpolation with the ODE slopes.
    let mut out = PsiPhi {
        psi: vec![0.0; 2 * n + 1],
        phi: vec![0.0; 2 * n + 1],
    };
    let dt = grid.dt();
    for k in 0..=n {
        out.psi[2 * k] = psi[k];
        out.phi[2 * k] = phi[k];
    }
    for k in 0..n {
        let d0 = psi_phi_rhs(params, times[2 * k], a_half[2 * k], psi[k], phi[k]);
        let d1 = psi_phi_rhs(params, times[2 * k + 2], a_half[2 * k + 2], psi[k + 1], phi[k + 1]);
        out.psi[2 * k + 1] = 0.5 * (psi[k] + psi[k + 1]) + dt / 8.0 * (d0.0 - d1.0);
        out.phi[2 * k + 1] = 0.5 * (phi[k] + phi[k + 1]) + dt / 8.0 * (d0.1 - d1.1);
    }
    Ok(out)
}

/// `ψ` and `φ` on the grid nodes, with `φ` started from `1 − θ(y₀ − a)`.
pub fn solve_psi_phi(params: &CashflowParams, grid: &TimeGrid, y0: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let a_half = gain_a_half(params, grid)?;
    let pp = solve_psi_phi_half(params, grid, &a_half, 1.0 - params.theta * (y0 - params.a))?;
    Ok((pp.psi.into_iter().step_by(2).collect(), pp.phi.into_iter().step_by(2).collect()))
}

/// `B(T) = 1 − θ(y₀ + a)`.
pub fn b_terminal(params: &CashflowParams, y0: f64) -> f64 {
    1.0 - params.theta * (y0 + params.a)
}

fn solve_b_half(
    params: &CashflowParams,
    grid: &TimeGrid,
    p3_half: &[f64],
    y0: f64,
    method: RiccatiMethod,
) -> Result<Vec<f64>> {
    let g = g_of_t(params, 0.0)?;
    let s = params.orientation.sign();
    let n = grid.steps();
    let b_t = b_terminal(params, y0);
    let c = params.c;
    let b = match method {
        RiccatiMethod::Rk4 => {
            let times = half_times(grid);
            let mut b = vec![0.0; n + 1];
            b[n] = b_t;
            let h = -grid.dt();
            for k in (0..n).rev() {
                let f = |j: usize, v: f64| s * (params.kappa_b(times[j], g) * v + c * p3_half[j]);
                let (j1, jm, j0) = (2 * k + 2, 2 * k + 1, 2 * k);
                let k1 = f(j1, b[k + 1]);
                let k2 = f(jm, b[k + 1] + h / 2.0 * k1);
                let k3 = f(jm, b[k + 1] + h / 2.0 * k2);
                let k4 = f(j0, b[k + 1] + h * k3);
                b[k] = b[k + 1] + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            b
        }
        RiccatiMethod::ClosedForm => {
            // B(t) = e^{−sJ(t)} [B(T) − s c ∫_t^T e^{sJ(u)} p̃₃(u) du],  J(t) = ∫_t^T κ_B.
            let j = integral_to_end(grid, |t| params.kappa_b(t, g))?;
            let weight: Vec<f64> = j.iter().zip(p3_half).map(|(jj, p)| (s * jj).exp() * p).collect();
            let mut source = 0.0;
            let mut b = vec![0.0; n + 1];
            b[n] = b_t;
            for k in (0..n).rev() {
                source += grid.dt() / 6.0 * (weight[2 * k] + 4.0 * weight[2 * k + 1] + weight[2 * k + 2]);
                b[k] = (-s * j[2 * k]).exp() * (b_t - s * c * source);
            }
            b
        }
    };
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("gain B is not finite"));
    }
    Ok(b)
}

/// Deterministic `p̃₃ = ψ ȳ + φ` at the half-step times (`ȳ` linearly
/// interpolated between nodes).
fn p3_half(pp: &PsiPhi, ybar: &[f64]) -> Vec<f64> {
    (0..pp.psi.len())
        .map(|j| {
            let y = if j % 2 == 0 {
                ybar[j / 2]
            } else {
                0.5 * (ybar[j / 2] + ybar[j / 2 + 1])
            };
            pp.psi[j] * y + pp.phi[j]
        })
        .collect()
}

/// Gain `B(t_k)` given `ψ, φ` and the mean backward trajectory `ȳ`.
pub fn solve_b(
    params: &CashflowParams,
    grid: &TimeGrid,
    y0: f64,
    ybar: &[f64],
    method: RiccatiMethod,
) -> Result<Vec<f64>> {
    params.validate()?;
    if ybar.len() != grid.steps() + 1 {
        return Err(Error::usage("mean backward trajectory must have one value per node"));
    }
    let a_half = gain_a_half(params, grid)?;
    let pp = solve_psi_phi_half(params, grid, &a_half, 1.0 - params.theta * (y0 - params.a))?;
    solve_b_half(params, grid, &p3_half(&pp, ybar), y0, method)
}

/// Gains of the feedback law on the grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub theta: f64,
    pub y0: f64,
    pub ybar: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: f64,
    /// `ρ + σθl + Σ w (1+r) θ L` per node.
    pub risk_factor: Vec<f64>,
    pub method: RiccatiMethod,
    pub orientation: RiccatiOrientation,
    pub steps: usize,
    /// Max node difference between the closed-form and RK4 gains.
    pub a_cross_check: f64,
    pub b_cross_check: f64,
}

impl RiccatiSolution {
    /// Deterministic `p̃₃` used as the source of `B`.
    pub fn p3_det(&self, k: usize) -> f64 {
        self.psi[k] * self.ybar[k] + self.phi[k]
    }
}

pub fn solve_riccati(
    params: &CashflowParams,
    grid: &TimeGrid,
    y0: f64,
    ybar: &[f64],
    method: RiccatiMethod,
) -> Result<RiccatiSolution> {
    params.validate()?;
    if ybar.len() != grid.steps() + 1 {
        return Err(Error::usage("mean backward trajectory must have one value per node"));
    }
    let g = g_of_t(params, 0.0)?;
    let a_half = gain_a_half(params, grid)?;
    let pp = solve_psi_phi_half(params, grid, &a_half, 1.0 - params.theta * (y0 - params.a))?;
    let p3 = p3_half(&pp, ybar);
    let a_cf: Vec<f64> = a_half.iter().copied().step_by(2).collect();
    let a_rk = solve_a(params, grid, RiccatiMethod::Rk4)?;
    let b_cf = solve_b_half(params, grid, &p3, y0, RiccatiMethod::ClosedForm)?;
    let b_rk = solve_b_half(params, grid, &p3, y0, RiccatiMethod::Rk4)?;
    let max_diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (a, b) = match method {
        RiccatiMethod::ClosedForm => (a_cf.clone(), b_cf.clone()),
        RiccatiMethod::Rk4 => (a_rk.clone(), b_rk.clone()),
    };
    Ok(RiccatiSolution {
        grid: *grid,
        theta: params.theta,
        y0,
        ybar: ybar.to_vec(),
        a_cross_check: max_diff(&a_cf, &a_rk),
        b_cross_check: max_diff(&b_cf, &b_rk),
        a,
        b,
        psi: pp.psi.into_iter().step_by(2).collect(),
        phi: pp.phi.into_iter().step_by(2).collect(),
        g,
        risk_factor: grid.nodes().iter().map(|&t| params.risk_factor(t)).collect(),
        method,
        orientation: params.orientation,
        steps: grid.steps(),
    })
}

/// The feedback law at node `k`.
pub fn feedback_control(params: &CashflowParams, riccati: &RiccatiSolution, k: usize, x: f64, y: f64) -> Result<f64> {
    let g = g_of_t(params, riccati.grid.node(k))?;
    let a = *riccati
        .a
        .get(k)
        .ok_or_else(|| Error::usage(format!("node {k} outside the Riccati grid")))?;
    if a == 0.0 || !a.is_finite() {
        return Err(Error::config(format!("gain A vanishes at node {k}; the feedback law divides by A")));
    }
    Ok(feedback_value(riccati, params.rho, g, k, x, y))
}

fn feedback_value(riccati: &RiccatiSolution, rho: f64, g: f64, k: usize, x: f64, y: f64) -> f64 {
    let a = riccati.a[k];
    -(riccati.risk_factor[k] * (a * x + riccati.b[k]) + rho * (riccati.psi[k] * y + riccati.phi[k])) / (a * g)
}

/// Control policy applying the feedback law with frozen gains.
pub fn feedback_policy(params: &CashflowParams, riccati: &RiccatiSolution) -> Result<ControlPolicy> {
    let g = g_of_t(params, 0.0)?;
    if riccati.a.iter().any(|a| *a == 0.0 || !a.is_finite()) {
        return Err(Error::config("gain A vanishes; the feedback law divides by A"));
    }
    let sol = Arc::new(riccati.clone());
    let rho = params.rho;
    let last = riccati.steps - 1;
    Ok(ControlPolicy::feedback(
        move |args: &FeedbackArgs<'_>| feedback_value(&sol, rho, g, args.k.min(last), args.x, args.y),
        ControlDomain::unbounded(),
    ))
}

/// The example's coefficients. `Φ(x) = x + (θ/2)(x − y₀* − a)²` and
/// `Ψ(y) = (1 + θa) y`, so that `Φ_x(x_T) = 1 + θ(x_T − y₀* − a)` and
/// `Ψ_y = 1 + θa` match the boundary values of the adjoints; `y₀*` is the
/// baseline value frozen at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CashflowModel {
    pub rho: f64,
    pub c: f64,
    pub sigma: f64,
    pub disc_rate: f64,
    pub theta: f64,
    pub a: f64,
    pub y0_ref: f64,
    marks: Vec<f64>,
    r: Vec<f64>,
}

impl CashflowModel {
    pub fn new(params: &CashflowParams, y0_ref: f64) -> Self {
        Self {
            rho: params.rho,
            c: params.c,
            sigma: params.sigma,
            disc_rate: params.disc_rate,
            theta: params.theta,
            a: params.a,
            y0_ref,
            marks: params.marks.marks().to_vec(),
            r: params.r.clone(),
        }
    }

    fn jump_scale(&self, mark: f64) -> f64 {
        let i = self.marks.iter().position(|&m| m == mark);
        1.0 + i.map_or(0.0, |i| self.r[i])
    }
}

impl CoefficientModel for CashflowModel {
    fn drift(&self, p: &StatePoint<'_>, v: f64) -> f64 {
        self.rho * v - self.c * p.x
    }

    fn diffusion(&self, _p: &StatePoint<'_>, v: f64) -> f64 {
        self.sigma * v
    }

    fn jump(&self, _p: &StatePoint<'_>, v: f64, mark: f64) -> f64 {
        v * self.jump_scale(mark)
    }

    fn generator(&self, p: &StatePoint<'_>, v: f64) -> f64 {
        self.rho * v - self.c * p.x + self.disc_rate * p.y
    }

    fn running_cost(&self, _p: &StatePoint<'_>, _v: f64) -> f64 {
        0.0
    }

    fn terminal_forward(&self, x: f64) -> f64 {
        x + 0.5 * self.theta * (x - self.y0_ref - self.a).powi(2)
    }

    fn initial_backward(&self, y: f64) -> f64 {
        (1.0 + self.theta * self.a) * y
    }

    fn analytic_partial(
        &self,
        coefficient: Coefficient,
        wrt: Variable,
        p: &StatePoint<'_>,
        _v: f64,
        marks: &MarkSet,
    ) -> Option<f64> {
        use Coefficient as C;
        use Variable as V;
        Some(match (coefficient, wrt) {
            (C::Drift, V::X) => -self.c,
            (C::Drift, V::Control) => self.rho,
            (C::Diffusion, V::Control) => self.sigma,
            (C::Jump(i), V::Control) => self.jump_scale(*marks.marks().get(i)?),
            (C::Generator, V::X) => -self.c,
            (C::Generator, V::Y) => self.disc_rate,
            (C::Generator, V::Control) => self.rho,
            (C::TerminalForward, V::X) => 1.0 + self.theta * (p.x - self.y0_ref - self.a),
            (C::InitialBackward, V::Y) => 1.0 + self.theta * self.a,
            _ => 0.0,
        })
    }
}

/// Cash-flow dynamics with the HARA-derived running cost
/// `f(t, x, u) = ((θ−1)σ²/2) u² + (σ²/2 + m − r_t − c x) u + r_t`
/// (constant `r_t`), for use with the generic engines.
pub fn hara_cashflow(theta: f64, sigma: f64, m: f64, rate: f64, c: f64) -> GenericModel {
    GenericModel::new()
        .with_drift(move |p, v| m * v - c * p.x)
        .with_diffusion(move |_, v| sigma * v)
        .with_running_cost(move |p, u| {
            0.5 * (theta - 1.0) * sigma * sigma * u * u + (0.5 * sigma * sigma + m - rate - c * p.x) * u + rate
        })
}

/// Numerical settings of the example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CashflowSettings {
    pub steps: usize,
    /// Paths of the pilot simulation that fixes `y₀`, `ȳ` and the backward field.
    pub pilot_paths: usize,
    pub max_iter: usize,
    /// Tolerance on the joint change of `(y₀, ȳ)` and the sweep delta.
    pub tol: f64,
    pub basis: RegressionBasis,
    pub method: RiccatiMethod,
    pub seed: u64,
}

impl Default for CashflowSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            pilot_paths: 10_000,
            max_iter: 60,
            tol: 1e-9,
            basis: RegressionBasis::default(),
            method: RiccatiMethod::ClosedForm,
            seed: 42,
        }
    }
}

/// Solved example: gains, frozen model and policy, backward field.
#[derive(Debug, Clone)]
pub struct CashflowSolution {
    pub params: CashflowParams,
    pub settings: CashflowSettings,
    pub grid: TimeGrid,
    pub riccati: RiccatiSolution,
    pub field: BackwardField,
    pub model: CashflowModel,
    pub policy: ControlPolicy,
    pub y0: f64,
    /// Iteration report of the joint fixed point on the pilot paths.
    pub coupling: CouplingReport,
}

impl CashflowSolution {
    pub fn pilot_spec(&self) -> SimulationSpec {
        pilot_spec(&self.params, &self.settings, &self.grid)
    }

    pub fn main_spec(&self, n_paths: usize) -> SimulationSpec {
        SimulationSpec::new(self.grid, self.params.marks.clone(), self.params.m0, n_paths, self.settings.seed)
    }
}

fn pilot_spec(params: &CashflowParams, settings: &CashflowSettings, grid: &TimeGrid) -> SimulationSpec {
    SimulationSpec::new(*grid, params.marks.clone(), params.m0, settings.pilot_paths, settings.seed)
        .with_rng(RngSpec::new(settings.seed).child(PILOT_TAG))
}

fn node_means(paths: &PathBundle, values: &[f64]) -> Vec<f64> {
    (0..paths.nodes())
        .map(|k| paths.column(values, k).iter().sum::<f64>() / paths.n_paths as f64)
        .collect()
}

/// Iterates gains, feedback, forward simulation and backward regression on
/// the pilot paths until `y₀`, `ȳ` and the paths stop moving.
pub fn solve_cashflow(params: &CashflowParams, settings: &CashflowSettings) -> Result<CashflowSolution> {
    params.validate()?;
    if settings.max_iter == 0 {
        return Err(Error::usage("the cash-flow fixed point needs max_iter >= 1"));
    }
    let grid = TimeGrid::new(params.horizon, settings.steps)?;
    let spec = pilot_spec(params, settings, &grid);
    let mut y0 = params.a;
    let mut ybar = vec![params.a; grid.steps() + 1];
    let mut report = CouplingReport {
        iterations: 0,
        deltas: Vec::new(),
        converged: false,
        tolerance: settings.tol,
        damping: 1.0,
    };
    let mut field: Option<BackwardField> = None;
    let mut previous: Option<PathBundle> = None;
    let mut rising = 0;
    loop {
        let riccati = solve_riccati(params, &grid, y0, &ybar, settings.method)?;
        let policy = feedback_policy(params, &riccati)?;
        let model = CashflowModel::new(params, y0);
        let forward = match &field {
            Some(f) => simulate_forward(&model, &policy, f, &spec)?,
            None => simulate_forward(&model, &policy, &crate::engine::ConstantSource(params.a), &spec)?,
        };
        let (paths, new_field) = solve_backward(&model, forward, params.a, settings.basis)?;
        let new_y0 = new_field.y0();
        let new_ybar = node_means(&paths, &paths.y);
        let mut delta = (new_y0 - y0).abs();
        for (a, b) in new_ybar.iter().zip(&ybar) {
            delta = delta.max((a - b).abs());
        }
        if let Some(prev) = &previous {
            delta = delta.max(sweep_delta(prev, &paths));
        }
        y0 = new_y0;
        ybar = new_ybar;
        field = Some(new_field);
        previous = Some(paths);
        report.iterations += 1;
        if let Some(&last) = report.deltas.last() {
            rising = if delta > last { rising + 1 } else { 0 };
        }
        report.deltas.push(delta);
        if !delta.is_finite() || rising >= 3 {
            return Err(Error::Divergence { report: Box::new(report) });
        }
        if delta <= settings.tol {
            report.converged = true;
        }
        if report.converged || report.iterations >= settings.max_iter {
            break;
        }
    }
    if !report.converged {
        log::warn!(
            "cash-flow fixed point stopped after {} iterations (last delta {:e})",
            report.iterations,
            report.deltas.last().copied().unwrap_or(f64::NAN)
        );
    }
    // Gains consistent with the final (y₀, ȳ).
    let riccati = solve_riccati(params, &grid, y0, &ybar, settings.method)?;
    let policy = feedback_policy(params, &riccati)?;
    let model = CashflowModel::new(params, y0);
    Ok(CashflowSolution {
        params: params.clone(),
        settings: settings.clone(),
        grid,
        riccati,
        field: field.expect("at least one iteration ran"),
        model,
        policy,
        y0,
        coupling: report,
    })
}

/// Cost samples `Θ_T` of a policy under common random numbers: the policy's
/// own `y₀` comes from a Picard coupling on the pilot paths (warm-started
/// from the baseline field), then `n_paths` main paths are simulated with
/// the main seed.
pub struct CostEvaluator<'a> {
    pub solution: &'a CashflowSolution,
    pub n_paths: usize,
    pub picard_max_iter: usize,
    pub picard_tol: f64,
}

impl<'a> CostEvaluator<'a> {
    pub fn new(solution: &'a CashflowSolution, n_paths: usize) -> Self {
        Self {
            solution,
            n_paths,
            picard_max_iter: 60,
            picard_tol: solution.settings.tol,
        }
    }

    /// Returns `(Θ_T samples, y₀ of the policy)`.
    pub fn costs(&self, policy: &ControlPolicy) -> Result<(Vec<f64>, f64)> {
        let sol = self.solution;
        let mut settings = PicardSettings::new(sol.params.a, self.picard_max_iter, self.picard_tol);
        settings.basis = sol.settings.basis;
        let (_, field, report) = picard_couple_from(&sol.model, policy, &sol.pilot_spec(), &settings, &sol.field)?;
        if !report.converged {
            log::warn!("Picard coupling for a perturbed policy did not reach {:e}", self.picard_tol);
        }
        let y0 = field.y0();
        let ends = simulate_terminal(&sol.model, policy, &field, &sol.main_spec(self.n_paths))?;
        let psi = sol.model.initial_backward(y0);
        let costs = ends
            .x
            .iter()
            .zip(&ends.xi)
            .map(|(&x, &xi)| sol.model.terminal_forward(x) + psi + xi)
            .collect();
        Ok((costs, y0))
    }
}

/// Sample statistic with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub value: f64,
    pub std_error: f64,
}

/// Sample variance with the standard error `sqrt((m₄ − s⁴)/n)`.
pub fn variance_statistic(samples: &[f64]) -> Result<Statistic> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Statistics("variance needs at least 2 samples".into()));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let m4 = samples.iter().map(|s| (s - mean).powi(4)).sum::<f64>() / nf;
    Ok(Statistic {
        value: var,
        std_error: ((m4 - var * var).max(0.0) / nf).sqrt(),
    })
}

/// Everything the cash-flow experiment reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CashflowReport {
    pub y0: f64,
    pub coupling: CouplingReport,
    pub j_theta: CostEstimate,
    pub loss: RiskLoss,
    /// `Var(x_T + y₀)`.
    pub var_psi: Statistic,
    pub mean_psi: Statistic,
    pub necessary: NecessaryReport,
    /// The same check with the opposite sign of the `θ l z` term.
    pub necessary_flipped_sign: NecessaryReport,
    pub sufficient: ProbeReport,
    pub riccati_a_cross_check: f64,
    pub riccati_b_cross_check: f64,
    /// Max over paths and nodes of `|u01 − u02|`, the two expressions for the
    /// control obtained from the Hamiltonian and from the gain equations.
    pub u01_u02_max_gap: f64,
    /// RMS of `c ψ (y − ȳ)`: how far the pathwise `B` source is from the
    /// deterministic stand-in.
    pub b_source_residual: f64,
    pub clamp_count: u64,
    pub plot: PlotData,
}

/// Per-node gains and sample means for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub t: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    /// Mean control per step; the last node repeats the last step.
    pub mean_u: Vec<f64>,
}

impl PlotData {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "A", "B", "psi", "phi", "mean_x", "mean_y", "mean_u"])?;
        for k in 0..self.t.len() {
            w.write_record(
                [self.t[k], self.a[k], self.b[k], self.psi[k], self.phi[k], self.mean_x[k], self.mean_y[k], self.mean_u[k]]
                    .map(fmt_float),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Experiment knobs beyond the solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    /// Paths for the cost statistics and the perturbation table.
    pub n_paths: usize,
    /// Paths whose full trajectories are kept (diagnostics, plot data, dumps).
    pub trajectory_paths: usize,
    pub probe: ProbeSettings,
    pub necessary: NecessarySettings,
    pub convexity_probes: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            trajectory_paths: 2_000,
            probe: ProbeSettings::default(),
            necessary: NecessarySettings::default(),
            convexity_probes: 1000,
        }
    }
}

/// `u02 = −[Ȧx − 2cAx − cB + Ḃ − c p̃₃] / (A (ρ + σθl + …))` with `Ȧ, Ḃ` from
/// the gain equations as integrated.
fn u02(params: &CashflowParams, sol: &RiccatiSolution, k: usize, x: f64, p3: f64) -> f64 {
    let g = sol.g;
    let s = params.orientation.sign();
    let t = sol.grid.node(k);
    let (a, b) = (sol.a[k], sol.b[k]);
    let a_dot = s * params.kappa_a(t, g) * a;
    let b_dot = s * (params.kappa_b(t, g) * b + params.c * sol.p3_det(k));
    -(a_dot * x - 2.0 * params.c * a * x - params.c * b + b_dot - params.c * p3) / (a * sol.risk_factor[k])
}

/// Runs the full example: fixed point, cost statistics, first-order
/// diagnostics and the perturbation table. Returns the report and the
/// trajectory bundle (for dumps).
pub fn run_mean_variance_experiment(
    params: &CashflowParams,
    settings: &CashflowSettings,
    experiment: &ExperimentSettings,
) -> Result<(CashflowReport, PathBundle)> {
    let sol = solve_cashflow(params, settings)?;
    let evaluator = CostEvaluator::new(&sol, experiment.n_paths);

    let traj_spec = sol.main_spec(experiment.trajectory_paths.min(experiment.n_paths).max(2));
    let paths = simulate_forward(&sol.model, &sol.policy, &sol.field, &traj_spec)?;

    let adjoints = simulate_transformed_adjoints_example(params, Some(&sol.riccati), &paths)?;
    let necessary = necessary_condition_check(&sol.model, &paths, &adjoints, sol.policy.domain(), &experiment.necessary)?;
    let flipped = NecessarySettings {
        sign: match experiment.necessary.sign {
            ZlSign::Minus => ZlSign::Plus,
            ZlSign::Plus => ZlSign::Minus,
        },
        ..experiment.necessary.clone()
    };
    let necessary_flipped_sign = necessary_condition_check(&sol.model, &paths, &adjoints, sol.policy.domain(), &flipped)?;

    // Convexity spot checks for the sufficient condition.
    let (baseline_costs, _) = evaluator.costs(&sol.policy)?;
    let x_t = paths.terminal_x();
    let mean_x = x_t.iter().sum::<f64>() / x_t.len() as f64;
    let sd_x = (x_t.iter().map(|x| (x - mean_x).powi(2)).sum::<f64>() / x_t.len() as f64).sqrt();
    let rng = RngSpec::new(settings.seed).child(0xc0_4e_78);
    let model = &sol.model;
    let mut convexity: Vec<ConvexityCheck> = vec![
        midpoint_convexity(
            "Phi",
            &|v: &[f64]| model.terminal_forward(v[0]),
            &[mean_x - 4.0 * sd_x - 1.0],
            &[mean_x + 4.0 * sd_x + 1.0],
            experiment.convexity_probes,
            rng.child(1),
        ),
        midpoint_convexity(
            "Psi",
            &|v: &[f64]| model.initial_backward(v[0]),
            &[sol.y0 - 2.0],
            &[sol.y0 + 2.0],
            experiment.convexity_probes,
            rng.child(2),
        ),
    ];
    convexity.push(crate::adjoint::hamiltonian_convexity(
        model,
        &paths,
        &adjoints,
        experiment.necessary.sign,
        experiment.convexity_probes,
        rng.child(3),
    )?);

    let mut evaluate = |policy: &ControlPolicy| -> Result<Vec<f64>> {
        if std::ptr::eq(policy, &sol.policy) {
            return Ok(baseline_costs.clone());
        }
        evaluator.costs(policy).map(|c| c.0)
    };
    let sufficient = sufficient_condition_probe(
        &mut evaluate,
        &sol.policy,
        &[("constant".to_string(), Direction::Constant)],
        &experiment.probe,
        convexity,
    )?;

    let j_theta = cost_j_theta(&baseline_costs, params.theta)?;
    let loss = risk_loss(&baseline_costs, params.theta)?;
    let ends = simulate_terminal(&sol.model, &sol.policy, &sol.field, &sol.main_spec(experiment.n_paths))?;
    let psi_t: Vec<f64> = ends.x.iter().map(|x| x + sol.y0).collect();
    let var_psi = variance_statistic(&psi_t)?;
    let mean_est = crate::engine::mc_estimate(&psi_t)?;

    let n = paths.steps();
    let mut u_gap: f64 = 0.0;
    let mut b_res = 0.0;
    for p in 0..paths.n_paths {
        for k in 0..n {
            let (x, y) = (paths.x_at(p, k), paths.y_at(p, k));
            let p3 = sol.riccati.psi[k] * y + sol.riccati.phi[k];
            u_gap = u_gap.max((paths.u_at(p, k) - u02(params, &sol.riccati, k, x, p3)).abs());
            b_res += (params.c * sol.riccati.psi[k] * (y - sol.riccati.ybar[k])).powi(2);
        }
    }
    let b_source_residual = (b_res / (paths.n_paths * n) as f64).sqrt();

    let mut mean_u: Vec<f64> = (0..n)
        .map(|k| (0..paths.n_paths).map(|p| paths.u_at(p, k)).sum::<f64>() / paths.n_paths as f64)
        .collect();
    mean_u.push(*mean_u.last().unwrap_or(&0.0));
    let plot = PlotData {
        t: sol.grid.nodes(),
        a: sol.riccati.a.clone(),
        b: sol.riccati.b.clone(),
        psi: sol.riccati.psi.clone(),
        phi: sol.riccati.phi.clone(),
        mean_x: node_means(&paths, &paths.x),
        mean_y: node_means(&paths, &paths.y),
        mean_u,
    };
    let report = CashflowReport {
        y0: sol.y0,
        coupling: sol.coupling.clone(),
        j_theta,
        loss,
        var_psi,
        mean_psi: Statistic {
            value: mean_est.mean,
            std_error: mean_est.std_error,
        },
        necessary,
        necessary_flipped_sign,
        sufficient,
        riccati_a_cross_check: sol.riccati.a_cross_check,
        riccati_b_cross_check: sol.riccati.b_cross_check,
        u01_u02_max_gap: u_gap,
        b_source_residual,
        clamp_count: paths.clamp_count + ends.clamp_count,
        plot,
    };
    Ok((report, paths))
}

/// Lets external code evaluate the example's backward field.
impl BackwardSource for CashflowSolution {
    fn values(&self, k: usize, x: f64, xi: f64, r_out: &mut [f64]) -> (f64, f64) {
        self.field.values(k, x, xi, r_out)
    }
}
