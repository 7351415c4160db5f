//! Shared domain types: the time grid, the finite Lévy measure, state points,
//! coefficient models with derivative evaluation, control policies and the
//! risk-sensitivity parameter.
//!
//! All states are scalar. The Lévy measure is a finite set of weighted marks
//! (compound Poisson), so every `∫ · m(dλ)` becomes a weighted sum.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform partition of `[0, T]` into `N` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::config("number of time steps must be at least 1"));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Node `t_k`. The last node is pinned to the horizon exactly.
    pub fn node(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.steps * factor)
    }
}

/// Builds the uniform grid with `steps` intervals on `[0, horizon]`.
pub fn build_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// Finite Lévy measure `m = Σ w_i δ_{λ_i}`. An empty set is the jump-free model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkSet {
    marks: Vec<f64>,
    weights: Vec<f64>,
    total_intensity: f64,
}

impl MarkSet {
    pub fn new(marks: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if marks.len() != weights.len() {
            return Err(Error::config(format!(
                "mark set has {} marks but {} weights",
                marks.len(),
                weights.len()
            )));
        }
        for (i, &m) in marks.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::config(format!("mark {i} is not finite ({m})")));
            }
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::config(format!(
                    "weight {i} must be strictly positive, got {w}"
                )));
            }
        }
        let small_jump_mass: f64 = marks
            .iter()
            .zip(&weights)
            .map(|(m, w)| w * (m * m).min(1.0))
            .sum();
        if !small_jump_mass.is_finite() {
            return Err(Error::config("Lévy measure integrability condition fails"));
        }
        let total_intensity = weights.iter().sum();
        Ok(Self {
            marks,
            weights,
            total_intensity,
        })
    }

    pub fn empty() -> Self {
        Self {
            marks: Vec::new(),
            weights: Vec::new(),
            total_intensity: 0.0,
        }
    }

    pub fn single(mark: f64, weight: f64) -> Result<Self> {
        Self::new(vec![mark], vec![weight])
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_intensity(&self) -> f64 {
        self.total_intensity
    }

    /// `∫ h(λ) m(dλ)` for a function of the mark index.
    pub fn integrate(&self, mut h: impl FnMut(usize) -> f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * h(i))
            .sum()
    }
}

pub fn validate_mark_set(marks: Vec<f64>, weights: Vec<f64>) -> Result<MarkSet> {
    MarkSet::new(marks, weights)
}

/// A point `(t, x, y, z, r(·))` at which coefficients are evaluated.
#[derive(Debug, Clone, Copy)]
pub struct StatePoint<'a> {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// One entry per mark of the model's [`MarkSet`].
    pub r: &'a [f64],
}

impl<'a> StatePoint<'a> {
    pub fn new(t: f64, x: f64, y: f64, z: f64, r: &'a [f64]) -> Self {
        Self { t, x, y, z, r }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.r.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Coefficient {
    /// `b`
    Drift,
    /// `σ`
    Diffusion,
    /// `γ(·, λ_i)`
    Jump(usize),
    /// `g`, with `dy = -g dt + z dW + ∫ r dÑ`
    Generator,
    /// `f`
    RunningCost,
    /// `Φ(x)`
    TerminalForward,
    /// `Ψ(y)`
    InitialBackward,
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Drift => write!(f, "b"),
            Coefficient::Diffusion => write!(f, "sigma"),
            Coefficient::Jump(i) => write!(f, "gamma[{i}]"),
            Coefficient::Generator => write!(f, "g"),
            Coefficient::RunningCost => write!(f, "f"),
            Coefficient::TerminalForward => write!(f, "Phi"),
            Coefficient::InitialBackward => write!(f, "Psi"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variable {
    X,
    Y,
    Z,
    R(usize),
    Control,
}

/// Coefficients `b, σ, γ, g, f, Φ, Ψ` of a controlled jump FBSDE.
///
/// Implementations must be pure: the engines evaluate them concurrently
/// from many worker threads.
pub trait CoefficientModel: Send + Sync {
    fn drift(&self, p: &StatePoint<'_>, v: f64) -> f64;
    fn diffusion(&self, p: &StatePoint<'_>, v: f64) -> f64;
    fn jump(&self, p: &StatePoint<'_>, v: f64, mark: f64) -> f64;
    fn generator(&self, p: &StatePoint<'_>, v: f64) -> f64;
    fn running_cost(&self, p: &StatePoint<'_>, v: f64) -> f64;
    fn terminal_forward(&self, x: f64) -> f64;
    fn initial_backward(&self, y: f64) -> f64;

    /// Closed-form partial derivative, if the model knows one.
    fn analytic_partial(
        &self,
        _coefficient: Coefficient,
        _wrt: Variable,
        _p: &StatePoint<'_>,
        _v: f64,
        _marks: &MarkSet,
    ) -> Option<f64> {
        None
    }

    /// Declared bound `C` with `|f|, |Φ|, |Ψ| ≤ C`.
    fn bound(&self) -> Option<f64> {
        None
    }

    /// Declared Lipschitz constant of the coefficients.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

/// Evaluates one coefficient and rejects non-finite output.
pub fn evaluate<M: CoefficientModel + ?Sized>(
    model: &M,
    coefficient: Coefficient,
    p: &StatePoint<'_>,
    v: f64,
    marks: &MarkSet,
) -> Result<f64> {
    let value = match coefficient {
        Coefficient::Drift => model.drift(p, v),
        Coefficient::Diffusion => model.diffusion(p, v),
        Coefficient::Jump(i) => {
            let mark = *marks.marks().get(i).ok_or_else(|| {
                Error::usage(format!("mark index {i} out of range ({})", marks.len()))
            })?;
            model.jump(p, v, mark)
        }
        Coefficient::Generator => model.generator(p, v),
        Coefficient::RunningCost => model.running_cost(p, v),
        Coefficient::TerminalForward => model.terminal_forward(p.x),
        Coefficient::InitialBackward => model.initial_backward(p.y),
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Evaluation {
            coefficient: coefficient.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartialMethod {
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Partial {
    pub value: f64,
    pub method: PartialMethod,
}

/// Partial derivative of a coefficient, analytic when the model provides it
/// and a central difference with step `cbrt(ε)·max(1, |value|)` otherwise.
pub fn partials<M: CoefficientModel + ?Sized>(
    model: &M,
    coefficient: Coefficient,
    wrt: Variable,
    p: &StatePoint<'_>,
    v: f64,
    marks: &MarkSet,
) -> Result<Partial> {
    if !(p.is_finite() && v.is_finite()) {
        return Err(Error::usage("partial requested at a non-finite point"));
    }
    if let Some(value) = model.analytic_partial(coefficient, wrt, p, v, marks) {
        return Ok(Partial {
            value,
            method: PartialMethod::Analytic,
        });
    }

    let base = match wrt {
        Variable::X => p.x,
        Variable::Y => p.y,
        Variable::Z => p.z,
        Variable::R(i) => *p
            .r
            .get(i)
            .ok_or_else(|| Error::usage(format!("r index {i} out of range")))?,
        Variable::Control => v,
    };
    let h = f64::EPSILON.cbrt() * base.abs().max(1.0);
    let mut r_buf = p.r.to_vec();
    let mut shifted = |delta: f64| -> Result<f64> {
        let mut q = *p;
        let mut w = v;
        match wrt {
            Variable::X => q.x += delta,
            Variable::Y => q.y += delta,
            Variable::Z => q.z += delta,
            Variable::R(i) => {
                r_buf.copy_from_slice(p.r);
                r_buf[i] += delta;
            }
            Variable::Control => w += delta,
        }
        if matches!(wrt, Variable::R(_)) {
            let q = StatePoint { r: &r_buf, ..q };
            evaluate(model, coefficient, &q, w, marks)
        } else {
            evaluate(model, coefficient, &q, w, marks)
        }
    };
    let up = shifted(h)?;
    let down = shifted(-h)?;
    Ok(Partial {
        value: (up - down) / (2.0 * h),
        method: PartialMethod::CentralDifference,
    })
}

type PointFn = Arc<dyn Fn(&StatePoint<'_>, f64) -> f64 + Send + Sync>;
type JumpFn = Arc<dyn Fn(&StatePoint<'_>, f64, f64) -> f64 + Send + Sync>;
type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Closure-backed model; every coefficient defaults to zero.
#[derive(Clone)]
pub struct GenericModel {
    drift: PointFn,
    diffusion: PointFn,
    jump: JumpFn,
    generator: PointFn,
    running_cost: PointFn,
    terminal_forward: ScalarFn,
    initial_backward: ScalarFn,
    bound: Option<f64>,
    lipschitz: Option<f64>,
}

impl Default for GenericModel {
    fn default() -> Self {
        Self {
            drift: Arc::new(|_, _| 0.0),
            diffusion: Arc::new(|_, _| 0.0),
            jump: Arc::new(|_, _, _| 0.0),
            generator: Arc::new(|_, _| 0.0),
            running_cost: Arc::new(|_, _| 0.0),
            terminal_forward: Arc::new(|_| 0.0),
            initial_backward: Arc::new(|_| 0.0),
            bound: None,
            lipschitz: None,
        }
    }
}

impl fmt::Debug for GenericModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericModel")
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl GenericModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_drift(
        mut self,
        f: impl Fn(&StatePoint<'_>, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion(
        mut self,
        f: impl Fn(&StatePoint<'_>, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_jump(
        mut self,
        f: impl Fn(&StatePoint<'_>, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.jump = Arc::new(f);
        self
    }

    pub fn with_generator(
        mut self,
        f: impl Fn(&StatePoint<'_>, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.generator = Arc::new(f);
        self
    }

    pub fn with_running_cost(
        mut self,
        f: impl Fn(&StatePoint<'_>, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_cost = Arc::new(f);
        self
    }

    pub fn with_terminal_forward(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_forward = Arc::new(f);
        self
    }

    pub fn with_initial_backward(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.initial_backward = Arc::new(f);
        self
    }

    pub fn with_bound(mut self, c: f64) -> Self {
        self.bound = Some(c);
        self
    }

    pub fn with_lipschitz(mut self, k: f64) -> Self {
        self.lipschitz = Some(k);
        self
    }
}

impl CoefficientModel for GenericModel {
    fn drift(&self, p: &StatePoint<'_>, v: f64) -> f64 {
        (self.drift)(p, v)
    }
    fn diffusion(&self, p: &StatePoint<'_>, v: f64) -> f64 {
        (self.diffusion)(p, v)
    }
    fn jump(&self, p: &StatePoint<'_>, v: f64, mark: f64) -> f64 {
        (self.jump)(p, v, mark)
    }
    fn generator(&self, p: &StatePoint<'_>, v: f64) -> f64 {
        (self.generator)(p, v)
    }
    fn running_cost(&self, p: &StatePoint<'_>, v: f64) -> f64 {
        (self.running_cost)(p, v)
    }
    fn terminal_forward(&self, x: f64) -> f64 {
        (self.terminal_forward)(x)
    }
    fn initial_backward(&self, y: f64) -> f64 {
        (self.initial_backward)(y)
    }
    fn bound(&self) -> Option<f64> {
        self.bound
    }
    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// Closed control interval `U = [lo, hi]`; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlDomain {
    pub lo: f64,
    pub hi: f64,
}

impl ControlDomain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::config(format!("invalid control interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> (f64, bool) {
        if v < self.lo {
            (self.lo, true)
        } else if v > self.hi {
            (self.hi, true)
        } else {
            (v, false)
        }
    }
}

/// Arguments handed to a feedback law at grid node `k`.
#[derive(Debug, Clone, Copy)]
pub struct FeedbackArgs<'a> {
    pub k: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub r: &'a [f64],
}

type FeedbackFn = Arc<dyn Fn(&FeedbackArgs<'_>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ControlLaw {
    Feedback(FeedbackFn),
    OpenLoop(Vec<f64>),
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlLaw::Feedback(_) => write!(f, "Feedback(..)"),
            ControlLaw::OpenLoop(table) => f.debug_tuple("OpenLoop").field(&table.len()).finish(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlValue {
    pub value: f64,
    pub clamped: bool,
}

/// A control law plus its admissible interval. Evaluated values are clamped to `U`.
#[derive(Debug, Clone)]
pub struct ControlPolicy {
    law: ControlLaw,
    domain: ControlDomain,
    shift: f64,
}

impl ControlPolicy {
    pub fn feedback(
        f: impl Fn(&FeedbackArgs<'_>) -> f64 + Send + Sync + 'static,
        domain: ControlDomain,
    ) -> Self {
        Self {
            law: ControlLaw::Feedback(Arc::new(f)),
            domain,
            shift: 0.0,
        }
    }

    pub fn open_loop(table: Vec<f64>, domain: ControlDomain) -> Self {
        Self {
            law: ControlLaw::OpenLoop(table),
            domain,
            shift: 0.0,
        }
    }

    pub fn constant(value: f64, domain: ControlDomain) -> Self {
        Self::feedback(move |_| value, domain)
    }

    /// The same law moved by a constant `eps` before clamping.
    pub fn shifted(&self, eps: f64) -> Self {
        Self {
            law: self.law.clone(),
            domain: self.domain,
            shift: self.shift + eps,
        }
    }

    pub fn domain(&self) -> ControlDomain {
        self.domain
    }

    pub fn law(&self) -> &ControlLaw {
        &self.law
    }

    /// Unclamped law value including the shift.
    pub fn raw(&self, args: &FeedbackArgs<'_>) -> f64 {
        let base = match &self.law {
            ControlLaw::Feedback(f) => f(args),
            ControlLaw::OpenLoop(table) => {
                let idx = args.k.min(table.len().saturating_sub(1));
                table.get(idx).copied().unwrap_or(f64::NAN)
            }
        };
        base + self.shift
    }

    pub fn evaluate(&self, args: &FeedbackArgs<'_>) -> ControlValue {
        let (value, clamped) = self.domain.clamp(self.raw(args));
        ControlValue { value, clamped }
    }
}

/// Risk-sensitivity parameter `θ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    theta: f64,
}

impl RiskParams {
    pub const RECOMMENDED_MAX: f64 = 10.0;

    pub fn new(theta: f64) -> Result<Self> {
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::config(format!(
                "risk-sensitivity theta must be positive and finite, got {theta}"
            )));
        }
        if theta > Self::RECOMMENDED_MAX {
            log::warn!("theta = {theta} exceeds {}; exp(theta * cost) may overflow", Self::RECOMMENDED_MAX);
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}
