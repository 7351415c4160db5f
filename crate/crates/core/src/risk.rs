//! Risk-sensitive functionals of a simulated cost.
//!
//! With `Θ_T = Φ(x_T) + Ψ(y_0) + ∫ f dt` the exponential cost is
//! `J^θ = E[exp(θ Θ_T)]` and the loss its certainty equivalent
//! `Θ_θ = (1/θ) log J^θ`. Everything exponential is aggregated in the log
//! domain (log-sum-exp), so costs up to `700/θ` never overflow.
//!
//! The loss is a plug-in estimate (log of a sample mean): consistent, with an
//! `O(1/n)` downward bias. Its standard error uses the delta method.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{mc_estimate, pairwise_sum, simulate_tail, BackwardSource, McEstimate, PathBundle, SimulationSpec};
use crate::error::{Error, Result};
use crate::model::{partials, Coefficient, CoefficientModel, ControlPolicy, RiskParams, StatePoint, Variable};
use crate::regression::{fit, RegressionBasis};

const Z95: f64 = 1.959963984540054;

/// `Θ_T = Φ(x_N) + Ψ(y_0) + ξ_N` per path.
pub fn theta_t<M: CoefficientModel + ?Sized>(paths: &PathBundle, model: &M) -> Result<Vec<f64>> {
    let nodes = paths.nodes();
    if paths.xi.len() != paths.n_paths * nodes || paths.x.len() != paths.n_paths * nodes {
        return Err(Error::usage("path bundle has no running-cost integral or terminal states"));
    }
    let n = paths.steps();
    (0..paths.n_paths)
        .map(|p| {
            let phi = model.terminal_forward(paths.x_at(p, n));
            let psi = model.initial_backward(paths.y_at(p, 0));
            let value = phi + psi + paths.xi_at(p, n);
            if value.is_finite() {
                Ok(value)
            } else {
                Err(Error::Evaluation {
                    coefficient: if phi.is_finite() { "Psi" } else { "Phi" }.into(),
                })
            }
        })
        .collect()
}

/// Estimate of `J^θ = E[exp(θ Θ_T)]`.
///
/// `log_j` is always available; the linear-scale fields are `None` when
/// `J^θ` itself is not representable as an `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub theta: f64,
    pub n: usize,
    pub log_j: f64,
    pub j: Option<f64>,
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Standard error divided by the estimate, computed in the scaled domain.
    pub relative_std_error: f64,
    pub max_theta_t: f64,
}

/// Log-domain mean of `exp(θ x)`: returns `(log mean, relative SE)`.
fn log_mean_exp(samples: &[f64], theta: f64) -> Result<(f64, f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Statistics(format!("need at least 2 cost samples, got {n}")));
    }
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric(format!(
            "exponential cost overflows even in the log domain (max cost {max})"
        )));
    }
    let shift = theta * max;
    let scaled: Vec<f64> = samples.iter().map(|&s| (theta * s - shift).exp()).collect();
    let mean = pairwise_sum(&scaled) / n as f64;
    let var = pairwise_sum(&scaled.iter().map(|w| (w - mean).powi(2)).collect::<Vec<_>>()) / (n - 1) as f64;
    let log_j = shift + mean.ln();
    if !log_j.is_finite() {
        return Err(Error::numeric(format!(
            "exponential cost overflows even in the log domain (max cost {max})"
        )));
    }
    Ok((log_j, (var / n as f64).sqrt() / mean, max))
}

/// Monte Carlo estimate of `J^θ` with a 95% confidence interval.
pub fn cost_j_theta(samples: &[f64], theta: f64) -> Result<CostEstimate> {
    let theta = RiskParams::new(theta)?.theta();
    let (log_j, rel, max) = log_mean_exp(samples, theta)?;
    let mut est = CostEstimate {
        theta,
        n: samples.len(),
        log_j,
        j: None,
        std_error: None,
        ci_low: None,
        ci_high: None,
        relative_std_error: rel,
        max_theta_t: max,
    };
    if theta * max <= 709.0 {
        let exps: Vec<f64> = samples.iter().map(|&s| (theta * s).exp()).collect();
        let lin = mc_estimate(&exps)?;
        est.j = Some(lin.mean);
        est.std_error = Some(lin.std_error);
        est.ci_low = Some(lin.ci_low);
        est.ci_high = Some(lin.ci_high);
    } else if log_j < 709.0 {
        let j = log_j.exp();
        est.j = Some(j);
        est.std_error = Some(rel * j);
        est.ci_low = Some(j * (1.0 - Z95 * rel));
        est.ci_high = Some(j * (1.0 + Z95 * rel));
    }
    Ok(est)
}

/// Certainty equivalent `Θ_θ` with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskLoss {
    pub theta: f64,
    pub value: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn risk_loss(samples: &[f64], theta: f64) -> Result<RiskLoss> {
    let theta = RiskParams::new(theta)?.theta();
    let (log_j, rel, _) = log_mean_exp(samples, theta)?;
    let value = log_j / theta;
    let se = rel / theta;
    Ok(RiskLoss {
        theta,
        value,
        std_error: se,
        ci_low: value - Z95 * se,
        ci_high: value + Z95 * se,
    })
}

/// Per-path cost samples together with both aggregations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostOutcome {
    pub theta_t: Vec<f64>,
    pub cost: CostEstimate,
    pub loss: RiskLoss,
}

impl CostOutcome {
    pub fn new(theta_t: Vec<f64>, theta: f64) -> Result<Self> {
        let cost = cost_j_theta(&theta_t, theta)?;
        let loss = risk_loss(&theta_t, theta)?;
        Ok(Self { theta_t, cost, loss })
    }

    /// `A_T^θ = exp(θ Θ_T)` per path (may be `inf` for extreme costs).
    pub fn a_t(&self) -> Vec<f64> {
        self.theta_t.iter().map(|&s| (self.cost.theta * s).exp()).collect()
    }
}

/// Residuals of the second-order expansion `Θ_θ ≈ E Θ + (θ/2) Var Θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub thetas: Vec<f64>,
    pub losses: Vec<f64>,
    pub residuals: Vec<f64>,
    pub mean: f64,
    /// Population variance (`1/n`), so the expansion is exact to second
    /// order for the empirical distribution.
    pub variance: f64,
    /// Least-squares slope of `log|residual|` against `log θ`.
    pub slope: Option<f64>,
    pub degenerate: bool,
}

pub fn expansion_residual(samples: &[f64], thetas: &[f64]) -> Result<ExpansionReport> {
    if thetas.is_empty() || thetas.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::usage("expansion needs a non-empty list of positive theta values"));
    }
    if thetas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::usage("theta values must be sorted in increasing order"));
    }
    let n = samples.len() as f64;
    let mean = pairwise_sum(samples) / n;
    let variance = pairwise_sum(&samples.iter().map(|s| (s - mean).powi(2)).collect::<Vec<_>>()) / n;
    let mut losses = Vec::with_capacity(thetas.len());
    for &t in thetas {
        losses.push(risk_loss(samples, t)?.value);
    }
    if variance == 0.0 {
        return Ok(ExpansionReport {
            thetas: thetas.to_vec(),
            residuals: vec![0.0; thetas.len()],
            losses,
            mean,
            variance,
            slope: None,
            degenerate: true,
        });
    }
    let residuals: Vec<f64> = thetas
        .iter()
        .zip(&losses)
        .map(|(t, l)| l - (mean + 0.5 * t * variance))
        .collect();
    let pts: Vec<(f64, f64)> = thetas
        .iter()
        .zip(&residuals)
        .filter(|(_, r)| **r != 0.0)
        .map(|(t, r)| (t.ln(), r.abs().ln()))
        .collect();
    let slope = (pts.len() >= 2).then(|| {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    Ok(ExpansionReport {
        thetas: thetas.to_vec(),
        losses,
        residuals,
        mean,
        variance,
        degenerate: slope.is_none(),
        slope,
    })
}

/// Which state variables the `V^θ` regression ended up using.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VThetaFeatures {
    /// Exact terminal value, no regression.
    Terminal,
    XXiY,
    /// `y_k` was a function of `(x_k, ξ_k)` on the sample, so it was dropped.
    XXi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VThetaEstimate {
    pub k: usize,
    pub values: Vec<f64>,
    pub features: VThetaFeatures,
    pub condition: f64,
}

/// Regression estimate of `V^θ(t_k) = E[A_T^θ | F_{t_k}]` on each path.
pub fn v_theta<M: CoefficientModel + ?Sized>(
    paths: &PathBundle,
    model: &M,
    theta: f64,
    k: usize,
    basis: RegressionBasis,
) -> Result<VThetaEstimate> {
    let theta = RiskParams::new(theta)?.theta();
    if k > paths.steps() {
        return Err(Error::usage(format!("node {k} beyond the last node {}", paths.steps())));
    }
    let a_t: Vec<f64> = theta_t(paths, model)?.iter().map(|s| (theta * s).exp()).collect();
    if a_t.iter().any(|a| !a.is_finite()) {
        return Err(Error::numeric("A_T overflows; lower theta or use the log-domain cost"));
    }
    if k == paths.steps() {
        return Ok(VThetaEstimate {
            k,
            values: a_t,
            features: VThetaFeatures::Terminal,
            condition: 1.0,
        });
    }
    let with_y: Vec<Vec<f64>> = (0..paths.n_paths)
        .map(|p| vec![paths.x_at(p, k), paths.xi_at(p, k), paths.y_at(p, k)])
        .collect();
    let (features, kind, proj) = match fit(basis, &with_y, &[&a_t], k) {
        Ok(proj) => (with_y, VThetaFeatures::XXiY, proj),
        Err(Error::SingularRegression { .. }) => {
            let reduced: Vec<Vec<f64>> = with_y.iter().map(|v| v[..2].to_vec()).collect();
            let proj = fit(basis, &reduced, &[&a_t], k)?;
            (reduced, VThetaFeatures::XXi, proj)
        }
        Err(e) => return Err(e),
    };
    Ok(VThetaEstimate {
        k,
        values: features.iter().map(|f| proj.eval(0, f)).collect(),
        features: kind,
        condition: proj.condition,
    })
}

fn inner_tag(path: usize, k: usize, nodes: usize) -> u64 {
    (path * nodes + k) as u64
}

/// Nested Monte Carlo oracle for `V^θ(t_k)` on selected outer paths: each
/// path is restarted at node `k` with `inner` fresh sub-paths.
#[allow(clippy::too_many_arguments)]
pub fn v_theta_nested<M, S>(
    model: &M,
    policy: &ControlPolicy,
    source: &S,
    spec: &SimulationSpec,
    paths: &PathBundle,
    theta: f64,
    k: usize,
    inner: usize,
    outer: &[usize],
) -> Result<Vec<f64>>
where
    M: CoefficientModel + ?Sized,
    S: BackwardSource + ?Sized,
{
    let theta = RiskParams::new(theta)?.theta();
    let n = paths.steps();
    outer
        .iter()
        .map(|&p| {
            let psi = model.initial_backward(paths.y_at(p, 0));
            if k == n {
                return Ok((theta * (model.terminal_forward(paths.x_at(p, n)) + psi + paths.xi_at(p, n))).exp());
            }
            let inner_spec = spec.with_paths(inner).with_rng(spec.rng.child(inner_tag(p, k, n + 1)));
            let xi = paths.xi_at(p, k);
            let tails = simulate_tail(model, policy, source, &inner_spec, k, paths.x_at(p, k), xi)?;
            let a: Vec<f64> = tails
                .iter()
                .map(|s| (theta * (model.terminal_forward(s.x_terminal) + psi + xi + s.xi_terminal)).exp())
                .collect();
            Ok(pairwise_sum(&a) / a.len() as f64)
        })
        .collect()
}

/// Gradient drivers `(l, L)` of the logarithmic transform along the paths.
pub trait DensityDrivers: Sync {
    fn l(&self, path: usize, k: usize) -> f64;
    fn big_l(&self, path: usize, k: usize, mark: usize) -> f64;
}

/// Drivers constant in time and across paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantDrivers {
    pub l: f64,
    pub big_l: Vec<f64>,
}

impl DensityDrivers for ConstantDrivers {
    fn l(&self, _path: usize, _k: usize) -> f64 {
        self.l
    }

    fn big_l(&self, _path: usize, _k: usize, mark: usize) -> f64 {
        self.big_l[mark]
    }
}

/// Girsanov density `L^θ` and the drivers of the tilted measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GirsanovPaths {
    pub theta: f64,
    pub n_paths: usize,
    pub steps: usize,
    pub n_marks: usize,
    /// `L^θ_k`, laid out `[p * (N + 1) + k]`.
    pub density: Vec<f64>,
    pub l: Vec<f64>,
    pub big_l: Vec<f64>,
    /// `ΔW^θ = ΔW − θ l dt`.
    pub shifted_dw: Vec<f64>,
    /// `ΔÑ^θ(i) = ΔN(i) − (1 + θ L_i) w_i dt`.
    pub shifted_dn: Vec<f64>,
}

impl GirsanovPaths {
    pub fn density_at(&self, p: usize, k: usize) -> f64 {
        self.density[p * (self.steps + 1) + k]
    }

    pub fn terminal_density(&self) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.density_at(p, self.steps)).collect()
    }
}

/// Accumulates the Doléans-Dade exponential of `θ(∫ l dW + ∫ L dÑ)` step by
/// step in the log domain:
///
/// ```text
/// log L_{k+1} = log L_k + θ l ΔW − θ² l² dt / 2 + Σ_i [ΔN_i log(1 + θ L_i) − θ L_i w_i dt]
/// ```
pub fn girsanov_density<D: DensityDrivers + ?Sized>(drivers: &D, theta: f64, paths: &PathBundle) -> Result<GirsanovPaths> {
    let theta = RiskParams::new(theta)?.theta();
    let (n, m) = (paths.steps(), paths.n_marks());
    let dt = paths.grid.dt();
    let weights = paths.marks.weights();
    type PathOut = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let per_path: Vec<PathOut> = (0..paths.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut density = Vec::with_capacity(n + 1);
            let (mut ls, mut bls, mut sdw, mut sdn) = (
                Vec::with_capacity(n),
                Vec::with_capacity(n * m),
                Vec::with_capacity(n),
                Vec::with_capacity(n * m),
            );
            let mut log_l = 0.0;
            density.push(1.0);
            for k in 0..n {
                let l = drivers.l(p, k);
                let dw = paths.dw_at(p, k);
                log_l += theta * l * dw - 0.5 * theta * theta * l * l * dt;
                ls.push(l);
                sdw.push(dw - theta * l * dt);
                for (i, &w) in weights.iter().enumerate() {
                    let big_l = drivers.big_l(p, k, i);
                    let count = paths.dn_at(p, k)[i];
                    let factor = 1.0 + theta * big_l;
                    if count > 0 {
                        if factor <= 0.0 {
                            return Err(Error::numeric(format!(
                                "density turns nonpositive on path {p} at step {k}: 1 + theta L[{i}] = {factor}"
                            )));
                        }
                        log_l += count as f64 * factor.ln();
                    }
                    log_l -= theta * big_l * w * dt;
                    bls.push(big_l);
                    sdn.push(count as f64 - factor * w * dt);
                }
                if !log_l.is_finite() {
                    return Err(Error::numeric(format!("density is not finite on path {p} at step {k}")));
                }
                density.push(log_l.exp());
            }
            Ok((density, ls, bls, sdw, sdn))
        })
        .collect::<Result<_>>()?;
    let mut out = GirsanovPaths {
        theta,
        n_paths: paths.n_paths,
        steps: n,
        n_marks: m,
        density: Vec::with_capacity(paths.n_paths * (n + 1)),
        l: Vec::new(),
        big_l: Vec::new(),
        shifted_dw: Vec::new(),
        shifted_dn: Vec::new(),
    };
    for (d, l, bl, sw, sn) in per_path {
        out.density.extend(d);
        out.l.extend(l);
        out.big_l.extend(bl);
        out.shifted_dw.extend(sw);
        out.shifted_dn.extend(sn);
    }
    Ok(out)
}

/// `Λ^θ` and its martingale integrands `(l, L)` on a set of outer paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPaths {
    /// Indices of the outer paths in the bundle they were computed on.
    pub paths: Vec<usize>,
    pub steps: usize,
    pub n_marks: usize,
    /// `[j * (N + 1) + k]` for the `j`-th listed path.
    pub lambda: Vec<f64>,
    /// `[j * N + k]`.
    pub l: Vec<f64>,
    /// `[(j * N + k) * M + i]`.
    pub big_l: Vec<f64>,
}

impl LambdaPaths {
    pub fn new(paths: Vec<usize>, steps: usize, n_marks: usize, lambda: Vec<f64>, l: Vec<f64>, big_l: Vec<f64>) -> Result<Self> {
        let n = paths.len();
        if lambda.is_empty() {
            return Err(Error::usage("no Lambda trajectory supplied"));
        }
        if lambda.len() != n * (steps + 1) || l.len() != n * steps || big_l.len() != n * steps * n_marks {
            return Err(Error::usage("Lambda, l and L arrays do not match the path and step counts"));
        }
        Ok(Self {
            paths,
            steps,
            n_marks,
            lambda,
            l,
            big_l,
        })
    }
}

/// Nested Monte Carlo oracle for the logarithmic transform
/// `Λ^θ(t) = (1/θ) log E[exp θ(∫_t^T f + Φ(x_T) + Ψ(y_0)) | F_t]`.
///
/// `l` and `L` are read off the first inner step:
/// `l_k = E[A ΔW_k] / (θ V dt)`, `L_k(i) = E[A ΔÑ_k(i)] / (θ V w_i dt)`.
#[allow(clippy::too_many_arguments)]
pub fn nested_lambda<M, S>(
    model: &M,
    policy: &ControlPolicy,
    source: &S,
    spec: &SimulationSpec,
    paths: &PathBundle,
    theta: f64,
    inner: usize,
    outer: &[usize],
) -> Result<LambdaPaths>
where
    M: CoefficientModel + ?Sized,
    S: BackwardSource + ?Sized,
{
    let theta = RiskParams::new(theta)?.theta();
    let (n, m) = (paths.steps(), paths.n_marks());
    let dt = paths.grid.dt();
    let weights = paths.marks.weights();
    let (mut lambda, mut ls, mut bls) = (Vec::new(), Vec::new(), Vec::new());
    for &p in outer {
        let psi = model.initial_backward(paths.y_at(p, 0));
        for k in 0..n {
            let inner_spec = spec.with_paths(inner).with_rng(spec.rng.child(inner_tag(p, k, n + 1)));
            let tails = simulate_tail(model, policy, source, &inner_spec, k, paths.x_at(p, k), paths.xi_at(p, k))?;
            let costs: Vec<f64> = tails
                .iter()
                .map(|s| theta * (model.terminal_forward(s.x_terminal) + psi + s.xi_terminal))
                .collect();
            let shift = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !shift.is_finite() {
                return Err(Error::numeric(format!("inner costs not finite on path {p} at node {k}")));
            }
            let a: Vec<f64> = costs.iter().map(|c| (c - shift).exp()).collect();
            let v = pairwise_sum(&a) / a.len() as f64;
            lambda.push((shift + v.ln()) / theta);
            let cov_w: Vec<f64> = a.iter().zip(&tails).map(|(a, s)| a * s.first_dw).collect();
            ls.push(pairwise_sum(&cov_w) / a.len() as f64 / (theta * v * dt));
            for (i, &w) in weights.iter().enumerate() {
                let cov_n: Vec<f64> = a
                    .iter()
                    .zip(&tails)
                    .map(|(a, s)| a * (s.first_dn[i] as f64 - w * dt))
                    .collect();
                bls.push(pairwise_sum(&cov_n) / a.len() as f64 / (theta * v * w * dt));
            }
        }
        lambda.push(model.terminal_forward(paths.x_at(p, n)) + psi);
    }
    LambdaPaths::new(outer.to_vec(), n, m, lambda, ls, bls)
}

/// Per-node residuals of the quadratic BSDE satisfied by `Λ^θ`, plus the two
/// candidate terminal conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticResidualReport {
    pub theta: f64,
    pub per_node: Vec<McEstimate>,
    /// Mean `|Λ(T) − (Φ(x_T) + Ψ(y_0))|`.
    pub terminal_mismatch_phi: f64,
    /// Mean `|Λ(T) − (Φ_x(x_T) + Ψ(y_0))|`.
    pub terminal_mismatch_phi_x: f64,
}

impl QuadraticResidualReport {
    /// Largest `|mean| / SE` over the nodes (0 when a node has zero spread
    /// and zero mean).
    pub fn max_z_score(&self) -> f64 {
        self.per_node
            .iter()
            .map(|e| {
                if e.std_error > 0.0 {
                    e.mean.abs() / e.std_error
                } else if e.mean == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Residual per step
///
/// ```text
/// Λ_{k+1} − Λ_k + G dt − l ΔW − Σ_i [L_i − (e^{θ r_i} − 1)/θ] ΔÑ_i
/// G = f + θ l²/2 + (θ/2) Σ_i w_i L_i² + Σ_i w_i ((e^{θ r_i} − 1)/θ − r_i)
/// ```
///
/// evaluated on the listed outer paths of `paths`.
pub fn quadratic_generator_residual<M: CoefficientModel + ?Sized>(
    lambda: &LambdaPaths,
    paths: &PathBundle,
    model: &M,
    theta: f64,
) -> Result<QuadraticResidualReport> {
    let theta = RiskParams::new(theta)?.theta();
    if lambda.lambda.is_empty() {
        return Err(Error::usage("no Lambda trajectory supplied"));
    }
    let (n, m) = (paths.steps(), paths.n_marks());
    if lambda.steps != n || lambda.n_marks != m || lambda.paths.iter().any(|&p| p >= paths.n_paths) {
        return Err(Error::usage("Lambda trajectory does not match the path bundle"));
    }
    let dt = paths.grid.dt();
    let weights = paths.marks.weights();
    let count = lambda.paths.len();
    let mut per_node = Vec::with_capacity(n);
    for k in 0..n {
        let t = paths.grid.node(k);
        let samples: Vec<f64> = lambda
            .paths
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let r = paths.r_at(p, k);
                let pt = StatePoint::new(t, paths.x_at(p, k), paths.y_at(p, k), paths.z_at(p, k), r);
                let f = model.running_cost(&pt, paths.u_at(p, k));
                let l = lambda.l[j * n + k];
                let mut gen = f + 0.5 * theta * l * l;
                let mut mart = l * paths.dw_at(p, k);
                for (i, &w) in weights.iter().enumerate() {
                    let big_l = lambda.big_l[(j * n + k) * m + i];
                    let tilt = (theta * r[i]).exp_m1() / theta;
                    gen += 0.5 * theta * w * big_l * big_l + w * (tilt - r[i]);
                    mart += (big_l - tilt) * paths.dn_tilde_at(p, k, i);
                }
                let lam = &lambda.lambda[j * (n + 1)..(j + 1) * (n + 1)];
                lam[k + 1] - lam[k] + gen * dt - mart
            })
            .collect();
        per_node.push(if count >= 2 {
            mc_estimate(&samples)?
        } else {
            let v = samples.first().copied().unwrap_or(0.0);
            McEstimate {
                mean: v,
                std_error: 0.0,
                ci_low: v,
                ci_high: v,
                n: count,
            }
        });
    }
    let (mut mis_phi, mut mis_phi_x) = (0.0, 0.0);
    for (j, &p) in lambda.paths.iter().enumerate() {
        let x = paths.x_at(p, n);
        let psi = model.initial_backward(paths.y_at(p, 0));
        let end = lambda.lambda[j * (n + 1) + n];
        let pt = StatePoint::new(paths.grid.horizon(), x, paths.y_at(p, n), 0.0, &[]);
        let phi_x = partials(model, Coefficient::TerminalForward, Variable::X, &pt, 0.0, &paths.marks)?.value;
        mis_phi += (end - (model.terminal_forward(x) + psi)).abs();
        mis_phi_x += (end - (phi_x + psi)).abs();
    }
    Ok(QuadraticResidualReport {
        theta,
        per_node,
        terminal_mismatch_phi: mis_phi / count.max(1) as f64,
        terminal_mismatch_phi_x: mis_phi_x / count.max(1) as f64,
    })
}
