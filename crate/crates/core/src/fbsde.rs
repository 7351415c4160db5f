//! Backward component `(y, z, r)` by least-squares Monte Carlo, and Picard
//! iteration between the forward and backward sweeps for coupled models.
//!
//! Explicit backward scheme on the forward paths, for `k = N−1, …, 0`:
//!
//! ```text
//! z_k    = E[(y_{k+1} − E[y_{k+1} | F_k]) ΔW_k | F_k] / dt
//! r_k(i) = E[y_{k+1} ΔÑ_k(i) | F_k] / (w_i dt)
//! y_k    = E[y_{k+1} + g(t_k, x_k, y_{k+1}, z_k, r_k, u_k) dt | F_k]
//! ```
//!
//! with `y_N = a` and conditional expectations projected on polynomials in
//! `(x_k, ξ_k)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{mc_estimate, simulate_forward, BackwardSource, ConstantSource, McEstimate, PathBundle, SimulationSpec};
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, ControlPolicy, StatePoint};
use crate::regression::{dot, fit, Design, Projection, RegressionBasis};

/// Per-node fitted maps `(x, ξ) ↦ (y, z, r_0, …)`. Node `N` is the constant
/// terminal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardField {
    pub basis: RegressionBasis,
    pub terminal: f64,
    pub n_marks: usize,
    /// Targets per node: `[y, z, r_0, …, r_{M−1}]`.
    pub nodes: Vec<Projection>,
}

impl BackwardField {
    pub fn y0(&self) -> f64 {
        self.nodes[0].eval(0, &[0.0, 0.0])
    }

    /// Largest design-matrix condition number over the nodes.
    pub fn max_condition(&self) -> f64 {
        self.nodes.iter().map(|p| p.condition).fold(1.0, f64::max)
    }
}

impl BackwardSource for BackwardField {
    fn values(&self, k: usize, x: f64, xi: f64, r_out: &mut [f64]) -> (f64, f64) {
        let mut out = [0.0f64; 34];
        let targets = 2 + self.n_marks;
        self.nodes[k].eval_all(&[x, xi], &mut out[..targets]);
        r_out.copy_from_slice(&out[2..targets]);
        (out[0], out[1])
    }
}

fn node_features(paths: &PathBundle, k: usize) -> Vec<Vec<f64>> {
    (0..paths.n_paths)
        .map(|p| vec![paths.x_at(p, k), paths.xi_at(p, k)])
        .collect()
}

/// Solves the backward equation with terminal value `a` on the forward paths
/// and writes `(y, z, r)` into the bundle.
pub fn solve_backward<M: CoefficientModel + ?Sized>(
    model: &M,
    mut paths: PathBundle,
    terminal: f64,
    basis: RegressionBasis,
) -> Result<(PathBundle, BackwardField)> {
    let m = paths.n_marks();
    let n = paths.steps();
    let n_paths = paths.n_paths;
    let min_paths = 10 * basis.dimension(2);
    if n_paths < min_paths {
        return Err(Error::usage(format!(
            "backward regression needs at least {min_paths} paths for degree {}, got {n_paths}",
            basis.degree
        )));
    }
    let dt = paths.grid.dt();
    let weights = paths.marks.weights().to_vec();

    let mut y_next = vec![terminal; n_paths];
    let mut terminal_values = vec![0.0; 2 + m];
    terminal_values[0] = terminal;
    let mut projections = vec![Projection::constant(2, &terminal_values); n + 1];
    for p in 0..n_paths {
        let idx = paths.node_index(p, n);
        paths.y[idx] = terminal;
        paths.z[idx] = 0.0;
        paths.r[idx * m..(idx + 1) * m].fill(0.0);
    }

    for k in (0..n).rev() {
        let features = node_features(&paths, k);
        let design = Design::new(basis, &features, k)?;
        // Centring on E[y_{k+1} | F_k] leaves the estimators unbiased and
        // removes the noise of the conditional mean times the increment.
        let level = design.project(&[&y_next]);
        let innov: Vec<f64> = (0..n_paths)
            .map(|p| y_next[p] - dot(design.row(p), &level.coefficients[0]))
            .collect();
        let z_target: Vec<f64> = (0..n_paths).map(|p| innov[p] * paths.dw_at(p, k) / dt).collect();
        let r_targets: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..n_paths)
                    .map(|p| innov[p] * paths.dn_tilde_at(p, k, i) / (weights[i] * dt))
                    .collect()
            })
            .collect();
        let mut martingale_targets: Vec<&[f64]> = vec![&z_target];
        martingale_targets.extend(r_targets.iter().map(|v| v.as_slice()));
        let mart = design.project(&martingale_targets);

        let t = paths.grid.node(k);
        // z and r per path, laid out [z, r_0, …] with stride 1 + m.
        let mut zr = vec![0.0; n_paths * (1 + m)];
        let y_target: Vec<f64> = zr
            .par_chunks_mut(1 + m)
            .enumerate()
            .map(|(p, out)| {
                let row = design.row(p);
                for (o, coef) in out.iter_mut().zip(&mart.coefficients) {
                    *o = dot(row, coef);
                }
                let pt = StatePoint::new(t, paths.x_at(p, k), y_next[p], out[0], &out[1..]);
                y_next[p] + model.generator(&pt, paths.u_at(p, k)) * dt
            })
            .collect();
        if let Some(p) = y_target.iter().position(|v| !v.is_finite()) {
            return Err(Error::Simulation {
                path: p,
                node: k,
                coefficient: "g".into(),
            });
        }
        let ys = design.project(&[&y_target]);

        for p in 0..n_paths {
            let y = dot(design.row(p), &ys.coefficients[0]);
            let idx = paths.node_index(p, k);
            paths.y[idx] = y;
            paths.z[idx] = zr[p * (1 + m)];
            paths.r[idx * m..(idx + 1) * m].copy_from_slice(&zr[p * (1 + m) + 1..(p + 1) * (1 + m)]);
            y_next[p] = y;
        }

        let mut combined = ys.clone();
        combined.coefficients.extend(mart.coefficients.iter().cloned());
        projections[k] = combined;
    }
    paths.backward_filled = true;
    let field = BackwardField {
        basis,
        terminal,
        n_marks: m,
        nodes: projections,
    };
    Ok((paths, field))
}

/// Per-node mean of `y_{k+1} − y_k + g dt − z_k ΔW_k − Σ_i r_k(i) ΔÑ_k(i)`.
///
/// The regression is fitted on the same paths, so the residuals are not
/// independent draws and their own spread understates the noise of their
/// mean, which is dominated by `z · mean(ΔW)`. The reported standard error
/// therefore adds the variance of the hedge term `z ΔW + Σ r ΔÑ`.
pub fn martingale_residuals<M: CoefficientModel + ?Sized>(
    model: &M,
    paths: &PathBundle,
) -> Result<Vec<McEstimate>> {
    if !paths.backward_filled {
        return Err(Error::usage("backward values have not been solved on this bundle"));
    }
    let dt = paths.grid.dt();
    (0..paths.steps())
        .map(|k| {
            let t = paths.grid.node(k);
            let (residual, hedge): (Vec<f64>, Vec<f64>) = (0..paths.n_paths)
                .map(|p| {
                    let y1 = paths.y_at(p, k + 1);
                    let r = paths.r_at(p, k);
                    let pt = StatePoint::new(t, paths.x_at(p, k), y1, paths.z_at(p, k), r);
                    let g = model.generator(&pt, paths.u_at(p, k));
                    let jumps: f64 = (0..paths.n_marks()).map(|i| r[i] * paths.dn_tilde_at(p, k, i)).sum();
                    let hedge = paths.z_at(p, k) * paths.dw_at(p, k) + jumps;
                    (y1 - paths.y_at(p, k) + g * dt - hedge, hedge)
                })
                .unzip();
            let mut est = mc_estimate(&residual)?;
            let hedge_se = mc_estimate(&hedge)?.std_error;
            est.std_error = est.std_error.hypot(hedge_se);
            est.ci_low = est.mean - 1.959963984540054 * est.std_error;
            est.ci_high = est.mean + 1.959963984540054 * est.std_error;
            Ok(est)
        })
        .collect()
}

/// Picard iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardSettings {
    /// Terminal value `a` of the backward equation.
    pub terminal: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Weight of the newest backward iterate; 1 disables damping.
    pub damping: f64,
    pub basis: RegressionBasis,
}

impl PicardSettings {
    pub fn new(terminal: f64, max_iter: usize, tol: f64) -> Self {
        Self {
            terminal,
            max_iter,
            tol,
            damping: 1.0,
            basis: RegressionBasis::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    /// Number of coupling updates performed (forward-backward sweeps minus one).
    pub iterations: usize,
    /// Sup over nodes of the mean-square change in `(x, y, z)` between sweeps.
    pub deltas: Vec<f64>,
    pub converged: bool,
    pub tolerance: f64,
    pub damping: f64,
}

pub fn sweep_delta(prev: &PathBundle, next: &PathBundle) -> f64 {
    let nodes = next.nodes();
    let n = next.n_paths as f64;
    (0..nodes)
        .map(|k| {
            let mut acc = 0.0;
            for p in 0..next.n_paths {
                let i = next.node_index(p, k);
                acc += (next.x[i] - prev.x[i]).powi(2)
                    + (next.y[i] - prev.y[i]).powi(2)
                    + (next.z[i] - prev.z[i]).powi(2);
            }
            acc / n
        })
        .fold(0.0, f64::max)
}

fn blend_field(
    old_values: (&[f64], &[f64], &[f64]),
    mut paths: PathBundle,
    new_field: &BackwardField,
    alpha: f64,
) -> Result<(PathBundle, BackwardField)> {
    let (old_y, old_z, old_r) = old_values;
    for (v, o) in paths.y.iter_mut().zip(old_y) {
        *v = alpha * *v + (1.0 - alpha) * o;
    }
    for (v, o) in paths.z.iter_mut().zip(old_z) {
        *v = alpha * *v + (1.0 - alpha) * o;
    }
    for (v, o) in paths.r.iter_mut().zip(old_r) {
        *v = alpha * *v + (1.0 - alpha) * o;
    }
    let m = paths.n_marks();
    let mut nodes = new_field.nodes.clone();
    for (k, node) in nodes.iter_mut().enumerate().take(paths.steps()) {
        let features = node_features(&paths, k);
        let y = paths.column(&paths.y, k);
        let z = paths.column(&paths.z, k);
        let rs: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..paths.n_paths).map(|p| paths.r_at(p, k)[i]).collect())
            .collect();
        let mut targets: Vec<&[f64]> = vec![&y, &z];
        targets.extend(rs.iter().map(|v| v.as_slice()));
        *node = fit(new_field.basis, &features, &targets, k)?;
    }
    let field = BackwardField {
        nodes,
        ..new_field.clone()
    };
    Ok((paths, field))
}

/// Alternates forward simulation (reading the current backward field) and
/// backward regression until successive sweeps differ by at most `tol`.
///
/// Hitting `max_iter` returns a non-converged report. Three consecutive
/// increases of the sweep delta abort with [`Error::Divergence`].
pub fn picard_couple<M: CoefficientModel + ?Sized>(
    model: &M,
    policy: &ControlPolicy,
    spec: &SimulationSpec,
    settings: &PicardSettings,
) -> Result<(PathBundle, BackwardField, CouplingReport)> {
    picard_couple_from(model, policy, spec, settings, &ConstantSource(settings.terminal))
}

/// [`picard_couple`] with the first forward sweep reading `initial`, e.g. the
/// field of a nearby, already solved problem.
pub fn picard_couple_from<M, S>(
    model: &M,
    policy: &ControlPolicy,
    spec: &SimulationSpec,
    settings: &PicardSettings,
    initial: &S,
) -> Result<(PathBundle, BackwardField, CouplingReport)>
where
    M: CoefficientModel + ?Sized,
    S: BackwardSource + ?Sized,
{
    if settings.max_iter == 0 {
        return Err(Error::usage("Picard iteration needs max_iter >= 1"));
    }
    if !(settings.damping > 0.0 && settings.damping <= 1.0) {
        return Err(Error::config(format!("damping must lie in (0, 1], got {}", settings.damping)));
    }
    let mut report = CouplingReport {
        iterations: 0,
        deltas: Vec::new(),
        converged: false,
        tolerance: settings.tol,
        damping: settings.damping,
    };

    let forward = simulate_forward(model, policy, initial, spec)?;
    let (mut current, mut field) = solve_backward(model, forward, settings.terminal, settings.basis)?;

    let mut rising = 0;
    while report.iterations < settings.max_iter {
        let forward = simulate_forward(model, policy, &field, spec)?;
        let old = (forward.y.clone(), forward.z.clone(), forward.r.clone());
        let (mut next, mut next_field) = solve_backward(model, forward, settings.terminal, settings.basis)?;
        if settings.damping < 1.0 {
            (next, next_field) = blend_field((&old.0, &old.1, &old.2), next, &next_field, settings.damping)?;
        }
        let delta = sweep_delta(&current, &next);
        report.iterations += 1;
        if let Some(&last) = report.deltas.last() {
            rising = if delta > last { rising + 1 } else { 0 };
        }
        report.deltas.push(delta);
        current = next;
        field = next_field;
        if !delta.is_finite() || rising >= 3 {
            return Err(Error::Divergence {
                report: Box::new(report),
            });
        }
        if delta <= settings.tol {
            report.converged = true;
            break;
        }
    }
    Ok((current, field, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ControlDomain, GenericModel, MarkSet, TimeGrid};

    fn spec(n_paths: usize, steps: usize, marks: MarkSet) -> SimulationSpec {
        SimulationSpec::new(TimeGrid::new(1.0, steps).unwrap(), marks, 0.5, n_paths, 11)
    }

    fn policy() -> ControlPolicy {
        ControlPolicy::constant(1.0, ControlDomain::unbounded())
    }

    #[test]
    fn constant_terminal_is_a_constant_martingale() {
        let model = GenericModel::new().with_diffusion(|_, _| 0.4).with_jump(|_, _, _| 0.1);
        let marks = MarkSet::single(0.0, 1.0).unwrap();
        let fwd = simulate_forward(&model, &policy(), &ConstantSource(0.0), &spec(400, 10, marks)).unwrap();
        let (paths, field) = solve_backward(&model, fwd, 2.5, RegressionBasis::default()).unwrap();
        for i in 0..paths.y.len() {
            assert!((paths.y[i] - 2.5).abs() < 1e-12);
            assert!(paths.z[i].abs() < 1e-10);
        }
        assert!(paths.r.iter().all(|r| r.abs() < 1e-10));
        assert!((field.y0() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn unit_generator_gives_time_to_go() {
        let model = GenericModel::new().with_diffusion(|_, _| 1.0).with_generator(|_, _| 1.0);
        let fwd = simulate_forward(&model, &policy(), &ConstantSource(0.0), &spec(500, 20, MarkSet::empty())).unwrap();
        let (paths, _) = solve_backward(&model, fwd, 0.0, RegressionBasis::default()).unwrap();
        let y0 = mc_estimate(&paths.column(&paths.y, 0)).unwrap();
        assert!((y0.mean - 1.0).abs() <= 1e-10);
        assert!((paths.y_at(3, 10) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn too_few_paths_is_rejected() {
        let model = GenericModel::new();
        let fwd = simulate_forward(&model, &policy(), &ConstantSource(0.0), &spec(30, 4, MarkSet::empty())).unwrap();
        assert!(matches!(solve_backward(&model, fwd, 0.0, RegressionBasis::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn decoupled_model_converges_after_one_update() {
        let model = GenericModel::new()
            .with_drift(|p, _| -0.5 * p.x)
            .with_diffusion(|_, _| 0.3)
            .with_generator(|p, _| p.x);
        let settings = PicardSettings::new(0.0, 5, 1e-12);
        let (_, _, report) = picard_couple(&model, &policy(), &spec(500, 10, MarkSet::empty()), &settings).unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.converged);
        assert_eq!(report.deltas, vec![0.0]);
    }

    #[test]
    fn damped_iteration_reports_consistently() {
        let model = GenericModel::new()
            .with_drift(|p, _| 0.3 * p.y)
            .with_diffusion(|_, _| 0.2)
            .with_generator(|p, _| 0.5 * p.x);
        let mut settings = PicardSettings::new(1.0, 30, 1e-10);
        settings.damping = 0.7;
        let (_, _, report) = picard_couple(&model, &policy(), &spec(500, 10, MarkSet::empty()), &settings).unwrap();
        assert!(report.deltas.iter().all(|d| *d >= 0.0));
        assert_eq!(report.deltas.len(), report.iterations);
        if report.converged {
            assert!(*report.deltas.last().unwrap() <= settings.tol);
        }
    }

    #[test]
    fn rejects_zero_iterations() {
        let settings = PicardSettings::new(0.0, 0, 1e-3);
        let err = picard_couple(&GenericModel::new(), &policy(), &spec(100, 4, MarkSet::empty()), &settings).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
