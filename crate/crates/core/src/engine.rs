//! Forward simulation of controlled jump diffusions.
//!
//! One Euler–Maruyama step per grid interval:
//!
//! ```text
//! x_{k+1} = x_k + b dt + σ ΔW_k + Σ_i ΔN_k(i) γ(λ_i) − dt Σ_i w_i γ(λ_i)
//! ξ_{k+1} = ξ_k + f dt
//! ```
//!
//! Coefficients are frozen at the left node of each step (the left limit at
//! jump times). All jumps falling inside a step are applied.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefficientModel, ControlPolicy, FeedbackArgs, MarkSet, StatePoint, TimeGrid};
use crate::rng::RngSpec;

/// Jump times (sorted, in `(0, T]`) and the mark index of each jump, for one path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpLedger {
    pub times: Vec<f64>,
    pub marks: Vec<usize>,
}

impl JumpLedger {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Jump counts per step and mark, laid out `[k * M + i]`. A jump at time
    /// `t` belongs to the step `(t_k, t_{k+1}]` containing it.
    pub fn step_counts(&self, grid: &TimeGrid, n_marks: usize) -> Vec<u32> {
        let n = grid.steps();
        let mut counts = vec![0u32; n * n_marks];
        for (&t, &i) in self.times.iter().zip(&self.marks) {
            let k = ((t / grid.dt()).ceil() as usize).clamp(1, n) - 1;
            counts[k * n_marks + i] += 1;
        }
        counts
    }
}

/// Samples the compound-Poisson ledger of one path: exponential inter-arrival
/// times at the total intensity, marks drawn with probability `w_i / Σ w`.
pub fn sample_jumps(marks: &MarkSet, grid: &TimeGrid, rng: &RngSpec, path: usize) -> JumpLedger {
    let rate = marks.total_intensity();
    let mut ledger = JumpLedger::default();
    if marks.is_empty() || rate <= 0.0 {
        return ledger;
    }
    let mut stream = rng.jumps(path);
    let arrivals = Exp::new(rate).expect("positive intensity");
    let mut t = 0.0;
    loop {
        t += arrivals.sample(&mut stream);
        if t > grid.horizon() {
            break;
        }
        ledger.times.push(t);
        ledger.marks.push(pick_mark(marks, stream.random::<f64>()));
    }
    ledger
}

fn pick_mark(marks: &MarkSet, u: f64) -> usize {
    let target = u * marks.total_intensity();
    let mut acc = 0.0;
    for (i, w) in marks.weights().iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    marks.len() - 1
}

/// Supplies `(y, z, r)` to the forward coefficients at a node. Fully coupled
/// models read the current backward approximation through this.
pub trait BackwardSource: Sync {
    /// Returns `(y, z)` and writes `r` (one entry per mark) into `r_out`.
    fn values(&self, k: usize, x: f64, xi: f64, r_out: &mut [f64]) -> (f64, f64);
}

/// `y = z = r = 0`, for decoupled models.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroSource;

impl BackwardSource for ZeroSource {
    fn values(&self, _k: usize, _x: f64, _xi: f64, r_out: &mut [f64]) -> (f64, f64) {
        r_out.fill(0.0);
        (0.0, 0.0)
    }
}

/// Constant `y`, zero `z` and `r`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSource(pub f64);

impl BackwardSource for ConstantSource {
    fn values(&self, _k: usize, _x: f64, _xi: f64, r_out: &mut [f64]) -> (f64, f64) {
        r_out.fill(0.0);
        (self.0, 0.0)
    }
}

/// Closure-backed source.
pub struct FnSource<F>(pub F);

impl<F> BackwardSource for FnSource<F>
where
    F: Fn(usize, f64, f64, &mut [f64]) -> (f64, f64) + Sync,
{
    fn values(&self, k: usize, x: f64, xi: f64, r_out: &mut [f64]) -> (f64, f64) {
        (self.0)(k, x, xi, r_out)
    }
}

/// Where and how many paths to simulate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub grid: TimeGrid,
    pub marks: MarkSet,
    /// Initial forward state `d`.
    pub x0: f64,
    pub n_paths: usize,
    pub rng: RngSpec,
}

impl SimulationSpec {
    pub fn new(grid: TimeGrid, marks: MarkSet, x0: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            grid,
            marks,
            x0,
            n_paths,
            rng: RngSpec::new(seed),
        }
    }

    pub fn with_paths(&self, n_paths: usize) -> Self {
        Self {
            n_paths,
            ..self.clone()
        }
    }

    pub fn with_rng(&self, rng: RngSpec) -> Self {
        Self { rng, ..self.clone() }
    }
}

/// Discretized trajectories of every path. Node arrays are laid out
/// path-major: `x[p * (N + 1) + k]`; step arrays `dw[p * N + k]`;
/// mark arrays add a trailing mark index.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub marks: MarkSet,
    pub n_paths: usize,
    pub x0: f64,
    pub master_seed: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub xi: Vec<f64>,
    /// Applied control per step.
    pub u: Vec<f64>,
    pub dw: Vec<f64>,
    pub dn: Vec<u32>,
    pub ledgers: Vec<JumpLedger>,
    pub clamp_count: u64,
    /// Set once `(y, z, r)` hold a backward solution rather than source values.
    pub backward_filled: bool,
}

impl PathBundle {
    pub fn nodes(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    #[inline]
    pub fn node_index(&self, p: usize, k: usize) -> usize {
        p * self.nodes() + k
    }

    #[inline]
    pub fn step_index(&self, p: usize, k: usize) -> usize {
        p * self.steps() + k
    }

    pub fn x_at(&self, p: usize, k: usize) -> f64 {
        self.x[self.node_index(p, k)]
    }

    pub fn y_at(&self, p: usize, k: usize) -> f64 {
        self.y[self.node_index(p, k)]
    }

    pub fn z_at(&self, p: usize, k: usize) -> f64 {
        self.z[self.node_index(p, k)]
    }

    pub fn xi_at(&self, p: usize, k: usize) -> f64 {
        self.xi[self.node_index(p, k)]
    }

    pub fn u_at(&self, p: usize, k: usize) -> f64 {
        self.u[self.step_index(p, k)]
    }

    pub fn dw_at(&self, p: usize, k: usize) -> f64 {
        self.dw[self.step_index(p, k)]
    }

    pub fn r_at(&self, p: usize, k: usize) -> &[f64] {
        let m = self.n_marks();
        let start = self.node_index(p, k) * m;
        &self.r[start..start + m]
    }

    pub fn dn_at(&self, p: usize, k: usize) -> &[u32] {
        let m = self.n_marks();
        let start = self.step_index(p, k) * m;
        &self.dn[start..start + m]
    }

    /// Compensated increment `ΔÑ_k(i) = ΔN_k(i) − w_i dt`.
    pub fn dn_tilde_at(&self, p: usize, k: usize, i: usize) -> f64 {
        self.dn_at(p, k)[i] as f64 - self.marks.weights()[i] * self.grid.dt()
    }

    /// Column of node values across paths.
    pub fn column(&self, values: &[f64], k: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| values[self.node_index(p, k)]).collect()
    }

    pub fn terminal_x(&self) -> Vec<f64> {
        self.column(&self.x, self.steps())
    }

    /// Writes one row per path and node: `path,k,t,x,y,z,r_0..r_{M-1},xi,u`.
    /// The control column is empty at the terminal node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "k".into(), "t".into(), "x".into(), "y".into(), "z".into()];
        header.extend((0..self.n_marks()).map(|i| format!("r_{i}")));
        header.push("xi".into());
        header.push("u".into());
        w.write_record(&header)?;
        let n = self.steps();
        for p in 0..self.n_paths {
            for k in 0..=n {
                let mut row = vec![
                    p.to_string(),
                    k.to_string(),
                    fmt_float(self.grid.node(k)),
                    fmt_float(self.x_at(p, k)),
                    fmt_float(self.y_at(p, k)),
                    fmt_float(self.z_at(p, k)),
                ];
                row.extend(self.r_at(p, k).iter().map(|&v| fmt_float(v)));
                row.push(fmt_float(self.xi_at(p, k)));
                row.push(if k < n { fmt_float(self.u_at(p, k)) } else { String::new() });
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

struct PathRecord {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    xi: Vec<f64>,
    u: Vec<f64>,
    dw: Vec<f64>,
    dn: Vec<u32>,
    ledger: JumpLedger,
    clamps: u64,
}

/// Simulates `x`, `ξ` and the applied control on every path. `(y, z, r)`
/// at each node are read from `source` and recorded in the bundle.
pub fn simulate_forward<M, S>(
    model: &M,
    policy: &ControlPolicy,
    source: &S,
    spec: &SimulationSpec,
) -> Result<PathBundle>
where
    M: CoefficientModel + ?Sized,
    S: BackwardSource + ?Sized,
{
    if spec.n_paths == 0 {
        return Err(Error::usage("at least one path is required"));
    }
    let records: Vec<PathRecord> = (0..spec.n_paths)
        .into_par_iter()
        .map(|p| simulate_path(model, policy, source, spec, p, 0, spec.x0, 0.0))
        .collect::<Result<_>>()?;

    let grid = spec.grid;
    let (nodes, steps, m) = (grid.steps() + 1, grid.steps(), spec.marks.len());
    let n = spec.n_paths;
    let mut bundle = PathBundle {
        grid,
        marks: spec.marks.clone(),
        n_paths: n,
        x0: spec.x0,
        master_seed: spec.rng.master_seed,
        x: Vec::with_capacity(n * nodes),
        y: Vec::with_capacity(n * nodes),
        z: Vec::with_capacity(n * nodes),
        r: Vec::with_capacity(n * nodes * m),
        xi: Vec::with_capacity(n * nodes),
        u: Vec::with_capacity(n * steps),
        dw: Vec::with_capacity(n * steps),
        dn: Vec::with_capacity(n * steps * m),
        ledgers: Vec::with_capacity(n),
        clamp_count: 0,
        backward_filled: false,
    };
    for rec in records {
        bundle.x.extend(rec.x);
        bundle.y.extend(rec.y);
        bundle.z.extend(rec.z);
        bundle.r.extend(rec.r);
        bundle.xi.extend(rec.xi);
        bundle.u.extend(rec.u);
        bundle.dw.extend(rec.dw);
        bundle.dn.extend(rec.dn);
        bundle.ledgers.push(rec.ledger);
        bundle.clamp_count += rec.clamps;
    }
    Ok(bundle)
}

#[allow(clippy::too_many_arguments)]
fn simulate_path<M, S>(
    model: &M,
    policy: &ControlPolicy,
    source: &S,
    spec: &SimulationSpec,
    p: usize,
    start: usize,
    x_start: f64,
    xi_start: f64,
) -> Result<PathRecord>
where
    M: CoefficientModel + ?Sized,
    S: BackwardSource + ?Sized,
{
    let grid = &spec.grid;
    let marks = &spec.marks;
    let (n, m) = (grid.steps(), marks.len());
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let ledger = sample_jumps(marks, grid, &spec.rng, p);
    let dn = ledger.step_counts(grid, m);
    let mut normals = spec.rng.brownian(p);

    let mut rec = PathRecord {
        x: Vec::with_capacity(n + 1),
        y: Vec::with_capacity(n + 1),
        z: Vec::with_capacity(n + 1),
        r: Vec::with_capacity((n + 1) * m),
        xi: Vec::with_capacity(n + 1),
        u: Vec::with_capacity(n),
        dw: Vec::with_capacity(n),
        dn: Vec::new(),
        ledger: JumpLedger::default(),
        clamps: 0,
    };
    let mut r = vec![0.0; m];
    let (mut x, mut xi) = (x_start, xi_start);
    let fail = |node: usize, name: &str| Error::Simulation {
        path: p,
        node,
        coefficient: name.to_string(),
    };

    for k in start..n {
        let t = grid.node(k);
        let (y, z) = source.values(k, x, xi, &mut r);
        rec.x.push(x);
        rec.xi.push(xi);
        rec.y.push(y);
        rec.z.push(z);
        rec.r.extend_from_slice(&r);

        let control = policy.evaluate(&FeedbackArgs { k, t, x, y, r: &r });
        if !control.value.is_finite() {
            return Err(fail(k, "control"));
        }
        rec.clamps += control.clamped as u64;
        let v = control.value;
        let pt = StatePoint::new(t, x, y, z, &r);

        let b = model.drift(&pt, v);
        if !b.is_finite() {
            return Err(fail(k, "b"));
        }
        let sigma = model.diffusion(&pt, v);
        if !sigma.is_finite() {
            return Err(fail(k, "sigma"));
        }
        let f = model.running_cost(&pt, v);
        if !f.is_finite() {
            return Err(fail(k, "f"));
        }
        let dw = sqrt_dt * Distribution::<f64>::sample(&StandardNormal, &mut normals);

        let mut x_next = x + b * dt + sigma * dw;
        if m > 0 {
            let mut jumps = 0.0;
            let mut compensator = 0.0;
            for (i, (&mark, &w)) in marks.marks().iter().zip(marks.weights()).enumerate() {
                let gamma = model.jump(&pt, v, mark);
                if !gamma.is_finite() {
                    return Err(fail(k, &format!("gamma[{i}]")));
                }
                jumps += dn[k * m + i] as f64 * gamma;
                compensator += w * gamma;
            }
            x_next += jumps - dt * compensator;
        }
        if !x_next.is_finite() {
            return Err(fail(k + 1, "x"));
        }
        rec.u.push(v);
        rec.dw.push(dw);
        x = x_next;
        xi += f * dt;
    }

    let (y, z) = source.values(n, x, xi, &mut r);
    rec.x.push(x);
    rec.xi.push(xi);
    rec.y.push(y);
    rec.z.push(z);
    rec.r.extend_from_slice(&r);
    rec.dn = dn;
    rec.ledger = ledger;
    Ok(rec)
}

/// Terminal state of every path, without the trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSample {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub clamp_count: u64,
}

/// Same paths as [`simulate_forward`] (identical draws for the same spec),
/// keeping only `(x_N, ξ_N)`. Memory stays proportional to the number of
/// paths, which is what large cost evaluations need.
pub fn simulate_terminal<M, S>(
    model: &M,
    policy: &ControlPolicy,
    source: &S,
    spec: &SimulationSpec,
) -> Result<TerminalSample>
where
    M: CoefficientModel + ?Sized,
    S: BackwardSource + ?Sized,
{
    if spec.n_paths == 0 {
        return Err(Error::usage("at least one path is required"));
    }
    let ends: Vec<(f64, f64, u64)> = (0..spec.n_paths)
        .into_par_iter()
        .map(|p| {
            let rec = simulate_path(model, policy, source, spec, p, 0, spec.x0, 0.0)?;
            let last = rec.x.len() - 1;
            Ok((rec.x[last], rec.xi[last], rec.clamps))
        })
        .collect::<Result<_>>()?;
    Ok(TerminalSample {
        x: ends.iter().map(|e| e.0).collect(),
        xi: ends.iter().map(|e| e.1).collect(),
        clamp_count: ends.iter().map(|e| e.2).sum(),
    })
}

/// End state of a path restarted at an intermediate node.
#[derive(Debug, Clone, PartialEq)]
pub struct TailSample {
    pub x_terminal: f64,
    /// `∫ f dt` from the restart node to the horizon.
    pub xi_terminal: f64,
    /// Brownian increment of the first step after the restart node.
    pub first_dw: f64,
    /// Jump counts per mark in the first step after the restart node.
    pub first_dn: Vec<u32>,
}

/// Restarts `spec.n_paths` fresh paths at node `start` from state
/// `(x_start, xi_start)` and runs them to the horizon. `spec.rng` should be a
/// stream family not used by the outer simulation.
pub fn simulate_tail<M, S>(
    model: &M,
    policy: &ControlPolicy,
    source: &S,
    spec: &SimulationSpec,
    start: usize,
    x_start: f64,
    xi_start: f64,
) -> Result<Vec<TailSample>>
where
    M: CoefficientModel + ?Sized,
    S: BackwardSource + ?Sized,
{
    let n = spec.grid.steps();
    if start >= n {
        return Err(Error::usage(format!("restart node {start} must precede the last node {n}")));
    }
    let m = spec.marks.len();
    (0..spec.n_paths)
        .into_par_iter()
        .map(|p| {
            let rec = simulate_path(model, policy, source, spec, p, start, x_start, xi_start)?;
            let last = rec.x.len() - 1;
            Ok(TailSample {
                x_terminal: rec.x[last],
                xi_terminal: rec.xi[last] - xi_start,
                first_dw: rec.dw[0],
                first_dn: rec.dn[start * m..(start + 1) * m].to_vec(),
            })
        })
        .collect()
}

/// Monte Carlo summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

const Z_95: f64 = 1.959_963_984_540_054;

/// Mean, standard error `s/√n` and normal 95% interval. Sums are pairwise in
/// a fixed order, so the result does not depend on how samples were produced.
pub fn mc_estimate(samples: &[f64]) -> Result<McEstimate> {
    if samples.len() < 2 {
        return Err(Error::Statistics(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Statistics(format!("non-finite sample {bad}")));
    }
    let n = samples.len();
    let mean = pairwise_sum(samples) / n as f64;
    let squares: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&squares) / (n - 1) as f64;
    let std_error = (var / n as f64).sqrt();
    Ok(McEstimate {
        mean,
        std_error,
        ci_low: mean - Z_95 * std_error,
        ci_high: mean + Z_95 * std_error,
        n,
    })
}

pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}
