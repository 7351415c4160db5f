//! Experiment orchestration and deterministic result emission.
//!
//! A run produces a result JSON (plus CSVs). The JSON is written
//! canonically: object keys sorted, floats as `{:.16e}` (17 significant
//! digits), so it round-trips exactly. The determinism hash is the SHA-256
//! of the canonical compact form with the volatile keys removed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::adjoint::{NecessarySettings, ProbeSettings};
use crate::cashflow::{run_mean_variance_experiment, CashflowSettings, ExperimentSettings, PlotData};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::engine::{fmt_float, mc_estimate, simulate_forward, McEstimate, PathBundle, SimulationSpec, ZeroSource};
use crate::error::{Error, Result};
use crate::fbsde::{martingale_residuals, picard_couple, PicardSettings};
use crate::model::{ControlDomain, ControlPolicy, GenericModel, MarkSet, TimeGrid};
use crate::regression::RegressionBasis;
use crate::risk::{cost_j_theta, expansion_residual, girsanov_density, risk_loss, theta_t, v_theta, ConstantDrivers, CostEstimate};

/// Keys left out of the determinism hash.
pub const VOLATILE_KEYS: [&str; 3] = ["timestamp_unix", "wall_time_s", "determinism_hash"];

/// A reported number: finite value with uncertainty, or `null` with a reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: Option<f64>,
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub reason: Option<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl Metric {
    pub fn exact(value: f64) -> Self {
        match finite(value) {
            Some(v) => Self {
                value: Some(v),
                std_error: None,
                ci_low: None,
                ci_high: None,
                reason: None,
            },
            None => Self::missing(format!("value is not finite ({value})")),
        }
    }

    pub fn missing(reason: impl Into<String>) -> Self {
        Self {
            value: None,
            std_error: None,
            ci_low: None,
            ci_high: None,
            reason: Some(reason.into()),
        }
    }

    pub fn with_error(value: f64, std_error: f64) -> Self {
        let z = 1.959_963_984_540_054;
        match (finite(value), finite(std_error)) {
            (Some(v), Some(s)) => Self {
                value: Some(v),
                std_error: Some(s),
                ci_low: Some(v - z * s),
                ci_high: Some(v + z * s),
                reason: None,
            },
            _ => Self::missing(format!("value {value} or standard error {std_error} is not finite")),
        }
    }

    pub fn from_mc(est: &McEstimate) -> Self {
        Self {
            value: finite(est.mean),
            std_error: finite(est.std_error),
            ci_low: finite(est.ci_low),
            ci_high: finite(est.ci_high),
            reason: None,
        }
    }

    pub fn from_cost(est: &CostEstimate) -> Self {
        match est.j {
            Some(j) => Self {
                value: Some(j),
                std_error: est.std_error,
                ci_low: est.ci_low,
                ci_high: est.ci_high,
                reason: None,
            },
            None => Self::missing(format!(
                "J^theta overflows f64 (log J = {:.6e}); see log_J_theta",
                est.log_j
            )),
        }
    }
}

/// Result of one run plus what is written next to the JSON.
#[derive(Debug)]
pub struct RunOutput {
    pub result: Value,
    pub hash: String,
    /// False when an optimality verdict or property check failed.
    pub passed: bool,
    pub plot: Option<PlotData>,
    /// `(file name, header, rows)` tables.
    pub tables: Vec<(String, Vec<String>, Vec<Vec<String>>)>,
    pub paths: Option<PathBundle>,
}

impl RunOutput {
    /// 0 when every verdict passed, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }

    /// Writes `result.json`, the tables, `plot.csv` and (if kept) `paths.csv`
    /// into `dir`, returning the files written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let json_path = dir.join("result.json");
        fs::write(&json_path, canonical_json(&self.result, true))?;
        written.push(json_path);
        for (name, header, rows) in &self.tables {
            let path = dir.join(name);
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(header)?;
            for row in rows {
                w.write_record(row)?;
            }
            w.flush()?;
            written.push(path);
        }
        if let Some(plot) = &self.plot {
            let path = dir.join("plot.csv");
            plot.write_csv(BufWriter::new(File::create(&path)?))?;
            written.push(path);
        }
        if let Some(paths) = &self.paths {
            let path = dir.join("paths.csv");
            let mut out = BufWriter::new(File::create(&path)?);
            paths.write_csv(&mut out)?;
            out.flush()?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Canonical JSON: sorted keys, floats with 17 significant digits.
pub fn canonical_json(value: &Value, pretty: bool) -> String {
    let mut out = String::new();
    write_value(value, pretty, 0, &mut out);
    if pretty {
        out.push('\n');
    }
    out
}

fn write_value(value: &Value, pretty: bool, depth: usize, out: &mut String) {
    let indent = |out: &mut String, d: usize| {
        if pretty {
            out.push('\n');
            out.push_str(&"  ".repeat(d));
        }
    };
    match value {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&value.to_string()),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => out.push_str(&u.to_string()),
            (None, Some(i), _) => out.push_str(&i.to_string()),
            (None, None, Some(f)) => out.push_str(&fmt_float(f)),
            _ => out.push_str(&n.to_string()),
        },
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                indent(out, depth + 1);
                write_value(item, pretty, depth + 1, out);
            }
            indent(out, depth);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                indent(out, depth + 1);
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push(':');
                if pretty {
                    out.push(' ');
                }
                write_value(&map[*key], pretty, depth + 1, out);
            }
            indent(out, depth);
            out.push('}');
        }
    }
}

/// SHA-256 (hex) of the canonical compact JSON without [`VOLATILE_KEYS`]
/// and without the output directory.
pub fn determinism_hash(result: &Value) -> String {
    let mut stripped = result.clone();
    if let Value::Object(map) = &mut stripped {
        for key in VOLATILE_KEYS {
            map.remove(key);
        }
        if let Some(Value::Object(output)) = map.get_mut("config").and_then(|c| c.get_mut("output")) {
            output.remove("dir");
        }
    }
    hex::encode(Sha256::digest(canonical_json(&stripped, false).as_bytes()))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    // Non-finite floats become null; everything we serialize is plain data.
    serde_json::to_value(v).expect("plain data serializes")
}

fn version_stamp() -> Value {
    json!({
        "crate": env!("CARGO_PKG_VERSION"),
        "git": option_env!("RISKFLOW_GIT_REV").unwrap_or("unknown"),
    })
}

/// Runs the configured experiment. Nothing is written; see [`RunOutput::write`].
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let mut out = match config.experiment {
        ExperimentKind::Cashflow => run_cashflow(config)?,
        ExperimentKind::GenericFbsde => run_generic(config)?,
        ExperimentKind::PropertySuite => run_properties(config)?,
    };
    let map = out.result.as_object_mut().expect("results are objects");
    map.insert("experiment".into(), to_value(&config.experiment));
    map.insert("config".into(), to_value(config));
    map.insert("version".into(), version_stamp());
    map.insert("passed".into(), Value::Bool(out.passed));
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    map.insert("timestamp_unix".into(), json!(timestamp));
    map.insert("wall_time_s".into(), json!(started.elapsed().as_secs_f64()));
    out.hash = determinism_hash(&out.result);
    let hash = out.hash.clone();
    out.result
        .as_object_mut()
        .expect("results are objects")
        .insert("determinism_hash".into(), Value::String(hash));
    Ok(out)
}

fn run_cashflow(config: &ExperimentConfig) -> Result<RunOutput> {
    let params = config.cashflow_params()?;
    let mc = &config.mc;
    let settings = CashflowSettings {
        steps: config.grid.steps,
        pilot_paths: mc.pilot_paths,
        max_iter: mc.max_iter,
        tol: mc.tol,
        basis: RegressionBasis::new(mc.basis_degree),
        method: config.cashflow.method,
        seed: mc.seed,
    };
    let experiment = ExperimentSettings {
        n_paths: mc.n_paths,
        trajectory_paths: mc.trajectory_paths,
        probe: ProbeSettings {
            eps: config.probe.eps.clone(),
            theta: config.theta,
            sigmas: config.probe.sigmas,
        },
        necessary: NecessarySettings {
            max_paths: config.probe.first_order_paths,
            sign: config.probe.zl_sign,
            ..NecessarySettings::default()
        },
        convexity_probes: config.probe.convexity_probes,
    };
    let (report, paths) = run_mean_variance_experiment(&params, &settings, &experiment)?;

    let mut result = Map::new();
    result.insert("J_theta".into(), to_value(&Metric::from_cost(&report.j_theta)));
    result.insert("log_J_theta".into(), to_value(&Metric::exact(report.j_theta.log_j)));
    result.insert("cost_estimate".into(), to_value(&report.j_theta));
    result.insert(
        "risk_loss".into(),
        to_value(&Metric::with_error(report.loss.value, report.loss.std_error)),
    );
    result.insert(
        "var_psi".into(),
        to_value(&Metric::with_error(report.var_psi.value, report.var_psi.std_error)),
    );
    result.insert(
        "mean_psi".into(),
        to_value(&Metric::with_error(report.mean_psi.value, report.mean_psi.std_error)),
    );
    result.insert("y0".into(), to_value(&Metric::exact(report.y0)));
    result.insert("necessary_condition".into(), to_value(&report.necessary));
    result.insert(
        "necessary_condition_flipped_zl_sign".into(),
        to_value(&report.necessary_flipped_sign),
    );
    result.insert("sufficient_probe".into(), to_value(&report.sufficient));
    result.insert("fixed_point".into(), to_value(&report.coupling));
    result.insert(
        "riccati".into(),
        json!({
            "orientation": to_value(&params.orientation),
            "boundary": to_value(&params.boundary),
            "method": to_value(&config.cashflow.method),
            "a_closed_form_vs_rk4": report.riccati_a_cross_check,
            "b_closed_form_vs_rk4": report.riccati_b_cross_check,
        }),
    );
    result.insert(
        "diagnostics".into(),
        json!({
            "u01_u02_max_gap": Metric::exact(report.u01_u02_max_gap),
            "b_source_residual_rms": Metric::exact(report.b_source_residual),
            "clamp_count": report.clamp_count,
        }),
    );
    let passed = report.necessary.verdict.passed && report.sufficient.verdict.passed;
    result.insert(
        "verdicts".into(),
        json!({
            "necessary": report.necessary.verdict.passed,
            "sufficient": report.sufficient.verdict.passed,
        }),
    );

    let header = ["direction", "eps", "J", "log_J", "std_error", "diff", "diff_std_error", "z_score"]
        .map(String::from)
        .to_vec();
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    let rows = report
        .sufficient
        .cells
        .iter()
        .map(|c| {
            vec![
                c.direction.clone(),
                fmt_float(c.eps),
                opt(c.j),
                fmt_float(c.log_j),
                opt(c.std_error),
                fmt_float(c.diff),
                fmt_float(c.diff_std_error),
                fmt_float(c.z_score),
            ]
        })
        .collect();
    Ok(RunOutput {
        result: Value::Object(result),
        hash: String::new(),
        passed,
        plot: Some(report.plot),
        tables: vec![("cost_table.csv".into(), header, rows)],
        paths: config.output.dump_paths.then_some(paths),
    })
}

/// The linear test model of the `generic_fbsde` experiment.
pub fn generic_model(config: &ExperimentConfig) -> GenericModel {
    let g = config.generic.clone();
    let (alpha, beta, kappa, sigma, sigma_u, jump) = (g.alpha, g.beta, g.kappa, g.sigma, g.sigma_u, g.jump_size);
    let (gx, gy, gu) = (g.gen_x, g.gen_y, g.gen_u);
    let (cx, cu, phi_x, phi_xx, psi_y) = (g.cost_x, g.cost_u, g.phi_x, g.phi_xx, g.psi_y);
    GenericModel::new()
        .with_drift(move |p, u| alpha * p.x + beta * u + kappa * p.y)
        .with_diffusion(move |_, u| sigma + sigma_u * u)
        .with_jump(move |_, _, _| jump)
        .with_generator(move |p, u| gx * p.x + gy * p.y + gu * u)
        .with_running_cost(move |p, u| cx * p.x + 0.5 * cu * u * u)
        .with_terminal_forward(move |x| phi_x * x + 0.5 * phi_xx * x * x)
        .with_initial_backward(move |y| psi_y * y)
}

fn run_generic(config: &ExperimentConfig) -> Result<RunOutput> {
    let g = &config.generic;
    let marks = config.generic_marks()?;
    let grid = TimeGrid::new(config.grid.horizon, config.grid.steps)?;
    let spec = SimulationSpec::new(grid, marks, g.x0, config.mc.n_paths, config.mc.seed);
    let model = generic_model(config);
    let (c0, gain) = (g.control, g.control_gain);
    let policy = ControlPolicy::feedback(move |a| c0 + gain * a.x, ControlDomain::unbounded());
    let mut settings = PicardSettings::new(g.terminal, config.mc.max_iter, config.mc.tol);
    settings.damping = g.damping;
    settings.basis = RegressionBasis::new(config.mc.basis_degree);
    let (paths, field, report) = picard_couple(&model, &policy, &spec, &settings)?;

    let costs = theta_t(&paths, &model)?;
    let j = cost_j_theta(&costs, config.theta)?;
    let loss = risk_loss(&costs, config.theta)?;
    let residuals = martingale_residuals(&model, &paths)?;
    let worst_z = residuals
        .iter()
        .map(|r| {
            // Residuals below rounding level count as zero.
            let excess = (r.mean.abs() - 1e-12).max(0.0);
            if r.std_error > 0.0 { excess / r.std_error } else { 0.0 }
        })
        .fold(0.0, f64::max);
    let result = json!({
        "y0": Metric::exact(field.y0()),
        "J_theta": Metric::from_cost(&j),
        "log_J_theta": Metric::exact(j.log_j),
        "risk_loss": Metric::with_error(loss.value, loss.std_error),
        "coupling": report,
        "max_regression_condition": Metric::exact(field.max_condition()),
        "martingale_residual_max_abs_z": Metric::exact(worst_z),
        "clamp_count": paths.clamp_count,
    });
    let header = ["node", "mean", "std_error"].map(String::from).to_vec();
    let rows = residuals
        .iter()
        .enumerate()
        .map(|(k, r)| vec![k.to_string(), fmt_float(r.mean), fmt_float(r.std_error)])
        .collect();
    Ok(RunOutput {
        result,
        hash: String::new(),
        passed: report.converged,
        plot: None,
        tables: vec![("martingale_residuals.csv".into(), header, rows)],
        paths: config.output.dump_paths.then_some(paths),
    })
}

/// One entry of the property suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
    pub detail: String,
}

fn density_check(name: &str, marks: MarkSet, l: f64, big_l: f64, config: &ExperimentConfig) -> Result<PropertyCheck> {
    let steps = config.grid.steps.min(50);
    let grid = TimeGrid::new(config.grid.horizon, steps)?;
    let m = marks.len();
    let spec = SimulationSpec::new(grid, marks, 0.0, config.mc.n_paths, config.mc.seed);
    let model = GenericModel::new().with_diffusion(|_, _| 1.0).with_jump(|_, _, _| 1.0);
    let policy = ControlPolicy::constant(0.0, ControlDomain::unbounded());
    let paths = simulate_forward(&model, &policy, &ZeroSource, &spec)?;
    let drivers = ConstantDrivers {
        l,
        big_l: vec![big_l; m],
    };
    let density = girsanov_density(&drivers, config.theta, &paths)?;
    let est = mc_estimate(&density.terminal_density())?;
    let dev = (est.mean - 1.0).abs();
    Ok(PropertyCheck {
        name: name.into(),
        passed: dev <= 3.0 * est.std_error,
        value: dev,
        bound: 3.0 * est.std_error,
        detail: format!("E[L_T] = {:.6} ± {:.2e}", est.mean, est.std_error),
    })
}

fn run_properties(config: &ExperimentConfig) -> Result<RunOutput> {
    let mut checks = vec![
        density_check("density_diffusion", MarkSet::empty(), 0.3, 0.0, config)?,
        density_check("density_jump", MarkSet::single(1.0, 2.0)?, 0.0, 0.5, config)?,
        density_check("density_mixed", MarkSet::single(1.0, 2.0)?, 0.3, 0.5, config)?,
    ];

    // Bernoulli(0.2) costs with exact frequencies: the expansion residual is
    // third order in θ.
    let bernoulli: Vec<f64> = (0..1000).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let expansion = expansion_residual(&bernoulli, &[0.05, 0.1, 0.2, 0.4])?;
    let slope = expansion.slope.unwrap_or(f64::NAN);
    checks.push(PropertyCheck {
        name: "expansion_slope".into(),
        passed: (1.7..=2.3).contains(&slope),
        value: slope,
        bound: 2.3,
        detail: "log-log slope of the second-order expansion residual, accepted in [1.7, 2.3]".into(),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(config.mc.seed);
    let gaussian: Vec<f64> = (0..config.mc.n_paths)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let theta = 1e-3;
    let loss = risk_loss(&gaussian, theta)?;
    let est = mc_estimate(&gaussian)?;
    let var = est.std_error.powi(2) * est.n as f64;
    checks.push(PropertyCheck {
        name: "small_theta_limit".into(),
        passed: (loss.value - est.mean).abs() <= theta * var,
        value: (loss.value - est.mean).abs(),
        bound: theta * var,
        detail: "|Theta_theta - mean| at theta = 1e-3 on standard normal costs".into(),
    });

    // Bounded model, C = 0.5: V^θ ∈ [e^{−(2+T)Cθ}, e^{(2+T)Cθ}].
    let c = 0.5;
    let horizon = config.grid.horizon;
    let grid = TimeGrid::new(horizon, config.grid.steps.min(20))?;
    let spec = SimulationSpec::new(grid, MarkSet::empty(), 0.0, config.mc.n_paths, config.mc.seed);
    let model = GenericModel::new()
        .with_diffusion(|_, _| 1.0)
        .with_running_cost(move |p, _| c * p.x.sin())
        .with_terminal_forward(move |x| c * x.cos())
        .with_initial_backward(move |y| c * y.tanh())
        .with_bound(c);
    let policy = ControlPolicy::constant(0.0, ControlDomain::unbounded());
    let paths = simulate_forward(&model, &policy, &ZeroSource, &spec)?;
    let bound = ((2.0 + horizon) * c * config.theta).exp();
    let mut worst: f64 = 0.0;
    for k in [0, grid.steps() / 2, grid.steps()] {
        let v = v_theta(&paths, &model, config.theta, k, RegressionBasis::default())?;
        for value in v.values {
            worst = worst.max(value / bound).max(1.0 / (value * bound));
        }
    }
    checks.push(PropertyCheck {
        name: "v_theta_bounds".into(),
        passed: worst <= 1.0,
        value: worst,
        bound: 1.0,
        detail: format!("max of V/e^((2+T)C theta) and e^(-(2+T)C theta)/V; bound {bound:.6}"),
    });

    let passed = checks.iter().all(|c| c.passed);
    let header = ["name", "passed", "value", "bound", "detail"].map(String::from).to_vec();
    let rows = checks
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.passed.to_string(),
                fmt_float(c.value),
                fmt_float(c.bound),
                c.detail.clone(),
            ]
        })
        .collect();
    Ok(RunOutput {
        result: json!({ "properties": checks }),
        hash: String::new(),
        passed,
        plot: None,
        tables: vec![("properties.csv".into(), header, rows)],
        paths: None,
    })
}

/// Parses `RISKFLOW_THREADS` (0 or unset means automatic).
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("RISKFLOW_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(Error::config(format!("RISKFLOW_THREADS must be a non-negative integer, got `{s}`"))),
        },
    }
}
