//! Experiment configuration.
//!
//! A TOML document; every section and key is optional and unknown keys are
//! rejected. The full schema is documented in `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adjoint::ZlSign;
use crate::cashflow::{BoundaryMode, CashflowParams, Profile, RiccatiMethod, RiccatiOrientation};
use crate::error::{Error, Result};
use crate::model::MarkSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Cashflow,
    GenericFbsde,
    PropertySuite,
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cashflow" => Ok(Self::Cashflow),
            "generic_fbsde" => Ok(Self::GenericFbsde),
            "property_suite" => Ok(Self::PropertySuite),
            other => Err(Error::config(format!(
                "experiment: unknown experiment `{other}`, expected cashflow, generic_fbsde or property_suite"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Paths of the pilot run that fixes `y₀`, `ȳ` and the backward field.
    pub pilot_paths: usize,
    /// Paths whose full trajectories are kept (diagnostics, plots, dumps).
    pub trajectory_paths: usize,
    pub basis_degree: u32,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 42,
            pilot_paths: 10_000,
            trajectory_paths: 2_000,
            basis_degree: 2,
            max_iter: 60,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CashflowConfig {
    pub rho: f64,
    pub c: f64,
    pub sigma: f64,
    pub disc_rate: f64,
    pub a: f64,
    pub m0: f64,
    pub marks: Vec<f64>,
    pub weights: Vec<f64>,
    pub r: Vec<f64>,
    pub l: Profile,
    pub big_l: Vec<Profile>,
    pub k_source: Profile,
    pub orientation: RiccatiOrientation,
    pub boundary: BoundaryMode,
    pub method: RiccatiMethod,
}

impl Default for CashflowConfig {
    fn default() -> Self {
        let b = CashflowParams::benchmark();
        Self {
            rho: b.rho,
            c: b.c,
            sigma: b.sigma,
            disc_rate: b.disc_rate,
            a: b.a,
            m0: b.m0,
            marks: Vec::new(),
            weights: Vec::new(),
            r: Vec::new(),
            l: b.l,
            big_l: Vec::new(),
            k_source: b.k_source,
            orientation: b.orientation,
            boundary: b.boundary,
            method: RiccatiMethod::ClosedForm,
        }
    }
}

/// Linear coupled test model for the `generic_fbsde` experiment:
///
/// ```text
/// dx = (alpha x + beta u + kappa y) dt + (sigma + sigma_u u) dW + jump_size dÑ
/// dy = −(gen_x x + gen_y y + gen_u u) dt + z dW + r dÑ,   y(T) = terminal
/// u  = control + control_gain x
/// f  = cost_x x + cost_u u² / 2,  Φ(x) = phi_x x + phi_xx x² / 2,  Ψ(y) = psi_y y
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenericConfig {
    pub x0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub sigma_u: f64,
    pub jump_size: f64,
    pub marks: Vec<f64>,
    pub weights: Vec<f64>,
    pub gen_x: f64,
    pub gen_y: f64,
    pub gen_u: f64,
    pub terminal: f64,
    pub control: f64,
    pub control_gain: f64,
    pub cost_x: f64,
    pub cost_u: f64,
    pub phi_x: f64,
    pub phi_xx: f64,
    pub psi_y: f64,
    pub damping: f64,
}

impl Default for GenericConfig {
    fn default() -> Self {
        Self {
            x0: 1.0,
            alpha: -0.2,
            beta: 0.1,
            kappa: 0.1,
            sigma: 0.2,
            sigma_u: 0.0,
            jump_size: 0.0,
            marks: Vec::new(),
            weights: Vec::new(),
            gen_x: 0.1,
            gen_y: 0.05,
            gen_u: 0.0,
            terminal: 1.0,
            control: 0.5,
            control_gain: 0.0,
            cost_x: 0.0,
            cost_u: 1.0,
            phi_x: 1.0,
            phi_xx: 0.0,
            psi_y: 1.0,
            damping: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub eps: Vec<f64>,
    pub sigmas: f64,
    pub convexity_probes: usize,
    pub zl_sign: ZlSign,
    /// Paths along which the first-order condition is checked.
    pub first_order_paths: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            eps: vec![-0.25, -0.1, 0.0, 0.1, 0.25],
            sigmas: 3.0,
            convexity_probes: 1000,
            zl_sign: ZlSign::Minus,
            first_order_paths: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub dump_paths: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            dump_paths: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub theta: f64,
    pub grid: GridConfig,
    pub mc: McConfig,
    pub cashflow: CashflowConfig,
    pub generic: GenericConfig,
    pub probe: ProbeConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Cashflow,
            theta: 0.5,
            grid: GridConfig::default(),
            mc: McConfig::default(),
            cashflow: CashflowConfig::default(),
            generic: GenericConfig::default(),
            probe: ProbeConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub theta: Option<f64>,
    pub out: Option<PathBuf>,
    pub dump_paths: bool,
}

impl ExperimentConfig {
    /// Parses a TOML document, fills defaults and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(e) = o.experiment {
            self.experiment = e;
        }
        if let Some(s) = o.seed {
            self.mc.seed = s;
        }
        if let Some(n) = o.paths {
            self.mc.n_paths = n;
            self.mc.pilot_paths = self.mc.pilot_paths.min(n.max(1));
            self.mc.trajectory_paths = self.mc.trajectory_paths.min(n.max(1));
        }
        if let Some(n) = o.steps {
            self.grid.steps = n;
        }
        if let Some(t) = o.theta {
            self.theta = t;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if o.dump_paths {
            self.output.dump_paths = true;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("theta", self.theta),
            ("grid.horizon", self.grid.horizon),
            ("cashflow.sigma", self.cashflow.sigma),
            ("mc.tol", self.mc.tol),
            ("probe.sigmas", self.probe.sigmas),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{key} must be positive and finite, got {v}")));
            }
        }
        let counts = [
            ("grid.steps", self.grid.steps, 1),
            ("mc.n_paths", self.mc.n_paths, 2),
            ("mc.pilot_paths", self.mc.pilot_paths, 2),
            ("mc.trajectory_paths", self.mc.trajectory_paths, 2),
            ("mc.max_iter", self.mc.max_iter, 1),
            ("probe.first_order_paths", self.probe.first_order_paths, 1),
        ];
        for (key, v, min) in counts {
            if v < min {
                return Err(Error::config(format!("{key} must be at least {min}, got {v}")));
            }
        }
        if self.mc.basis_degree == 0 || self.mc.basis_degree > 4 {
            return Err(Error::config(format!(
                "mc.basis_degree must be between 1 and 4, got {}",
                self.mc.basis_degree
            )));
        }
        if self.probe.eps.iter().any(|e| !e.is_finite()) {
            return Err(Error::config("probe.eps must be finite"));
        }
        if !(self.generic.damping > 0.0 && self.generic.damping <= 1.0) {
            return Err(Error::config(format!(
                "generic.damping must lie in (0, 1], got {}",
                self.generic.damping
            )));
        }
        let c = &self.cashflow;
        for (key, v) in [
            ("cashflow.rho", c.rho),
            ("cashflow.c", c.c),
            ("cashflow.disc_rate", c.disc_rate),
            ("cashflow.a", c.a),
            ("cashflow.m0", c.m0),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("{key} must be finite, got {v}")));
            }
        }
        match self.experiment {
            ExperimentKind::Cashflow => self.cashflow_params().map(|_| ()),
            ExperimentKind::GenericFbsde => self.generic_marks().map(|_| ()),
            ExperimentKind::PropertySuite => Ok(()),
        }
    }

    /// Example parameters, with `theta` and the horizon taken from the top
    /// level and `grid` sections. Per-mark lists default to zeros.
    pub fn cashflow_params(&self) -> Result<CashflowParams> {
        let c = &self.cashflow;
        let marks = MarkSet::new(c.marks.clone(), c.weights.clone())
            .map_err(|e| Error::config(format!("cashflow.marks: {e}")))?;
        let m = marks.len();
        let r = if c.r.is_empty() { vec![0.0; m] } else { c.r.clone() };
        let big_l = if c.big_l.is_empty() {
            vec![Profile::default(); m]
        } else {
            c.big_l.clone()
        };
        let params = CashflowParams {
            rho: c.rho,
            c: c.c,
            sigma: c.sigma,
            disc_rate: c.disc_rate,
            a: c.a,
            m0: c.m0,
            theta: self.theta,
            horizon: self.grid.horizon,
            marks,
            r,
            l: c.l,
            big_l,
            k_source: c.k_source,
            orientation: c.orientation,
            boundary: c.boundary,
        };
        params.validate().map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("cashflow: {msg}")),
            other => other,
        })?;
        Ok(params)
    }

    pub fn generic_marks(&self) -> Result<MarkSet> {
        MarkSet::new(self.generic.marks.clone(), self.generic.weights.clone())
            .map_err(|e| Error::config(format!("generic.marks: {e}")))
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml("experiment = \"cashflow\"\n").unwrap();
        assert_eq!(cfg.grid.steps, 1000);
        assert_eq!(cfg.mc.n_paths, 10_000);
        assert_eq!(cfg.theta, 0.5);
    }

    #[test]
    fn negative_sigma_names_the_key() {
        let err = ExperimentConfig::from_toml("[cashflow]\nsigma = -0.3\n").unwrap_err();
        assert!(err.to_string().contains("sigma"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[cashflow]\nsigm = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("sigm"), "{err}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = ExperimentConfig::from_toml("theta = = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            paths: Some(100),
            theta: Some(0.2),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.mc.n_paths, 100);
        assert_eq!(cfg.mc.pilot_paths, 100);
        assert_eq!(cfg.theta, 0.2);
    }

    #[test]
    fn profiles_parse_in_both_forms() {
        let cfg = ExperimentConfig::from_toml("[cashflow]\nl = 0.2\nk_source = { start = 0.0, end = 1.0 }\n").unwrap();
        assert_eq!(cfg.cashflow.l, Profile::Constant(0.2));
        assert_eq!(cfg.cashflow.k_source, Profile::Linear { start: 0.0, end: 1.0 });
    }
}
