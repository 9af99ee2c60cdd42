use std::fmt;
use std::path::PathBuf;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::controller::RectifyMode;
use crate::horizon::PlantKind;
use crate::observer::SlopeConvention;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    OpenLoop,
    Halo,
    Compare,
    PhaseSweep,
    Sensitivity,
    Calibration,
    Correlation,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

/// A complete experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemConfig,
    #[serde(default)]
    pub observer: ObserverConfig,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub d: usize,
    /// Per-coordinate noise variance.
    pub sigma2: f64,
    /// Every coordinate of the initial state.
    #[serde(default = "one")]
    pub s0: f64,
    #[serde(default)]
    pub map: MapConfig,
    /// Seed of the transition map; derived from the base seed when absent.
    #[serde(default)]
    pub map_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapConfig {
    LinearResidual {
        /// Planted rate, `ln ||A||_2`.
        #[serde(default)]
        lambda: Option<f64>,
        /// Planted spectral norm; give this or `lambda`.
        #[serde(default)]
        rho: Option<f64>,
        #[serde(default)]
        plant: PlantKind,
    },
    RandomTanhNet {
        #[serde(default = "one")]
        gain: f64,
        lipschitz: f64,
    },
    PiecewiseSwitched {
        /// Planted rate of each piece, visited in order.
        lambdas: Vec<f64>,
        dwell: usize,
    },
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig::LinearResidual {
            lambda: Some(0.1),
            rho: None,
            plant: PlantKind::ScaledOrthogonal,
        }
    }
}

/// The controller's view of the entropy-drift relation.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationSetting {
    Fixed { alpha: f64, beta: f64 },
    /// `alpha = 0.85`, `beta = -2.5`.
    Reference,
    /// Fit from simulated observations before running.
    CalibrateFirst,
}

impl Serialize for CalibrationSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CalibrationSetting::Fixed { alpha, beta } => AlphaBeta { alpha: *alpha, beta: *beta }.serialize(s),
            CalibrationSetting::Reference => s.serialize_str("reference"),
            CalibrationSetting::CalibrateFirst => s.serialize_str("calibrate_first"),
        }
    }
}

impl<'de> Deserialize<'de> for CalibrationSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Fixed(AlphaBeta),
            Named(String),
        }
        match Raw::deserialize(d)? {
            Raw::Fixed(ab) => Ok(CalibrationSetting::Fixed {
                alpha: ab.alpha,
                beta: ab.beta,
            }),
            Raw::Named(n) if n == "reference" => Ok(CalibrationSetting::Reference),
            Raw::Named(n) if n == "calibrate_first" => Ok(CalibrationSetting::CalibrateFirst),
            Raw::Named(n) => Err(de::Error::custom(format!(
                "unknown calibration {n:?}; expected {{\"alpha\", \"beta\"}}, \"reference\" or \"calibrate_first\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaBeta {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    #[serde(default = "reference_setting")]
    pub calibration: CalibrationSetting,
    /// Relation the simulated generator follows.
    #[serde(default = "reference_alpha_beta")]
    pub generator: AlphaBeta,
    #[serde(default = "default_obs_noise")]
    pub obs_noise: f64,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_layers")]
    pub heads: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            calibration: CalibrationSetting::Reference,
            generator: reference_alpha_beta(),
            obs_noise: default_obs_noise(),
            layers: default_layers(),
            heads: default_layers(),
            context_len: default_context(),
        }
    }
}

/// Stability threshold: a number, `"inf"` (controller disabled) or `"auto"`
/// (the drift the calibrated system accumulates over one critical horizon).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsiSetting {
    Value(f64),
    Inf,
    Auto,
}

impl Serialize for PsiSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PsiSetting::Value(v) => s.serialize_f64(*v),
            PsiSetting::Inf => s.serialize_str("inf"),
            PsiSetting::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for PsiSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(PsiSetting::Value(v)),
            Raw::Str(s) if s == "inf" || s == "infinity" => Ok(PsiSetting::Inf),
            Raw::Str(s) if s == "auto" => Ok(PsiSetting::Auto),
            Raw::Str(s) => Err(de::Error::custom(format!("psi must be a number, \"inf\" or \"auto\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default = "auto_psi")]
    pub psi: PsiSetting,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub mode: RectifyMode,
    #[serde(default = "default_osc_window")]
    pub osc_window: usize,
    #[serde(default = "default_progress_tol")]
    pub progress_tol: f64,
    #[serde(default = "yes")]
    pub floor_at_zero: bool,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            psi: PsiSetting::Auto,
            epsilon: default_epsilon(),
            mode: RectifyMode::Partial,
            osc_window: default_osc_window(),
            progress_tol: default_progress_tol(),
            floor_at_zero: true,
        }
    }
}

/// Chain length in logical steps, fixed or relative to the critical horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HorizonSetting {
    Steps(usize),
    NStarMultiple { n_star_multiple: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_horizon")]
    pub horizon: HorizonSetting,
    /// Executed-step budget as a multiple of the horizon.
    #[serde(default)]
    pub step_budget_factor: Option<f64>,
    /// Executed-step budget in steps; exclusive with `step_budget_factor`.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Per-coordinate RMS error that still counts as success.
    #[serde(default = "one")]
    pub success_tol: f64,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_seeds: default_seeds(),
            horizon: default_horizon(),
            step_budget_factor: None,
            max_steps: None,
            success_tol: 1.0,
            jobs: None,
        }
    }
}

pub const DEFAULT_BUDGET_FACTOR: f64 = 1.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Chain lengths; `1..=ceil(2.5 N*)` of the easiest row when absent.
    #[serde(default)]
    pub lengths: Option<Vec<usize>>,
    /// Planted rates; `difficulties` log-spaced rates when absent.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub difficulties: Option<usize>,
    #[serde(default)]
    pub n_seeds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    /// Thresholds as multiples of the automatic threshold.
    #[serde(default = "default_psi_multiples")]
    pub psi_multiples: Vec<f64>,
    /// Controller slopes; the controller's own when absent.
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            psi_multiples: default_psi_multiples(),
            alphas: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    /// Hard boundary with label noise.
    #[default]
    Planted,
    /// Synthetic attention at random rates, labelled by the sign of the rate
    /// through a logistic link.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default)]
    pub source: SampleSource,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Planted boundary; the generator's when absent.
    #[serde(default)]
    pub boundary: Option<f64>,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    /// Logit steepness of simulated labels per unit of true drift.
    #[serde(default = "default_logits")]
    pub logits_per_drift: f64,
    /// Load samples from this CSV instead of generating them.
    #[serde(default)]
    pub samples_path: Option<PathBuf>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_fit_tol")]
    pub tol: f64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// Slope convention; when absent, log-odds for simulated samples and the
    /// generator slope otherwise.
    #[serde(default)]
    pub convention: Option<SlopeConvention>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            source: SampleSource::Planted,
            n_samples: default_samples(),
            boundary: None,
            label_noise: default_label_noise(),
            logits_per_drift: default_logits(),
            samples_path: None,
            max_iters: default_max_iters(),
            tol: default_fit_tol(),
            l2: default_l2(),
            convention: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
    /// Per-step traces written for this many seeds.
    #[serde(default)]
    pub traces: Option<usize>,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn reference_setting() -> CalibrationSetting {
    CalibrationSetting::Reference
}
fn reference_alpha_beta() -> AlphaBeta {
    AlphaBeta {
        alpha: 0.85,
        beta: -2.5,
    }
}
fn default_obs_noise() -> f64 {
    0.1
}
fn default_layers() -> usize {
    4
}
fn default_context() -> usize {
    64
}
fn auto_psi() -> PsiSetting {
    PsiSetting::Auto
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_osc_window() -> usize {
    3
}
fn default_progress_tol() -> f64 {
    1e-6
}
fn default_seeds() -> usize {
    100
}
fn default_horizon() -> HorizonSetting {
    HorizonSetting::NStarMultiple { n_star_multiple: 4.0 }
}
fn default_psi_multiples() -> Vec<f64> {
    vec![0.25, 1.0, 4.0]
}
fn default_samples() -> usize {
    2000
}
fn default_label_noise() -> f64 {
    0.05
}
fn default_logits() -> f64 {
    10.0
}
fn default_max_iters() -> usize {
    100
}
fn default_fit_tol() -> f64 {
    1e-10
}
fn default_l2() -> f64 {
    1e-3
}

fn invalid(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path.is_empty() { "." } else { &path }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("--config", format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// Field-level checks beyond what the schema types enforce.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version != CONFIG_VERSION {
            return Err(invalid("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version)));
        }
        let s = &self.system;
        if s.d == 0 {
            return Err(invalid("system.d", "must be >= 1"));
        }
        if !(s.sigma2.is_finite() && s.sigma2 >= 0.0) {
            return Err(invalid("system.sigma2", "must be finite and >= 0"));
        }
        if !s.s0.is_finite() {
            return Err(invalid("system.s0", "must be finite"));
        }
        match &s.map {
            MapConfig::LinearResidual { lambda, rho, .. } => match (lambda, rho) {
                (Some(_), Some(_)) => return Err(invalid("system.map", "give either lambda or rho, not both")),
                (None, None) => return Err(invalid("system.map", "linear_residual needs lambda or rho")),
                (Some(l), None) if !l.is_finite() => return Err(invalid("system.map.lambda", "must be finite")),
                (None, Some(r)) if !(r.is_finite() && *r > 0.0) => {
                    return Err(invalid("system.map.rho", "must be positive"))
                }
                _ => {}
            },
            MapConfig::RandomTanhNet { gain, lipschitz } => {
                if !(gain.is_finite() && *gain > 0.0) {
                    return Err(invalid("system.map.gain", "must be positive"));
                }
                if !(lipschitz.is_finite() && *lipschitz > 0.0) {
                    return Err(invalid("system.map.lipschitz", "must be positive"));
                }
            }
            MapConfig::PiecewiseSwitched { lambdas, dwell } => {
                if lambdas.is_empty() || lambdas.iter().any(|l| !l.is_finite()) {
                    return Err(invalid("system.map.lambdas", "need at least one finite rate"));
                }
                if *dwell == 0 {
                    return Err(invalid("system.map.dwell", "must be >= 1"));
                }
            }
        }

        let o = &self.observer;
        if let CalibrationSetting::Fixed { alpha, beta } = o.calibration {
            if !(alpha.is_finite() && alpha != 0.0 && beta.is_finite()) {
                return Err(invalid("observer.calibration", "alpha must be finite and non-zero, beta finite"));
            }
        }
        if !(o.generator.alpha.is_finite() && o.generator.alpha != 0.0 && o.generator.beta.is_finite()) {
            return Err(invalid("observer.generator", "alpha must be finite and non-zero, beta finite"));
        }
        if !(o.obs_noise.is_finite() && o.obs_noise >= 0.0) {
            return Err(invalid("observer.obs_noise", "must be finite and >= 0"));
        }
        if o.context_len < 2 {
            return Err(invalid("observer.context_len", "must be >= 2"));
        }
        if o.layers == 0 || o.heads == 0 {
            return Err(invalid("observer.layers", "layers and heads must be >= 1"));
        }

        let c = &self.controller;
        if let PsiSetting::Value(v) = c.psi {
            if !(v > 0.0) {
                return Err(invalid("controller.psi", "must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&c.epsilon) {
            return Err(invalid("controller.epsilon", "must lie in [0, 1)"));
        }
        if c.osc_window == 0 {
            return Err(invalid("controller.osc_window", "must be >= 1"));
        }
        if !(c.progress_tol >= 0.0) {
            return Err(invalid("controller.progress_tol", "must be >= 0"));
        }

        let r = &self.run;
        if r.n_seeds == 0 {
            return Err(invalid("run.n_seeds", "must be >= 1"));
        }
        match r.horizon {
            HorizonSetting::Steps(0) => return Err(invalid("run.horizon", "must be >= 1")),
            HorizonSetting::NStarMultiple { n_star_multiple: m } if !(m.is_finite() && m > 0.0) => {
                return Err(invalid("run.horizon.n_star_multiple", "must be positive"))
            }
            _ => {}
        }
        if r.step_budget_factor.is_some() && r.max_steps.is_some() {
            return Err(invalid("run", "give step_budget_factor or max_steps, not both"));
        }
        if let Some(f) = r.step_budget_factor {
            if !(f.is_finite() && f >= 1.0) {
                return Err(invalid("run.step_budget_factor", "must be >= 1"));
            }
        }
        if r.max_steps == Some(0) {
            return Err(invalid("run.max_steps", "must be >= 1"));
        }
        if !(r.success_tol.is_finite() && r.success_tol > 0.0) {
            return Err(invalid("run.success_tol", "must be positive"));
        }
        if r.jobs == Some(0) {
            return Err(invalid("run.jobs", "must be >= 1"));
        }

        if self.scenario == Scenario::PhaseSweep {
            if !matches!(s.map, MapConfig::LinearResidual { .. }) {
                return Err(invalid("system.map.family", "phase_sweep plants rates and needs linear_residual"));
            }
            if let Some(n) = self.sweep.n_seeds {
                if n < 30 {
                    return Err(invalid("sweep.n_seeds", "must be >= 30"));
                }
            }
            if let Some(l) = &self.sweep.lengths {
                if l.is_empty() || l[0] == 0 || l.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid("sweep.lengths", "must be positive and strictly increasing"));
                }
            }
            if let Some(l) = &self.sweep.lambdas {
                if l.is_empty() || l.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                    return Err(invalid("sweep.lambdas", "must be non-empty and positive"));
                }
            }
            if self.sweep.difficulties == Some(0) {
                return Err(invalid("sweep.difficulties", "must be >= 1"));
            }
        }
        if self.scenario == Scenario::Sensitivity {
            let m = &self.sensitivity.psi_multiples;
            if m.is_empty() || m.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(invalid("sensitivity.psi_multiples", "must be non-empty and positive"));
            }
            if let Some(a) = &self.sensitivity.alphas {
                if a.is_empty() || a.iter().any(|x| !(x.is_finite() && *x != 0.0)) {
                    return Err(invalid("sensitivity.alphas", "must be non-empty and non-zero"));
                }
            }
        }
        let cal = &self.calibration;
        if cal.n_samples < 2 {
            return Err(invalid("calibration.n_samples", "must be >= 2"));
        }
        if !(0.0..0.5).contains(&cal.label_noise) {
            return Err(invalid("calibration.label_noise", "must lie in [0, 0.5)"));
        }
        if !(cal.logits_per_drift.is_finite() && cal.logits_per_drift > 0.0) {
            return Err(invalid("calibration.logits_per_drift", "must be positive"));
        }
        if cal.max_iters == 0 || !(cal.tol > 0.0) || !(cal.l2 >= 0.0) {
            return Err(invalid("calibration", "need max_iters >= 1, tol > 0, l2 >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"version":1,"scenario":"halo","system":{"d":4,"sigma2":0.01}}"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        assert_eq!(cfg.controller.psi, PsiSetting::Auto);
        assert_eq!(cfg.run.horizon, HorizonSetting::NStarMultiple { n_star_multiple: 4.0 });
        assert_eq!(cfg.observer.calibration, CalibrationSetting::Reference);
        assert_eq!(cfg.system.map, MapConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        cfg.controller.psi = PsiSetting::Inf;
        cfg.observer.calibration = CalibrationSetting::Fixed { alpha: 1.0, beta: -3.0 };
        cfg.run.horizon = HorizonSetting::Steps(50);
        let back = ExperimentConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
    }

    fn path_of(text: &str) -> String {
        match ExperimentConfig::from_json_str(text) {
            Err(HarnessError::Validation { path, .. }) => path,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let err = ExperimentConfig::from_json_str(r#"{"version":1,"scenario":"halo","system":{"sigma2":0.01}}"#)
            .unwrap_err();
        assert_eq!(path_of(r#"{"version":1,"scenario":"halo","system":{"sigma2":0.01}}"#), "system");
        assert!(err.to_string().contains("`d`"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        assert_eq!(
            path_of(r#"{"version":1,"scenario":"halo","system":{"d":2,"sigma2":0.1},"run":{"n_seed":5}}"#),
            "run.n_seed"
        );
        assert_eq!(path_of(r#"{"version":1,"scenario":"halo","system":{"d":2,"sigma2":0.1},"extra":1}"#), "extra");
    }

    #[test]
    fn semantic_errors_have_paths() {
        assert_eq!(path_of(r#"{"version":2,"scenario":"halo","system":{"d":2,"sigma2":0.1}}"#), "version");
        assert_eq!(
            path_of(r#"{"version":1,"scenario":"halo","system":{"d":2,"sigma2":0.1},"controller":{"epsilon":1.5}}"#),
            "controller.epsilon"
        );
        assert_eq!(
            path_of(r#"{"version":1,"scenario":"halo","system":{"d":2,"sigma2":0.1},"controller":{"psi":"big"}}"#),
            "controller.psi"
        );
        assert_eq!(
            path_of(r#"{"version":1,"scenario":"phase_sweep","system":{"d":2,"sigma2":0.1},"sweep":{"n_seeds":10}}"#),
            "sweep.n_seeds"
        );
    }

    #[test]
    fn map_families_parse() {
        let text = r#"{"version":1,"scenario":"open_loop","system":{"d":3,"sigma2":0.1,
            "map":{"family":"piecewise_switched","lambdas":[0.1,-0.1],"dwell":5}}}"#;
        let cfg = ExperimentConfig::from_json_str(text).unwrap();
        assert!(matches!(cfg.system.map, MapConfig::PiecewiseSwitched { dwell: 5, .. }));
        let both = r#"{"version":1,"scenario":"open_loop","system":{"d":3,"sigma2":0.1,
            "map":{"family":"linear_residual","lambda":0.1,"rho":1.1}}}"#;
        assert_eq!(path_of(both), "system.map");
    }
}
