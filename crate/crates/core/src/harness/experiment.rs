use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{
    CalibrationSetting, ExperimentConfig, HorizonSetting, MapConfig, OutputFormat, PsiSetting, SampleSource, Scenario,
    DEFAULT_BUDGET_FACTOR,
};
use super::metrics::{
    group_aggregates, lead_time, omega_error_correlation, reset_outcomes, Arm, GroupAggregates, RunRecord,
};
use super::HarnessError;
use crate::controller::{run_halo, ControllerConfig, ControllerError, ObserverSetup, RectifierSpec, RunStatus};
use crate::dynamics::{
    derive_seed, lyapunov_estimate, simulate_open_loop, DynamicsError, LinearResidual, NoiseModel, NoiseStream,
    StateVector, StepEvent, Switched, TanhNet, Trajectory, TransitionMap,
};
use crate::horizon::{
    critical_horizon, difficulty_lambdas, matched_params, phase_sweep, planted_map, within_tolerance, PhaseGrid,
    SweepSpec,
};
use crate::observer::{
    calibrate, mean_attention_entropy, planted_dataset, read_samples, synth_attention, write_samples,
    CalibrationConfig, DriftLabel, DriftSample, FrameShape, ObserverCalibration, SlopeConvention,
};

const MAP_LANE: u64 = 0x6d61_7000;
const CALIBRATION_LANE: u64 = 0x6361_6c00;
/// Seeds per parallel batch; `runs.csv` is flushed after each one.
const CHUNK: usize = 64;
/// Steps used to estimate the reference rate of non-linear maps.
const LYAPUNOV_STEPS: usize = 500;
/// Rates drawn for simulated calibration samples.
const SIMULATED_RATE_SPAN: f64 = 0.5;
/// Lengths sampled per critical horizon when a sweep leaves them open.
const SWEEP_SPAN: f64 = 2.5;

fn invalid(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

/// Everything a run needs, with derived quantities resolved.
#[derive(Debug, Clone)]
pub struct Setup {
    pub map: TransitionMap,
    pub map_seed: u64,
    pub s0: StateVector,
    pub sigma2: f64,
    pub success_tol: f64,
    /// True rate for planted linear maps, a silent-run Lyapunov estimate
    /// otherwise.
    pub lambda_ref: f64,
    /// Matched-threshold critical horizon; `None` unless the rate and the
    /// noise are positive.
    pub n_star: Option<f64>,
    pub horizon: usize,
    pub max_steps: usize,
    /// Controller threshold; infinite when disabled.
    pub psi: f64,
    /// The controller's calibration.
    pub calibration: ObserverCalibration,
    pub observer: ObserverSetup,
    pub rectifier: RectifierSpec,
    pub controller: ControllerConfig,
    pub calibration_report: Option<CalibrationReport>,
}

/// The resolved quantities echoed into results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSummary {
    pub map_seed: u64,
    pub lambda_ref: f64,
    pub n_star: Option<f64>,
    pub horizon: usize,
    pub max_steps: usize,
    /// `None` when the controller is disabled.
    pub psi: Option<f64>,
    pub calibration: ObserverCalibration,
    pub generator: ObserverCalibration,
}

impl Setup {
    pub fn resolve(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let sys = &cfg.system;
        let map_seed = sys.map_seed.unwrap_or_else(|| derive_seed(cfg.seed, MAP_LANE));
        let s0 = StateVector::filled(sys.d, sys.s0);
        let (map, planted) = build_map(&sys.map, sys.d, map_seed)?;
        let lambda_ref = match planted {
            Some(l) => l,
            None => lyapunov_estimate(&map, &s0, &NoiseModel::silent(map_seed), LYAPUNOV_STEPS)?,
        };
        let n_star = if lambda_ref > 0.0 && sys.sigma2 > 0.0 {
            matched_params(lambda_ref, sys.sigma2, sys.d, cfg.run.success_tol)
                .ok()
                .map(|p| critical_horizon(&p))
                .filter(|n| n.is_finite() && *n > 0.0)
        } else {
            None
        };
        let horizon = match cfg.run.horizon {
            HorizonSetting::Steps(n) => n,
            HorizonSetting::NStarMultiple { n_star_multiple } => {
                let n = n_star.ok_or_else(|| {
                    invalid(
                        "run.horizon",
                        format!("n_star_multiple needs a positive rate and noise (rate {lambda_ref:.4}); give a step count"),
                    )
                })?;
                ((n_star_multiple * n).round() as usize).max(1)
            }
        };
        let max_steps = match (cfg.run.max_steps, cfg.run.step_budget_factor) {
            (Some(m), _) => m,
            (None, f) => (f.unwrap_or(DEFAULT_BUDGET_FACTOR) * horizon as f64).ceil() as usize,
        };

        let uses_controller = matches!(
            cfg.scenario,
            Scenario::Halo | Scenario::Compare | Scenario::Sensitivity | Scenario::Correlation
        );
        let psi = match cfg.controller.psi {
            PsiSetting::Value(v) => v,
            PsiSetting::Inf => f64::INFINITY,
            PsiSetting::Auto if !uses_controller => f64::INFINITY,
            PsiSetting::Auto => {
                let n = n_star.ok_or_else(|| {
                    invalid("controller.psi", "\"auto\" needs a positive rate and noise; give a number")
                })?;
                lambda_ref * n
            }
        };

        let gen = cfg.observer.generator;
        let generator = ObserverCalibration::new(gen.alpha, gen.beta);
        let shape = FrameShape {
            layers: cfg.observer.layers,
            heads: cfg.observer.heads,
            context_len: cfg.observer.context_len,
        };
        let (calibration, calibration_report) = match cfg.observer.calibration {
            CalibrationSetting::Fixed { alpha, beta } => (ObserverCalibration::new(alpha, beta), None),
            CalibrationSetting::Reference => (ObserverCalibration::reference(), None),
            CalibrationSetting::CalibrateFirst if uses_controller => {
                let report = fit_calibration(cfg)?;
                (report.calibration, Some(report))
            }
            CalibrationSetting::CalibrateFirst => (generator, None),
        };

        let c = &cfg.controller;
        let rectifier = RectifierSpec {
            epsilon: c.epsilon,
            mode: c.mode,
        };
        rectifier.validate().map_err(|e| invalid("controller.epsilon", e.to_string()))?;
        let controller = ControllerConfig {
            psi,
            floor_at_zero: c.floor_at_zero,
            max_steps,
            osc_window: c.osc_window,
            progress_tol: c.progress_tol,
        };
        controller.validate().map_err(|e| invalid("controller", e.to_string()))?;

        Ok(Self {
            map,
            map_seed,
            s0,
            sigma2: sys.sigma2,
            success_tol: cfg.run.success_tol,
            lambda_ref,
            n_star,
            horizon,
            max_steps,
            psi,
            calibration,
            observer: ObserverSetup {
                obs_noise: cfg.observer.obs_noise,
                shape,
                generator,
            },
            rectifier,
            controller,
            calibration_report,
        })
    }

    pub fn summary(&self) -> ResolvedSummary {
        ResolvedSummary {
            map_seed: self.map_seed,
            lambda_ref: self.lambda_ref,
            n_star: self.n_star,
            horizon: self.horizon,
            max_steps: self.max_steps,
            psi: self.psi.is_finite().then_some(self.psi),
            calibration: self.calibration,
            generator: self.observer.generator,
        }
    }

    /// Open-loop run of `horizon` steps on dynamics seed `seed`.
    pub fn open_loop(&self, seed: u64) -> Result<Option<Trajectory>, HarnessError> {
        let noise = NoiseModel::new(self.sigma2, seed)?;
        match simulate_open_loop(&self.map, &self.s0, &noise, self.horizon) {
            Ok(t) => Ok(Some(t)),
            Err(DynamicsError::Divergence { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Closed-loop run with controller calibration `cal` and threshold `psi`.
    pub fn closed_loop(
        &self,
        seed: u64,
        cal: &ObserverCalibration,
        psi: f64,
    ) -> Result<Option<crate::controller::HaloRun>, HarnessError> {
        let noise = NoiseModel::new(self.sigma2, seed)?;
        let cfg = ControllerConfig { psi, ..self.controller };
        match run_halo(&self.map, &self.s0, &noise, cal, &cfg, &self.rectifier, &self.observer, self.horizon) {
            Ok(r) => Ok(Some(r)),
            Err(ControllerError::Dynamics(DynamicsError::Divergence { .. })) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

fn build_map(cfg: &MapConfig, d: usize, seed: u64) -> Result<(TransitionMap, Option<f64>), HarnessError> {
    Ok(match cfg {
        MapConfig::LinearResidual { lambda, rho, plant } => {
            let l = match (lambda, rho) {
                (Some(l), _) => *l,
                (None, Some(r)) => r.ln(),
                (None, None) => return Err(invalid("system.map", "linear_residual needs lambda or rho")),
            };
            (planted_map(*plant, d, l, seed)?, Some(l))
        }
        MapConfig::RandomTanhNet { gain, lipschitz } => (TanhNet::random(d, *gain, *lipschitz, seed)?.into(), None),
        MapConfig::PiecewiseSwitched { lambdas, dwell } => {
            let pieces = lambdas
                .iter()
                .enumerate()
                .map(|(k, l)| LinearResidual::scaled_orthogonal(d, l.exp(), derive_seed(seed, k as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            (Switched::new(pieces, *dwell)?.into(), None)
        }
    })
}

/// Summary of a fitted calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub source: SampleSource,
    pub samples_path: Option<PathBuf>,
    pub n_samples: usize,
    /// Boundary the samples were planted with, when known.
    pub planted_boundary: Option<f64>,
    pub convention: SlopeConvention,
    pub calibration: ObserverCalibration,
}

/// Labelled entropies for calibration, loaded or generated per the config.
///
/// Simulated samples draw a true rate uniformly from `[-0.5, 0.5]`, encode
/// it as synthetic attention through the generator relation with observation
/// noise, and label it unstable with probability
/// `sigmoid(logits_per_drift * rate)`.
pub fn calibration_samples(cfg: &ExperimentConfig) -> Result<Vec<DriftSample>, HarnessError> {
    let cal = &cfg.calibration;
    if let Some(path) = &cal.samples_path {
        let file = File::open(path).map_err(|e| invalid("calibration.samples_path", format!("{}: {e}", path.display())))?;
        return Ok(read_samples(BufReader::new(file))?);
    }
    let seed = derive_seed(cfg.seed, CALIBRATION_LANE);
    let gen = ObserverCalibration::new(cfg.observer.generator.alpha, cfg.observer.generator.beta);
    match cal.source {
        SampleSource::Planted => Ok(planted_dataset(
            cal.n_samples,
            cal.boundary.unwrap_or(gen.boundary_entropy()),
            cal.label_noise,
            seed,
        )),
        SampleSource::Simulated => {
            let shape = FrameShape {
                layers: cfg.observer.layers,
                heads: cfg.observer.heads,
                context_len: cfg.observer.context_len,
            };
            (0..cal.n_samples)
                .into_par_iter()
                .map(|i| {
                    let mut stream = NoiseStream::new(1.0, derive_seed(seed, i as u64));
                    let rate = SIMULATED_RATE_SPAN * (2.0 * stream.uniform() - 1.0);
                    let frame = synth_attention(rate, &gen, cfg.observer.obs_noise, &mut stream, &shape)?;
                    let entropy = mean_attention_entropy(&frame)?;
                    let p = 1.0 / (1.0 + (-cal.logits_per_drift * rate).exp());
                    let label = if stream.uniform() < p { DriftLabel::Unstable } else { DriftLabel::Stable };
                    Ok(DriftSample { entropy, label })
                })
                .collect()
        }
    }
}

/// Hard-boundary samples carry no slope information, so they default to the
/// generator's slope; simulated ones to the log-odds scale they were labelled
/// with.
fn default_convention(cfg: &ExperimentConfig) -> SlopeConvention {
    match (cfg.calibration.source, &cfg.calibration.samples_path) {
        (SampleSource::Simulated, None) => SlopeConvention::LogOdds {
            logits_per_drift: cfg.calibration.logits_per_drift,
        },
        _ => SlopeConvention::ReferenceAlpha {
            alpha: cfg.observer.generator.alpha,
        },
    }
}

fn fit_calibration(cfg: &ExperimentConfig) -> Result<CalibrationReport, HarnessError> {
    let samples = calibration_samples(cfg)?;
    fit_samples(cfg, &samples)
}

fn fit_samples(cfg: &ExperimentConfig, samples: &[DriftSample]) -> Result<CalibrationReport, HarnessError> {
    let c = &cfg.calibration;
    let convention = c.convention.unwrap_or_else(|| default_convention(cfg));
    let fit_cfg = CalibrationConfig {
        max_iters: c.max_iters,
        tol: c.tol,
        l2: c.l2,
        convention,
    };
    let calibration = calibrate(samples, &fit_cfg)?;
    let gen = ObserverCalibration::new(cfg.observer.generator.alpha, cfg.observer.generator.beta);
    let planted_boundary = match (c.source, &c.samples_path) {
        (_, Some(_)) => None,
        (SampleSource::Planted, None) => Some(c.boundary.unwrap_or(gen.boundary_entropy())),
        (SampleSource::Simulated, None) => Some(gen.boundary_entropy()),
    };
    Ok(CalibrationReport {
        source: c.source,
        samples_path: c.samples_path.clone(),
        n_samples: samples.len(),
        planted_boundary,
        convention,
        calibration,
    })
}

/// One cell of the sensitivity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub group: String,
    pub psi_multiple: f64,
    pub psi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub success_rate: f64,
    pub rectification_success_rate: Option<f64>,
    pub relative_step_overhead: Option<f64>,
    pub mean_resets: f64,
}

/// Per-record observables of a traced run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub group: String,
    pub arm: Arm,
    pub seed: u64,
    pub index: usize,
    pub event: StepEvent,
    pub entropy: Option<f64>,
    pub drift: Option<f64>,
    pub omega: Option<f64>,
    /// Error of the state this record produced.
    pub error_norm: f64,
    pub discarded: bool,
}

fn trace_rows(group: &str, arm: Arm, seed: u64, traj: &Trajectory) -> Vec<TraceRow> {
    let errors = traj.error_norms();
    traj.records
        .iter()
        .enumerate()
        .map(|(i, r)| TraceRow {
            group: group.to_string(),
            arm,
            seed,
            index: i,
            event: r.event,
            entropy: r.entropy,
            drift: r.drift,
            omega: r.omega,
            error_norm: errors[i + 1],
            discarded: r.discarded,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub tool_version: String,
    pub scenario: Scenario,
    pub config: ExperimentConfig,
    pub resolved: Option<ResolvedSummary>,
    pub wall_time_s: f64,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<GroupAggregates>,
    pub phase_grid: Option<PhaseGrid>,
    pub sensitivity: Vec<SensitivityRow>,
    pub calibration: Option<CalibrationReport>,
}

impl ExperimentResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results are always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn aggregate(&self, group: &str, arm: Arm) -> Option<&GroupAggregates> {
        self.aggregates.iter().find(|a| a.group == group && a.arm == arm)
    }

    pub fn records_for<'a>(&'a self, group: &'a str, arm: Arm) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.records.iter().filter(move |r| r.group == group && r.arm == arm)
    }
}

/// One arm of a scenario: which loop, under what label, with which
/// controller calibration and threshold.
#[derive(Debug, Clone)]
struct Plan {
    group: String,
    arm: Arm,
    cal: ObserverCalibration,
    psi: f64,
}

fn execute(setup: &Setup, plan: &Plan, seed: u64, keep: bool) -> Result<(RunRecord, Option<Vec<TraceRow>>), HarnessError> {
    let d = setup.s0.dim();
    let tol = setup.success_tol;
    let mut rec = RunRecord {
        seed,
        group: plan.group.clone(),
        arm: plan.arm,
        target_steps: setup.horizon,
        final_error: None,
        success: false,
        logical_steps: 0,
        executed_steps: 0,
        resets: 0,
        status: None,
        diverged: true,
        rsr_succeeded: 0,
        rsr_total: 0,
        pearson_r: None,
        lead_time: None,
    };
    let traj = match plan.arm {
        Arm::OpenLoop => setup.open_loop(seed)?.map(|t| {
            rec.status = Some(RunStatus::Finished);
            rec.logical_steps = t.len();
            rec.executed_steps = t.len();
            t
        }),
        Arm::Halo => setup.closed_loop(seed, &plan.cal, plan.psi)?.map(|run| {
            rec.status = Some(run.status());
            rec.logical_steps = run.logical_steps;
            rec.executed_steps = run.executed_steps;
            rec.resets = run.resets();
            run.trajectory
        }),
    };
    let Some(traj) = traj else {
        return Ok((rec, None));
    };
    rec.diverged = false;
    rec.final_error = traj.final_error();
    rec.success = rec.status == Some(RunStatus::Finished) && rec.final_error.is_some_and(|e| within_tolerance(e, d, tol));
    (rec.rsr_succeeded, rec.rsr_total) = reset_outcomes(&traj, tol);
    if plan.arm == Arm::Halo {
        rec.pearson_r = omega_error_correlation(&traj);
        rec.lead_time = lead_time(&traj, plan.cal.boundary_entropy(), tol);
    }
    let rows = keep.then(|| trace_rows(&plan.group, plan.arm, seed, &traj));
    Ok((rec, rows))
}

/// Streams per-run rows to disk as batches complete.
struct Sink {
    runs: Option<csv::Writer<BufWriter<File>>>,
    traces: Option<csv::Writer<BufWriter<File>>>,
}

impl Sink {
    fn open(dir: Option<&Path>, format: OutputFormat, traces: bool) -> Result<Self, HarnessError> {
        let csv_at = |name: &str| -> Result<csv::Writer<BufWriter<File>>, HarnessError> {
            let dir = dir.expect("checked by caller");
            Ok(csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?)))
        };
        let on = dir.is_some() && format == OutputFormat::Csv;
        Ok(Self {
            runs: if on { Some(csv_at("runs.csv")?) } else { None },
            traces: if on && traces { Some(csv_at("traces.csv")?) } else { None },
        })
    }

    fn push(&mut self, records: &[RunRecord], traces: &[TraceRow]) -> Result<(), HarnessError> {
        if let Some(w) = &mut self.runs {
            for r in records {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        if let Some(w) = &mut self.traces {
            for t in traces {
                w.serialize(t)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn run_plans(cfg: &ExperimentConfig, setup: &Setup, plans: &[Plan], sink: &mut Sink) -> Result<Vec<RunRecord>, HarnessError> {
    let n = cfg.run.n_seeds;
    let keep = cfg.output.traces.unwrap_or(0);
    let mut records = Vec::with_capacity(n * plans.len());
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let batch: Vec<Vec<(RunRecord, Option<Vec<TraceRow>>)>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(cfg.seed, i as u64);
                plans.iter().map(|p| execute(setup, p, seed, i < keep)).collect()
            })
            .collect::<Result<_, _>>()?;
        let mut recs = Vec::new();
        let mut rows = Vec::new();
        for (r, t) in batch.into_iter().flatten() {
            recs.push(r);
            rows.extend(t.unwrap_or_default());
        }
        sink.push(&recs, &rows)?;
        records.extend(recs);
    }
    Ok(records)
}

/// Runs the configured scenario. With `output.dir` set, writes
/// `result.json` and, in CSV format, the scenario's tables.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let dir = cfg.output.dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| invalid("output.dir", format!("{}: {e}", d.display())))?;
    }
    match cfg.run.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| HarnessError::Runtime(e.to_string()))?
            .install(|| run_inner(cfg, dir)),
        None => run_inner(cfg, dir),
    }
}

fn run_inner(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<ExperimentResult, HarnessError> {
    let started = Instant::now();
    let mut result = ExperimentResult {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: cfg.scenario,
        config: cfg.clone(),
        resolved: None,
        wall_time_s: 0.0,
        records: Vec::new(),
        aggregates: Vec::new(),
        phase_grid: None,
        sensitivity: Vec::new(),
        calibration: None,
    };
    let format = cfg.output.format;
    match cfg.scenario {
        Scenario::Calibration => {
            let samples = calibration_samples(cfg)?;
            let report = fit_samples(cfg, &samples)?;
            if let (Some(d), OutputFormat::Csv) = (dir, format) {
                write_samples(&samples, BufWriter::new(File::create(d.join("drift_samples.csv"))?))?;
                fs::write(d.join("calibration.json"), serde_json::to_string_pretty(&report)?)?;
            }
            result.calibration = Some(report);
        }
        Scenario::PhaseSweep => {
            let spec = sweep_spec(cfg)?;
            let grid = phase_sweep(&spec)?;
            if let (Some(d), OutputFormat::Csv) = (dir, format) {
                grid.write_csv(BufWriter::new(File::create(d.join("phase_grid.csv"))?))?;
                grid.write_n_star_csv(BufWriter::new(File::create(d.join("n_star_curve.csv"))?))?;
            }
            result.phase_grid = Some(grid);
        }
        _ => {
            let setup = Setup::resolve(cfg)?;
            let plans = plans_for(cfg, &setup)?;
            let mut sink = Sink::open(dir, format, cfg.output.traces.unwrap_or(0) > 0)?;
            result.records = run_plans(cfg, &setup, &plans, &mut sink)?;
            result.aggregates = group_aggregates(&result.records);
            if cfg.scenario == Scenario::Sensitivity {
                result.sensitivity = sensitivity_rows(cfg, &setup, &plans, &result.aggregates);
            }
            result.resolved = Some(setup.summary());
            result.calibration = setup.calibration_report.clone();
            if let (Some(d), OutputFormat::Csv) = (dir, format) {
                write_aggregates_csv(&result.aggregates, d)?;
                match cfg.scenario {
                    Scenario::Compare => write_pairs_csv(&result.records, d)?,
                    Scenario::Sensitivity => write_sensitivity_csv(&result.sensitivity, d)?,
                    _ => {}
                }
            }
        }
    }
    result.wall_time_s = started.elapsed().as_secs_f64();
    if let Some(d) = dir {
        fs::write(d.join("result.json"), result.to_json())?;
    }
    Ok(result)
}

const DEFAULT_GROUP: &str = "default";

fn plans_for(cfg: &ExperimentConfig, setup: &Setup) -> Result<Vec<Plan>, HarnessError> {
    let plan = |group: String, arm| Plan {
        group,
        arm,
        cal: setup.calibration,
        psi: setup.psi,
    };
    Ok(match cfg.scenario {
        Scenario::OpenLoop => vec![plan(DEFAULT_GROUP.into(), Arm::OpenLoop)],
        Scenario::Halo | Scenario::Correlation => vec![plan(DEFAULT_GROUP.into(), Arm::Halo)],
        Scenario::Compare => vec![plan(DEFAULT_GROUP.into(), Arm::OpenLoop), plan(DEFAULT_GROUP.into(), Arm::Halo)],
        Scenario::Sensitivity => {
            if !setup.psi.is_finite() {
                return Err(invalid("controller.psi", "sensitivity scales a finite threshold"));
            }
            let alphas = cfg.sensitivity.alphas.clone().unwrap_or_else(|| vec![setup.calibration.alpha]);
            let mut plans = Vec::new();
            for &m in &cfg.sensitivity.psi_multiples {
                for &a in &alphas {
                    plans.push(Plan {
                        group: sensitivity_group(m, a),
                        arm: Arm::Halo,
                        cal: ObserverCalibration::new(a, setup.calibration.beta),
                        psi: m * setup.psi,
                    });
                }
            }
            plans
        }
        Scenario::PhaseSweep | Scenario::Calibration => unreachable!("handled without run plans"),
    })
}

fn sensitivity_group(psi_multiple: f64, alpha: f64) -> String {
    format!("psi_x{psi_multiple}_alpha{alpha}")
}

fn sensitivity_rows(
    cfg: &ExperimentConfig,
    setup: &Setup,
    plans: &[Plan],
    aggregates: &[GroupAggregates],
) -> Vec<SensitivityRow> {
    let mut rows = Vec::new();
    let alphas = cfg.sensitivity.alphas.clone().unwrap_or_else(|| vec![setup.calibration.alpha]);
    let mut k = 0;
    for &m in &cfg.sensitivity.psi_multiples {
        for &a in &alphas {
            let plan = &plans[k];
            k += 1;
            let agg = aggregates
                .iter()
                .find(|g| g.group == plan.group && g.arm == Arm::Halo)
                .expect("every plan ran");
            rows.push(SensitivityRow {
                group: plan.group.clone(),
                psi_multiple: m,
                psi: plan.psi,
                alpha: a,
                beta: plan.cal.beta,
                success_rate: agg.stats.success_rate,
                rectification_success_rate: agg.stats.rectification_success_rate,
                relative_step_overhead: agg.stats.relative_step_overhead,
                mean_resets: agg.stats.mean_resets,
            });
        }
    }
    rows
}

fn sweep_spec(cfg: &ExperimentConfig) -> Result<SweepSpec, HarnessError> {
    let sys = &cfg.system;
    let MapConfig::LinearResidual { plant, .. } = sys.map else {
        return Err(invalid("system.map.family", "phase_sweep needs linear_residual"));
    };
    let lambdas = match &cfg.sweep.lambdas {
        Some(l) => l.clone(),
        None => difficulty_lambdas(cfg.sweep.difficulties.unwrap_or(5)),
    };
    let lengths = match &cfg.sweep.lengths {
        Some(l) => l.clone(),
        None => {
            let easiest = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
            let n = matched_params(easiest, sys.sigma2, sys.d, cfg.run.success_tol)
                .map(|p| critical_horizon(&p))
                .map_err(|_| invalid("sweep.lengths", "cannot default lengths without noise; list them"))?;
            (1..=((SWEEP_SPAN * n).ceil() as usize).max(2)).collect()
        }
    };
    Ok(SweepSpec {
        d: sys.d,
        sigma2: sys.sigma2,
        plant,
        s0: sys.s0,
        lengths,
        lambdas,
        n_seeds: cfg.sweep.n_seeds.unwrap_or(200),
        success_tol: cfg.run.success_tol,
        seed: cfg.seed,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_aggregates_csv(aggs: &[GroupAggregates], dir: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("aggregates.csv"))?));
    w.write_record([
        "group",
        "arm",
        "n_runs",
        "successes",
        "success_rate",
        "rectification_success_rate",
        "relative_step_overhead",
        "mean_resets",
        "pearson_r",
        "lead_time",
        "diverged",
    ])?;
    for g in aggs {
        let s = &g.stats;
        w.write_record([
            g.group.clone(),
            g.arm.as_str().to_string(),
            s.n_runs.to_string(),
            s.successes.to_string(),
            s.success_rate.to_string(),
            opt(s.rectification_success_rate),
            opt(s.relative_step_overhead),
            s.mean_resets.to_string(),
            opt(s.pearson_r),
            opt(s.lead_time),
            s.diverged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per seed with both arms side by side.
fn write_pairs_csv(records: &[RunRecord], dir: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("open_vs_halo.csv"))?));
    w.write_record([
        "seed",
        "open_final_error",
        "open_success",
        "halo_final_error",
        "halo_success",
        "halo_resets",
        "halo_executed_steps",
        "halo_status",
    ])?;
    let open: Vec<&RunRecord> = records.iter().filter(|r| r.arm == Arm::OpenLoop).collect();
    let halo: Vec<&RunRecord> = records.iter().filter(|r| r.arm == Arm::Halo).collect();
    for (o, h) in open.iter().zip(&halo) {
        debug_assert_eq!(o.seed, h.seed);
        let status = h
            .status
            .map(|s| serde_json::to_value(s).expect("unit variant").as_str().unwrap_or_default().to_string())
            .unwrap_or_else(|| "diverged".into());
        w.write_record([
            o.seed.to_string(),
            opt(o.final_error),
            o.success.to_string(),
            opt(h.final_error),
            h.success.to_string(),
            h.resets.to_string(),
            h.executed_steps.to_string(),
            status,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_sensitivity_csv(rows: &[SensitivityRow], dir: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("sensitivity.csv"))?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean per-run correlation between `omega` and the error norm, and mean
/// lead time of the first entropy warning over the first band exit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub pearson_r: Option<f64>,
    pub lead_time: Option<f64>,
    /// Runs with a defined correlation.
    pub n_correlated: usize,
    /// Runs where both the warning and the exit happened.
    pub n_lead: usize,
}

/// Closed-loop runs of `cfg` summarized as a correlation study.
pub fn correlation_study(cfg: &ExperimentConfig) -> Result<CorrelationSummary, HarnessError> {
    let mut cfg = cfg.clone();
    cfg.scenario = Scenario::Correlation;
    cfg.output.dir = None;
    let result = run_experiment(&cfg)?;
    let recs: Vec<&RunRecord> = result.records.iter().collect();
    let agg = super::metrics::Aggregates::from_records(recs.iter().copied());
    Ok(CorrelationSummary {
        pearson_r: agg.pearson_r,
        lead_time: agg.lead_time,
        n_correlated: recs.iter().filter(|r| r.pearson_r.is_some()).count(),
        n_lead: recs.iter().filter(|r| r.lead_time.is_some()).count(),
    })
}

impl ExperimentResult {
    /// Writes `result.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let mut f = BufWriter::new(File::create(dir.join("result.json"))?);
        f.write_all(self.to_json().as_bytes())?;
        f.flush()?;
        Ok(())
    }
}
