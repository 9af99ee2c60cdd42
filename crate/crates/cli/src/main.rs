use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use halo_core::controller::{
    connect_tcp, run_halo_external, serve_stub, spawn_adapter, ExternalRunError, HaloRun, StubConfig,
    COMPRESSION_TEMPLATE, PROTOCOL_VERSION, REINIT_TEMPLATE,
};
use halo_core::error_prop::{crossing_step, GrowthBoundParams};
use halo_core::harness::{
    run_experiment, ExperimentConfig, ExperimentResult, HarnessError, OutputFormat, Scenario, Setup,
};
use halo_core::horizon::{critical_horizon, HorizonParams};

const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.json");

#[derive(Parser)]
#[command(name = "halo", version, about = "Error growth in long autoregressive chains and an entropy-driven controller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop runs
    Simulate(Common),
    /// Critical horizon for one parameter set
    Horizon(HorizonArgs),
    /// Success-rate grid over chain length and difficulty
    Sweep(Common),
    /// Fit the entropy-drift relation from labelled samples
    Calibrate(Common),
    /// Closed-loop runs, simulated or against an external generator
    Halo(HaloArgs),
    /// Open and closed loop on matched seeds
    Compare(Common),
    /// Threshold and slope grid
    Sensitivity(Common),
    /// Correlation between accumulated uncertainty and error
    Correlate(Common),
    /// Scripted generator speaking the adapter protocol
    ServeAdapterStub(StubArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (JSON); the built-in default when absent
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides run.n_seeds
    #[arg(long)]
    n_seeds: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct HorizonArgs {
    #[arg(long, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long)]
    sigma2: f64,
    #[arg(long)]
    psi: f64,
}

#[derive(Args)]
struct HaloArgs {
    #[command(flatten)]
    common: Common,
    /// Drive a generator listening on this TCP address
    #[arg(long, conflicts_with = "spawn")]
    connect: Option<String>,
    /// Drive a generator started as this command (stdio)
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    spawn: Option<Vec<String>>,
    /// Seconds to wait for each generator message
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    #[arg(long, value_enum, default_value_t = Template::Compression)]
    template: Template,
}

#[derive(Clone, Copy, ValueEnum)]
enum Template {
    Compression,
    Reinit,
}

#[derive(Args)]
struct StubArgs {
    /// Entropies to emit, one per step
    #[arg(long, value_delimiter = ',', required = true)]
    entropies: Vec<f64>,
    /// Serve one TCP connection here instead of stdio
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, default_value_t = PROTOCOL_VERSION)]
    protocol_version: u32,
    #[arg(long)]
    close_after: Option<usize>,
    #[arg(long)]
    fixed_anchor: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Simulate(c) => experiment(&c, Scenario::OpenLoop),
        Command::Horizon(h) => horizon(&h),
        Command::Sweep(c) => experiment(&c, Scenario::PhaseSweep),
        Command::Calibrate(c) => experiment(&c, Scenario::Calibration),
        Command::Halo(h) if h.connect.is_some() || h.spawn.is_some() => external(&h),
        Command::Halo(h) => experiment(&h.common, Scenario::Halo),
        Command::Compare(c) => experiment(&c, Scenario::Compare),
        Command::Sensitivity(c) => experiment(&c, Scenario::Sensitivity),
        Command::Correlate(c) => experiment(&c, Scenario::Correlation),
        Command::ServeAdapterStub(s) => stub(&s),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(c: &Common, scenario: Scenario) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::from_json_str(DEFAULT_CONFIG)?,
    };
    cfg.scenario = scenario;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = Some(o.clone());
    }
    if let Some(f) = c.format {
        cfg.output.format = match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        };
    }
    if c.jobs.is_some() {
        cfg.run.jobs = c.jobs;
    }
    if let Some(n) = c.n_seeds {
        cfg.run.n_seeds = n;
        if scenario == Scenario::PhaseSweep {
            cfg.sweep.n_seeds = Some(n);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment(c: &Common, scenario: Scenario) -> Result<(), HarnessError> {
    let cfg = load(c, scenario)?;
    let result = run_experiment(&cfg)?;
    if cfg.output.format == OutputFormat::Json && cfg.output.dir.is_none() {
        println!("{}", result.to_json());
    } else {
        print_summary(&result);
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_summary(r: &ExperimentResult) {
    let mut out = io::stdout().lock();
    if let Some(s) = &r.resolved {
        let _ = writeln!(
            out,
            "rate {:.4}  N* {}  horizon {}  budget {}  psi {}",
            s.lambda_ref,
            opt(s.n_star),
            s.horizon,
            s.max_steps,
            opt(s.psi)
        );
    }
    if !r.aggregates.is_empty() {
        let _ = writeln!(
            out,
            "{:<24} {:<10} {:>6} {:>8} {:>8} {:>9} {:>7} {:>9}",
            "group", "arm", "runs", "success", "resets", "overhead", "rsr", "pearson"
        );
        for g in &r.aggregates {
            let s = &g.stats;
            let _ = writeln!(
                out,
                "{:<24} {:<10} {:>6} {:>8.3} {:>8.2} {:>9} {:>7} {:>9}",
                g.group,
                g.arm.as_str(),
                s.n_runs,
                s.success_rate,
                s.mean_resets,
                opt(s.relative_step_overhead),
                opt(s.rectification_success_rate),
                opt(s.pearson_r)
            );
        }
    }
    if let Some(grid) = &r.phase_grid {
        let _ = writeln!(out, "{:>10} {:>10} {:>12}", "rate", "N*", "50% length");
        for (j, l) in grid.lambdas.iter().enumerate() {
            let _ = writeln!(out, "{:>10.4} {:>10} {:>12}", l, opt(grid.n_star[j]), opt(grid.fifty_percent_length(j)));
        }
    }
    if let Some(c) = &r.calibration {
        let cal = &c.calibration;
        let _ = writeln!(
            out,
            "alpha {:.4}  beta {:.4}  boundary {:.4}  samples {}",
            cal.alpha,
            cal.beta,
            cal.boundary_entropy(),
            c.n_samples
        );
    }
    if let Some(dir) = &r.config.output.dir {
        let _ = writeln!(out, "wrote {}", dir.display());
    }
}

fn horizon(h: &HorizonArgs) -> Result<(), HarnessError> {
    let p = HorizonParams::new(h.lambda, h.sigma2, h.psi).map_err(|e| HarnessError::Validation {
        path: "--lambda/--sigma2/--psi".into(),
        message: e.to_string(),
    })?;
    let n = critical_horizon(&p);
    let bound = GrowthBoundParams::new(p.lambda.exp(), p.sigma2, 0.0, p.psi).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let limit = n.ceil() as usize + 2;
    let series: Vec<f64> = (0..=limit).map(|k| halo_core::error_prop::trace_bound(k, &bound)).collect();
    println!("N* = {n:.4}");
    if let Some(k) = crossing_step(&series, p.psi) {
        println!("first step at or above psi: {k}");
    }
    Ok(())
}

fn external(h: &HaloArgs) -> Result<(), HarnessError> {
    let cfg = load(&h.common, Scenario::Halo)?;
    let setup = Setup::resolve(&cfg)?;
    let timeout = Some(Duration::from_secs_f64(h.timeout.max(0.001)));
    let template = match h.template {
        Template::Compression => COMPRESSION_TEMPLATE,
        Template::Reinit => REINIT_TEMPLATE,
    };
    let transport = |e: halo_core::controller::TransportError| HarnessError::Runtime(e.to_string());
    let outcome = if let Some(addr) = &h.connect {
        let mut s = connect_tcp(addr, timeout).map_err(transport)?;
        run_halo_external(&mut s, &setup.calibration, &setup.controller, template)
    } else {
        let argv = h.spawn.as_ref().expect("checked by caller");
        let mut s = spawn_adapter(&argv[0], &argv[1..], timeout).map_err(transport)?;
        run_halo_external(&mut s, &setup.calibration, &setup.controller, template)
    };
    match outcome {
        Ok(run) => {
            report_external(&run, &cfg)?;
            Ok(())
        }
        Err(ExternalRunError::Config(e)) => Err(HarnessError::Validation {
            path: "controller".into(),
            message: e.to_string(),
        }),
        Err(ExternalRunError::Transport { error, partial }) => {
            report_external(&partial, &cfg)?;
            Err(HarnessError::Runtime(format!("generator connection failed: {error}")))
        }
    }
}

fn report_external(run: &HaloRun, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let status = serde_json::to_value(run.status()).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    println!(
        "status {}  executed {}  resets {}",
        status.as_str().unwrap_or_default(),
        run.executed_steps,
        run.resets()
    );
    if let Some(dir) = &cfg.output.dir {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("external_run.json"))?;
        run.trajectory.write_json(f).map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    Ok(())
}

fn stub(s: &StubArgs) -> Result<(), HarnessError> {
    let cfg = StubConfig {
        entropies: s.entropies.clone(),
        version: s.protocol_version,
        close_after_steps: s.close_after,
        fixed_anchor: s.fixed_anchor.clone(),
    };
    let report = match &s.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            println!("listening on {}", listener.local_addr()?);
            io::stdout().flush()?;
            let (stream, _) = listener.accept()?;
            serve_stub(&cfg, BufReader::new(stream.try_clone()?), stream)?
        }
        None => serve_stub(&cfg, io::stdin().lock(), io::stdout().lock())?,
    };
    eprintln!(
        "stub: {} steps, {} continue, {} rectify",
        report.steps_sent, report.continues, report.rectifies
    );
    Ok(())
}
