//! `phri` — run experiments and scripted scenarios.
//!
//! Exit codes: 0 success, 2 a check failed, 3 configuration error (including an
//! unavailable `--listen` endpoint), 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use clap::{Parser, Subcommand};

use phri_core::lowlevel::LowLevelKind;
use phri_core::model::default_gen3_model;
use phri_core::scenario::ScenarioFile;
use phri_core::sim::{pose_array, SimConfig, SimError, Simulation};
use phri_gateway::{Gateway, GatewayConfig, GatewayError};
use phri_harness::experiments::{self, Experiment, HarnessConfig, RunOptions};
use phri_harness::output::{fmt_f64, Table};
use phri_harness::HarnessError;

#[derive(Parser)]
#[command(name = "phri", version, about = "Compliant pHRI control simulation: experiments and scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one evaluation experiment and write its CSVs and manifest.
    Exp {
        #[arg(value_enum)]
        experiment: Experiment,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these low-level controllers (repeatable).
        #[arg(long = "controller", value_parser = parse_controller)]
        controllers: Vec<LowLevelKind>,
        /// Output directory (default: out/<experiment>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a scenario file and log the closed loop.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory for `sim_log.csv` (default: out/sim).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the simulation in real time and serve it to operator clients over WebSocket.
    Serve {
        /// Endpoint as `host:port`.
        #[arg(long, default_value = "127.0.0.1:8765")]
        listen: String,
        /// Simulation settings (TOML, `SimConfig` fields).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stop after this many simulated seconds (default: run until killed).
        #[arg(long)]
        duration: Option<f64>,
        /// Publish telemetry every N control ticks.
        #[arg(long, default_value_t = 10)]
        decimation: u64,
    },
}

fn parse_controller(s: &str) -> Result<LowLevelKind, String> {
    s.parse().map_err(|_| format!("unknown controller `{s}` (position, kinova_highvel, phri_torque)"))
}

enum Failure {
    Checks,
    Config(String),
    Other(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) | HarnessError::Sim(SimError::Config(m)) => Failure::Config(m),
            e => Failure::Other(e.to_string()),
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<HarnessConfig, Failure> {
    match path {
        None => Ok(HarnessConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            Ok(HarnessConfig::from_toml_str(&text)?)
        }
    }
}

fn exp(experiment: Experiment, opts: RunOptions, out: Option<PathBuf>, config: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = read_config(config.as_deref())?;
    let out = out.unwrap_or_else(|| PathBuf::from("out").join(experiment.as_str()));
    let started = std::time::Instant::now();
    let report = experiments::run(experiment, &cfg, &opts)?;
    report.write(&out, &cfg)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} finished in {:.1} s; results in {}", experiment.as_str(), started.elapsed().as_secs_f64(), out.display());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn sim(scenario: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(scenario).map_err(|e| Failure::Config(format!("{}: {e}", scenario.display())))?;
    let file = ScenarioFile::from_toml_str(&text).map_err(HarnessError::from)?;
    let out = out.unwrap_or_else(|| PathBuf::from("out").join("sim"));
    let mut log = Table::new(&[
        "t_s", "x_m", "y_m", "z_m", "ref_x_m", "ref_y_m", "ref_z_m", "wrench_norm", "engaged", "tau_err_nm", "qp_status",
    ]);
    let outcome = file
        .run(default_gen3_model(), |i| {
            let p = pose_array(&i.ee_pose);
            let r = pose_array(&i.ee_reference);
            let mut row: Vec<String> = [i.t, p[0], p[1], p[2], r[0], r[1], r[2], i.wrench_norm, f64::from(u8::from(i.engaged))]
                .iter()
                .map(|v| fmt_f64(*v))
                .collect();
            row.push(fmt_f64((&i.sensors.joint_torque - &i.tau_desired).norm()));
            row.push(i.status.as_str().into());
            log.push(row);
        })
        .map_err(HarnessError::from)?;
    std::fs::create_dir_all(&out).map_err(HarnessError::from)?;
    std::fs::write(out.join("sim_log.csv"), log.to_csv()?).map_err(HarnessError::from)?;
    for r in &outcome.rejections {
        println!("rejected at t={:.3}: {}", r.t, r.reason);
    }
    println!("{} ticks; log in {}", outcome.ticks, out.join("sim_log.csv").display());
    Ok(())
}

fn serve(listen: String, config: Option<PathBuf>, duration: Option<f64>, decimation: u64) -> Result<(), Failure> {
    let sim_cfg = match config {
        None => SimConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            SimConfig::from_toml_str(&text).map_err(HarnessError::from)?
        }
    };
    if duration.is_some_and(|d| d.is_nan() || d < 0.0) || decimation == 0 {
        return Err(Failure::Config("duration must be non-negative and decimation positive".into()));
    }
    let ticks = duration.map(|d| (d / sim_cfg.plant.dt).round() as u64);
    let mut sim = Simulation::new(default_gen3_model(), sim_cfg).map_err(HarnessError::from)?;
    let cfg = GatewayConfig { listen, decimation, ..GatewayConfig::default() };
    let mut gateway = Gateway::bind(cfg).map_err(|e| match e {
        GatewayError::EndpointUnavailable { .. } => Failure::Config(e.to_string()),
        e => Failure::Other(e.to_string()),
    })?;
    println!("serving on ws://{}", gateway.local_addr());
    let stop = AtomicBool::new(false);
    gateway.serve(&mut sim, &stop, ticks).map_err(|e| Failure::Other(e.to_string()))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Exp { experiment, trials, seed, controllers, out, config } => {
            let opts = RunOptions { seed, trials, controllers: (!controllers.is_empty()).then_some(controllers) };
            exp(experiment, opts, out, config)
        }
        Command::Sim { scenario, out } => sim(&scenario, out),
        Command::Serve { listen, config, duration, decimation } => serve(listen, config, duration, decimation),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(2),
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}
