//! `simulate`, `sweep` and `verify` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cmpc_core::checks::{property_suite, PropertyCheck};
use cmpc_core::config::{Mode, KMH};
use cmpc_core::dynamics::propagate_disturbance_margins;
use cmpc_core::kpi::{self, ScenarioSummary};
use cmpc_core::ocp::Controller;
use cmpc_core::safety::{build_terminal_sets, sets_disjoint, CertificateReport};
use cmpc_core::sim::{run_adversarial, DisturbancePolicy, ScenarioConfig, ScenarioLog};
use cmpc_core::Error as CoreError;
use serde::Serialize;

use crate::config::RootConfig;
use crate::io;
use crate::sweep::{run_sweep, SweepOptions, RESOLVED_CONFIG};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE_START: i32 = 2;
pub const EXIT_NOT_CERTIFIED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cmpc", version, about = "Contingency MPC lane-merge simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Rmpc,
    Gpmpc,
    CmpcHard,
    CmpcSoft,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rmpc => Mode::Rmpc,
            ModeArg::Gpmpc => Mode::Gpmpc,
            ModeArg::CmpcHard => Mode::CmpcHard,
            ModeArg::CmpcSoft => Mode::CmpcSoft,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DisturbanceArg {
    Cooperative,
    ExtremeRandom,
    WorstCaseToggle,
}

impl From<DisturbanceArg> for DisturbancePolicy {
    fn from(d: DisturbanceArg) -> Self {
        match d {
            DisturbanceArg::Cooperative => DisturbancePolicy::Cooperative,
            DisturbanceArg::ExtremeRandom => DisturbancePolicy::ExtremeRandom,
            DisturbanceArg::WorstCaseToggle => DisturbancePolicy::WorstCaseToggle,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop scenario.
    Simulate {
        /// JSON config file; built-in defaults when omitted.
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cmpc-soft")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        /// Initial speed of Agent 1 in km/h.
        #[arg(long)]
        v1_kmh: Option<f64>,
        /// Initial speed of Agent 2 in km/h.
        #[arg(long)]
        v2_kmh: Option<f64>,
        #[arg(long)]
        s1: Option<f64>,
        #[arg(long)]
        s2: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "cooperative")]
        disturbance: DisturbanceArg,
    },
    /// Run the initial-speed grid for several modes and write the KPI report.
    Sweep {
        config: Option<PathBuf>,
        /// Comma-separated modes; the config's list when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        modes: Vec<ModeArg>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the per-step logs of each scenario.
        #[arg(long)]
        no_logs: bool,
        /// Stop after this many new scenarios; rerun to resume.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Certify the terminal sets and run the set-operation and model checks.
    Verify {
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Random cases per set-operation check.
        #[arg(long, default_value_t = 10_000)]
        cases: usize,
    },
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

pub fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Simulate {
            config,
            mode,
            out,
            v1_kmh,
            v2_kmh,
            s1,
            s2,
            steps,
            seed,
            disturbance,
        } => {
            let mut cfg = RootConfig::load(config.as_deref())?;
            let sc = &mut cfg.scenario;
            if let Some(v) = v1_kmh {
                sc.v1_0 = v * KMH;
            }
            if let Some(v) = v2_kmh {
                sc.v2_0 = v * KMH;
            }
            if let Some(v) = s1 {
                sc.s1_0 = v;
            }
            if let Some(v) = s2 {
                sc.s2_0 = v;
            }
            if let Some(v) = steps {
                sc.steps = v;
            }
            if let Some(v) = seed {
                sc.seed = v;
            }
            cfg.validate()?;
            simulate(&cfg, mode.into(), disturbance.into(), &out)
        }
        Command::Sweep {
            config,
            modes,
            jobs,
            out,
            no_logs,
            limit,
        } => {
            let mut cfg = RootConfig::load(config.as_deref())?;
            if !modes.is_empty() {
                cfg.sweep.modes = modes.into_iter().map(Mode::from).collect();
            }
            if jobs.is_some() {
                cfg.sweep.jobs = jobs;
            }
            if no_logs {
                cfg.sweep.write_logs = false;
            }
            cfg.validate()?;
            let opts = SweepOptions {
                modes: cfg.sweep.modes.clone(),
                jobs: cfg.sweep.jobs,
                out: out.clone(),
                write_logs: cfg.sweep.write_logs,
                limit,
            };
            match run_sweep(&cfg, &opts)? {
                Some(report) => print!("{}", kpi::table(&report)),
                None => println!("stopped early; rerun the same command to resume"),
            }
            Ok(EXIT_OK)
        }
        Command::Verify { config, out, cases } => {
            let cfg = RootConfig::load(config.as_deref())?;
            verify(&cfg, out.as_deref(), cases)
        }
    }
}

fn write_config(dir: &Path, cfg: &RootConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_json() + "\n")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulationSummary<'a> {
    #[serde(flatten)]
    kpi: &'a ScenarioSummary,
    infeasible_start: bool,
    steps: usize,
    total_wall_time: f64,
}

pub fn simulate(
    cfg: &RootConfig,
    mode: Mode,
    policy: DisturbancePolicy,
    out: &Path,
) -> Result<i32> {
    write_config(out, cfg)?;
    let ctrl = Controller::new(cfg.controller(), mode)?;
    let start = Instant::now();
    let mut clock = || start.elapsed().as_secs_f64();
    let (v1, v2) = (cfg.scenario.v1_0 / KMH, cfg.scenario.v2_0 / KMH);
    match run_adversarial(&cfg.scenario, &ctrl, policy, &mut clock) {
        Ok(log) => {
            io::write_log(out, "log", &log)?;
            if let Some(ds) = &log.dataset {
                io::write_gp_csv(&out.join("gp_data.csv"), ds)?;
            }
            write_dumps(out, &log)?;
            let kpi = ScenarioSummary::from_log(&log, v1, v2, &cfg.solver, &cfg.model);
            let summary = SimulationSummary {
                kpi: &kpi,
                infeasible_start: false,
                steps: log.steps.len(),
                total_wall_time: log.steps.iter().map(|r| r.wall_time).sum(),
            };
            io::write_json(&out.join("summary.json"), &summary)?;
            println!(
                "{}: {:?} merge at {} s, slack {:.3e}, cost {:.3}, max D_safe {:.3e}, certificate failures {}",
                mode.name(),
                log.merge_result,
                kpi.merge_time.map_or("-".into(), |t| format!("{t:.2}")),
                kpi.slack.unwrap_or(0.0),
                kpi.cost.unwrap_or(0.0),
                kpi.max_d_safe.unwrap_or(0.0),
                log.certificate_failures
            );
            Ok(EXIT_OK)
        }
        Err(CoreError::InfeasibleStart) => {
            let log = ScenarioLog::infeasible(mode, &cfg.scenario);
            io::write_json(&out.join("log.json"), &log)?;
            let kpi = ScenarioSummary::from_error(mode, v1, v2, &CoreError::InfeasibleStart);
            let summary = SimulationSummary {
                kpi: &kpi,
                infeasible_start: true,
                steps: 0,
                total_wall_time: clock(),
            };
            io::write_json(&out.join("summary.json"), &summary)?;
            eprintln!(
                "{}: initial state is infeasible for the robust horizon",
                mode.name()
            );
            Ok(EXIT_INFEASIBLE_START)
        }
        Err(e) => Err(e.into()),
    }
}

fn write_dumps(out: &Path, log: &ScenarioLog) -> Result<()> {
    if log.nlp_dumps.is_empty() {
        return Ok(());
    }
    let dir = out.join("nlp");
    fs::create_dir_all(&dir)?;
    for (k, d) in &log.nlp_dumps {
        io::write_json(&dir.join(format!("step_{k:03}.json")), d)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct MonitorReport {
    pub mode: Mode,
    pub steps: usize,
    /// Fraction of steps whose GP mean stayed inside the disturbance bounds.
    pub gp_in_bounds: f64,
    /// Fraction of steps whose performance sets contained the robust ones.
    pub perf_contains_robust: f64,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub certified: bool,
    pub certificates: Vec<CertificateReport>,
    pub disjoint: Option<bool>,
    pub certification_error: Option<String>,
    pub properties: Vec<PropertyCheck>,
    pub monitor: Vec<MonitorReport>,
}

fn monitor(cfg: &RootConfig, ctrl: &Controller) -> MonitorReport {
    let scenario = ScenarioConfig {
        certify: false,
        ..cfg.scenario.clone()
    };
    let mut clock = || 0.0;
    let frac = |log: &ScenarioLog, f: &dyn Fn(&cmpc_core::sim::StepRecord) -> Option<bool>| {
        let v: Vec<bool> = log.steps.iter().filter_map(f).collect();
        if v.is_empty() {
            1.0
        } else {
            v.iter().filter(|b| **b).count() as f64 / v.len() as f64
        }
    };
    match run_adversarial(&scenario, ctrl, DisturbancePolicy::Cooperative, &mut clock) {
        Ok(log) => MonitorReport {
            mode: ctrl.mode,
            steps: log.steps.len(),
            gp_in_bounds: frac(&log, &|r| r.gp_in_bounds),
            perf_contains_robust: frac(&log, &|r| r.perf_contains_robust),
            error: None,
        },
        Err(e) => MonitorReport {
            mode: ctrl.mode,
            steps: 0,
            gp_in_bounds: 0.0,
            perf_contains_robust: 0.0,
            error: Some(e.to_string()),
        },
    }
}

pub fn verify(cfg: &RootConfig, out: Option<&Path>, cases: usize) -> Result<i32> {
    if let Some(dir) = out {
        write_config(dir, cfg)?;
    }
    let cc = cfg.controller();
    let m = cc.model.linear_model()?;
    let w = cc.model.disturbance(&m)?;
    let vc = cc
        .model
        .verify_config(cc.solver.horizon, cc.terminal.grid_density);
    let margins = propagate_disturbance_margins(&m, &w, cc.solver.horizon)?;
    let properties = property_suite(cases, cfg.scenario.seed, &cc.safety, &margins);

    let mut report = VerifyReport {
        certified: false,
        certificates: Vec::new(),
        disjoint: None,
        certification_error: None,
        properties,
        monitor: Vec::new(),
    };
    match build_terminal_sets(&m, &w, &cc.safety, &cc.terminal, &vc) {
        Ok(sets) => {
            let disjoint = sets_disjoint(&sets.behind, &sets.front);
            report.certified = disjoint && sets.reports.iter().all(|r| r.certified);
            report.disjoint = Some(disjoint);
            report.certificates = sets.reports.to_vec();
            for mode in [Mode::CmpcSoft, Mode::CmpcHard] {
                let ctrl = Controller::with_sets(cc.clone(), mode, sets.clone())?;
                report.monitor.push(monitor(cfg, &ctrl));
            }
        }
        Err(e) => report.certification_error = Some(e.to_string()),
    }

    for c in &report.certificates {
        println!(
            "{:<14} certified {:<5} worst slack {:.6}",
            c.set, c.certified, c.worst_slack
        );
        if let Some(ce) = &c.counterexample {
            println!("  counterexample {ce:?}");
        }
    }
    if let Some(d) = report.disjoint {
        println!("terminal sets disjoint: {d}");
    }
    if let Some(e) = &report.certification_error {
        println!("{e}");
    }
    for p in &report.properties {
        println!(
            "{:<22} {} cases, {} counterexamples",
            p.name, p.cases, p.counterexamples
        );
    }
    for r in &report.monitor {
        println!(
            "{:<10} GP mean inside W {:.3}, performance sets contain robust sets {:.3}{}",
            r.mode.name(),
            r.gp_in_bounds,
            r.perf_contains_robust,
            r.error
                .as_deref()
                .map(|e| format!(" ({e})"))
                .unwrap_or_default()
        );
    }
    if let Some(dir) = out {
        io::write_json(&dir.join("verify.json"), &report)?;
        for c in &report.certificates {
            io::write_json(&dir.join(format!("certificate_{}.json", c.set)), c)?;
        }
    }
    Ok(if report.certified {
        EXIT_OK
    } else {
        EXIT_NOT_CERTIFIED
    })
}
