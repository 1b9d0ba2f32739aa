//! Scenario-parallel grid sweep with a resumable manifest and a deterministic reduce.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cmpc_core::config::Mode;
use cmpc_core::kpi::{aggregate, run_grid_point, KpiReport, ScenarioSummary};
use cmpc_core::ocp::Controller;
use rayon::prelude::*;

use crate::config::RootConfig;
use crate::io;

pub const MANIFEST: &str = "manifest.jsonl";
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub modes: Vec<Mode>,
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub write_logs: bool,
    /// Stop after this many new scenarios (the manifest keeps what finished).
    pub limit: Option<usize>,
}

type Key = (Mode, u64, u64);

fn key(mode: Mode, v1: f64, v2: f64) -> Key {
    (mode, v1.to_bits(), v2.to_bits())
}

pub fn scenario_stem(mode: Mode, v1: f64, v2: f64) -> String {
    format!("{}_{v1}_{v2}", mode.name())
}

/// Completed scenarios recorded in `dir`; a torn last line is ignored.
fn read_manifest(path: &Path) -> Result<HashMap<Key, ScenarioSummary>> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let f = fs::File::open(path)?;
    for line in BufReader::new(f).lines() {
        let line = line?;
        if let Ok(s) = serde_json::from_str::<ScenarioSummary>(&line) {
            done.insert(key(s.mode, s.v1_0_kmh, s.v2_0_kmh), s);
        }
    }
    Ok(done)
}

/// Controllers for every mode, sharing one terminal-set construction.
pub fn controllers(cfg: &RootConfig, modes: &[Mode]) -> Result<Vec<Controller>> {
    let mut out: Vec<Controller> = Vec::with_capacity(modes.len());
    for &m in modes {
        let c = match out.first() {
            Some(first) => Controller::with_sets(cfg.controller(), m, first.terminal.clone())?,
            None => Controller::new(cfg.controller(), m)?,
        };
        out.push(c);
    }
    Ok(out)
}

/// Run (or resume) the grid for every mode and write the report into `opts.out`.
/// Returns `None` if `limit` stopped the sweep before every scenario finished.
pub fn run_sweep(cfg: &RootConfig, opts: &SweepOptions) -> Result<Option<KpiReport>> {
    let out = &opts.out;
    fs::create_dir_all(out.join("scenarios"))?;
    let resolved = cfg.to_json();
    let cfg_path = out.join(RESOLVED_CONFIG);
    if cfg_path.exists() {
        let prev = fs::read_to_string(&cfg_path)?;
        if prev.trim_end() != resolved.trim_end() {
            bail!(
                "{} holds a sweep with a different configuration",
                out.display()
            );
        }
    } else {
        fs::write(&cfg_path, resolved + "\n")?;
    }

    let points = cfg.sweep.grid.points()?;
    let manifest_path = out.join(MANIFEST);
    let done = read_manifest(&manifest_path)?;
    let ctrls = controllers(cfg, &opts.modes)?;
    let mut todo: Vec<(usize, f64, f64)> = Vec::new();
    for (mi, &m) in opts.modes.iter().enumerate() {
        for &(v1, v2) in &points {
            if !done.contains_key(&key(m, v1, v2)) {
                todo.push((mi, v1, v2));
            }
        }
    }
    let complete = opts.limit.map_or(true, |l| l >= todo.len());
    if let Some(l) = opts.limit {
        todo.truncate(l);
    }
    log::info!("{} scenarios done, {} to run", done.len(), todo.len());

    let manifest = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest_path)?,
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()?;
    let fresh: Vec<ScenarioSummary> = pool.install(|| {
        todo.par_iter()
            .map(|&(mi, v1, v2)| -> Result<ScenarioSummary> {
                let ctrl = &ctrls[mi];
                let start = Instant::now();
                let mut clock = || start.elapsed().as_secs_f64();
                let (log, summary) = run_grid_point(ctrl, &cfg.scenario, v1, v2, &mut clock);
                if opts.write_logs {
                    if let Some(l) = &log {
                        io::write_log(
                            &out.join("scenarios"),
                            &scenario_stem(ctrl.mode, v1, v2),
                            l,
                        )?;
                    }
                }
                let line = serde_json::to_string(&summary)?;
                let mut f = manifest.lock().expect("manifest lock");
                writeln!(f, "{line}")?;
                f.flush()?;
                log::debug!(
                    "{} {v1}/{v2}: {:?} {:?}",
                    ctrl.mode.name(),
                    summary.outcome,
                    summary.result
                );
                Ok(summary)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    if !complete {
        return Ok(None);
    }

    let mut all = done;
    for s in fresh {
        all.insert(key(s.mode, s.v1_0_kmh, s.v2_0_kmh), s);
    }
    let mut rows = Vec::with_capacity(opts.modes.len() * points.len());
    for &m in &opts.modes {
        for &(v1, v2) in &points {
            let s = all
                .remove(&key(m, v1, v2))
                .with_context(|| format!("missing scenario {} {v1}/{v2}", m.name()))?;
            rows.push(s);
        }
    }
    let report = aggregate(rows);
    io::write_report(out, &report)?;
    Ok(Some(report))
}
