//! Closed-loop KPIs and their aggregation over the initial-speed grid.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::config::{Mode, ModelParams, SolverParams, KMH};
use crate::error::{Error, Result};
use crate::ocp::{stage_cost, Controller, SolveStatus};
use crate::sim::{run_scenario, MergeResult, ScenarioConfig, ScenarioLog};

/// `(1/m) Σ_k ‖E_k‖₁` of one scenario.
pub fn scenario_slack(log: &ScenarioLog) -> f64 {
    if log.steps.is_empty() {
        return 0.0;
    }
    log.steps.iter().map(|r| r.eps_l1).sum::<f64>() / log.steps.len() as f64
}

/// `(1/m) Σ_k Q(v_ref − v¹)² + R u¹² + S Δu¹²` with `u¹_{−1} = 0`.
pub fn scenario_cost(log: &ScenarioLog, sp: &SolverParams, v_ref: f64) -> f64 {
    if log.steps.is_empty() {
        return 0.0;
    }
    let mut prev = 0.0;
    let mut sum = 0.0;
    for r in &log.steps {
        sum += stage_cost(r.v1, r.u1, r.u1 - prev, sp, v_ref);
        prev = r.u1;
    }
    sum / log.steps.len() as f64
}

/// Mean of [`scenario_slack`] over the given logs.
pub fn kpi_slack(logs: &[&ScenarioLog]) -> f64 {
    mean(logs.iter().map(|l| scenario_slack(l)))
}

/// Mean of [`scenario_cost`] over the given logs.
pub fn kpi_cost(logs: &[&ScenarioLog], sp: &SolverParams, v_ref: f64) -> f64 {
    mean(logs.iter().map(|l| scenario_cost(l, sp, v_ref)))
}

/// Time of the first recorded state with `s¹ > 0`.
pub fn kpi_merge_time(log: &ScenarioLog) -> Option<f64> {
    log.merge_time
}

pub fn kpi_result(log: &ScenarioLog) -> MergeResult {
    log.merge_result
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Initial speeds in km/h, enumerated row-major over `(v1_0, v2_0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub v1_kmh: [f64; 2],
    pub v2_kmh: [f64; 2],
    pub step_kmh: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            v1_kmh: [40.0, 50.0],
            v2_kmh: [30.0, 50.0],
            step_kmh: 1.0,
        }
    }
}

impl GridSpec {
    pub fn points(&self) -> Result<Vec<(f64, f64)>> {
        if !(self.step_kmh > 0.0)
            || self.v1_kmh[1] < self.v1_kmh[0]
            || self.v2_kmh[1] < self.v2_kmh[0]
        {
            return Err(crate::error::invalid(
                "grid",
                "need step > 0 and ordered ranges",
            ));
        }
        let count = |r: [f64; 2]| libm::floor((r[1] - r[0]) / self.step_kmh + 1e-9) as usize + 1;
        let mut out = Vec::with_capacity(count(self.v1_kmh) * count(self.v2_kmh));
        for i in 0..count(self.v1_kmh) {
            for j in 0..count(self.v2_kmh) {
                out.push((
                    self.v1_kmh[0] + self.step_kmh * i as f64,
                    self.v2_kmh[0] + self.step_kmh * j as f64,
                ));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    InfeasibleStart,
    Failed,
}

/// Per-scenario KPI row; the numeric fields are absent unless the run completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub mode: Mode,
    pub v1_0_kmh: f64,
    pub v2_0_kmh: f64,
    pub outcome: Outcome,
    pub result: MergeResult,
    pub merge_time: Option<f64>,
    pub slack: Option<f64>,
    pub cost: Option<f64>,
    pub max_d_safe: Option<f64>,
    pub certificate_failures: usize,
    pub fallbacks: usize,
    pub nonoptimal_steps: usize,
    pub error: Option<String>,
}

impl ScenarioSummary {
    pub fn from_log(
        log: &ScenarioLog,
        v1_0_kmh: f64,
        v2_0_kmh: f64,
        sp: &SolverParams,
        mp: &ModelParams,
    ) -> Self {
        Self {
            mode: log.mode,
            v1_0_kmh,
            v2_0_kmh,
            outcome: Outcome::Completed,
            result: log.merge_result,
            merge_time: log.merge_time,
            slack: Some(scenario_slack(log)),
            cost: Some(scenario_cost(log, sp, mp.v_ref1)),
            max_d_safe: Some(log.max_d_safe()),
            certificate_failures: log.certificate_failures,
            fallbacks: log.fallbacks,
            nonoptimal_steps: log
                .steps
                .iter()
                .filter(|r| r.status != SolveStatus::Optimal)
                .count(),
            error: None,
        }
    }

    pub fn from_error(mode: Mode, v1_0_kmh: f64, v2_0_kmh: f64, e: &Error) -> Self {
        let outcome = if *e == Error::InfeasibleStart {
            Outcome::InfeasibleStart
        } else {
            Outcome::Failed
        };
        Self {
            mode,
            v1_0_kmh,
            v2_0_kmh,
            outcome,
            result: MergeResult::None,
            merge_time: None,
            slack: None,
            cost: None,
            max_d_safe: None,
            certificate_failures: 0,
            fallbacks: 0,
            nonoptimal_steps: 0,
            error: (outcome == Outcome::Failed).then(|| format!("{e}")),
        }
    }
}

/// Scenario config for one grid point.
pub fn grid_scenario(base: &ScenarioConfig, v1_kmh: f64, v2_kmh: f64) -> ScenarioConfig {
    ScenarioConfig {
        v1_0: v1_kmh * KMH,
        v2_0: v2_kmh * KMH,
        ..base.clone()
    }
}

/// Run one grid point and keep both the log (if any) and its summary.
pub fn run_grid_point(
    ctrl: &Controller,
    base: &ScenarioConfig,
    v1_kmh: f64,
    v2_kmh: f64,
    clock: &mut dyn FnMut() -> f64,
) -> (Option<ScenarioLog>, ScenarioSummary) {
    let cfg = grid_scenario(base, v1_kmh, v2_kmh);
    match run_scenario(&cfg, ctrl, clock) {
        Ok(log) => {
            let s = ScenarioSummary::from_log(
                &log,
                v1_kmh,
                v2_kmh,
                &ctrl.config.solver,
                &ctrl.config.model,
            );
            (Some(log), s)
        }
        Err(e) => (
            None,
            ScenarioSummary::from_error(ctrl.mode, v1_kmh, v2_kmh, &e),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean_slack: Option<f64>,
    pub mean_cost: Option<f64>,
    pub mean_merge_time: Option<f64>,
}

impl GroupStats {
    fn of(rows: &[&ScenarioSummary]) -> Self {
        let avg = |f: &dyn Fn(&ScenarioSummary) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| mean(v.iter().copied()))
        };
        Self {
            count: rows.len(),
            mean_slack: avg(&|r| r.slack),
            mean_cost: avg(&|r| r.cost),
            mean_merge_time: avg(&|r| r.merge_time),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub front: GroupStats,
    pub behind: GroupStats,
    pub none: usize,
    /// Infeasible starts plus failed runs; left out of every mean.
    pub excluded: usize,
    pub infeasible_starts: usize,
    pub failed: usize,
    /// Mean slack over all completed scenarios.
    pub mean_slack: Option<f64>,
    pub scenarios_with_slack: usize,
    pub max_d_safe: Option<f64>,
    pub certificate_failures: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub scenarios_per_mode: usize,
    pub modes: Vec<ModeReport>,
    pub scenarios: Vec<ScenarioSummary>,
}

/// Aggregate per-scenario rows; modes keep their first-appearance order.
pub fn aggregate(rows: Vec<ScenarioSummary>) -> KpiReport {
    let mut modes: Vec<Mode> = Vec::new();
    for r in &rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let reports: Vec<ModeReport> = modes
        .iter()
        .map(|&m| {
            let all: Vec<&ScenarioSummary> = rows.iter().filter(|r| r.mode == m).collect();
            let done: Vec<&ScenarioSummary> = all
                .iter()
                .copied()
                .filter(|r| r.outcome == Outcome::Completed)
                .collect();
            let pick = |res| -> Vec<&ScenarioSummary> {
                done.iter().copied().filter(|r| r.result == res).collect()
            };
            let infeasible_starts = all
                .iter()
                .filter(|r| r.outcome == Outcome::InfeasibleStart)
                .count();
            let failed = all.iter().filter(|r| r.outcome == Outcome::Failed).count();
            ModeReport {
                mode: m,
                front: GroupStats::of(&pick(MergeResult::Front)),
                behind: GroupStats::of(&pick(MergeResult::Behind)),
                none: pick(MergeResult::None).len(),
                excluded: infeasible_starts + failed,
                infeasible_starts,
                failed,
                mean_slack: (!done.is_empty()).then(|| mean(done.iter().filter_map(|r| r.slack))),
                scenarios_with_slack: done
                    .iter()
                    .filter(|r| r.slack.is_some_and(|s| s > 0.0))
                    .count(),
                max_d_safe: done.iter().filter_map(|r| r.max_d_safe).reduce(f64::max),
                certificate_failures: done.iter().map(|r| r.certificate_failures).sum(),
                fallbacks: done.iter().map(|r| r.fallbacks).sum(),
            }
        })
        .collect();
    let scenarios_per_mode = reports
        .first()
        .map(|r| rows.iter().filter(|s| s.mode == r.mode).count())
        .unwrap_or(0);
    KpiReport {
        scenarios_per_mode,
        modes: reports,
        scenarios: rows,
    }
}

fn cell(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(x) if x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e4) => format!("{x:.2e}"),
        Some(x) => format!("{x:.prec$}"),
        None => String::from("-"),
    }
}

/// Plain-text table with one F and one B row per mode.
pub fn table(report: &KpiReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n = {} scenarios per mode", report.scenarios_per_mode);
    let _ = writeln!(
        s,
        "{:<10} {:>3} {:>6} {:>10} {:>8} {:>9}",
        "mode", "res", "count", "slack", "cost", "merge[s]"
    );
    for m in &report.modes {
        for (tag, g) in [("F", &m.front), ("B", &m.behind)] {
            let _ = writeln!(
                s,
                "{:<10} {:>3} {:>6} {:>10} {:>8} {:>9}",
                m.mode.name(),
                tag,
                g.count,
                cell(g.mean_slack, 3),
                cell(g.mean_cost, 2),
                cell(g.mean_merge_time, 2)
            );
        }
        let _ = writeln!(
            s,
            "{:<10} none {}, infeasible starts {}, failed {}",
            "", m.none, m.infeasible_starts, m.failed
        );
    }
    s
}
