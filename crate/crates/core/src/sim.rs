//! Closed-loop lane-merge scenarios: plant, Agent 2's policy, online GP data and certificates.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, ModelParams, KMH};
use crate::dynamics::{true_step, StateVec};
use crate::error::{invalid, Error, Result};
use crate::gp::{fit_online, observe, GpDataset, GpPosterior};
use crate::ocp::{
    certify_thm1, certify_thm2, fallback, smooth_clamp, solve, CmpcSolution, Controller, NlpDump,
    SolveStatus,
};
use crate::safety::{d_safe, u2_range, Branch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Agent2Policy {
    pub k_v: f64,
    pub k_ds: f64,
    pub delta_s_ref: f64,
    pub delta_s_react: f64,
    /// Agent 2 reacts only while `s² ≥ region_s2_min` and `s¹ < 0`.
    pub region_s2_min: f64,
    /// Defaults to Agent 2's initial speed.
    pub v_ref2: Option<f64>,
}

impl Default for Agent2Policy {
    fn default() -> Self {
        Self {
            k_v: 1.0461,
            k_ds: 0.4472,
            delta_s_ref: 10.0,
            delta_s_react: 10.0,
            region_s2_min: -200.0,
            v_ref2: None,
        }
    }
}

/// Cooperative acceleration of Agent 2, saturated and kept inside `[v2_min, v_max]`.
pub fn agent2_accel(x: &StateVec, v2_ref: f64, pol: &Agent2Policy, mp: &ModelParams) -> f64 {
    let ds = x.delta_s;
    let in_region = x.s2() >= pol.region_s2_min && x.s1 < 0.0;
    let u_ds = if !in_region {
        0.0
    } else if (0.0..=pol.delta_s_react).contains(&ds) {
        pol.k_ds * (pol.delta_s_ref - ds)
    } else if (-pol.delta_s_react..0.0).contains(&ds) {
        pol.k_ds * (-pol.delta_s_ref - ds)
    } else {
        0.0
    };
    let u = (pol.k_v * (v2_ref - x.v2()) + u_ds)
        .max(mp.u2_min)
        .min(mp.u2_max);
    clamp_speed_band(u, x.v2(), mp)
}

/// Keep `v² + Ts·u²` inside `[v2_min, v_max]`.
fn clamp_speed_band(u: f64, v2: f64, mp: &ModelParams) -> f64 {
    let lo = (mp.v2_min - v2) / mp.ts;
    let hi = (mp.v_max - v2) / mp.ts;
    if lo <= hi {
        u.clamp(lo, hi)
    } else {
        u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbancePolicy {
    /// Agent 2 follows [`agent2_accel`].
    Cooperative,
    /// `u² ∈ {u²min, u²max}` drawn uniformly each step.
    ExtremeRandom,
    /// Gap-closing extreme, flipped to the opposite extreme every fourth block of four steps.
    WorstCaseToggle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub v1_0: f64,
    pub v2_0: f64,
    pub s1_0: f64,
    pub s2_0: f64,
    pub steps: usize,
    pub seed: u64,
    /// Run the feasibility certificate of the previous solution at every step.
    pub certify: bool,
    pub agent2: Agent2Policy,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            v1_0: 46.0 * KMH,
            v2_0: 35.0 * KMH,
            s1_0: -200.0,
            s2_0: -180.0,
            steps: 161,
            seed: 0,
            certify: true,
            agent2: Agent2Policy::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, mp: &ModelParams) -> Result<()> {
        if !(0.0..=mp.v_max).contains(&self.v1_0) {
            return Err(invalid("v1_0", "must lie in [0, v_max]"));
        }
        if !(mp.v2_min..=mp.v_max).contains(&self.v2_0) {
            return Err(invalid("v2_0", "must lie in [v2_min, v_max]"));
        }
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if !(self.s1_0.is_finite() && self.s2_0.is_finite()) {
            return Err(Error::NonFinite("initial positions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeResult {
    Front,
    Behind,
    None,
}

/// One executed step; the state is the one measured before applying `u1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub delta_s: f64,
    pub delta_v: f64,
    pub s1: f64,
    pub v1: f64,
    pub s2: f64,
    pub v2: f64,
    pub u1: f64,
    pub u2: f64,
    pub status: SolveStatus,
    pub branch: Option<Branch>,
    pub objective: f64,
    pub eps_l1: f64,
    pub iterations: usize,
    pub d_safe: f64,
    /// Lower bound on `|Δs|` implied by `D_safe ≤ 0` at this state.
    pub gap_bound: f64,
    pub sigma_s2_n: f64,
    pub certificate: Option<bool>,
    pub certificate_violation: Option<f64>,
    /// GP mean along the performance plan stayed inside the disturbance bounds.
    pub gp_in_bounds: Option<bool>,
    /// Every shifted performance safety set contains the tightened robust one.
    pub perf_contains_robust: Option<bool>,
    pub fallback: bool,
    pub gp_points: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLog {
    pub mode: Mode,
    pub v1_0: f64,
    pub v2_0: f64,
    pub steps: Vec<StepRecord>,
    pub merge_time: Option<f64>,
    pub merge_result: MergeResult,
    pub infeasible_start: bool,
    pub certificate_failures: usize,
    pub fallbacks: usize,
    /// Online GP data at the end of the run (modes with a performance plan).
    pub dataset: Option<GpDataset>,
    /// Per-step NLP dumps when the solver's `dump_nlp` flag is set.
    #[serde(skip)]
    pub nlp_dumps: Vec<(usize, NlpDump)>,
}

impl ScenarioLog {
    /// Record of a scenario whose first solve found no feasible robust plan.
    pub fn infeasible(mode: Mode, cfg: &ScenarioConfig) -> Self {
        Self {
            mode,
            v1_0: cfg.v1_0,
            v2_0: cfg.v2_0,
            steps: Vec::new(),
            merge_time: None,
            merge_result: MergeResult::None,
            infeasible_start: true,
            certificate_failures: 0,
            fallbacks: 0,
            dataset: None,
            nlp_dumps: Vec::new(),
        }
    }

    pub fn max_d_safe(&self) -> f64 {
        self.steps
            .iter()
            .map(|r| r.d_safe)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn gap_bound(x: &StateVec, sp: &crate::safety::SafetyParams) -> f64 {
    let (a, _) = crate::safety::activation(x.s1, sp);
    let r = a * sp.required_gap(x.v1);
    libm::sqrt((r * r - sp.delta_smooth * sp.delta_smooth).max(0.0))
}

/// Whether the Agent-2 model the performance plan used stayed inside `W`.
fn gp_in_bounds(sol: &CmpcSolution, gp: &GpPosterior, ctrl: &Controller) -> bool {
    let mp = &ctrl.config.model;
    let clamped = ctrl.mode == Mode::CmpcHard && ctrl.config.solver.hard_clamp_gp;
    let n = sol.x_hat.len().saturating_sub(1);
    sol.x_hat[..n].iter().all(|x| {
        let mut d = gp.mean(&x.to_array());
        if clamped {
            d = smooth_clamp(d, mp.u2_min, mp.u2_max).0;
        }
        (mp.u2_min..=mp.u2_max).contains(&d)
    })
}

/// `k·σ_j ≤ e_j[Δs]` along the horizon, i.e. the performance sets are not tighter
/// than the robust ones. `None` without both plans.
fn perf_contains_robust(sol: &CmpcSolution, ctrl: &Controller) -> Option<bool> {
    if !(ctrl.mode.has_robust() && ctrl.mode.has_performance()) || sol.sigma_s2.is_empty() {
        return None;
    }
    let sp = &ctrl.config.solver;
    let factor = if ctrl.mode.is_soft() {
        sp.sigma_factor
    } else {
        sp.hard_sigma_factor
    };
    Some(
        sol.sigma_s2
            .iter()
            .enumerate()
            .all(|(j, s)| factor * s <= ctrl.margins.delta_s(j) + 1e-12),
    )
}

/// Merge time and result from the first recorded state with `s¹ > 0`.
pub fn merge_outcome(steps: &[StepRecord], ts: f64) -> (Option<f64>, MergeResult) {
    match steps.iter().find(|r| r.s1 > 0.0) {
        Some(r) => {
            let res = if r.delta_s < 0.0 {
                MergeResult::Front
            } else {
                MergeResult::Behind
            };
            (Some(r.k as f64 * ts), res)
        }
        None => (None, MergeResult::None),
    }
}

/// Closed loop with Agent 2 following its cooperative policy.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    ctrl: &Controller,
    clock: &mut dyn FnMut() -> f64,
) -> Result<ScenarioLog> {
    run(cfg, ctrl, DisturbancePolicy::Cooperative, clock)
}

/// Closed loop with Agent 2 replaced by extreme accelerations.
pub fn run_adversarial(
    cfg: &ScenarioConfig,
    ctrl: &Controller,
    policy: DisturbancePolicy,
    clock: &mut dyn FnMut() -> f64,
) -> Result<ScenarioLog> {
    run(cfg, ctrl, policy, clock)
}

fn run(
    cfg: &ScenarioConfig,
    ctrl: &Controller,
    policy: DisturbancePolicy,
    clock: &mut dyn FnMut() -> f64,
) -> Result<ScenarioLog> {
    let mp = ctrl.params().clone();
    cfg.validate(&mp)?;
    let m = ctrl.model;
    let learn = ctrl.mode.has_performance();
    let v2_ref = cfg.agent2.v_ref2.unwrap_or(cfg.v2_0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = StateVec::from_agents(cfg.s1_0, cfg.v1_0, cfg.s2_0, cfg.v2_0)?;
    let mut ds = GpDataset::new(ctrl.config.gp.capacity);
    let mut prev: Option<CmpcSolution> = None;
    let mut u_prev = 0.0;
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut certificate_failures = 0;
    let mut fallbacks = 0;
    let mut nlp_dumps = Vec::new();
    for k in 0..cfg.steps {
        let t0 = clock();
        let gp = if learn {
            let traj: Vec<[f64; 4]> = match &prev {
                Some(p) if !p.x_hat.is_empty() => p.x_hat.iter().map(|s| s.to_array()).collect(),
                _ => alloc::vec![x.to_array(); ctrl.horizon() + 1],
            };
            Some(fit_online(&ds, &traj, &ctrl.config.gp)?)
        } else {
            None
        };
        let prob = ctrl.problem(x, u_prev, gp.as_ref());
        let mut cert = None;
        if cfg.certify {
            if let Some(p) = prev
                .as_ref()
                .filter(|p| p.branch.is_some() && p.is_usable())
            {
                let c = if ctrl.mode.is_soft() {
                    certify_thm2(p, &prob)?
                } else {
                    certify_thm1(p, &prob)?
                };
                if !c.holds {
                    certificate_failures += 1;
                }
                cert = Some(c);
            }
        }
        let mut sol = solve(&prob, prev.as_ref());
        let mut used_fallback = false;
        if !sol.is_usable() {
            if k == 0 {
                return Err(Error::InfeasibleStart);
            }
            if let Some(fb) = prev
                .as_ref()
                .and_then(|p| fallback(p, &prob))
                .filter(|f| f.is_usable())
            {
                sol = fb;
                used_fallback = true;
                fallbacks += 1;
            }
        }
        let in_bounds = gp
            .as_ref()
            .filter(|_| !sol.x_hat.is_empty())
            .map(|g| gp_in_bounds(&sol, g, ctrl));
        // the hard variant's guarantee rests on this; refuse to continue once it fails
        if ctrl.mode == Mode::CmpcHard && in_bounds == Some(false) {
            return Err(Error::AssumptionViolated);
        }
        let u1 = sol.first_input().clamp(mp.u1_min, mp.u1_max);
        let u2 = match policy {
            DisturbancePolicy::Cooperative => agent2_accel(&x, v2_ref, &cfg.agent2, &mp),
            DisturbancePolicy::ExtremeRandom => {
                let u = if rng.gen_bool(0.5) {
                    mp.u2_max
                } else {
                    mp.u2_min
                };
                clamp_speed_band(u, x.v2(), &mp)
            }
            DisturbancePolicy::WorstCaseToggle => {
                let closing = if x.delta_s >= 0.0 {
                    mp.u2_min
                } else {
                    mp.u2_max
                };
                let u = if (k / 4) % 4 == 3 { -closing } else { closing };
                clamp_speed_band(u, x.v2(), &mp)
            }
        };
        debug_assert!({
            let (lo, hi) = u2_range(x.v2(), &ctrl.w, &ctrl.verify, m.ts);
            u2 >= lo - 1e-12 && u2 <= hi + 1e-12
        });
        let x_next = true_step(&x, u1, u2, &m);
        let wall_time = clock() - t0;
        steps.push(StepRecord {
            k,
            t: k as f64 * m.ts,
            delta_s: x.delta_s,
            delta_v: x.delta_v,
            s1: x.s1,
            v1: x.v1,
            s2: x.s2(),
            v2: x.v2(),
            u1,
            u2,
            status: sol.status,
            branch: sol.branch,
            objective: sol.objective,
            eps_l1: sol.eps.iter().map(|e| e.abs()).sum(),
            iterations: sol.iterations,
            d_safe: d_safe(x.s1, x.delta_s, x.v1, &ctrl.config.safety),
            gap_bound: gap_bound(&x, &ctrl.config.safety),
            sigma_s2_n: sol.sigma_s2.last().copied().unwrap_or(0.0),
            certificate: cert.as_ref().map(|c| c.holds),
            certificate_violation: cert.as_ref().map(|c| c.max_violation),
            gp_in_bounds: in_bounds,
            perf_contains_robust: perf_contains_robust(&sol, ctrl),
            fallback: used_fallback,
            gp_points: ds.len(),
            wall_time,
        });
        if learn {
            ds.push(x.to_array(), observe(&x, u1, &x_next, &m));
        }
        u_prev = u1;
        x = x_next;
        if let Some(d) = sol.dump.take() {
            nlp_dumps.push((k, d));
        }
        prev = Some(sol);
    }
    let (merge_time, merge_result) = merge_outcome(&steps, m.ts);
    Ok(ScenarioLog {
        mode: ctrl.mode,
        v1_0: cfg.v1_0,
        v2_0: cfg.v2_0,
        steps,
        merge_time,
        merge_result,
        infeasible_start: false,
        certificate_failures,
        fallbacks,
        dataset: learn.then_some(ds),
        nlp_dumps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(ds: f64, s1: f64, v1: f64, v2: f64) -> StateVec {
        StateVec::new(ds, v2 - v1, s1, v1).unwrap()
    }

    #[test]
    fn agent2_outside_region_tracks_reference() {
        let mp = ModelParams::default();
        let p = Agent2Policy::default();
        let x = state(50.0, 10.0, 10.0, 10.0);
        assert_eq!(agent2_accel(&x, 10.0, &p, &mp), 0.0);
        assert_eq!(
            agent2_accel(&state(50.0, 10.0, 10.0, 8.0), 12.0, &p, &mp),
            0.5
        );
        assert_eq!(
            agent2_accel(&state(50.0, 10.0, 10.0, 12.0), 8.0, &p, &mp),
            -0.5
        );
    }

    #[test]
    fn agent2_reacts_in_region() {
        let mp = ModelParams::default();
        let p = Agent2Policy::default();
        assert_eq!(
            agent2_accel(&state(5.0, -100.0, 10.0, 10.0), 10.0, &p, &mp),
            0.5
        );
        assert_eq!(
            agent2_accel(&state(-5.0, -100.0, 10.0, 10.0), 10.0, &p, &mp),
            -0.5
        );
        // just inside the gain's linear range
        let u = agent2_accel(&state(9.5, -100.0, 10.0, 10.0), 10.0, &p, &mp);
        assert!((u - 0.4472 * 0.5).abs() < 1e-12);
        let u = agent2_accel(&state(-9.5, -100.0, 10.0, 10.0), 10.0, &p, &mp);
        assert!((u + 0.4472 * 0.5).abs() < 1e-12);
        assert_eq!(
            agent2_accel(&state(10.5, -100.0, 10.0, 10.0), 10.0, &p, &mp),
            0.0
        );
    }

    #[test]
    fn agent2_respects_speed_floor() {
        let mp = ModelParams::default();
        let p = Agent2Policy::default();
        let v2 = mp.v2_min + 0.05;
        let u = agent2_accel(&state(-5.0, -100.0, 10.0, v2), v2, &p, &mp);
        assert!((v2 + mp.ts * u - mp.v2_min).abs() < 1e-12);
    }

    #[test]
    fn merge_outcome_first_crossing() {
        let rec = |k: usize, s1: f64, ds: f64| StepRecord {
            k,
            t: 0.0,
            delta_s: ds,
            delta_v: 0.0,
            s1,
            v1: 0.0,
            s2: 0.0,
            v2: 0.0,
            u1: 0.0,
            u2: 0.0,
            status: SolveStatus::Optimal,
            branch: None,
            objective: 0.0,
            eps_l1: 0.0,
            iterations: 0,
            d_safe: 0.0,
            gap_bound: 0.0,
            sigma_s2_n: 0.0,
            certificate: None,
            certificate_violation: None,
            gp_in_bounds: None,
            perf_contains_robust: None,
            fallback: false,
            gp_points: 0,
            wall_time: 0.0,
        };
        let steps: Vec<StepRecord> = (0..60)
            .map(|k| rec(k, if k >= 58 { 1.0 } else { -1.0 }, -20.0))
            .collect();
        assert_eq!(
            merge_outcome(&steps, 0.25),
            (Some(14.5), MergeResult::Front)
        );
        let steps: Vec<StepRecord> = (0..60).map(|k| rec(k, -1.0, 5.0)).collect();
        assert_eq!(merge_outcome(&steps, 0.25), (None, MergeResult::None));
    }
}
