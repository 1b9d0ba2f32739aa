//! Contingency OCP: a robust plan `Ū` and a GP-based performance plan `Û` that
//! share their first input, solved by SQP for each terminal branch.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{ControllerConfig, HessianMode, Mode, ModelParams, SolverParams};
use crate::dynamics::{
    propagate_disturbance_margins, DisturbanceSegment, LinearModel, StateVec, TightenedMargins,
};
use crate::error::{invalid, Result};
use crate::gp::{agent2_pos_std, propagate, GpPosterior, JointCovariance};
use crate::qp::{solve_qp, QpOptions, QpProblem, QpStatus};
use crate::safety::{
    build_terminal_sets, d_safe_eval, d_safe_shifted_eval, d_safe_tightened_eval, terminal_input,
    Branch, Side, TerminalSets, VerifyConfig,
};

/// Floor on the plan weights in the subproblem Hessian, so a zero-weight plan stays well posed.
const PLAN_WEIGHT_FLOOR: f64 = 1e-3;
/// Proximal curvature on the slacks, whose cost is linear.
const SLACK_CURVATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plan {
    Robust,
    Performance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    VelocityLb,
    VelocityUb,
    /// Worst case over the tightening margin.
    DsafeRobust,
    /// Unshifted performance constraint.
    Dsafe,
    DsafeLower,
    DsafeUpper,
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintTag {
    pub plan: Plan,
    pub kind: ConstraintKind,
    pub step: usize,
}

/// Index map of the decision vector `z = [Ū, Û₁.., E]`.
///
/// In the contingency modes `û₀` is stored in the slot of `ū₀`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub horizon: usize,
    pub robust: bool,
    pub performance: bool,
    pub soft: bool,
}

impl Layout {
    pub fn for_mode(mode: Mode, horizon: usize) -> Self {
        Self {
            horizon,
            robust: mode.has_robust(),
            performance: mode.has_performance(),
            soft: mode.is_soft(),
        }
    }

    pub fn n_bar(&self) -> usize {
        if self.robust {
            self.horizon
        } else {
            0
        }
    }

    pub fn n_hat(&self) -> usize {
        match (self.performance, self.robust) {
            (false, _) => 0,
            (true, true) => self.horizon - 1,
            (true, false) => self.horizon,
        }
    }

    pub fn n_eps(&self) -> usize {
        if self.soft {
            self.horizon + 1
        } else {
            0
        }
    }

    pub fn n(&self) -> usize {
        self.n_bar() + self.n_hat() + self.n_eps()
    }

    pub fn ubar(&self, j: usize) -> usize {
        j
    }

    pub fn uhat(&self, j: usize) -> usize {
        if !self.robust {
            j
        } else if j == 0 {
            0
        } else {
            self.horizon + j - 1
        }
    }

    pub fn eps(&self, j: usize) -> usize {
        self.n_bar() + self.n_hat() + j
    }
}

/// `Q (v_ref − v¹)² + R u² + S Δu²`.
pub fn stage_cost(v1: f64, u: f64, du: f64, sp: &SolverParams, v_ref: f64) -> f64 {
    let e = v_ref - v1;
    sp.q * e * e + sp.r * u * u + sp.s * du * du
}

/// Cost of one input sequence from speed `v0`, including the terminal speed term.
pub fn plan_cost(v0: f64, u_prev: f64, u: &[f64], ts: f64, sp: &SolverParams, v_ref: f64) -> f64 {
    let mut v = v0;
    let mut prev = u_prev;
    let mut f = 0.0;
    for &uj in u {
        f += stage_cost(v, uj, uj - prev, sp, v_ref);
        v += ts * uj;
        prev = uj;
    }
    let e = v_ref - v;
    f + sp.q * e * e
}

/// `P·H(Ū) + (1 − P)·H(Û)` (a single plan gets full weight).
pub fn total_cost(
    sol: &CmpcSolution,
    x0: &StateVec,
    u_prev: f64,
    ts: f64,
    sp: &SolverParams,
    v_ref: f64,
) -> f64 {
    let hb = (!sol.u_bar.is_empty()).then(|| plan_cost(x0.v1, u_prev, &sol.u_bar, ts, sp, v_ref));
    let hh = (!sol.u_hat.is_empty()).then(|| plan_cost(x0.v1, u_prev, &sol.u_hat, ts, sp, v_ref));
    match (hb, hh) {
        (Some(b), Some(h)) => sp.p * b + (1.0 - sp.p) * h,
        (Some(b), None) => b,
        (None, Some(h)) => h,
        (None, None) => 0.0,
    }
}

fn plan_cost_grad(
    v0: f64,
    u_prev: f64,
    u: &[f64],
    ts: f64,
    sp: &SolverParams,
    v_ref: f64,
    grad: &mut [f64],
) -> f64 {
    let n = u.len();
    let f = plan_cost(v0, u_prev, u, ts, sp, v_ref);
    // speed-error terms: v_j depends on u_i for i < j
    let mut v = v0;
    let mut tail = 0.0;
    let mut dv = vec![0.0; n + 1];
    for (j, &uj) in u.iter().enumerate() {
        dv[j] = 2.0 * sp.q * (v - v_ref);
        v += ts * uj;
    }
    dv[n] = 2.0 * sp.q * (v - v_ref);
    for i in (0..n).rev() {
        tail += dv[i + 1];
        let prev = if i == 0 { u_prev } else { u[i - 1] };
        let mut g = ts * tail + 2.0 * sp.r * u[i] + 2.0 * sp.s * (u[i] - prev);
        if i + 1 < n {
            g -= 2.0 * sp.s * (u[i + 1] - u[i]);
        }
        grad[i] = g;
    }
    f
}

/// Constant Hessian of the plan cost, row major `n × n`.
fn plan_hessian(n: usize, ts: f64, sp: &SolverParams) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            // number of speed terms v_j with j > max(i, k)
            let cnt = (n - i.max(k)) as f64;
            h[i * n + k] = 2.0 * sp.q * ts * ts * cnt;
        }
    }
    for i in 0..n {
        h[i * n + i] += 2.0 * sp.r + 2.0 * sp.s * if i + 1 < n { 2.0 } else { 1.0 };
        if i + 1 < n {
            h[i * n + i + 1] -= 2.0 * sp.s;
            h[(i + 1) * n + i] -= 2.0 * sp.s;
        }
    }
    h
}

/// Long-lived controller data: model, tightening, terminal sets and precomputed matrices.
#[derive(Debug, Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    pub mode: Mode,
    pub model: LinearModel,
    pub w: DisturbanceSegment,
    pub margins: TightenedMargins,
    pub terminal: TerminalSets,
    pub verify: VerifyConfig,
    phi: Vec<[f64; 4]>,
    hess: Vec<f64>,
    layout: Layout,
}

impl Controller {
    /// Builds and certifies the terminal sets (slow; reuse via [`Controller::with_sets`]).
    pub fn new(config: ControllerConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        let model = config.model.linear_model()?;
        let w = config.model.disturbance(&model)?;
        let verify = config
            .model
            .verify_config(config.solver.horizon, config.terminal.grid_density);
        let sets = build_terminal_sets(&model, &w, &config.safety, &config.terminal, &verify)?;
        Self::with_sets(config, mode, sets)
    }

    pub fn with_sets(config: ControllerConfig, mode: Mode, terminal: TerminalSets) -> Result<Self> {
        config.validate()?;
        let n = config.solver.horizon;
        let model = config.model.linear_model()?;
        let w = config.model.disturbance(&model)?;
        let margins = propagate_disturbance_margins(&model, &w, n)?;
        let verify = config.model.verify_config(n, config.terminal.grid_density);
        let mut phi = Vec::with_capacity(n);
        let mut v = model.b1;
        for _ in 0..n {
            phi.push(v);
            v = model.apply_a(&v);
        }
        let layout = Layout::for_mode(mode, n);
        let hess = build_hessian(&layout, &config.solver, model.ts);
        Ok(Self {
            config,
            mode,
            model,
            w,
            margins,
            terminal,
            verify,
            phi,
            hess,
            layout,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn horizon(&self) -> usize {
        self.config.solver.horizon
    }

    pub fn params(&self) -> &ModelParams {
        &self.config.model
    }

    pub fn problem<'a>(
        &'a self,
        x0: StateVec,
        u_prev: f64,
        gp: Option<&'a GpPosterior>,
    ) -> CmpcProblem<'a> {
        CmpcProblem {
            ctrl: self,
            x0,
            u_prev,
            gp,
        }
    }

    /// Necessary condition for a branch: the extreme input plan reaches its terminal set.
    pub fn branch_reachable(&self, x0: &StateVec, branch: Branch) -> bool {
        let mp = &self.config.model;
        let ts = self.model.ts;
        let mut x = *x0;
        for _ in 0..self.horizon() {
            let u = match branch {
                Branch::Behind => mp.u1_min.max(-x.v1 / ts),
                Branch::Front => mp.u1_max.min((mp.v_max - x.v1) / ts),
            };
            x = crate::dynamics::nominal_step(&x, u.clamp(mp.u1_min, mp.u1_max), &self.model);
        }
        let set = self.terminal.get(branch);
        let (c, n) = set.constraints(&x);
        c[..n].iter().all(|(v, _)| *v <= 1e-6)
    }
}

fn build_hessian(lay: &Layout, sp: &SolverParams, ts: f64) -> Vec<f64> {
    let n = lay.horizon;
    let nz = lay.n();
    let hp = plan_hessian(n, ts, sp);
    let mut h = vec![0.0; nz * nz];
    let (wb, wh) = match (lay.robust, lay.performance) {
        (true, true) => (sp.p, 1.0 - sp.p),
        (true, false) => (1.0, 0.0),
        _ => (0.0, 1.0),
    };
    let mut scatter = |w: f64, idx: &dyn Fn(usize) -> usize| {
        let w = w.max(PLAN_WEIGHT_FLOOR);
        for i in 0..n {
            for k in 0..n {
                h[idx(i) * nz + idx(k)] += w * hp[i * n + k];
            }
        }
    };
    if lay.robust {
        scatter(wb, &|j| lay.ubar(j));
    }
    if lay.performance {
        scatter(wh, &|j| lay.uhat(j));
    }
    if lay.soft {
        for j in 0..=n {
            let e = lay.eps(j);
            h[e * nz + e] += SLACK_CURVATURE;
        }
    }
    h
}

/// One solve instance: the controller at the measured state.
#[derive(Debug, Clone, Copy)]
pub struct CmpcProblem<'a> {
    pub ctrl: &'a Controller,
    pub x0: StateVec,
    pub u_prev: f64,
    pub gp: Option<&'a GpPosterior>,
}

/// Serialized NLP at the returned iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpDump {
    pub layout: Layout,
    pub z: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub tags: Vec<ConstraintTag>,
    pub constraints: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub shift: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmpcSolution {
    pub mode: Mode,
    pub status: SolveStatus,
    pub branch: Option<Branch>,
    pub u_bar: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub eps: Vec<f64>,
    pub x_bar: Vec<StateVec>,
    pub x_hat: Vec<StateVec>,
    /// Std of Agent 2's predicted position, `j = 0..=N`.
    pub sigma_s2: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub branches_solved: usize,
    /// Objective of the other branch when it was solved as well.
    pub alternative_objective: Option<f64>,
    pub dump: Option<NlpDump>,
}

impl CmpcSolution {
    pub fn first_input(&self) -> f64 {
        self.u_bar
            .first()
            .or(self.u_hat.first())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn is_usable(&self) -> bool {
        self.status != SolveStatus::Infeasible
    }
}

struct Eval {
    f: f64,
    grad: Vec<f64>,
    c: Vec<f64>,
    jac: Vec<f64>,
    xbar: Vec<[f64; 4]>,
    xhat: Vec<[f64; 4]>,
}

/// The NLP of one branch.
struct Nlp<'a> {
    prob: &'a CmpcProblem<'a>,
    branch: Option<Branch>,
    lay: Layout,
    shift: Vec<f64>,
    clamp: Option<(f64, f64)>,
}

/// Half-width of the quadratic blend used by [`smooth_clamp`].
const CLAMP_BLEND: f64 = 0.05;

/// C¹ saturation into `[lo, hi]`: identity away from the bounds, quadratic blend of
/// width `2·CLAMP_BLEND` around each bound. Returns the value and its derivative.
pub fn smooth_clamp(y: f64, lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let w = 0.5 * (hi - lo);
    let eta = CLAMP_BLEND.min(0.5 * w);
    let t = y - c;
    let a = t.abs();
    let sign = if t >= 0.0 { 1.0 } else { -1.0 };
    if a <= w - eta {
        (y, 1.0)
    } else if a >= w + eta {
        (c + sign * w, 0.0)
    } else {
        let r = w + eta - a;
        (c + sign * (w - r * r / (4.0 * eta)), r / (2.0 * eta))
    }
}

impl<'a> Nlp<'a> {
    fn new(prob: &'a CmpcProblem<'a>, branch: Option<Branch>, z_ref: &[f64]) -> Self {
        let ctrl = prob.ctrl;
        let lay = ctrl.layout;
        let sp = &ctrl.config.solver;
        let n = lay.horizon;
        let hard = lay.robust && !lay.soft;
        let factor = if hard {
            sp.hard_sigma_factor
        } else {
            sp.sigma_factor
        };
        let clamp = (hard && sp.hard_clamp_gp)
            .then_some((ctrl.config.model.u2_min, ctrl.config.model.u2_max));
        let mut shift = vec![0.0; n + 1];
        if lay.performance && factor > 0.0 {
            if let Some(gp) = prob.gp {
                let u: Vec<f64> = (0..n).map(|j| z_ref[lay.uhat(j)]).collect();
                for (s, sig) in shift
                    .iter_mut()
                    .zip(sigma_profile(gp, &prob.x0, &u, &ctrl.model))
                {
                    *s = factor * sig;
                }
            }
        }
        Self {
            prob,
            branch,
            lay,
            shift,
            clamp,
        }
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mp = &self.prob.ctrl.config.model;
        let nz = self.lay.n();
        let ne = self.lay.n_eps();
        let mut lb = vec![mp.u1_min; nz];
        let mut ub = vec![mp.u1_max; nz];
        for k in nz - ne..nz {
            lb[k] = 0.0;
            ub[k] = f64::INFINITY;
        }
        (lb, ub)
    }

    fn eval(&self, z: &[f64], want_jac: bool, mut tags: Option<&mut Vec<ConstraintTag>>) -> Eval {
        let ctrl = self.prob.ctrl;
        let lay = self.lay;
        let sp = &ctrl.config.solver;
        let mp = &ctrl.config.model;
        let sf = &ctrl.config.safety;
        let m = &ctrl.model;
        let n = lay.horizon;
        let nz = lay.n();
        let x0 = self.prob.x0.to_array();
        let mut c = Vec::new();
        let mut jac = Vec::new();
        let mut push = |tag: ConstraintTag, value: f64, row: Option<Vec<f64>>| {
            c.push(value);
            if let Some(r) = row {
                jac.extend_from_slice(&r);
            }
            if let Some(t) = tags.as_deref_mut() {
                t.push(tag);
            }
        };

        // objective
        let mut grad = vec![0.0; nz];
        let mut f = 0.0;
        let (wb, wh) = match (lay.robust, lay.performance) {
            (true, true) => (sp.p, 1.0 - sp.p),
            (true, false) => (1.0, 0.0),
            _ => (0.0, 1.0),
        };
        let mut g = vec![0.0; n];
        if lay.robust {
            let u: Vec<f64> = (0..n).map(|j| z[lay.ubar(j)]).collect();
            f += wb
                * plan_cost_grad(
                    self.prob.x0.v1,
                    self.prob.u_prev,
                    &u,
                    m.ts,
                    sp,
                    mp.v_ref1,
                    &mut g,
                );
            for j in 0..n {
                grad[lay.ubar(j)] += wb * g[j];
            }
        }
        if lay.performance {
            let u: Vec<f64> = (0..n).map(|j| z[lay.uhat(j)]).collect();
            f += wh
                * plan_cost_grad(
                    self.prob.x0.v1,
                    self.prob.u_prev,
                    &u,
                    m.ts,
                    sp,
                    mp.v_ref1,
                    &mut g,
                );
            for j in 0..n {
                grad[lay.uhat(j)] += wh * g[j];
            }
        }
        if lay.soft {
            for j in 0..=n {
                f += sp.rho * z[lay.eps(j)];
                grad[lay.eps(j)] += sp.rho;
            }
        }

        // robust plan: x̄_j = A^j x₀ + Σ_{i<j} A^{j−1−i} B1 ū_i
        let mut xbar = Vec::new();
        if lay.robust {
            xbar.push(x0);
            for j in 0..n {
                let ax = m.apply_a(&xbar[j]);
                let u = z[lay.ubar(j)];
                xbar.push(core::array::from_fn(|k| ax[k] + m.b1[k] * u));
            }
            let row_of = |gs: [f64; 4], j: usize| -> Option<Vec<f64>> {
                want_jac.then(|| {
                    let mut r = vec![0.0; nz];
                    for i in 0..j {
                        let p = &ctrl.phi[j - 1 - i];
                        r[lay.ubar(i)] = (0..4).map(|k| gs[k] * p[k]).sum();
                    }
                    r
                })
            };
            for j in 1..=n {
                let x = xbar[j];
                let tag = |kind| ConstraintTag {
                    plan: Plan::Robust,
                    kind,
                    step: j,
                };
                push(
                    tag(ConstraintKind::VelocityUb),
                    x[3] - mp.v_max,
                    row_of([0.0, 0.0, 0.0, 1.0], j),
                );
                push(
                    tag(ConstraintKind::VelocityLb),
                    -x[3],
                    row_of([0.0, 0.0, 0.0, -1.0], j),
                );
                let ev = d_safe_tightened_eval(x[2], x[0], x[3], ctrl.margins.delta_s(j), sf);
                push(
                    tag(ConstraintKind::DsafeRobust),
                    ev.value,
                    row_of(ev.state_grad(), j),
                );
            }
            if let Some(b) = self.branch {
                let (cs, cnt) = ctrl
                    .terminal
                    .get(b)
                    .constraints(&StateVec::from_array(xbar[n]));
                for (v, gs) in &cs[..cnt] {
                    push(
                        ConstraintTag {
                            plan: Plan::Robust,
                            kind: ConstraintKind::Terminal,
                            step: n,
                        },
                        *v,
                        row_of(*gs, n),
                    );
                }
            }
        }

        // performance plan with the GP mean as Agent 2's input
        let mut xhat = Vec::new();
        if lay.performance {
            xhat.push(x0);
            let mut sens: Vec<[Vec<f64>; 4]> = Vec::new();
            if want_jac {
                sens.push(core::array::from_fn(|_| vec![0.0; n]));
            }
            for j in 0..n {
                let x = xhat[j];
                let (mut d, mut gd) = match self.prob.gp {
                    Some(gp) if !gp.is_prior() => gp.eval_mean(&x),
                    _ => (0.0, [0.0; 4]),
                };
                if let Some((lo, hi)) = self.clamp {
                    let (v, dv) = smooth_clamp(d, lo, hi);
                    d = v;
                    gd = gd.map(|g| g * dv);
                }
                let ax = m.apply_a(&x);
                let u = z[lay.uhat(j)];
                xhat.push(core::array::from_fn(|k| ax[k] + m.b1[k] * u + m.b2[k] * d));
                if want_jac {
                    let s = &sens[j];
                    let mut gs = vec![0.0; n];
                    for (k, gk) in gd.iter().enumerate() {
                        if *gk != 0.0 {
                            for i in 0..j {
                                gs[i] += gk * s[k][i];
                            }
                        }
                    }
                    let next: [Vec<f64>; 4] = core::array::from_fn(|r| {
                        let mut v = vec![0.0; n];
                        for i in 0..j {
                            v[i] =
                                (0..4).map(|k| m.a[r][k] * s[k][i]).sum::<f64>() + m.b2[r] * gs[i];
                        }
                        v[j] = m.b1[r];
                        v
                    });
                    sens.push(next);
                }
            }
            let row_of = |gs: [f64; 4], j: usize, eps: bool| -> Option<Vec<f64>> {
                want_jac.then(|| {
                    let mut r = vec![0.0; nz];
                    for i in 0..j {
                        r[lay.uhat(i)] += (0..4).map(|k| gs[k] * sens[j][k][i]).sum::<f64>();
                    }
                    if eps {
                        r[lay.eps(j)] = -1.0;
                    }
                    r
                })
            };
            if lay.soft {
                let ev = d_safe_eval(x0[2], x0[0], x0[3], sf);
                let tag = ConstraintTag {
                    plan: Plan::Performance,
                    kind: ConstraintKind::Dsafe,
                    step: 0,
                };
                push(tag, ev.value - z[lay.eps(0)], row_of([0.0; 4], 0, true));
            }
            for j in 1..=n {
                let x = xhat[j];
                let tag = |kind| ConstraintTag {
                    plan: Plan::Performance,
                    kind,
                    step: j,
                };
                push(
                    tag(ConstraintKind::VelocityUb),
                    x[3] - mp.v_max,
                    row_of([0.0, 0.0, 0.0, 1.0], j, false),
                );
                push(
                    tag(ConstraintKind::VelocityLb),
                    -x[3],
                    row_of([0.0, 0.0, 0.0, -1.0], j, false),
                );
                let e = if lay.soft { z[lay.eps(j)] } else { 0.0 };
                let sides: &[(ConstraintKind, Side)] = if self.shift[j] > 0.0 {
                    &[
                        (ConstraintKind::DsafeLower, Side::Lower),
                        (ConstraintKind::DsafeUpper, Side::Upper),
                    ]
                } else {
                    &[(ConstraintKind::Dsafe, Side::Lower)]
                };
                for &(kind, side) in sides {
                    let ev = d_safe_shifted_eval(x[2], x[0], x[3], self.shift[j], side, sf);
                    push(
                        tag(kind),
                        ev.value - e,
                        row_of(ev.state_grad(), j, lay.soft),
                    );
                }
            }
        }
        Eval {
            f,
            grad,
            c,
            jac,
            xbar,
            xhat,
        }
    }

    fn tags(&self, z: &[f64]) -> Vec<ConstraintTag> {
        let mut t = Vec::new();
        self.eval(z, false, Some(&mut t));
        t
    }

    /// Raise each slack to the residual of its constraints.
    fn fit_slacks(&self, z: &mut [f64]) {
        if !self.lay.soft {
            return;
        }
        for k in 0..=self.lay.horizon {
            z[self.lay.eps(k)] = 0.0;
        }
        let mut tags = Vec::new();
        let ev = self.eval(z, false, Some(&mut tags));
        for (t, v) in tags.iter().zip(&ev.c) {
            if t.plan == Plan::Performance
                && matches!(
                    t.kind,
                    ConstraintKind::Dsafe | ConstraintKind::DsafeLower | ConstraintKind::DsafeUpper
                )
            {
                let e = &mut z[self.lay.eps(t.step)];
                *e = e.max(*v);
            }
        }
    }
}

/// `σ_{s²}` along the performance rollout of `u` under Taylor propagation.
pub fn sigma_profile(gp: &GpPosterior, x0: &StateVec, u: &[f64], m: &LinearModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() + 1);
    let mut x = *x0;
    let mut cov = JointCovariance::zero();
    out.push(0.0);
    for &uj in u {
        let (xn, cn) = propagate(gp, &x, &cov, uj, m);
        out.push(agent2_pos_std(&cn));
        x = xn;
        cov = cn;
    }
    out
}

/// Powell-damped BFGS update keeping `h` positive definite.
fn damped_bfgs(h: &mut [f64], n: usize, s: &[f64], y: &[f64]) {
    let bs: Vec<f64> = (0..n)
        .map(|i| {
            h[i * n..(i + 1) * n]
                .iter()
                .zip(s)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let sbs: f64 = s.iter().zip(&bs).map(|(a, b)| a * b).sum();
    if !(sbs > 1e-16) {
        return;
    }
    let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    let theta = if sy >= 0.2 * sbs {
        1.0
    } else {
        0.8 * sbs / (sbs - sy)
    };
    let r: Vec<f64> = (0..n)
        .map(|i| theta * y[i] + (1.0 - theta) * bs[i])
        .collect();
    let sr: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
    if !(sr > 1e-16) {
        return;
    }
    for i in 0..n {
        for k in 0..n {
            h[i * n + k] += r[i] * r[k] / sr - bs[i] * bs[k] / sbs;
        }
    }
}

fn violation(c: &[f64]) -> (f64, f64) {
    c.iter()
        .fold((0.0, 0.0), |(s, mx), v| (s + v.max(0.0), mx.max(*v)))
}

struct SqpOutcome {
    z: Vec<f64>,
    eval: Eval,
    lambda: Vec<f64>,
    status: SolveStatus,
    iterations: usize,
    kkt: f64,
    max_violation: f64,
}

fn sqp(nlp: &Nlp, z0: Vec<f64>) -> SqpOutcome {
    let ctrl = nlp.prob.ctrl;
    let sp = &ctrl.config.solver;
    let nz = nlp.lay.n();
    let (lb, ub) = nlp.bounds();
    let mut z: Vec<f64> = z0
        .iter()
        .zip(lb.iter().zip(&ub))
        .map(|(v, (l, u))| v.clamp(*l, *u))
        .collect();
    nlp.fit_slacks(&mut z);
    let mut ev = nlp.eval(&z, true, None);
    let mut hess = ctrl.hess.clone();
    let mut nu: f64 = 0.0;
    let mut lambda = vec![0.0; ev.c.len()];
    let mut kkt = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let mut infeasible_qps = 0;
    let mut iterations = 0;
    let opts = QpOptions::default();
    let zeros = vec![0.0; nz];
    while iterations < sp.max_iter {
        iterations += 1;
        let b: Vec<f64> = ev.c.iter().map(|v| -v).collect();
        let dlb: Vec<f64> = lb.iter().zip(&z).map(|(l, v)| l - v).collect();
        let dub: Vec<f64> = ub.iter().zip(&z).map(|(u, v)| u - v).collect();
        let qp = QpProblem {
            n: nz,
            h: &hess,
            g: &ev.grad,
            a: &ev.jac,
            b: &b,
            lb: &dlb,
            ub: &dub,
        };
        let sol = solve_qp(&qp, &zeros, &opts);
        if sol.status == QpStatus::MaxIter {
            break;
        }
        let d = sol.x;
        let (sum_v, max_v) = violation(&ev.c);
        let hd_inf = (0..nz)
            .map(|i| {
                hess[i * nz..(i + 1) * nz]
                    .iter()
                    .zip(&d)
                    .map(|(h, v)| h * v)
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max);
        let g_inf = ev.grad.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let d_inf = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if sol.status == QpStatus::Optimal {
            infeasible_qps = 0;
            lambda = sol.lambda.clone();
            kkt = hd_inf / g_inf;
            if max_v <= sp.tol_feas && (kkt <= sp.tol_kkt || d_inf <= 1e-10) {
                status = SolveStatus::Optimal;
                break;
            }
        } else {
            infeasible_qps += 1;
            if infeasible_qps >= 8 {
                status = SolveStatus::Infeasible;
                break;
            }
        }
        let lam_max = sol.lambda.iter().fold(0.0f64, |a, v| a.max(*v));
        let need = 1.5 * lam_max + 1.0;
        // an elastic QP can leave a huge penalty behind; let it relax once the QP is regular
        nu = if sol.status == QpStatus::Optimal {
            need.max(nu.min(10.0 * need))
        } else {
            nu.max(need)
        };
        let lin_v: f64 = (0..ev.c.len())
            .map(|r| {
                (ev.c[r]
                    + ev.jac[r * nz..(r + 1) * nz]
                        .iter()
                        .zip(&d)
                        .map(|(a, v)| a * v)
                        .sum::<f64>())
                .max(0.0)
            })
            .sum();
        let gd: f64 = ev.grad.iter().zip(&d).map(|(a, v)| a * v).sum();
        let slope = gd - nu * (sum_v - lin_v);
        let phi0 = ev.f + nu * sum_v;
        let mut alpha = 1.0;
        let mut accepted = None;
        let full: Vec<f64> = (0..nz).map(|i| (z[i] + d[i]).clamp(lb[i], ub[i])).collect();
        let ef = nlp.eval(&full, false, None);
        if ef.f + nu * violation(&ef.c).0 > phi0 + sp.armijo * slope.min(0.0)
            && sol.status == QpStatus::Optimal
        {
            // second-order correction: relinearise the constraints at the full step
            let bs: Vec<f64> = (0..ev.c.len())
                .map(|r| {
                    -(ef.c[r]
                        - ev.jac[r * nz..(r + 1) * nz]
                            .iter()
                            .zip(&d)
                            .map(|(a, v)| a * v)
                            .sum::<f64>())
                })
                .collect();
            let qs = QpProblem {
                n: nz,
                h: &hess,
                g: &ev.grad,
                a: &ev.jac,
                b: &bs,
                lb: &dlb,
                ub: &dub,
            };
            let cs = solve_qp(&qs, &d, &opts);
            if cs.status == QpStatus::Optimal {
                let zt: Vec<f64> = (0..nz)
                    .map(|i| (z[i] + cs.x[i]).clamp(lb[i], ub[i]))
                    .collect();
                let et = nlp.eval(&zt, false, None);
                if et.f + nu * violation(&et.c).0 <= phi0 + sp.armijo * slope.min(0.0) {
                    accepted = Some(zt);
                }
            }
            alpha *= sp.backtrack;
        } else {
            accepted = Some(full);
        }
        while accepted.is_none() && alpha > 1e-10 {
            let zt: Vec<f64> = (0..nz)
                .map(|i| (z[i] + alpha * d[i]).clamp(lb[i], ub[i]))
                .collect();
            let et = nlp.eval(&zt, false, None);
            let phit = et.f + nu * violation(&et.c).0;
            if phit <= phi0 + sp.armijo * alpha * slope.min(0.0) {
                accepted = Some(zt);
                break;
            }
            alpha *= sp.backtrack;
        }
        match accepted {
            Some(zt) => {
                let step: Vec<f64> = (0..nz).map(|i| zt[i] - z[i]).collect();
                z = zt;
                let next = nlp.eval(&z, true, None);
                if sp.hessian == HessianMode::DampedBfgs {
                    let m = next.c.len();
                    let lag = |e: &Eval| -> Vec<f64> {
                        let mut g = e.grad.clone();
                        for r in 0..m {
                            let l = sol.lambda[r];
                            if l != 0.0 {
                                for (gi, a) in g.iter_mut().zip(&e.jac[r * nz..(r + 1) * nz]) {
                                    *gi += l * a;
                                }
                            }
                        }
                        g
                    };
                    let (g1, g0) = (lag(&next), lag(&ev));
                    let y: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
                    damped_bfgs(&mut hess, nz, &step, &y);
                }
                ev = next;
            }
            None => {
                // no merit decrease possible along the step: stationary for the merit
                if max_v <= sp.tol_feas && sol.status == QpStatus::Optimal {
                    status = SolveStatus::Optimal;
                }
                break;
            }
        }
    }
    let max_violation = violation(&ev.c).1.max(0.0);
    if status != SolveStatus::Optimal && max_violation > sp.tol_feas {
        status = SolveStatus::Infeasible;
    }
    SqpOutcome {
        z,
        eval: ev,
        lambda,
        status,
        iterations,
        kkt,
        max_violation,
    }
}

/// Decision vector from separate plans (`û₀` taken from `ū₀` when both exist).
fn pack(lay: &Layout, ubar: &[f64], uhat: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; lay.n()];
    if lay.robust {
        for j in 0..lay.horizon {
            z[lay.ubar(j)] = ubar[j];
        }
    }
    if lay.performance {
        for j in (if lay.robust { 1 } else { 0 })..lay.horizon {
            z[lay.uhat(j)] = uhat[j];
        }
    }
    z
}

fn heuristic_plan(ctrl: &Controller, x0: &StateVec, branch: Option<Branch>) -> Vec<f64> {
    let mp = &ctrl.config.model;
    let ts = ctrl.model.ts;
    let mut v = x0.v1;
    (0..ctrl.horizon())
        .map(|_| {
            let u = match branch {
                Some(Branch::Front) => (mp.v_max - v) / ts,
                Some(Branch::Behind) => -0.5 * v / ts,
                None => 0.25 * (mp.v_ref1 - v) / ts,
            }
            .clamp(mp.u1_min, mp.u1_max);
            v += ts * u;
            u
        })
        .collect()
}

fn shifted(u: &[f64], pad: f64) -> Vec<f64> {
    let mut out: Vec<f64> = u.iter().skip(1).copied().collect();
    out.push(pad);
    out
}

/// Shifted robust plan padded with the certified terminal input.
fn shifted_robust(ctrl: &Controller, prev: &CmpcSolution, branch: Branch) -> Vec<f64> {
    let xn = prev.x_bar.last().copied().unwrap_or(StateVec::zero());
    let kappa = terminal_input(
        ctrl.terminal.get(branch),
        &xn,
        &ctrl.model,
        &ctrl.w,
        &ctrl.verify,
    );
    shifted(&prev.u_bar, kappa)
}

fn warm_start(prob: &CmpcProblem, branch: Option<Branch>, prev: Option<&CmpcSolution>) -> Vec<f64> {
    let ctrl = prob.ctrl;
    let lay = ctrl.layout;
    let same = prev.filter(|p| p.branch == branch && p.is_usable());
    let ubar = match (branch, same) {
        (Some(b), Some(p)) if !p.u_bar.is_empty() => shifted_robust(ctrl, p, b),
        _ => heuristic_plan(ctrl, &prob.x0, branch),
    };
    let uhat = match prev.filter(|p| p.is_usable() && !p.u_hat.is_empty()) {
        Some(p) => shifted(&p.u_hat, *p.u_hat.last().unwrap_or(&0.0)),
        None if lay.robust => ubar.clone(),
        None => heuristic_plan(ctrl, &prob.x0, None),
    };
    pack(&lay, &ubar, &uhat)
}

fn outcome_to_solution(nlp: &Nlp, out: SqpOutcome, dump: bool) -> CmpcSolution {
    let ctrl = nlp.prob.ctrl;
    let lay = nlp.lay;
    let n = lay.horizon;
    let u_bar = if lay.robust {
        (0..n).map(|j| out.z[lay.ubar(j)]).collect()
    } else {
        Vec::new()
    };
    let u_hat = if lay.performance {
        (0..n).map(|j| out.z[lay.uhat(j)]).collect()
    } else {
        Vec::new()
    };
    let eps = if lay.soft {
        (0..=n).map(|j| out.z[lay.eps(j)]).collect()
    } else {
        Vec::new()
    };
    let sigma_s2 = match (nlp.prob.gp, lay.performance) {
        (Some(gp), true) => sigma_profile(gp, &nlp.prob.x0, &u_hat, &ctrl.model),
        _ => Vec::new(),
    };
    let dump = dump.then(|| {
        let (lb, ub) = nlp.bounds();
        NlpDump {
            layout: lay,
            tags: nlp.tags(&out.z),
            z: out.z.clone(),
            lb,
            ub,
            constraints: out.eval.c.clone(),
            multipliers: out.lambda.clone(),
            shift: nlp.shift.clone(),
            objective: out.eval.f,
        }
    });
    CmpcSolution {
        mode: ctrl.mode,
        status: out.status,
        branch: nlp.branch,
        u_bar,
        u_hat,
        eps,
        x_bar: out
            .eval
            .xbar
            .iter()
            .map(|x| StateVec::from_array(*x))
            .collect(),
        x_hat: out
            .eval
            .xhat
            .iter()
            .map(|x| StateVec::from_array(*x))
            .collect(),
        sigma_s2,
        objective: out.eval.f,
        kkt_residual: out.kkt,
        max_violation: out.max_violation,
        iterations: out.iterations,
        branches_solved: 1,
        alternative_objective: None,
        dump,
    }
}

fn solve_branch(prob: &CmpcProblem, branch: Option<Branch>, z0: Vec<f64>) -> CmpcSolution {
    let nlp = Nlp::new(prob, branch, &z0);
    let lay = nlp.lay;
    let tol = prob.ctrl.config.solver.tol_feas;
    let mut out = sqp(&nlp, z0.clone());
    let slack = |o: &SqpOutcome| {
        if lay.soft {
            (0..=lay.horizon).map(|j| o.z[lay.eps(j)]).sum()
        } else {
            0.0
        }
    };
    if out.status != SolveStatus::Optimal || slack(&out) > tol {
        // the warm start can lead into a poor local solution of the nonconvex NLP;
        // retry from starts that need no slack whenever the robust plan is feasible
        let mut starts = Vec::new();
        if lay.robust && lay.performance {
            let mut z1 = z0;
            for j in 1..lay.horizon {
                z1[lay.uhat(j)] = z1[lay.ubar(j)];
            }
            starts.push(z1);
        }
        if lay.soft {
            starts.push(warm_start(prob, branch, None));
        }
        let mut total = out.iterations;
        for z in starts {
            let retry = sqp(&nlp, z);
            total += retry.iterations;
            if (rank(&retry.status), retry.eval.f) < (rank(&out.status), out.eval.f) {
                out = retry;
            }
            if out.status == SolveStatus::Optimal && slack(&out) <= tol {
                break;
            }
        }
        out.iterations = total;
    }
    outcome_to_solution(&nlp, out, prob.ctrl.config.solver.dump_nlp)
}

fn rank(s: &SolveStatus) -> u8 {
    match s {
        SolveStatus::Optimal => 0,
        SolveStatus::MaxIter => 1,
        SolveStatus::Infeasible => 2,
    }
}

/// Solve every admissible branch and keep the best usable one.
pub fn solve(prob: &CmpcProblem, warm: Option<&CmpcSolution>) -> CmpcSolution {
    let ctrl = prob.ctrl;
    if !ctrl.layout.robust {
        return solve_branch(prob, None, warm_start(prob, None, warm));
    }
    let first = warm.and_then(|w| w.branch).unwrap_or(Branch::Behind);
    let mut best: Option<CmpcSolution> = None;
    let mut solved = 0;
    let mut other_obj = None;
    for b in [first, first.other()] {
        if !ctrl.branch_reachable(&prob.x0, b) {
            continue;
        }
        solved += 1;
        let sol = solve_branch(prob, Some(b), warm_start(prob, Some(b), warm));
        best = match best {
            None => Some(sol),
            Some(cur) => {
                let better =
                    (rank(&sol.status), sol.objective) < (rank(&cur.status), cur.objective);
                if better {
                    if cur.is_usable() {
                        other_obj = Some(cur.objective);
                    }
                    Some(sol)
                } else {
                    if sol.is_usable() {
                        other_obj = Some(sol.objective);
                    }
                    Some(cur)
                }
            }
        };
    }
    match best {
        Some(mut s) => {
            s.branches_solved = solved;
            s.alternative_objective = other_obj;
            s
        }
        None => {
            // no branch can reach its terminal set
            let mut s = solve_branch(prob, Some(first), warm_start(prob, Some(first), warm));
            s.status = SolveStatus::Infeasible;
            s.branches_solved = 0;
            s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    /// Hard variant: candidate satisfies every constraint without slack.
    Hard,
    /// Soft variant: candidate with slacks raised to the residuals.
    Soft,
}

/// Check of the shifted candidate in the next problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCertificate {
    pub kind: CertificateKind,
    pub branch: Option<Branch>,
    pub candidate: Vec<f64>,
    pub max_violation: f64,
    pub worst: Option<ConstraintTag>,
    pub holds: bool,
}

/// Check a robust input sequence, copied into the performance plan, in `next`.
pub fn certify_candidate(
    ubar: &[f64],
    branch: Branch,
    next: &CmpcProblem,
    kind: CertificateKind,
) -> Result<FeasibilityCertificate> {
    let ctrl = next.ctrl;
    let lay = ctrl.layout;
    if !lay.robust {
        return Err(invalid("mode", "certificates need a robust plan"));
    }
    if ubar.len() != lay.horizon {
        return Err(invalid("ubar", "candidate has the wrong length"));
    }
    let mut z = pack(&lay, ubar, ubar);
    let nlp = Nlp::new(next, Some(branch), &z);
    if kind == CertificateKind::Soft {
        nlp.fit_slacks(&mut z);
    }
    let mut tags = Vec::new();
    let ev = nlp.eval(&z, false, Some(&mut tags));
    let mp = &ctrl.config.model;
    let mut worst = None;
    let mut max_v = f64::NEG_INFINITY;
    for (t, v) in tags.iter().zip(&ev.c) {
        if *v > max_v {
            max_v = *v;
            worst = Some(*t);
        }
    }
    let bound_v = ubar
        .iter()
        .map(|u| (mp.u1_min - u).max(u - mp.u1_max))
        .fold(f64::NEG_INFINITY, f64::max);
    let max_violation = max_v.max(bound_v);
    Ok(FeasibilityCertificate {
        kind,
        branch: Some(branch),
        candidate: z,
        max_violation,
        worst,
        holds: max_violation <= ctrl.config.solver.tol_feas,
    })
}

fn certify(
    prev: &CmpcSolution,
    next: &CmpcProblem,
    kind: CertificateKind,
) -> Result<FeasibilityCertificate> {
    let branch = prev
        .branch
        .ok_or_else(|| invalid("prev", "certificates need a robust plan"))?;
    if prev.u_bar.len() != next.ctrl.horizon() {
        return Err(invalid("prev", "robust plan has the wrong length"));
    }
    certify_candidate(&shifted_robust(next.ctrl, prev, branch), branch, next, kind)
}

/// Solution built from the shifted previous robust plan, used when a solve fails.
pub fn fallback(prev: &CmpcSolution, next: &CmpcProblem) -> Option<CmpcSolution> {
    let branch = prev.branch?;
    let ctrl = next.ctrl;
    if prev.u_bar.len() != ctrl.horizon() {
        return None;
    }
    let ubar = shifted_robust(ctrl, prev, branch);
    let lay = ctrl.layout;
    let mut z = pack(&lay, &ubar, &ubar);
    let nlp = Nlp::new(next, Some(branch), &z);
    nlp.fit_slacks(&mut z);
    let eval = nlp.eval(&z, false, None);
    let max_violation = violation(&eval.c).1.max(0.0);
    let status = if max_violation <= ctrl.config.solver.tol_feas {
        SolveStatus::MaxIter
    } else {
        SolveStatus::Infeasible
    };
    let m = eval.c.len();
    let out = SqpOutcome {
        z,
        eval,
        lambda: vec![0.0; m],
        status,
        iterations: 0,
        kkt: f64::INFINITY,
        max_violation,
    };
    Some(outcome_to_solution(&nlp, out, false))
}

/// Shifted robust plan reused as the performance plan.
pub fn certify_thm1(prev: &CmpcSolution, next: &CmpcProblem) -> Result<FeasibilityCertificate> {
    certify(prev, next, CertificateKind::Hard)
}

/// As [`certify_thm1`] with slacks set to `max(0, residual)`.
pub fn certify_thm2(prev: &CmpcSolution, next: &CmpcProblem) -> Result<FeasibilityCertificate> {
    certify(prev, next, CertificateKind::Soft)
}

/// Objective, constraints (`≤ 0`) and first derivatives of one branch's NLP.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpEvaluation {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub constraints: Vec<f64>,
    /// Row-major, one row of `layout.n()` entries per constraint.
    pub jacobian: Vec<f64>,
    pub tags: Vec<ConstraintTag>,
}

/// Evaluate the NLP at `z` with the covariance shift frozen at `z_ref`, as inside
/// one SQP iteration. Simple bounds on `z` are not part of `constraints`.
pub fn evaluate_nlp(
    prob: &CmpcProblem,
    branch: Option<Branch>,
    z_ref: &[f64],
    z: &[f64],
) -> Result<NlpEvaluation> {
    let n = prob.ctrl.layout.n();
    if z.len() != n || z_ref.len() != n {
        return Err(invalid("z", "length does not match the layout"));
    }
    if branch.is_some() != prob.ctrl.layout.robust {
        return Err(invalid(
            "branch",
            "robust modes need a terminal branch, gpmpc none",
        ));
    }
    let nlp = Nlp::new(prob, branch, z_ref);
    let mut tags = Vec::new();
    let ev = nlp.eval(z, true, Some(&mut tags));
    Ok(NlpEvaluation {
        objective: ev.f,
        gradient: ev.grad,
        constraints: ev.c,
        jacobian: ev.jac,
        tags,
    })
}
