//! Smooth safety distance, its tightened and GP-shifted variants, the terminal
//! sets and their robust-invariance check.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate_disturbance_margins, DisturbanceSegment, LinearModel, StateVec};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyParams {
    pub d_min: f64,
    pub tau: f64,
    pub delta_smooth: f64,
    pub beta_act: f64,
    pub s_act: f64,
    pub safety_margin: f64,
}

impl Default for SafetyParams {
    fn default() -> Self {
        Self {
            d_min: 5.0,
            tau: 0.5,
            delta_smooth: 1.0,
            beta_act: 0.1,
            s_act: -50.0,
            safety_margin: 1.0,
        }
    }
}

impl SafetyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0) {
            return Err(invalid("d_min", "must be positive"));
        }
        if !(self.tau >= 0.0) {
            return Err(invalid("tau", "must be nonnegative"));
        }
        if !(self.delta_smooth > 0.0) {
            return Err(invalid("delta_smooth", "must be positive"));
        }
        if !(self.beta_act > 0.0) {
            return Err(invalid("beta_act", "must be positive"));
        }
        if !(self.s_act < 0.0) {
            return Err(invalid(
                "s_act",
                "activation center must lie before the merge point",
            ));
        }
        if !(self.safety_margin >= 0.0) {
            return Err(invalid("safety_margin", "must be nonnegative"));
        }
        Ok(())
    }

    /// Required gap `d_min + τ v¹ + margin`.
    pub fn required_gap(&self, v1: f64) -> f64 {
        self.d_min + self.tau * v1 + self.safety_margin
    }
}

/// Logistic activation `α(s¹)` and its derivative.
pub fn activation(s1: f64, p: &SafetyParams) -> (f64, f64) {
    let a = 1.0 / (1.0 + libm::exp(-p.beta_act * (s1 - p.s_act)));
    (a, p.beta_act * a * (1.0 - a))
}

/// Value and gradient with respect to `(Δs, s¹, v¹)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyEval {
    pub value: f64,
    pub d_delta_s: f64,
    pub d_s1: f64,
    pub d_v1: f64,
}

impl SafetyEval {
    /// Gradient laid out over the state `[Δs, Δv, s¹, v¹]`.
    pub fn state_grad(&self) -> [f64; 4] {
        [self.d_delta_s, 0.0, self.d_s1, self.d_v1]
    }
}

/// Core evaluation with the gap measured as `sqrt(g² + δ²)` for an effective gap `g`
/// whose derivative with respect to Δs is `dg`.
fn eval_with_gap(s1: f64, g: f64, dg: f64, v1: f64, p: &SafetyParams) -> SafetyEval {
    let (a, da) = activation(s1, p);
    let req = p.required_gap(v1);
    let h = libm::sqrt(g * g + p.delta_smooth * p.delta_smooth);
    SafetyEval {
        value: a * req - h,
        d_delta_s: -g * dg / h,
        d_s1: da * req,
        d_v1: a * p.tau,
    }
}

/// `D_safe = α(s¹)(d_min + τ v¹ + margin) − sqrt(Δs² + δ²)`; `≤ 0` means safe.
pub fn d_safe(s1: f64, delta_s: f64, v1: f64, p: &SafetyParams) -> f64 {
    d_safe_eval(s1, delta_s, v1, p).value
}

pub fn d_safe_eval(s1: f64, delta_s: f64, v1: f64, p: &SafetyParams) -> SafetyEval {
    eval_with_gap(s1, delta_s, 1.0, v1, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower,
    Upper,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Lower => -1.0,
            Side::Upper => 1.0,
        }
    }
}

/// Worst case of `D_safe(s¹, Δs + δ, v¹)` over `|δ| ≤ margin`.
pub fn d_safe_tightened(s1: f64, delta_s: f64, v1: f64, margin: f64, p: &SafetyParams) -> f64 {
    d_safe_tightened_eval(s1, delta_s, v1, margin, p).value
}

pub fn d_safe_tightened_eval(
    s1: f64,
    delta_s: f64,
    v1: f64,
    margin: f64,
    p: &SafetyParams,
) -> SafetyEval {
    let excess = delta_s.abs() - margin;
    if excess > 0.0 {
        let sign = if delta_s >= 0.0 { 1.0 } else { -1.0 };
        eval_with_gap(s1, excess, sign, v1, p)
    } else {
        eval_with_gap(s1, 0.0, 0.0, v1, p)
    }
}

/// `D_safe` at `Δs ∓ shift` (lower side subtracts).
pub fn d_safe_shifted_eval(
    s1: f64,
    delta_s: f64,
    v1: f64,
    shift: f64,
    side: Side,
    p: &SafetyParams,
) -> SafetyEval {
    d_safe_eval(s1, delta_s + side.sign() * shift, v1, p)
}

/// GP-adapted constraint: `D_safe` at `Δs ± 2σ_{s²}`.
pub fn d_safe_gp(
    s1: f64,
    delta_s: f64,
    v1: f64,
    sigma_s2: f64,
    side: Side,
    p: &SafetyParams,
) -> f64 {
    d_safe_shifted_eval(s1, delta_s, v1, 2.0 * sigma_s2, side, p).value
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Behind,
    Front,
}

impl Branch {
    pub fn other(self) -> Self {
        match self {
            Branch::Behind => Branch::Front,
            Branch::Front => Branch::Behind,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Behind => "omega1_behind",
            Branch::Front => "omega2_front",
        }
    }
}

/// Shape parameters of the two terminal sets. `r*` are constant buffers,
/// `h*` headway slopes and `c*` closing-speed slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalParams {
    pub h1: f64,
    pub c1: f64,
    pub r1: f64,
    pub h2: f64,
    pub c2: f64,
    pub r2: f64,
    /// Curvature of the front set's credit for a speed lead, `q2·max(−Δv − K/2, 0)²`.
    pub q2: f64,
    /// Saturation scale of the Agent-2 catch-up term; defaults to `(N + ½)·Ts`.
    pub bump_k: Option<f64>,
    /// Optional lower bound on `s¹` inside the front set.
    pub s_front: Option<f64>,
    pub grid_density: usize,
    pub max_inflation_steps: usize,
}

impl Default for TerminalParams {
    fn default() -> Self {
        Self {
            h1: 1.0,
            c1: 4.0,
            r1: 0.0,
            h2: 1.0,
            c2: 3.0,
            r2: 0.0,
            q2: 1.0,
            bump_k: None,
            s_front: None,
            grid_density: 41,
            max_inflation_steps: 8,
        }
    }
}

/// Bounds the terminal-set check needs from the vehicle model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub v_max: f64,
    pub v2_min: f64,
    pub u1_min: f64,
    pub u1_max: f64,
    /// The disturbance enters the terminal step as `A^N B2 w`.
    pub horizon: usize,
    pub grid_density: usize,
}

/// One terminal set. Constraints are returned as `c(x) ≤ 0` with gradients over
/// `[Δs, Δv, s¹, v¹]`; velocity bounds are part of [`TerminalSet::margin`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalSet {
    pub branch: Branch,
    /// `d_min + margin + e_N[Δs]`.
    pub base: f64,
    pub r: f64,
    pub h: f64,
    pub c: f64,
    /// Speed-lead credit of the front set (zero for the behind set).
    pub q: f64,
    pub tau: f64,
    pub bump_k: f64,
    pub v_max: f64,
    pub s_front: Option<f64>,
}

/// `K D − D²` below `K/2`, `K²/4` above; linear for `D < 0`.
pub fn bump(d: f64, k: f64) -> (f64, f64) {
    if d < 0.0 {
        (k * d, k)
    } else if d < 0.5 * k {
        (k * d - d * d, k - 2.0 * d)
    } else {
        (0.25 * k * k, 0.0)
    }
}

pub const MAX_TERMINAL_CONSTRAINTS: usize = 4;

impl TerminalSet {
    /// Shape constraints (without the velocity box).
    pub fn constraints(
        &self,
        x: &StateVec,
    ) -> ([(f64, [f64; 4]); MAX_TERMINAL_CONSTRAINTS], usize) {
        let mut out = [(0.0, [0.0; 4]); MAX_TERMINAL_CONSTRAINTS];
        let mut n = 2;
        match self.branch {
            Branch::Behind => {
                let c0 = self.base + self.r + self.h * x.v1 - x.delta_s;
                out[0] = (c0, [-1.0, 0.0, 0.0, self.h]);
                out[1] = (c0 - self.c * x.delta_v, [-1.0, -self.c, 0.0, self.h]);
            }
            Branch::Front => {
                let (b, db) = bump(self.v_max - x.v2(), self.bump_k);
                let c0 = self.base
                    + self.r
                    + x.delta_s
                    + self.tau * x.v1
                    + self.h * (self.v_max - x.v1)
                    + b;
                let g0 = [1.0, -db, 0.0, self.tau - self.h - db];
                // speed lead beyond what the catch-up budget already absorbs
                let lead = (-x.delta_v - 0.5 * self.bump_k).max(0.0);
                out[0] = (
                    c0 - self.q * lead * lead,
                    [g0[0], g0[1] + 2.0 * self.q * lead, 0.0, g0[3]],
                );
                out[1] = (c0 + self.c * x.delta_v, [g0[0], g0[1] + self.c, 0.0, g0[3]]);
                // the credit never goes below the gap the tightened D_safe needs once active
                out[2] = (
                    self.base + x.delta_s + self.tau * x.v1,
                    [1.0, 0.0, 0.0, self.tau],
                );
                n = 3;
                if let Some(sf) = self.s_front {
                    out[3] = (sf - x.s1, [0.0, 0.0, -1.0, 0.0]);
                    n = 4;
                }
            }
        }
        (out, n)
    }

    /// Signed distance-like margin: `min(−c_i)` including `0 ≤ v¹ ≤ v_max`.
    pub fn margin(&self, x: &StateVec) -> f64 {
        let (c, n) = self.constraints(x);
        let mut m = x.v1.min(self.v_max - x.v1);
        for (v, _) in &c[..n] {
            m = m.min(-v);
        }
        m
    }

    pub fn contains(&self, x: &StateVec, tol: f64) -> bool {
        self.margin(x) >= -tol
    }

    /// Boundary value of Δs for given speeds (sign follows the branch).
    pub fn boundary_delta_s(&self, v1: f64, v2: f64) -> f64 {
        let probe = StateVec {
            delta_s: 0.0,
            delta_v: v2 - v1,
            s1: self.s_front.unwrap_or(0.0),
            v1,
        };
        let (c, n) = self.constraints(&probe);
        let worst = c[..3.min(n)]
            .iter()
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        match self.branch {
            // c = req − Δs at Δs = 0
            Branch::Behind => worst,
            // c = req + Δs at Δs = 0
            Branch::Front => -worst,
        }
    }
}

/// A set that [`verify_rci`] can check.
pub trait RciSet {
    fn name(&self) -> String;
    /// Positive inside, zero on the boundary.
    fn margin(&self, x: &StateVec) -> f64;
    /// Boundary and interior states to check.
    fn grid(&self, cfg: &VerifyConfig) -> Vec<StateVec>;
}

impl RciSet for TerminalSet {
    fn name(&self) -> String {
        self.branch.name().to_string()
    }

    fn margin(&self, x: &StateVec) -> f64 {
        TerminalSet::margin(self, x)
    }

    fn grid(&self, cfg: &VerifyConfig) -> Vec<StateVec> {
        let n = cfg.grid_density.max(2);
        let offsets = [0.0, 0.01, 0.1, 0.5, 2.0, 8.0];
        let mut out = Vec::with_capacity(n * n * offsets.len());
        for i in 0..n {
            let v1 = cfg.v_max * i as f64 / (n - 1) as f64;
            for j in 0..n {
                let v2 = cfg.v2_min + (cfg.v_max - cfg.v2_min) * j as f64 / (n - 1) as f64;
                let b = self.boundary_delta_s(v1, v2);
                for off in offsets {
                    let ds = match self.branch {
                        Branch::Behind => b + off,
                        Branch::Front => b - off,
                    };
                    out.push(StateVec {
                        delta_s: ds,
                        delta_v: v2 - v1,
                        s1: self.s_front.unwrap_or(0.0),
                        v1,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub state: StateVec,
    pub best_input: f64,
    pub worst_u2: f64,
    pub successor_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub set: String,
    pub grid_density: usize,
    pub worst_slack: f64,
    pub counterexample: Option<Counterexample>,
    pub certified: bool,
}

/// Admissible Agent-2 acceleration at speed `v2`.
pub fn u2_range(v2: f64, w: &DisturbanceSegment, cfg: &VerifyConfig, ts: f64) -> (f64, f64) {
    let lo = w.u2_min.max((cfg.v2_min - v2) / ts);
    let hi = w.u2_max.min((cfg.v_max - v2) / ts);
    if lo <= hi {
        (lo, hi)
    } else {
        // speed outside the admissible band: only the restoring direction remains
        let v = if v2 < cfg.v2_min {
            hi.max(lo)
        } else {
            lo.min(hi)
        };
        (v, v)
    }
}

/// Admissible Agent-1 input keeping `0 ≤ v¹⁺ ≤ v_max`.
pub fn u1_range(v1: f64, cfg: &VerifyConfig, ts: f64) -> Option<(f64, f64)> {
    let lo = cfg.u1_min.max(-v1 / ts);
    let hi = cfg.u1_max.min((cfg.v_max - v1) / ts);
    (lo <= hi).then_some((lo, hi))
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Minimum of `f` on `[a, b]`: dense samples, then golden refinement around the best.
fn minimize_1d(a: f64, b: f64, samples: usize, f: &mut impl FnMut(f64) -> f64) -> (f64, f64) {
    if b - a <= 0.0 {
        return (a, f(a));
    }
    let mut best = (a, f(a));
    let h = (b - a) / samples as f64;
    for i in 1..=samples {
        let t = a + h * i as f64;
        let v = f(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    let (mut lo, mut hi) = ((best.0 - h).max(a), (best.0 + h).min(b));
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..40 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
        }
    }
    for (t, v) in [(x1, f1), (x2, f2)] {
        if v < best.1 {
            best = (t, v);
        }
    }
    best
}

/// Successor under `A x + B1 u + A^N B2 w`.
fn successor(x: &StateVec, u: f64, w: f64, m: &LinearModel, dir: &[f64; 4]) -> StateVec {
    let ax = m.apply_a(&x.to_array());
    StateVec::from_array(core::array::from_fn(|i| ax[i] + m.b1[i] * u + dir[i] * w))
}

/// Worst successor margin over admissible `w` for input `u`, with the minimizing `w`.
fn worst_over_w<S: RciSet + ?Sized>(
    set: &S,
    x: &StateVec,
    u: f64,
    wr: (f64, f64),
    m: &LinearModel,
    dir: &[f64; 4],
) -> (f64, f64) {
    let (w, v) = minimize_1d(wr.0, wr.1, 16, &mut |w| {
        set.margin(&successor(x, u, w, m, dir))
    });
    // endpoints are checked explicitly in `minimize_1d`'s sampling
    (v, w)
}

/// Best input for `x` (maximizes the worst-case successor margin) and that margin.
pub fn best_input<S: RciSet + ?Sized>(
    set: &S,
    x: &StateVec,
    m: &LinearModel,
    w: &DisturbanceSegment,
    cfg: &VerifyConfig,
) -> Option<(f64, f64, f64)> {
    let dir = m.a_pow_b2(cfg.horizon);
    let ur = u1_range(x.v1, cfg, m.ts)?;
    let wr = u2_range(x.v2(), w, cfg, m.ts);
    let (u, neg) = minimize_1d(ur.0, ur.1, 24, &mut |u| {
        -worst_over_w(set, x, u, wr, m, &dir).0
    });
    let (val, wstar) = worst_over_w(set, x, u, wr, m, &dir);
    debug_assert!((val + neg).abs() < 1e-9 || val >= -neg);
    Some((u, val, wstar))
}

/// Input that keeps a terminal state inside its set for every admissible `u²`.
pub fn terminal_input(
    set: &TerminalSet,
    x: &StateVec,
    m: &LinearModel,
    w: &DisturbanceSegment,
    cfg: &VerifyConfig,
) -> f64 {
    best_input(set, x, m, w, cfg)
        .map(|(u, _, _)| u)
        .unwrap_or(0.0)
}

pub const RCI_TOL: f64 = 1e-9;

/// Grid check of robust control invariance under `A^N B2 w`.
pub fn verify_rci<S: RciSet + ?Sized>(
    set: &S,
    m: &LinearModel,
    w: &DisturbanceSegment,
    cfg: &VerifyConfig,
) -> CertificateReport {
    let mut worst = f64::INFINITY;
    let mut counterexample = None;
    for x in set.grid(cfg) {
        if set.margin(&x) < -RCI_TOL {
            continue;
        }
        let (u, val, wstar) =
            best_input(set, &x, m, w, cfg).unwrap_or((0.0, f64::NEG_INFINITY, 0.0));
        if val < worst {
            worst = val;
            if val < -RCI_TOL {
                counterexample = Some(Counterexample {
                    state: x,
                    best_input: u,
                    worst_u2: wstar,
                    successor_margin: val,
                });
            }
        }
    }
    CertificateReport {
        set: set.name(),
        grid_density: cfg.grid_density,
        worst_slack: worst,
        certified: counterexample.is_none(),
        counterexample,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSets {
    pub behind: TerminalSet,
    pub front: TerminalSet,
    pub reports: [CertificateReport; 2],
}

impl TerminalSets {
    pub fn get(&self, b: Branch) -> &TerminalSet {
        match b {
            Branch::Behind => &self.behind,
            Branch::Front => &self.front,
        }
    }
}

/// Construct `Ω1`, `Ω2` for the given bounds, inflating slopes until [`verify_rci`] passes.
pub fn build_terminal_sets(
    m: &LinearModel,
    w: &DisturbanceSegment,
    p: &SafetyParams,
    tp: &TerminalParams,
    cfg: &VerifyConfig,
) -> Result<TerminalSets> {
    p.validate()?;
    let e = propagate_disturbance_margins(m, w, cfg.horizon)?;
    let base = p.d_min + p.safety_margin + e.delta_s(cfg.horizon);
    let k = tp.bump_k.unwrap_or((cfg.horizon as f64 + 0.5) * m.ts);
    let mk = |branch, r, h, c, q| TerminalSet {
        branch,
        base,
        r,
        h,
        c,
        q,
        tau: p.tau,
        bump_k: k,
        v_max: cfg.v_max,
        s_front: if branch == Branch::Front {
            tp.s_front
        } else {
            None
        },
    };
    let mut found: [Option<(TerminalSet, CertificateReport)>; 2] = [None, None];
    for (slot, (branch, r, h, c, q)) in [
        (Branch::Behind, tp.r1, tp.h1, tp.c1, 0.0),
        (Branch::Front, tp.r2, tp.h2, tp.c2, tp.q2),
    ]
    .into_iter()
    .enumerate()
    {
        if h < p.tau {
            return Err(invalid("terminal headway slope", "must be at least tau"));
        }
        let mut last = None;
        for step in 0..=tp.max_inflation_steps {
            let set = mk(branch, r, h + 0.25 * step as f64, c + 0.5 * step as f64, q);
            let rep = verify_rci(&set, m, w, cfg);
            if rep.certified {
                found[slot] = Some((set, rep));
                break;
            }
            last = Some(rep);
        }
        if found[slot].is_none() {
            let detail = last
                .and_then(|r| r.counterexample)
                .map(|c| alloc::format!("{c:?}"))
                .unwrap_or_default();
            return Err(Error::CertificationFailure(alloc::format!(
                "{} not certified: {detail}",
                branch.name()
            )));
        }
    }
    let [Some((behind, rb)), Some((front, rf))] = found else {
        unreachable!()
    };
    if !sets_disjoint(&behind, &front) {
        return Err(Error::CertificationFailure(
            "terminal sets intersect".to_string(),
        ));
    }
    Ok(TerminalSets {
        behind,
        front,
        reports: [rb, rf],
    })
}

/// Halfspace description `a·(Δs, Δv, v¹) ≤ b` of a set, relaxing the concave
/// catch-up term of the front set to zero (a superset). The front row carrying
/// the speed-lead credit is kept only when that credit is off.
pub fn halfspace_relaxation(set: &TerminalSet) -> Vec<([f64; 3], f64)> {
    let mut rows = alloc::vec![([0.0, 0.0, -1.0], 0.0), ([0.0, 0.0, 1.0], set.v_max)];
    match set.branch {
        Branch::Behind => {
            // Δs − h v¹ ≥ base + r, and the same with + c Δv
            rows.push(([-1.0, 0.0, set.h], -(set.base + set.r)));
            rows.push(([-1.0, -set.c, set.h], -(set.base + set.r)));
        }
        Branch::Front => {
            // −Δs − τ v¹ − h (v_max − v¹) ≥ base + r, and the same with − c Δv
            let rhs = -(set.base + set.r) - set.h * set.v_max;
            if set.q == 0.0 {
                rows.push(([1.0, 0.0, set.tau - set.h], rhs));
            }
            rows.push(([1.0, set.c, set.tau - set.h], rhs));
            rows.push(([1.0, 0.0, set.tau], -set.base));
        }
    }
    rows
}

/// Exact LP feasibility by Fourier–Motzkin elimination.
pub fn halfspaces_feasible(rows: &[([f64; 3], f64)]) -> bool {
    let mut cur: Vec<(Vec<f64>, f64)> = rows.iter().map(|(a, b)| (a.to_vec(), *b)).collect();
    for var in (0..3).rev() {
        let (mut pos, mut neg, mut zero) = (Vec::new(), Vec::new(), Vec::new());
        for (a, b) in cur {
            let c = a[var];
            if c > 1e-14 {
                pos.push((a, b));
            } else if c < -1e-14 {
                neg.push((a, b));
            } else {
                zero.push((a, b));
            }
        }
        for (ap, bp) in &pos {
            for (an, bn) in &neg {
                let (sp, sn) = (1.0 / ap[var], -1.0 / an[var]);
                let a: Vec<f64> = (0..var).map(|i| ap[i] * sp + an[i] * sn).collect();
                zero.push((a, bp * sp + bn * sn));
            }
        }
        cur = zero
            .into_iter()
            .map(|(mut a, b)| {
                a.truncate(var);
                (a, b)
            })
            .collect();
    }
    cur.iter().all(|(_, b)| *b >= -1e-12)
}

pub fn sets_disjoint(a: &TerminalSet, b: &TerminalSet) -> bool {
    let mut rows = halfspace_relaxation(a);
    rows.extend(halfspace_relaxation(b));
    !halfspaces_feasible(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p0() -> SafetyParams {
        SafetyParams {
            safety_margin: 0.0,
            ..SafetyParams::default()
        }
    }

    #[test]
    fn inactive_far_before_activation() {
        let p = SafetyParams::default();
        let v = d_safe(-5000.0, 0.0, 10.0, &p);
        assert!(v < 0.0 && v > -1.0 - 1e-9);
        assert!(d_safe(500.0, 200.0, 0.0, &p) < 0.0);
    }

    #[test]
    fn boundary_inversion() {
        // α ≈ 1, margin 0, δ → 0: D_safe = 0 at |Δs| = 10
        let p = SafetyParams {
            delta_smooth: 1e-9,
            ..p0()
        };
        assert!(d_safe(1e4, 10.0, 10.0, &p).abs() < 1e-8);
        assert!(d_safe(1e4, -10.0, 10.0, &p).abs() < 1e-8);
        assert!(d_safe(1e4, 9.9, 10.0, &p) > 0.0);
    }

    #[test]
    fn tightened_reduces_to_plain() {
        let p = SafetyParams::default();
        for ds in [-12.0, -3.0, 0.0, 0.4, 7.0] {
            assert!(
                (d_safe_tightened(-40.0, ds, 11.0, 0.0, &p) - d_safe(-40.0, ds, 11.0, &p)).abs()
                    < 1e-14
            );
            let mut prev = f64::NEG_INFINITY;
            for k in 0..20 {
                let v = d_safe_tightened(-40.0, ds, 11.0, 0.3 * k as f64, &p);
                assert!(v >= prev - 1e-15);
                prev = v;
            }
        }
    }

    #[test]
    fn gp_shift_matches_tightened_on_binding_side() {
        let p = SafetyParams::default();
        let ds = 14.0;
        let a = d_safe_gp(-20.0, ds, 12.0, 1.5, Side::Lower, &p);
        let b = d_safe_tightened(-20.0, ds, 12.0, 3.0, &p);
        assert!((a - b).abs() < 1e-12);
        assert_eq!(
            d_safe_gp(-20.0, ds, 12.0, 0.0, Side::Upper, &p),
            d_safe(-20.0, ds, 12.0, &p)
        );
    }

    #[test]
    fn bump_is_c1() {
        let k = 5.125;
        for d in [-0.5, 0.0, 1.0, 2.5625, 4.0] {
            let h = 1e-6;
            let fd = (bump(d + h, k).0 - bump(d - h, k).0) / (2.0 * h);
            assert!((fd - bump(d, k).1).abs() < 1e-5);
        }
    }

    #[test]
    fn fourier_motzkin_basic() {
        // x ≥ 1, x ≤ 0 → infeasible
        assert!(!halfspaces_feasible(&[
            ([-1.0, 0.0, 0.0], -1.0),
            ([1.0, 0.0, 0.0], 0.0)
        ]));
        // x + y ≤ 1, x ≥ 0, y ≥ 0, z free
        assert!(halfspaces_feasible(&[
            ([1.0, 1.0, 0.0], 1.0),
            ([-1.0, 0.0, 0.0], 0.0),
            ([0.0, -1.0, 0.0], 0.0)
        ]));
        // x + z ≤ 0, −z ≤ −2, −x ≤ −3 → x + z ≥ 5 contradiction
        assert!(!halfspaces_feasible(&[
            ([1.0, 0.0, 1.0], 0.0),
            ([0.0, 0.0, -1.0], -2.0),
            ([-1.0, 0.0, 0.0], -3.0)
        ]));
    }

    fn front() -> TerminalSet {
        TerminalSet {
            branch: Branch::Front,
            base: 12.25,
            r: 0.0,
            h: 1.0,
            c: 3.0,
            q: 1.0,
            tau: 0.5,
            bump_k: 5.125,
            v_max: 15.0,
            s_front: None,
        }
    }

    #[test]
    fn front_credit_starts_past_half_budget() {
        let set = front();
        for (dv, lead) in [(-1.0, 0.0), (-2.5625, 0.0), (-4.5625, 2.0), (-8.5625, 6.0)] {
            let x = StateVec {
                delta_s: -30.0,
                delta_v: dv,
                s1: 0.0,
                v1: 15.0,
            };
            let (c, _) = set.constraints(&x);
            // both rows share the uncredited requirement `c1 − c Δv`
            let uncredited = c[1].0 - set.c * dv;
            assert!(
                (c[0].0 - (uncredited - set.q * lead * lead)).abs() < 1e-12,
                "{dv}"
            );
        }
    }

    #[test]
    fn front_floor_bounds_the_credit() {
        let set = front();
        // a huge lead cancels the catch-up terms but not the gap floor
        let x = StateVec {
            delta_s: -19.0,
            delta_v: -14.0,
            s1: 0.0,
            v1: 15.0,
        };
        let (c, n) = set.constraints(&x);
        assert_eq!(n, 3);
        assert!(c[0].0 < 0.0);
        assert!((c[2].0 - (12.25 - 19.0 + 7.5)).abs() < 1e-12);
        assert!(!set.contains(&x, 0.0));
    }

    #[test]
    fn front_rows_have_exact_gradients() {
        let set = front();
        let x = StateVec {
            delta_s: -25.0,
            delta_v: -5.0,
            s1: 0.0,
            v1: 12.0,
        };
        let (c0, n) = set.constraints(&x);
        for k in [0usize, 1, 3] {
            let h = 1e-6;
            let mut a = x.to_array();
            let mut b = x.to_array();
            a[k] += h;
            b[k] -= h;
            let (ca, _) = set.constraints(&StateVec::from_array(a));
            let (cb, _) = set.constraints(&StateVec::from_array(b));
            for r in 0..n {
                let fd = (ca[r].0 - cb[r].0) / (2.0 * h);
                assert!(
                    (fd - c0[r].1[k]).abs() < 1e-6,
                    "row {r} axis {k}: {fd} vs {}",
                    c0[r].1[k]
                );
            }
        }
    }
}
