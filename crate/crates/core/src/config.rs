//! Parameter blocks shared by the controller, the scenario runner and the CLI.

use serde::{Deserialize, Serialize};

use crate::dynamics::{DisturbanceSegment, LinearModel};
use crate::error::{invalid, Result};
use crate::gp::GpParams;
use crate::safety::{SafetyParams, TerminalParams, VerifyConfig};

pub const KMH: f64 = 1.0 / 3.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub ts: f64,
    pub u1_min: f64,
    pub u1_max: f64,
    pub u2_min: f64,
    pub u2_max: f64,
    pub v_ref1: f64,
    pub v_max: f64,
    pub v2_min: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        let v_ref1 = 50.0 * KMH;
        Self {
            ts: 0.25,
            u1_min: -3.0,
            u1_max: 5.0,
            u2_min: -0.5,
            u2_max: 0.5,
            v_ref1,
            v_max: 1.1 * v_ref1,
            v2_min: 25.0 * KMH,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.u1_min < 0.0 && self.u1_max > 0.0) {
            return Err(invalid("u1 bounds", "need u1_min < 0 < u1_max"));
        }
        if !(self.v_max > 0.0 && self.v_ref1 > 0.0 && self.v_ref1 <= self.v_max) {
            return Err(invalid("v_ref1", "need 0 < v_ref1 <= v_max"));
        }
        if !(self.v2_min >= 0.0 && self.v2_min < self.v_max) {
            return Err(invalid("v2_min", "need 0 <= v2_min < v_max"));
        }
        Ok(())
    }

    pub fn linear_model(&self) -> Result<LinearModel> {
        LinearModel::lane_merge(self.ts)
    }

    pub fn disturbance(&self, m: &LinearModel) -> Result<DisturbanceSegment> {
        DisturbanceSegment::new(self.u2_min, self.u2_max, m)
    }

    pub fn verify_config(&self, horizon: usize, grid_density: usize) -> VerifyConfig {
        VerifyConfig {
            v_max: self.v_max,
            v2_min: self.v2_min,
            u1_min: self.u1_min,
            u1_max: self.u1_max,
            horizon,
            grid_density,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "rmpc")]
    Rmpc,
    #[serde(rename = "gpmpc")]
    Gpmpc,
    #[serde(rename = "cmpc-hard")]
    CmpcHard,
    #[serde(rename = "cmpc-soft")]
    CmpcSoft,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Rmpc, Mode::Gpmpc, Mode::CmpcHard, Mode::CmpcSoft];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Rmpc => "rmpc",
            Mode::Gpmpc => "gpmpc",
            Mode::CmpcHard => "cmpc-hard",
            Mode::CmpcSoft => "cmpc-soft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn has_robust(self) -> bool {
        !matches!(self, Mode::Gpmpc)
    }

    pub fn has_performance(self) -> bool {
        !matches!(self, Mode::Rmpc)
    }

    pub fn is_soft(self) -> bool {
        matches!(self, Mode::Gpmpc | Mode::CmpcSoft)
    }
}

/// Hessian used in the SQP subproblems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Exact Hessian of the quadratic cost, constant over iterations.
    GaussNewton,
    /// Starts from the cost Hessian and adds Lagrangian curvature by damped BFGS updates.
    DampedBfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub horizon: usize,
    pub q: f64,
    pub r: f64,
    pub s: f64,
    /// Weight of the robust plan in the cost; `1 − p` goes to the performance plan.
    pub p: f64,
    pub rho: f64,
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub backtrack: f64,
    pub armijo: f64,
    pub hessian: HessianMode,
    /// Multiple of `σ_{s²}` used to shift the soft performance constraint.
    pub sigma_factor: f64,
    /// Shift used by the hard variant.
    pub hard_sigma_factor: f64,
    /// Clamp the GP mean into `[u2_min, u2_max]` in the hard variant.
    pub hard_clamp_gp: bool,
    pub dump_nlp: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            horizon: 20,
            q: 10.0,
            r: 1.0,
            s: 10.0,
            p: 0.5,
            rho: 1e4,
            tol_kkt: 1e-6,
            tol_feas: 1e-6,
            max_iter: 50,
            backtrack: 0.5,
            armijo: 1e-4,
            hessian: HessianMode::DampedBfgs,
            sigma_factor: 2.0,
            hard_sigma_factor: 0.0,
            hard_clamp_gp: true,
            dump_nlp: false,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if !(self.q > 0.0 && self.r > 0.0 && self.s > 0.0) {
            return Err(invalid("q, r, s", "weights must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(invalid("p", "must lie in [0, 1]"));
        }
        if !(self.rho > 0.0) {
            return Err(invalid("rho", "must be positive"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(invalid("backtrack", "must lie in (0, 1)"));
        }
        if !(self.sigma_factor >= 0.0 && self.hard_sigma_factor >= 0.0) {
            return Err(invalid("sigma_factor", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Every parameter block of one controller instance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub model: ModelParams,
    pub safety: SafetyParams,
    pub terminal: TerminalParams,
    pub gp: GpParams,
    pub solver: SolverParams,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.safety.validate()?;
        self.solver.validate()?;
        self.gp.kernel()?;
        Ok(())
    }
}
