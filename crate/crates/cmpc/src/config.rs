//! Root configuration file: every parameter block plus scenario and sweep settings.

use std::path::Path;

use anyhow::{Context, Result};
use cmpc_core::config::{ControllerConfig, Mode, ModelParams, SolverParams};
use cmpc_core::gp::GpParams;
use cmpc_core::kpi::GridSpec;
use cmpc_core::safety::{SafetyParams, TerminalParams};
use cmpc_core::sim::ScenarioConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: GridSpec,
    pub modes: Vec<Mode>,
    /// Worker threads; `None` uses every available core.
    pub jobs: Option<usize>,
    /// Write the full per-step log of every scenario.
    pub write_logs: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            modes: Mode::ALL.to_vec(),
            jobs: None,
            write_logs: true,
        }
    }
}

/// Speeds are in m/s and positions in m unless a key says otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RootConfig {
    pub model: ModelParams,
    pub safety: SafetyParams,
    pub terminal: TerminalParams,
    pub gp: GpParams,
    pub solver: SolverParams,
    pub scenario: ScenarioConfig,
    pub sweep: SweepConfig,
}

impl RootConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; `None` gives the built-in defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.controller().validate()?;
        self.scenario.validate(&self.model)?;
        self.sweep.grid.points()?;
        if self.sweep.modes.is_empty() {
            anyhow::bail!("sweep.modes must list at least one mode");
        }
        if self.sweep.jobs == Some(0) {
            anyhow::bail!("sweep.jobs must be at least 1");
        }
        Ok(())
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig {
            model: self.model.clone(),
            safety: self.safety.clone(),
            terminal: self.terminal.clone(),
            gp: self.gp.clone(),
            solver: self.solver.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RootConfig::default();
        let back = RootConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c =
            RootConfig::from_json(r#"{"solver": {"p": 0.7}, "scenario": {"seed": 3}}"#).unwrap();
        assert_eq!(c.solver.p, 0.7);
        assert_eq!(c.solver.q, 10.0);
        assert_eq!(c.scenario.seed, 3);
        assert_eq!(c.gp.length_scales, [5.0, 100.0, 500.0, 100.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RootConfig::from_json(r#"{"solver": {"pp": 0.7}}"#).is_err());
        assert!(RootConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RootConfig::from_json(r#"{"solver": {"p": 1.5}}"#).is_err());
        assert!(RootConfig::from_json(r#"{"sweep": {"modes": []}}"#).is_err());
    }
}
