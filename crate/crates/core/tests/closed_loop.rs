//! Closed-loop scenarios: tracking, online data collection and safety.

use std::sync::OnceLock;

use cmpc_core::config::{ControllerConfig, Mode};
use cmpc_core::dynamics::StateVec;
use cmpc_core::gp::observe;
use cmpc_core::ocp::Controller;
use cmpc_core::safety::TerminalSets;
use cmpc_core::sim::{
    run_adversarial, run_scenario, DisturbancePolicy, ScenarioConfig, ScenarioLog,
};

fn sets() -> &'static TerminalSets {
    static SETS: OnceLock<TerminalSets> = OnceLock::new();
    SETS.get_or_init(|| {
        Controller::new(ControllerConfig::default(), Mode::Rmpc)
            .unwrap()
            .terminal
    })
}

fn ctrl(mode: Mode) -> Controller {
    Controller::with_sets(ControllerConfig::default(), mode, sets().clone()).unwrap()
}

fn run(mode: Mode, cfg: &ScenarioConfig) -> ScenarioLog {
    run_scenario(cfg, &ctrl(mode), &mut || 0.0).unwrap()
}

#[test]
fn tracks_reference_when_agent2_is_far_ahead() {
    let cfg = ScenarioConfig {
        s2_0: 400.0,
        steps: 41,
        ..ScenarioConfig::default()
    };
    for mode in Mode::ALL {
        let c = ctrl(mode);
        let log = run_scenario(&cfg, &c, &mut || 0.0).unwrap();
        let v_ref = c.params().v_ref1;
        let last = log.steps.last().unwrap();
        assert_eq!(last.k, 40);
        assert!(
            (last.v1 - v_ref).abs() < 0.01 * v_ref,
            "{mode:?}: {} vs {v_ref}",
            last.v1
        );
    }
}

#[test]
fn dataset_grows_by_one_per_step_and_observations_are_exact() {
    let c = ctrl(Mode::CmpcSoft);
    let cfg = ScenarioConfig {
        steps: 60,
        ..ScenarioConfig::default()
    };
    let log = run_scenario(&cfg, &c, &mut || 0.0).unwrap();
    for r in &log.steps {
        assert_eq!(r.gp_points, r.k);
    }
    let ds = log.dataset.as_ref().unwrap();
    assert_eq!(ds.len(), log.steps.len());
    for (i, w) in log.steps.windows(2).enumerate() {
        let x = StateVec::new(w[0].delta_s, w[0].delta_v, w[0].s1, w[0].v1).unwrap();
        let xn = StateVec::new(w[1].delta_s, w[1].delta_v, w[1].s1, w[1].v1).unwrap();
        let y = observe(&x, w[0].u1, &xn, &c.model);
        assert!((y - w[0].u2).abs() < 1e-12, "step {i}: {y} vs {}", w[0].u2);
        assert_eq!(ds.z[i], x.to_array());
        assert!((ds.y[i] - w[0].u2).abs() < 1e-12);
    }
}

#[test]
fn robust_modes_stay_safe_and_certified_in_the_default_scenario() {
    for mode in [Mode::Rmpc, Mode::CmpcHard, Mode::CmpcSoft] {
        let log = run(mode, &ScenarioConfig::default());
        assert!(!log.infeasible_start);
        assert_eq!(log.certificate_failures, 0, "{mode:?}");
        assert_eq!(log.fallbacks, 0, "{mode:?}");
        assert!(log.max_d_safe() <= 1e-9, "{mode:?}: {}", log.max_d_safe());
        assert!(log.merge_time.is_some(), "{mode:?}");
    }
}

#[test]
fn robust_modes_stay_safe_against_extreme_agent2() {
    for mode in [Mode::Rmpc, Mode::CmpcHard, Mode::CmpcSoft] {
        let c = ctrl(mode);
        for (seed, policy) in [
            (1, DisturbancePolicy::ExtremeRandom),
            (2, DisturbancePolicy::WorstCaseToggle),
        ] {
            let cfg = ScenarioConfig {
                seed,
                ..ScenarioConfig::default()
            };
            let log = run_adversarial(&cfg, &c, policy, &mut || 0.0).unwrap();
            assert_eq!(log.certificate_failures, 0, "{mode:?} {policy:?}");
            assert!(
                log.max_d_safe() <= 1e-9,
                "{mode:?} {policy:?}: {}",
                log.max_d_safe()
            );
        }
    }
}

#[test]
fn scenarios_are_reproducible() {
    let cfg = ScenarioConfig {
        steps: 40,
        seed: 9,
        ..ScenarioConfig::default()
    };
    let c = ctrl(Mode::CmpcSoft);
    let a = run_adversarial(&cfg, &c, DisturbancePolicy::ExtremeRandom, &mut || 0.0).unwrap();
    let b = run_adversarial(&cfg, &c, DisturbancePolicy::ExtremeRandom, &mut || 0.0).unwrap();
    assert_eq!(a, b);
}
