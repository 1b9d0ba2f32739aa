//! SQP solver checks: derivative audit, brute-force oracle, penalty ladder and certificates.

use std::sync::OnceLock;

use cmpc_core::config::{ControllerConfig, Mode};
use cmpc_core::dynamics::{nominal_step, true_step, StateVec};
use cmpc_core::gp::{fit, GpDataset, GpPosterior};
use cmpc_core::ocp::{
    certify_thm1, certify_thm2, evaluate_nlp, plan_cost, solve, CmpcSolution, Controller,
    SolveStatus,
};
use cmpc_core::safety::{Branch, TerminalSets};

fn sets() -> &'static TerminalSets {
    static SETS: OnceLock<TerminalSets> = OnceLock::new();
    SETS.get_or_init(|| {
        Controller::new(ControllerConfig::default(), Mode::Rmpc)
            .unwrap()
            .terminal
    })
}

fn ctrl_with(mode: Mode, edit: impl FnOnce(&mut ControllerConfig)) -> Controller {
    let mut cfg = ControllerConfig::default();
    edit(&mut cfg);
    Controller::with_sets(cfg, mode, sets().clone()).unwrap()
}

fn ctrl(mode: Mode) -> Controller {
    ctrl_with(mode, |_| {})
}

fn kmh(v: f64) -> f64 {
    v / 3.6
}

/// Far upstream, Agent 2 twenty meters ahead: the safety constraint is inactive.
fn start() -> StateVec {
    StateVec::from_agents(-200.0, kmh(46.0), -180.0, kmh(35.0)).unwrap()
}

/// Close to the merge point with Agent 2 alongside.
fn contested() -> StateVec {
    StateVec::from_agents(-60.0, kmh(45.0), -57.0, kmh(44.0)).unwrap()
}

/// Closer to the merge point with Agent 2 a few meters ahead; robustly feasible.
fn approaching() -> StateVec {
    StateVec::from_agents(-100.0, kmh(45.0), -88.0, kmh(42.0)).unwrap()
}

fn learned_gp(ctrl: &Controller) -> GpPosterior {
    let mut ds = GpDataset::new(None);
    for i in 0..15 {
        let z = [20.0 - 0.6 * i as f64, -3.0, -200.0 + 3.0 * i as f64, 12.7];
        ds.push(z, 0.3 * (0.4 * i as f64).sin());
    }
    fit(&ds, &ctrl.config.gp.kernel().unwrap()).unwrap()
}

fn audit(mode: Mode, branch: Option<Branch>, x0: StateVec) {
    let c = ctrl(mode);
    let gp = learned_gp(&c);
    let gp_ref = mode.has_performance().then_some(&gp);
    let prob = c.problem(x0, 0.2, gp_ref);
    let lay = c.layout();
    let n = lay.n();
    let z: Vec<f64> = (0..n)
        .map(|i| {
            if lay.soft && i >= lay.eps(0) {
                0.1 + 0.01 * i as f64
            } else {
                0.8 * ((i as f64) * 0.7).sin()
            }
        })
        .collect();
    let ev = evaluate_nlp(&prob, branch, &z, &z).unwrap();
    let m = ev.constraints.len();
    assert_eq!(ev.jacobian.len(), m * n);
    assert_eq!(ev.tags.len(), m);
    for k in 0..n {
        let h = 1e-6;
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[k] += h;
        zm[k] -= h;
        let ep = evaluate_nlp(&prob, branch, &z, &zp).unwrap();
        let em = evaluate_nlp(&prob, branch, &z, &zm).unwrap();
        let fd = (ep.objective - em.objective) / (2.0 * h);
        assert!(
            (fd - ev.gradient[k]).abs() < 1e-5 * (1.0 + fd.abs()),
            "{mode:?} grad {k}: {fd} vs {}",
            ev.gradient[k]
        );
        for r in 0..m {
            let fd = (ep.constraints[r] - em.constraints[r]) / (2.0 * h);
            let an = ev.jacobian[r * n + k];
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + fd.abs()),
                "{mode:?} {:?} d/dz{k}: {fd} vs {an}",
                ev.tags[r]
            );
        }
    }
}

#[test]
fn nlp_derivatives_match_differences() {
    for x0 in [start(), contested()] {
        audit(Mode::Rmpc, Some(Branch::Behind), x0);
        audit(Mode::Rmpc, Some(Branch::Front), x0);
        audit(Mode::Gpmpc, None, x0);
        audit(Mode::CmpcHard, Some(Branch::Behind), x0);
        audit(Mode::CmpcSoft, Some(Branch::Front), x0);
    }
}

#[test]
fn two_step_plan_matches_grid_search() {
    let c = ctrl_with(Mode::Gpmpc, |cfg| cfg.solver.horizon = 2);
    let gp = fit(&GpDataset::new(None), &c.config.gp.kernel().unwrap()).unwrap();
    let mp = c.params().clone();
    let sp = &c.config.solver;
    for (v1, u_prev) in [(kmh(46.0), 0.0), (kmh(30.0), 1.0), (kmh(54.0), -0.5)] {
        let x0 = StateVec::from_agents(-200.0, v1, -180.0, kmh(35.0)).unwrap();
        let sol = solve(&c.problem(x0, u_prev, Some(&gp)), None);
        assert_eq!(sol.status, SolveStatus::Optimal);
        let cost = |u: &[f64]| plan_cost(v1, u_prev, u, mp.ts, sp, mp.v_ref1);
        let feasible = |u: &[f64]| {
            let v_a = v1 + mp.ts * u[0];
            let v_b = v_a + mp.ts * u[1];
            (0.0..=mp.v_max).contains(&v_a) && (0.0..=mp.v_max).contains(&v_b)
        };
        let mut best = (f64::INFINITY, [0.0; 2]);
        let steps = 400;
        for i in 0..=steps {
            for k in 0..=steps {
                let u = [
                    mp.u1_min + (mp.u1_max - mp.u1_min) * i as f64 / steps as f64,
                    mp.u1_min + (mp.u1_max - mp.u1_min) * k as f64 / steps as f64,
                ];
                if feasible(&u) && cost(&u) < best.0 {
                    best = (cost(&u), u);
                }
            }
        }
        let got = cost(&sol.u_hat);
        assert!(feasible(&sol.u_hat));
        assert!(got <= best.0 + 1e-9, "{got} vs grid {}", best.0);
        let h = (mp.u1_max - mp.u1_min) / steps as f64;
        for j in 0..2 {
            assert!(
                (sol.u_hat[j] - best.1[j]).abs() <= 2.0 * h,
                "{:?} vs {:?}",
                sol.u_hat,
                best.1
            );
        }
    }
}

fn l1(sol: &CmpcSolution) -> f64 {
    sol.eps.iter().map(|e| e.abs()).sum()
}

#[test]
fn larger_penalty_never_increases_slack() {
    let mut prev = f64::INFINITY;
    let mut last = None;
    for rho in [1.0, 10.0, 100.0, 1e3, 1e4] {
        let c = ctrl_with(Mode::Gpmpc, |cfg| cfg.solver.rho = rho);
        let gp = learned_gp(&c);
        let sol = solve(&c.problem(contested(), 0.0, Some(&gp)), None);
        assert!(sol.is_usable());
        let s = l1(&sol);
        assert!(s <= prev + 1e-6, "rho {rho}: {s} > {prev}");
        prev = s;
        last = Some(s);
    }
    assert!(last.unwrap() > 0.0, "the contested state should need slack");
}

#[test]
fn hard_and_soft_agree_when_no_slack_is_needed() {
    let same = |cfg: &mut ControllerConfig| {
        cfg.solver.sigma_factor = 0.0;
        cfg.solver.hard_sigma_factor = 0.0;
        cfg.solver.hard_clamp_gp = false;
    };
    let hard = ctrl_with(Mode::CmpcHard, same);
    let soft = ctrl_with(Mode::CmpcSoft, same);
    let gp = learned_gp(&hard);
    let x0 = start();
    let sh = solve(&hard.problem(x0, 0.0, Some(&gp)), None);
    let ss = solve(&soft.problem(x0, 0.0, Some(&gp)), None);
    assert_eq!(sh.status, SolveStatus::Optimal);
    assert_eq!(ss.status, SolveStatus::Optimal);
    assert!(l1(&ss) < 1e-8);
    assert_eq!(sh.branch, ss.branch);
    for (a, b) in sh.u_bar.iter().zip(&ss.u_bar) {
        assert!((a - b).abs() < 1e-4, "{:?} vs {:?}", sh.u_bar, ss.u_bar);
    }
    for (a, b) in sh.u_hat.iter().zip(&ss.u_hat) {
        assert!((a - b).abs() < 1e-4, "{:?} vs {:?}", sh.u_hat, ss.u_hat);
    }
}

#[test]
fn full_robust_weight_reproduces_robust_mpc() {
    let cmpc = ctrl_with(Mode::CmpcSoft, |cfg| cfg.solver.p = 1.0);
    let rmpc = ctrl(Mode::Rmpc);
    let gp = learned_gp(&cmpc);
    for x0 in [start(), approaching()] {
        let a = solve(&cmpc.problem(x0, 0.0, Some(&gp)), None);
        let b = solve(&rmpc.problem(x0, 0.0, None), None);
        assert!(
            a.is_usable() && b.is_usable(),
            "{x0:?} {:?} {:?}",
            a.status,
            b.status
        );
        assert_eq!(a.branch, b.branch);
        for (x, y) in a.u_bar.iter().zip(&b.u_bar) {
            assert!((x - y).abs() < 1e-2, "{:?} vs {:?}", a.u_bar, b.u_bar);
        }
    }
}

#[test]
fn empty_gp_rollout_is_the_nominal_rollout() {
    let c = ctrl(Mode::Gpmpc);
    let gp = fit(&GpDataset::new(None), &c.config.gp.kernel().unwrap()).unwrap();
    let x0 = start();
    let sol = solve(&c.problem(x0, 0.0, Some(&gp)), None);
    let mut x = x0;
    assert_eq!(sol.x_hat[0], x);
    for (j, u) in sol.u_hat.iter().enumerate() {
        x = nominal_step(&x, *u, &c.model);
        assert_eq!(sol.x_hat[j + 1], x, "step {j}");
    }
}

#[test]
fn solves_are_deterministic() {
    for mode in Mode::ALL {
        let c = ctrl(mode);
        let gp = learned_gp(&c);
        let gp_ref = mode.has_performance().then_some(&gp);
        let a = solve(&c.problem(contested(), 0.1, gp_ref), None);
        let b = solve(&c.problem(contested(), 0.1, gp_ref), None);
        assert_eq!(a, b, "{mode:?}");
    }
}

#[test]
fn certificates_hold_after_nominal_step_and_catch_corruption() {
    for mode in [Mode::Rmpc, Mode::CmpcHard, Mode::CmpcSoft] {
        let c = ctrl(mode);
        let gp = learned_gp(&c);
        let gp_ref = mode.has_performance().then_some(&gp);
        let certify = if mode.is_soft() {
            certify_thm2
        } else {
            certify_thm1
        };
        for x0 in [approaching(), start()] {
            let sol = solve(&c.problem(x0, 0.0, gp_ref), None);
            assert!(sol.is_usable(), "{mode:?}");
            for u2 in [0.0, c.params().u2_min, c.params().u2_max] {
                let x1 = true_step(&x0, sol.first_input(), u2, &c.model);
                let next = c.problem(x1, sol.first_input(), gp_ref);
                let cert = certify(&sol, &next).unwrap();
                assert!(cert.holds, "{mode:?} u2={u2}: {cert:?}");
            }
        }
        let x0 = start();
        let sol = solve(&c.problem(x0, 0.0, gp_ref), None);
        let x1 = true_step(&x0, sol.first_input(), 0.0, &c.model);
        let next = c.problem(x1, sol.first_input(), gp_ref);

        let mut bad = sol.clone();
        let last = bad.u_bar.len() - 1;
        bad.u_bar[last] = c.params().u1_max + 1.0;
        assert!(
            !certify(&bad, &next).unwrap().holds,
            "{mode:?}: out-of-bounds input accepted"
        );

        let mut bad = sol.clone();
        bad.branch = bad.branch.map(Branch::other);
        assert!(
            !certify(&bad, &next).unwrap().holds,
            "{mode:?}: wrong terminal set accepted"
        );
    }
}
