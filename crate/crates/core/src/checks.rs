//! Randomized membership checks of the set operations against brute-force grids.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{pontryagin_diff_interval, IntervalSet, TightenedMargins};
use crate::safety::{d_safe, d_safe_tightened, SafetyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub cases: usize,
    pub counterexamples: usize,
}

impl PropertyCheck {
    pub fn passed(&self) -> bool {
        self.counterexamples == 0
    }
}

const GRID: usize = 64;

/// `[a, b] ⊖ e` against `{x | x + δ ∈ [a, b] for all δ on a grid of [−e, e]}`,
/// compared at grid points away from the boundary by more than the resolution.
pub fn pontryagin_interval(cases: usize, seed: u64) -> PropertyCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let a = rng.gen_range(-10.0..10.0);
        let b = a + rng.gen_range(0.0..10.0);
        let e = rng.gen_range(0.0..6.0);
        let axis = rng.gen_range(0..4);
        let mut lo = [f64::NEG_INFINITY; 4];
        let mut hi = [f64::INFINITY; 4];
        lo[axis] = a;
        hi[axis] = b;
        let mut margins = [0.0; 4];
        margins[axis] = e;
        let set = IntervalSet::new(lo, hi).expect("ordered bounds");
        let res = pontryagin_diff_interval(&set, &margins).ok();
        let res_tol = (b - a + 2.0 * e + 2.0) / GRID as f64;
        for i in 0..=GRID {
            let x = a - e - 1.0 + res_tol * i as f64;
            let oracle = (0..=GRID).all(|k| {
                let d = -e + 2.0 * e * k as f64 / GRID as f64;
                (a..=b).contains(&(x + d))
            });
            let near = (x - (a + e)).abs() < res_tol || (x - (b - e)).abs() < res_tol;
            if near {
                continue;
            }
            let mut p = [0.0; 4];
            p[axis] = x;
            let got = res.as_ref().is_some_and(|r| r.contains(&p));
            if got != oracle {
                bad += 1;
                break;
            }
        }
    }
    PropertyCheck {
        name: "pontryagin_interval".into(),
        cases,
        counterexamples: bad,
    }
}

/// A state meeting the tightened `D_safe` with margin `e_j` meets the plain one
/// for every `Δs` offset of at most `e_j`.
pub fn tightening_transfer(
    cases: usize,
    seed: u64,
    p: &SafetyParams,
    margins: &TightenedMargins,
) -> PropertyCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let mut tested = 0;
    while tested < cases {
        let j = rng.gen_range(0..=margins.horizon());
        let e = margins.delta_s(j);
        let s1 = rng.gen_range(-150.0..50.0);
        let ds = rng.gen_range(-40.0..40.0);
        let v1 = rng.gen_range(0.0..16.0);
        if d_safe_tightened(s1, ds, v1, e, p) > 0.0 {
            continue;
        }
        tested += 1;
        let ok = (0..=GRID).all(|k| {
            let d = -e + 2.0 * e * k as f64 / GRID as f64;
            d_safe(s1, ds + d, v1, p) <= 1e-12
        });
        if !ok {
            bad += 1;
        }
    }
    PropertyCheck {
        name: "tightening_transfer".into(),
        cases,
        counterexamples: bad,
    }
}

/// Structural margin properties: `e_0 = 0`, nondecreasing, zero on `s¹` and `v¹`.
pub fn margin_structure(margins: &TightenedMargins) -> PropertyCheck {
    let mut bad = 0;
    if margins.at(0) != [0.0; 4] {
        bad += 1;
    }
    for j in 0..=margins.horizon() {
        let e = margins.at(j);
        if e[2] != 0.0 || e[3] != 0.0 {
            bad += 1;
        }
        if j > 0 && (0..4).any(|i| e[i] < margins.at(j - 1)[i]) {
            bad += 1;
        }
    }
    PropertyCheck {
        name: "margin_structure".into(),
        cases: margins.horizon() + 1,
        counterexamples: bad,
    }
}

/// All checks with the given case count.
pub fn property_suite(
    cases: usize,
    seed: u64,
    p: &SafetyParams,
    margins: &TightenedMargins,
) -> Vec<PropertyCheck> {
    alloc::vec![
        pontryagin_interval(cases, seed),
        tightening_transfer(cases, seed.wrapping_add(1), p, margins),
        margin_structure(margins),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{propagate_disturbance_margins, DisturbanceSegment, LinearModel};

    #[test]
    fn suite_passes_on_defaults() {
        let m = LinearModel::lane_merge(0.25).unwrap();
        let w = DisturbanceSegment::new(-0.5, 0.5, &m).unwrap();
        let e = propagate_disturbance_margins(&m, &w, 20).unwrap();
        for c in property_suite(300, 3, &SafetyParams::default(), &e) {
            assert!(c.passed(), "{c:?}");
        }
    }
}
