//! Lane-merge prediction model, the disturbance segment and interval tightening.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance used when deciding whether a tightened interval is empty.
pub const EMPTY_TOL: f64 = 1e-12;

pub type InputScalar = f64;

/// State `[Δs, Δv, s¹, v¹]` with `Δs = s² − s¹` and `Δv = v² − v¹`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVec {
    pub delta_s: f64,
    pub delta_v: f64,
    pub s1: f64,
    pub v1: f64,
}

impl StateVec {
    pub fn new(delta_s: f64, delta_v: f64, s1: f64, v1: f64) -> Result<Self> {
        let x = Self {
            delta_s,
            delta_v,
            s1,
            v1,
        };
        if x.to_array().iter().all(|c| c.is_finite()) {
            Ok(x)
        } else {
            Err(Error::NonFinite("state"))
        }
    }

    pub const fn zero() -> Self {
        Self {
            delta_s: 0.0,
            delta_v: 0.0,
            s1: 0.0,
            v1: 0.0,
        }
    }

    /// Build from absolute positions and speeds of both agents.
    pub fn from_agents(s1: f64, v1: f64, s2: f64, v2: f64) -> Result<Self> {
        Self::new(s2 - s1, v2 - v1, s1, v1)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.delta_s, self.delta_v, self.s1, self.v1]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            delta_s: a[0],
            delta_v: a[1],
            s1: a[2],
            v1: a[3],
        }
    }

    pub fn s2(&self) -> f64 {
        self.s1 + self.delta_s
    }

    pub fn v2(&self) -> f64 {
        self.v1 + self.delta_v
    }
}

/// `x⁺ = A x + B1 u¹ + B2 u²` for the double-integrator pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: [[f64; 4]; 4],
    pub b1: [f64; 4],
    pub b2: [f64; 4],
    pub ts: f64,
}

impl LinearModel {
    pub fn lane_merge(ts: f64) -> Result<Self> {
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(invalid("ts", "sample time must be positive"));
        }
        let h = 0.5 * ts * ts;
        Ok(Self {
            a: [
                [1.0, ts, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, ts],
                [0.0, 0.0, 0.0, 1.0],
            ],
            b1: [-h, -ts, h, ts],
            b2: [h, ts, 0.0, 0.0],
            ts,
        })
    }

    pub fn apply_a(&self, x: &[f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (i, row) in self.a.iter().enumerate() {
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// `Aⁱ B2`.
    pub fn a_pow_b2(&self, i: usize) -> [f64; 4] {
        let mut v = self.b2;
        for _ in 0..i {
            v = self.apply_a(&v);
        }
        v
    }
}

/// Disturbance set `W = B2·[u²min, u²max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSegment {
    pub u2_min: f64,
    pub u2_max: f64,
    pub direction: [f64; 4],
}

impl DisturbanceSegment {
    pub fn new(u2_min: f64, u2_max: f64, m: &LinearModel) -> Result<Self> {
        if !(u2_min <= 0.0 && 0.0 <= u2_max) {
            return Err(invalid("u2 bounds", "the disturbance set must contain 0"));
        }
        Ok(Self {
            u2_min,
            u2_max,
            direction: m.b2,
        })
    }

    pub fn amplitude(&self) -> f64 {
        self.u2_min.abs().max(self.u2_max.abs())
    }
}

/// Axis-aligned box; entries may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

impl IntervalSet {
    pub fn new(lower: [f64; 4], upper: [f64; 4]) -> Result<Self> {
        if let Some(axis) = (0..4).find(|&i| lower[i] > upper[i] + EMPTY_TOL) {
            return Err(Error::EmptySet { axis });
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded() -> Self {
        Self {
            lower: [f64::NEG_INFINITY; 4],
            upper: [f64::INFINITY; 4],
        }
    }

    pub fn contains(&self, x: &[f64; 4]) -> bool {
        (0..4).all(|i| self.lower[i] <= x[i] && x[i] <= self.upper[i])
    }
}

/// Accumulated worst-case offsets `e_j` for `j = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenedMargins {
    pub e: Vec<[f64; 4]>,
}

impl TightenedMargins {
    pub fn horizon(&self) -> usize {
        self.e.len() - 1
    }

    pub fn at(&self, j: usize) -> [f64; 4] {
        self.e[j]
    }

    pub fn delta_s(&self, j: usize) -> f64 {
        self.e[j][0]
    }
}

pub fn nominal_step(x: &StateVec, u1: InputScalar, m: &LinearModel) -> StateVec {
    let ax = m.apply_a(&x.to_array());
    StateVec::from_array(core::array::from_fn(|i| ax[i] + m.b1[i] * u1))
}

pub fn true_step(x: &StateVec, u1: InputScalar, u2: InputScalar, m: &LinearModel) -> StateVec {
    let xn = nominal_step(x, u1, m).to_array();
    StateVec::from_array(core::array::from_fn(|i| xn[i] + m.b2[i] * u2))
}

pub fn propagate_disturbance_margins(
    m: &LinearModel,
    w: &DisturbanceSegment,
    n: usize,
) -> Result<TightenedMargins> {
    if n == 0 {
        return Err(invalid("N", "horizon must be at least 1"));
    }
    let mut e = Vec::with_capacity(n + 1);
    let mut acc = [0.0; 4];
    e.push(acc);
    let mut dir = w.direction;
    for _ in 0..n {
        for (a, d) in acc.iter_mut().zip(dir.iter()) {
            // support of the segment d·[u2min, u2max] along one axis
            *a += (d * w.u2_min).abs().max((d * w.u2_max).abs());
        }
        e.push(acc);
        dir = m.apply_a(&dir);
    }
    Ok(TightenedMargins { e })
}

pub fn pontryagin_diff_interval(set: &IntervalSet, e: &[f64; 4]) -> Result<IntervalSet> {
    if e.iter().any(|v| *v < 0.0 || v.is_nan()) {
        return Err(invalid("e", "margins must be nonnegative"));
    }
    let lower: [f64; 4] = core::array::from_fn(|i| set.lower[i] + e[i]);
    let upper: [f64; 4] = core::array::from_fn(|i| set.upper[i] - e[i]);
    for i in 0..4 {
        if upper[i] < lower[i] - EMPTY_TOL {
            return Err(Error::EmptySet { axis: i });
        }
    }
    Ok(IntervalSet { lower, upper })
}
