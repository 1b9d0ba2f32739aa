//! Gaussian-process model of the Agent-2 acceleration and Taylor propagation of
//! the predictive distribution along the performance horizon.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{nominal_step, InputScalar, LinearModel, StateVec};
use crate::error::{invalid, Error, Result};

/// Hyperparameters and sparse-mode settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpParams {
    pub sigma_d: f64,
    pub length_scales: [f64; 4],
    pub jitter: f64,
    /// Number of inducing inputs `M` in sparse mode.
    pub inducing: usize,
    /// Exact GP up to this many points, sparse above.
    pub sparse_threshold: usize,
    /// Optional FIFO cap on the dataset; `None` keeps every observation.
    pub capacity: Option<usize>,
}

impl Default for GpParams {
    fn default() -> Self {
        Self {
            sigma_d: 0.7,
            length_scales: [5.0, 100.0, 500.0, 100.0],
            jitter: 1e-6,
            inducing: 4,
            sparse_threshold: 40,
            capacity: None,
        }
    }
}

impl GpParams {
    pub fn kernel(&self) -> Result<KernelParams> {
        KernelParams::new(self.sigma_d, self.length_scales, self.jitter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_d: f64,
    pub length_scales: [f64; 4],
    pub jitter: f64,
}

impl KernelParams {
    pub fn new(sigma_d: f64, length_scales: [f64; 4], jitter: f64) -> Result<Self> {
        if !(sigma_d > 0.0) {
            return Err(invalid("sigma_d", "must be positive"));
        }
        if length_scales.iter().any(|l| !(*l > 0.0)) {
            return Err(invalid("length_scales", "must be positive"));
        }
        if !(jitter > 0.0) {
            return Err(invalid("jitter", "must be positive"));
        }
        Ok(Self {
            sigma_d,
            length_scales,
            jitter,
        })
    }

    pub fn prior_var(&self) -> f64 {
        self.sigma_d * self.sigma_d
    }
}

/// Squared-exponential kernel `σ_d² exp(−½ (z−z')ᵀ L⁻² (z−z'))`.
pub fn kernel(z: &[f64; 4], zp: &[f64; 4], p: &KernelParams) -> f64 {
    let mut r2 = 0.0;
    for i in 0..4 {
        let d = (z[i] - zp[i]) / p.length_scales[i];
        r2 += d * d;
    }
    p.prior_var() * libm::exp(-0.5 * r2)
}

/// Observed inputs `Z` (regressor = state) and targets `y` (Agent-2 acceleration).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GpDataset {
    pub z: Vec<[f64; 4]>,
    pub y: Vec<f64>,
    pub capacity: Option<usize>,
}

impl GpDataset {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            z: Vec::new(),
            y: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn push(&mut self, z: [f64; 4], y: f64) {
        if let Some(cap) = self.capacity {
            if cap == 0 {
                return;
            }
            if self.y.len() == cap {
                self.z.remove(0);
                self.y.remove(0);
            }
        }
        self.z.push(z);
        self.y.push(y);
    }
}

/// Recover `u²` from a transition: `y = (Δv⁺ − Δv + Ts u¹)/Ts`.
pub fn observe(x: &StateVec, u1: InputScalar, x_next: &StateVec, m: &LinearModel) -> f64 {
    (x_next.delta_v - x.delta_v + m.ts * u1) / m.ts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpMode {
    Exact,
    Sparse,
}

/// Fitted posterior. Mean is `Σ_i w_i k(b_i, z)` over basis points `b`
/// (training inputs when exact, inducing inputs when sparse).
#[derive(Debug)]
pub struct GpPosterior {
    pub params: KernelParams,
    pub mode: GpMode,
    basis: Vec<[f64; 4]>,
    weights: Vec<f64>,
    // lower Cholesky factor of K_bb (+ jitter), row major
    chol: Vec<f64>,
    // sparse only: lower Cholesky factor of I + V Λ⁻¹ Vᵀ
    chol_a: Vec<f64>,
    var_evals: AtomicUsize,
    clamp_events: AtomicUsize,
}

impl Clone for GpPosterior {
    fn clone(&self) -> Self {
        Self {
            params: self.params,
            mode: self.mode,
            basis: self.basis.clone(),
            weights: self.weights.clone(),
            chol: self.chol.clone(),
            chol_a: self.chol_a.clone(),
            var_evals: AtomicUsize::new(self.var_evals.load(Ordering::Relaxed)),
            clamp_events: AtomicUsize::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

/// Mean, gradient and variance from one kernel-vector evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpEval {
    pub mean: f64,
    pub grad: [f64; 4],
    pub var: f64,
}

fn cholesky(k: DMatrix<f64>) -> Result<Vec<f64>> {
    let n = k.nrows();
    let l = k.cholesky().ok_or(Error::FactorizationFailure)?.unpack();
    let mut out = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            out[i * n + j] = l[(i, j)];
        }
    }
    Ok(out)
}

/// Dot product with error-free transformations (twice the working precision).
/// The weights of a nearly singular Gram matrix are large with alternating signs,
/// so plain summation loses most of the digits of the mean.
fn dot2(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let pe = libm::fma(*x, *y, -p);
        let t = s + p;
        let z = t - s;
        c += (s - (t - z)) + (p - z) + pe;
        s = t;
    }
    s + c
}

/// Solve `L x = b` in place for a row-major lower-triangular `L`.
fn forward_sub(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(b.iter()).map(|(a, x)| a * x).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

/// Solve `Lᵀ x = b` in place.
fn backward_sub(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

impl GpPosterior {
    fn prior(params: KernelParams, mode: GpMode) -> Self {
        Self {
            params,
            mode,
            basis: Vec::new(),
            weights: Vec::new(),
            chol: Vec::new(),
            chol_a: Vec::new(),
            var_evals: AtomicUsize::new(0),
            clamp_events: AtomicUsize::new(0),
        }
    }

    pub fn basis(&self) -> &[[f64; 4]] {
        &self.basis
    }

    pub fn is_prior(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_events.load(Ordering::Relaxed)
    }

    pub fn var_evals(&self) -> usize {
        self.var_evals.load(Ordering::Relaxed)
    }

    fn kvec(&self, z: &[f64; 4]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|b| kernel(b, z, &self.params))
            .collect()
    }

    fn mean_from(&self, k: &[f64]) -> f64 {
        dot2(k, &self.weights)
    }

    fn var_from(&self, mut k: Vec<f64>) -> f64 {
        let n = self.basis.len();
        let mut v = self.params.prior_var();
        if n > 0 {
            forward_sub(&self.chol, n, &mut k);
            v -= k.iter().map(|a| a * a).sum::<f64>();
            if self.mode == GpMode::Sparse {
                forward_sub(&self.chol_a, n, &mut k);
                v += k.iter().map(|a| a * a).sum::<f64>();
            }
        }
        self.var_evals.fetch_add(1, Ordering::Relaxed);
        if v < 0.0 {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            0.0
        } else {
            v
        }
    }

    pub fn mean(&self, z: &[f64; 4]) -> f64 {
        if self.is_prior() {
            return 0.0;
        }
        self.mean_from(&self.kvec(z))
    }

    pub fn var(&self, z: &[f64; 4]) -> f64 {
        let k = self.kvec(z);
        self.var_from(k)
    }

    pub fn mean_grad(&self, z: &[f64; 4]) -> [f64; 4] {
        let k = self.kvec(z);
        self.grad_from(z, &k)
    }

    fn grad_from(&self, z: &[f64; 4], k: &[f64]) -> [f64; 4] {
        let mut g = [0.0; 4];
        for ((b, kb), w) in self.basis.iter().zip(k).zip(&self.weights) {
            let c = w * kb;
            for a in 0..4 {
                let l = self.params.length_scales[a];
                g[a] -= c * (z[a] - b[a]) / (l * l);
            }
        }
        g
    }

    pub fn eval(&self, z: &[f64; 4]) -> GpEval {
        let k = self.kvec(z);
        let mean = self.mean_from(&k);
        let grad = self.grad_from(z, &k);
        let var = self.var_from(k);
        GpEval { mean, grad, var }
    }

    /// Mean and gradient only (no triangular solves).
    pub fn eval_mean(&self, z: &[f64; 4]) -> (f64, [f64; 4]) {
        let k = self.kvec(z);
        (self.mean_from(&k), self.grad_from(z, &k))
    }
}

pub fn posterior_mean(gp: &GpPosterior, z: &[f64; 4]) -> f64 {
    gp.mean(z)
}

pub fn posterior_var(gp: &GpPosterior, z: &[f64; 4]) -> f64 {
    gp.var(z)
}

pub fn posterior_mean_grad(gp: &GpPosterior, z: &[f64; 4]) -> [f64; 4] {
    gp.mean_grad(z)
}

/// Exact posterior on the full dataset.
pub fn fit(ds: &GpDataset, p: &KernelParams) -> Result<GpPosterior> {
    let n = ds.len();
    let mut post = GpPosterior::prior(*p, GpMode::Exact);
    if n == 0 {
        return Ok(post);
    }
    let k = DMatrix::from_fn(n, n, |i, j| {
        kernel(&ds.z[i], &ds.z[j], p) + if i == j { p.jitter } else { 0.0 }
    });
    let chol = cholesky(k.clone())?;
    let mut alpha = ds.y.clone();
    forward_sub(&chol, n, &mut alpha);
    backward_sub(&chol, n, &mut alpha);
    // iterative refinement with an accurate residual
    let mut row = alloc::vec![0.0; n + 1];
    let mut ext = alloc::vec![0.0; n + 1];
    for _ in 0..2 {
        ext[..n].copy_from_slice(&alpha);
        let mut r: Vec<f64> = (0..n)
            .map(|i| {
                for j in 0..n {
                    row[j] = k[(i, j)];
                }
                row[n] = -1.0;
                ext[n] = ds.y[i];
                -dot2(&row, &ext)
            })
            .collect();
        forward_sub(&chol, n, &mut r);
        backward_sub(&chol, n, &mut r);
        for (a, d) in alpha.iter_mut().zip(&r) {
            *a += d;
        }
    }
    post.basis = ds.z.clone();
    post.weights = alpha;
    post.chol = chol;
    Ok(post)
}

/// FITC pseudo-input posterior with the given inducing inputs.
pub fn fit_sparse(ds: &GpDataset, inducing: &[[f64; 4]], p: &KernelParams) -> Result<GpPosterior> {
    let n = ds.len();
    let m = inducing.len();
    let mut post = GpPosterior::prior(*p, GpMode::Sparse);
    if n == 0 || m == 0 {
        return Ok(post);
    }
    let kuu = DMatrix::from_fn(m, m, |i, j| {
        kernel(&inducing[i], &inducing[j], p) + if i == j { p.jitter } else { 0.0 }
    });
    let lu = cholesky(kuu)?;
    // V = L_u⁻¹ K_uf, column per training point
    let mut v = alloc::vec![0.0; m * n];
    let mut lam = alloc::vec![0.0; n];
    for (c, z) in ds.z.iter().enumerate() {
        let mut col: Vec<f64> = inducing.iter().map(|u| kernel(u, z, p)).collect();
        forward_sub(&lu, m, &mut col);
        let q: f64 = col.iter().map(|a| a * a).sum();
        lam[c] = (p.prior_var() - q).max(p.jitter);
        for r in 0..m {
            v[r * n + c] = col[r];
        }
    }
    let a = DMatrix::from_fn(m, m, |i, j| {
        let mut s = if i == j { 1.0 } else { 0.0 };
        for c in 0..n {
            s += v[i * n + c] * v[j * n + c] / lam[c];
        }
        s
    });
    let la = cholesky(a)?;
    let mut beta: Vec<f64> = (0..m)
        .map(|r| (0..n).map(|c| v[r * n + c] * ds.y[c] / lam[c]).sum())
        .collect();
    forward_sub(&la, m, &mut beta);
    backward_sub(&la, m, &mut beta);
    backward_sub(&lu, m, &mut beta);
    post.basis = inducing.to_vec();
    post.weights = beta;
    post.chol = lu;
    post.chol_a = la;
    Ok(post)
}

/// Equally spaced horizon indices `round(j·N/(M−1))`; `M = 1` picks the midpoint.
pub fn inducing_indices(horizon: usize, m: usize) -> Vec<usize> {
    if m == 0 {
        return Vec::new();
    }
    if m > horizon {
        return (0..=horizon).collect();
    }
    if m == 1 {
        return alloc::vec![horizon.div_ceil(2)];
    }
    (0..m)
        .map(|j| {
            let idx = libm::round(j as f64 * horizon as f64 / (m - 1) as f64) as usize;
            idx.min(horizon)
        })
        .collect()
}

pub fn select_inducing(traj: &[[f64; 4]], m: usize) -> Vec<[f64; 4]> {
    if traj.is_empty() {
        return Vec::new();
    }
    inducing_indices(traj.len() - 1, m)
        .into_iter()
        .map(|i| traj[i])
        .collect()
}

/// Exact below the sparse threshold, FITC on `traj`-derived inducing inputs above.
pub fn fit_online(ds: &GpDataset, traj: &[[f64; 4]], params: &GpParams) -> Result<GpPosterior> {
    let kp = params.kernel()?;
    if ds.len() <= params.sparse_threshold {
        fit(ds, &kp)
    } else {
        fit_sparse(ds, &select_inducing(traj, params.inducing), &kp)
    }
}

/// Joint covariance of `(x, d)` at one horizon step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointCovariance {
    pub sigma_x: [[f64; 4]; 4],
    pub sigma_xd: [f64; 4],
    pub sigma_d: f64,
}

impl JointCovariance {
    pub fn zero() -> Self {
        Self {
            sigma_x: [[0.0; 4]; 4],
            sigma_xd: [0.0; 4],
            sigma_d: 0.0,
        }
    }

    /// Taylor rule: `Σ_xd = Σ_x ∇dᵀ`, `Σ_d = ∇d Σ_x ∇dᵀ + var`.
    pub fn linearize(sigma_x: [[f64; 4]; 4], grad: &[f64; 4], var: f64) -> Self {
        let mut xd = [0.0; 4];
        for i in 0..4 {
            xd[i] = (0..4).map(|j| sigma_x[i][j] * grad[j]).sum();
        }
        let dd = (0..4).map(|i| grad[i] * xd[i]).sum::<f64>() + var;
        Self {
            sigma_x,
            sigma_xd: xd,
            sigma_d: dd,
        }
    }

    pub fn joint(&self) -> [[f64; 5]; 5] {
        let mut j = [[0.0; 5]; 5];
        for r in 0..4 {
            j[r][..4].copy_from_slice(&self.sigma_x[r]);
            j[r][4] = self.sigma_xd[r];
            j[4][r] = self.sigma_xd[r];
        }
        j[4][4] = self.sigma_d;
        j
    }
}

/// Counters for the symmetric/PSD projection in [`propagate`].
#[derive(Debug, Default)]
pub struct PropagationStats {
    pub projections: AtomicUsize,
}

/// One step of mean/covariance propagation. The returned covariance carries
/// only `Σ_x`; its cross terms are filled when it is linearized next step.
pub fn propagate(
    gp: &GpPosterior,
    x_hat: &StateVec,
    sigma: &JointCovariance,
    u1: InputScalar,
    m: &LinearModel,
) -> (StateVec, JointCovariance) {
    let z = x_hat.to_array();
    let ev = gp.eval(&z);
    let mean = {
        let n = nominal_step(x_hat, u1, m).to_array();
        StateVec::from_array(core::array::from_fn(|i| n[i] + m.b2[i] * ev.mean))
    };
    let joint = JointCovariance::linearize(sigma.sigma_x, &ev.grad, ev.var);
    (
        mean,
        JointCovariance {
            sigma_x: push_covariance(&joint, m),
            ..JointCovariance::zero()
        },
    )
}

/// `[A B2] Σ [A B2]ᵀ`, symmetrized; negative diagonal entries clamped.
pub fn push_covariance(j: &JointCovariance, m: &LinearModel) -> [[f64; 4]; 4] {
    let full = j.joint();
    let mut g = [[0.0; 5]; 4];
    for r in 0..4 {
        g[r][..4].copy_from_slice(&m.a[r]);
        g[r][4] = m.b2[r];
    }
    let mut t = [[0.0; 5]; 4];
    for r in 0..4 {
        for c in 0..5 {
            t[r][c] = (0..5).map(|k| g[r][k] * full[k][c]).sum();
        }
    }
    let mut out = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            out[r][c] = (0..5).map(|k| t[r][k] * g[c][k]).sum();
        }
    }
    for r in 0..4 {
        for c in r + 1..4 {
            let s = 0.5 * (out[r][c] + out[c][r]);
            out[r][c] = s;
            out[c][r] = s;
        }
        if out[r][r] < 0.0 {
            out[r][r] = 0.0;
        }
    }
    out
}

/// `σ_{s²} = sqrt(Σ_x[Δs,Δs])`; `s¹` is deterministic so `var(s²) = var(Δs)`.
pub fn agent2_pos_std(sigma: &JointCovariance) -> f64 {
    libm::sqrt(sigma.sigma_x[0][0].max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::true_step;
    use alloc::vec;
    use alloc::vec::Vec;

    fn kp() -> KernelParams {
        GpParams::default().kernel().unwrap()
    }

    fn dataset(pts: &[([f64; 4], f64)]) -> GpDataset {
        let mut d = GpDataset::new(None);
        for (z, y) in pts {
            d.push(*z, *y);
        }
        d
    }

    #[test]
    fn kernel_at_coincident_points() {
        let z = [1.0, 2.0, 3.0, 4.0];
        assert!((kernel(&z, &z, &kp()) - 0.49).abs() < 1e-15);
        let a = [0.3, -1.0, 20.0, 7.0];
        assert_eq!(kernel(&z, &a, &kp()), kernel(&a, &z, &kp()));
        let mut prev = f64::INFINITY;
        for t in 0..20 {
            let far = [t as f64 * 3.0, 0.0, 0.0, 0.0];
            let k = kernel(&[0.0; 4], &far, &kp());
            assert!(k <= prev);
            prev = k;
        }
        assert!(prev < 1e-25);
    }

    #[test]
    fn observe_inverts_true_step() {
        let m = LinearModel::lane_merge(0.25).unwrap();
        let x = StateVec::new(4.0, -1.0, -120.0, 12.0).unwrap();
        let xn = true_step(&x, 1.3, 0.3, &m);
        assert!((observe(&x, 1.3, &xn, &m) - 0.3).abs() < 1e-12);
        let xn = true_step(&x, 1.3, 0.0, &m);
        assert!(observe(&x, 1.3, &xn, &m).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_prior() {
        let gp = fit(&GpDataset::new(None), &kp()).unwrap();
        let z = [1.0, 0.0, -3.0, 2.0];
        assert_eq!(gp.mean(&z), 0.0);
        assert!((gp.var(&z) - 0.49).abs() < 1e-15);
        assert_eq!(gp.mean_grad(&z), [0.0; 4]);
        let gs = fit_sparse(&GpDataset::new(None), &[z], &kp()).unwrap();
        assert_eq!(gs.mean(&z), 0.0);
        assert!((gs.var(&z) - 0.49).abs() < 1e-15);
    }

    #[test]
    fn single_point_interpolates() {
        let z0 = [2.0, 1.0, -100.0, 12.0];
        let gp = fit(&dataset(&[(z0, 0.4)]), &kp()).unwrap();
        assert!((gp.mean(&z0) - 0.4).abs() < 1e-5);
        assert!(gp.var(&z0) < 1e-5);
    }

    #[test]
    fn mean_is_linear_in_targets() {
        let pts = [
            ([0.0, 0.0, 0.0, 0.0], 0.1),
            ([3.0, 1.0, 50.0, 2.0], -0.2),
            ([-4.0, 0.5, 10.0, 1.0], 0.3),
        ];
        let doubled: Vec<_> = pts.iter().map(|(z, y)| (*z, 2.0 * y)).collect();
        let a = fit(&dataset(&pts), &kp()).unwrap();
        let b = fit(&dataset(&doubled), &kp()).unwrap();
        let z = [1.0, 0.2, 20.0, 1.5];
        assert!((b.mean(&z) - 2.0 * a.mean(&z)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_midpoint_gradient_vanishes() {
        let gp = fit(
            &dataset(&[([-2.0, 0.0, 0.0, 0.0], 0.3), ([2.0, 0.0, 0.0, 0.0], 0.3)]),
            &kp(),
        )
        .unwrap();
        assert!(gp.mean_grad(&[0.0; 4])[0].abs() < 1e-15);
    }

    #[test]
    fn sparse_matches_exact_when_inducing_is_training_set() {
        let pts: Vec<_> = (0..6)
            .map(|i| {
                (
                    [
                        i as f64 * 6.0,
                        0.1 * i as f64,
                        -150.0 + 30.0 * i as f64,
                        10.0,
                    ],
                    0.5 * libm::sin(i as f64),
                )
            })
            .collect();
        let ds = dataset(&pts);
        let e = fit(&ds, &kp()).unwrap();
        let s = fit_sparse(&ds, &ds.z, &kp()).unwrap();
        for t in 0..25 {
            let z = [t as f64 * 1.3 - 2.0, 0.2, -140.0 + 7.0 * t as f64, 10.5];
            let (me, ms) = (e.mean(&z), s.mean(&z));
            assert!((me - ms).abs() <= 1e-6 * me.abs().max(1e-3), "{me} {ms}");
        }
    }

    #[test]
    fn inducing_index_rule() {
        assert_eq!(inducing_indices(20, 4), vec![0, 7, 13, 20]);
        assert_eq!(inducing_indices(20, 1), vec![10]);
        assert_eq!(inducing_indices(20, 30), (0..=20).collect::<Vec<_>>());
    }

    #[test]
    fn prior_injection_and_linear_propagation() {
        let m = LinearModel::lane_merge(0.25).unwrap();
        let gp = fit(&GpDataset::new(None), &kp()).unwrap();
        let x = StateVec::new(5.0, 1.0, -100.0, 12.0).unwrap();
        let (xn, s) = propagate(&gp, &x, &JointCovariance::zero(), 0.5, &m);
        assert_eq!(xn, nominal_step(&x, 0.5, &m));
        for r in 0..4 {
            for c in 0..4 {
                assert!((s.sigma_x[r][c] - m.b2[r] * 0.49 * m.b2[c]).abs() < 1e-15);
            }
        }
        let sx = [
            [2.0, 0.5, 0.0, 0.0],
            [0.5, 1.0, 0.0, 0.0],
            [0.0; 4],
            [0.0; 4],
        ];
        let j = JointCovariance::linearize(sx, &[0.0; 4], 0.0);
        let out = push_covariance(&j, &m);
        let ts = 0.25;
        assert!((out[0][0] - (2.0 + 2.0 * ts * 0.5 + ts * ts)).abs() < 1e-14);
        assert!((out[1][1] - 1.0).abs() < 1e-14);
        assert_eq!(
            agent2_pos_std(&JointCovariance {
                sigma_x: [[4.0, 0.0, 0.0, 0.0], [0.0; 4], [0.0; 4], [0.0; 4]],
                ..JointCovariance::zero()
            }),
            2.0
        );
    }

    #[test]
    fn fifo_capacity() {
        let mut d = GpDataset::new(Some(2));
        for i in 0..5 {
            d.push([i as f64; 4], i as f64);
        }
        assert_eq!(d.y, vec![3.0, 4.0]);
    }
}
