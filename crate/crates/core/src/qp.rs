//! Dense primal active-set solver for strictly convex QPs
//!
//! ```text
//! min ½ xᵀHx + gᵀx   s.t.  A x ≤ b,  lb ≤ x ≤ ub
//! ```
//!
//! Bounds are handled by fixing variables, general rows by a Schur complement
//! on the reduced Hessian. An infeasible start is handled with one elastic
//! variable `t ≥ 0` relaxing every general row (`A x − t ≤ b`, cost `M t`).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    /// Elastic variable stayed positive: the rows cannot all be satisfied.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpProblem<'a> {
    pub n: usize,
    /// Row-major `n × n`, symmetric positive definite.
    pub h: &'a [f64],
    pub g: &'a [f64],
    /// Row-major `m × n`.
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub lb: &'a [f64],
    pub ub: &'a [f64],
}

impl QpProblem<'_> {
    pub fn m(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Elastic penalty weight.
    pub elastic_weight: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-9,
            elastic_weight: 1e7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of the general rows (≥ 0).
    pub lambda: Vec<f64>,
    /// Multipliers of lower/upper bounds (≥ 0).
    pub mu_lb: Vec<f64>,
    pub mu_ub: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Elastic relaxation at the solution (0 if none was needed).
    pub elastic: f64,
    pub objective: f64,
}

/// In-place lower Cholesky of a row-major matrix; `false` if not positive definite.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    cholesky_rel(a, n, 0.0)
}

/// Cholesky that also fails when a pivot drops below `rel` times its original diagonal.
fn cholesky_rel(a: &mut [f64], n: usize, rel: f64) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        let floor = rel * d.abs();
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > floor) {
            return false;
        }
        let d = libm::sqrt(d);
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

fn forward(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

fn backward(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Fix {
    Free,
    Lower,
    Upper,
}

struct Work<'a> {
    p: QpProblem<'a>,
    opts: QpOptions,
    fix: Vec<Fix>,
    rows: Vec<usize>,
    in_ws: Vec<bool>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Work<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.p.a[i * self.p.n..(i + 1) * self.p.n]
    }

    /// Equality-constrained step and working-row multipliers. The step also removes
    /// any residual of the working rows at `x`, so rounding does not accumulate.
    fn eqp(&self, q: &[f64], x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.p.n;
        let free: Vec<usize> = (0..n).filter(|&i| self.fix[i] == Fix::Free).collect();
        let nf = free.len();
        let nw = self.rows.len();
        let mut d = vec![0.0; n];
        if nf == 0 {
            return Some((d, vec![0.0; nw]));
        }
        let mut l = vec![0.0; nf * nf];
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                l[r * nf + c] = self.p.h[i * n + j];
            }
        }
        if !cholesky_in_place(&mut l, nf) {
            return None;
        }
        let mut rq: Vec<f64> = free.iter().map(|&i| q[i]).collect();
        forward(&l, nf, &mut rq);
        // Y = L⁻¹ A_Fᵀ, stored column by column
        let mut y = vec![0.0; nw * nf];
        for (k, &ri) in self.rows.iter().enumerate() {
            let row = self.row(ri);
            let col = &mut y[k * nf..(k + 1) * nf];
            for (c, &j) in free.iter().enumerate() {
                col[c] = row[j];
            }
            forward(&l, nf, col);
        }
        let mut lam = vec![0.0; nw];
        if nw > 0 {
            let mut s = vec![0.0; nw * nw];
            for a in 0..nw {
                for b in 0..=a {
                    let v = dot(&y[a * nf..(a + 1) * nf], &y[b * nf..(b + 1) * nf]);
                    s[a * nw + b] = v;
                    s[b * nw + a] = v;
                }
            }
            for (a, &ri) in self.rows.iter().enumerate() {
                let resid = self.p.b[ri] - dot(self.row(ri), x);
                lam[a] = -dot(&y[a * nf..(a + 1) * nf], &rq) - resid;
            }
            // nearly dependent working rows make the multipliers meaningless
            if !cholesky_rel(&mut s, nw, 1e-10) {
                return None;
            }
            forward(&s, nw, &mut lam);
            backward(&s, nw, &mut lam);
        }
        let mut t = rq;
        for (k, lk) in lam.iter().enumerate() {
            for c in 0..nf {
                t[c] += y[k * nf + c] * lk;
            }
        }
        backward(&l, nf, &mut t);
        for (c, &i) in free.iter().enumerate() {
            d[i] = -t[c];
        }
        Some((d, lam))
    }
}

impl Work<'_> {
    /// Working row to swap out for the dependent row `r`: writes `a_r ≈ Σ c_k a_k` on the
    /// free variables and picks the smallest `λ_k / c_k` over `c_k > 0`.
    fn exchange_candidate(&self, r: usize, q: &[f64], x: &[f64]) -> Option<usize> {
        let (_, lam) = self.eqp(q, x)?;
        let free: Vec<usize> = (0..self.p.n)
            .filter(|&i| self.fix[i] == Fix::Free)
            .collect();
        let nw = self.rows.len();
        if nw == 0 {
            return None;
        }
        let proj = |i: usize| -> Vec<f64> { free.iter().map(|&j| self.row(i)[j]).collect() };
        let rows: Vec<Vec<f64>> = self.rows.iter().map(|&i| proj(i)).collect();
        let ar = proj(r);
        let mut g = vec![0.0; nw * nw];
        let mut c: Vec<f64> = rows.iter().map(|a| dot(a, &ar)).collect();
        for a in 0..nw {
            for b in 0..=a {
                let v = dot(&rows[a], &rows[b]);
                g[a * nw + b] = v;
                g[b * nw + a] = v;
            }
        }
        if !cholesky_in_place(&mut g, nw) {
            return None;
        }
        forward(&g, nw, &mut c);
        backward(&g, nw, &mut c);
        let cmax = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut best: Option<(f64, usize)> = None;
        for k in 0..nw {
            if c[k] > 1e-9 * cmax {
                let ratio = lam[k].max(0.0) / c[k];
                if best.map_or(true, |(v, _)| ratio < v) {
                    best = Some((ratio, k));
                }
            }
        }
        best.map(|(_, k)| k)
    }
}

fn objective(p: &QpProblem, x: &[f64]) -> f64 {
    let n = p.n;
    let mut f = 0.0;
    for i in 0..n {
        let hx: f64 = (0..n).map(|j| p.h[i * n + j] * x[j]).sum();
        f += x[i] * (0.5 * hx + p.g[i]);
    }
    f
}

/// Solve from `x0`, which must satisfy the bounds.
pub fn solve_qp(p: &QpProblem, x0: &[f64], opts: &QpOptions) -> QpSolution {
    let n = p.n;
    let m = p.m();
    let x0: Vec<f64> = (0..n).map(|i| x0[i].clamp(p.lb[i], p.ub[i])).collect();
    let viol = (0..m)
        .map(|r| dot(&p.a[r * n..(r + 1) * n], &x0) - p.b[r])
        .fold(0.0f64, f64::max);
    if viol <= opts.tol {
        return active_set(p.clone(), x0, opts);
    }
    // elastic problem in (x, t)
    let ne = n + 1;
    let mut h = vec![0.0; ne * ne];
    for i in 0..n {
        h[i * ne..i * ne + n].copy_from_slice(&p.h[i * n..(i + 1) * n]);
    }
    let hmax = (0..n).map(|i| p.h[i * n + i]).fold(1.0, f64::max);
    h[n * ne + n] = hmax;
    let mut g = p.g.to_vec();
    g.push(opts.elastic_weight);
    let mut a = vec![0.0; m * ne];
    for r in 0..m {
        a[r * ne..r * ne + n].copy_from_slice(&p.a[r * n..(r + 1) * n]);
        a[r * ne + n] = -1.0;
    }
    let mut lb = p.lb.to_vec();
    lb.push(0.0);
    let mut ub = p.ub.to_vec();
    ub.push(f64::INFINITY);
    let mut xe = x0;
    xe.push(viol);
    let pe = QpProblem {
        n: ne,
        h: &h,
        g: &g,
        a: &a,
        b: p.b,
        lb: &lb,
        ub: &ub,
    };
    let mut sol = active_set(pe, xe, opts);
    let t = sol.x.pop().unwrap_or(0.0);
    sol.mu_lb.pop();
    sol.mu_ub.pop();
    sol.elastic = t;
    sol.objective = objective(p, &sol.x);
    if t > 1e3 * opts.tol.max(1e-12) && sol.status == QpStatus::Optimal {
        sol.status = QpStatus::Infeasible;
    }
    sol
}

fn active_set(p: QpProblem, mut x: Vec<f64>, opts: &QpOptions) -> QpSolution {
    let n = p.n;
    let m = p.m();
    let mut w = Work {
        p,
        opts: *opts,
        fix: vec![Fix::Free; n],
        rows: Vec::new(),
        in_ws: vec![false; m],
    };
    // variables sitting on a bound start fixed
    for i in 0..n {
        if x[i] <= w.p.lb[i] {
            w.fix[i] = Fix::Lower;
        } else if x[i] >= w.p.ub[i] {
            w.fix[i] = Fix::Upper;
        }
    }
    let mut status = QpStatus::MaxIter;
    let mut lam_full = vec![0.0; m];
    let mut mu_lb = vec![0.0; n];
    let mut mu_ub = vec![0.0; n];
    let mut iters = 0;
    let tol = w.opts.tol;
    let mut at_minimizer = false;
    let mut skip: Option<usize> = None;
    while iters < w.opts.max_iter {
        iters += 1;
        let q: Vec<f64> = (0..n)
            .map(|i| dot(&w.p.h[i * n..(i + 1) * n], &x) + w.p.g[i])
            .collect();
        let Some((d, lam)) = w.eqp(&q, &x) else {
            // dependent working rows: the most recent one enters in exchange for the row
            // it depends on with the smallest multiplier ratio, or leaves again
            let Some(r) = w.rows.pop() else { break };
            w.in_ws[r] = false;
            if let Some(k) = w.exchange_candidate(r, &q, &x) {
                let old = w.rows.remove(k);
                w.in_ws[old] = false;
                w.rows.push(r);
                w.in_ws[r] = true;
            } else {
                skip = Some(r);
            }
            continue;
        };
        let dn = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let xn = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if at_minimizer || dn <= 1e-10 * xn {
            at_minimizer = false;
            // multipliers of the fixed bounds from stationarity
            let mut atl = vec![0.0; n];
            for (k, &r) in w.rows.iter().enumerate() {
                for (j, a) in w.row(r).iter().enumerate() {
                    atl[j] += a * lam[k];
                }
            }
            let mut worst: Option<(f64, bool, usize)> = None;
            for (k, &l) in lam.iter().enumerate() {
                if l < -tol && worst.map_or(true, |(v, _, _)| l < v) {
                    worst = Some((l, true, k));
                }
            }
            for i in 0..n {
                let mu = match w.fix[i] {
                    Fix::Free => continue,
                    Fix::Lower => q[i] + atl[i],
                    Fix::Upper => -(q[i] + atl[i]),
                };
                if mu < -tol && worst.map_or(true, |(v, _, _)| mu < v) {
                    worst = Some((mu, false, i));
                }
            }
            match worst {
                None => {
                    for v in lam_full.iter_mut() {
                        *v = 0.0;
                    }
                    for (k, &r) in w.rows.iter().enumerate() {
                        lam_full[r] = lam[k].max(0.0);
                    }
                    for i in 0..n {
                        match w.fix[i] {
                            Fix::Lower => mu_lb[i] = (q[i] + atl[i]).max(0.0),
                            Fix::Upper => mu_ub[i] = (-(q[i] + atl[i])).max(0.0),
                            Fix::Free => {}
                        }
                    }
                    status = QpStatus::Optimal;
                    break;
                }
                Some((_, true, k)) => {
                    let r = w.rows.remove(k);
                    w.in_ws[r] = false;
                }
                Some((_, false, i)) => w.fix[i] = Fix::Free,
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut block: Option<(bool, usize, Fix)> = None;
        let d2 = libm::sqrt(dot(&d, &d));
        for r in 0..m {
            if w.in_ws[r] || skip == Some(r) {
                continue;
            }
            let ad = dot(w.row(r), &d);
            // rows the step only touches at rounding level cannot block it
            if ad > 1e-14 && ad > 1e-12 * d2 * libm::sqrt(dot(w.row(r), w.row(r))) {
                let slack = (w.p.b[r] - dot(w.row(r), &x)).max(0.0);
                let t = slack / ad;
                if t < alpha {
                    alpha = t;
                    block = Some((true, r, Fix::Free));
                }
            }
        }
        for i in 0..n {
            if w.fix[i] != Fix::Free {
                continue;
            }
            if d[i] > 0.0 && w.p.ub[i].is_finite() {
                let t = ((w.p.ub[i] - x[i]) / d[i]).max(0.0);
                if t < alpha {
                    alpha = t;
                    block = Some((false, i, Fix::Upper));
                }
            } else if d[i] < 0.0 && w.p.lb[i].is_finite() {
                let t = ((w.p.lb[i] - x[i]) / d[i]).max(0.0);
                if t < alpha {
                    alpha = t;
                    block = Some((false, i, Fix::Lower));
                }
            }
        }
        skip = None;
        for i in 0..n {
            x[i] += alpha * d[i];
        }
        // a full step lands on the minimizer of the current working set
        at_minimizer = block.is_none();
        match block {
            Some((true, r, _)) => {
                w.rows.push(r);
                w.in_ws[r] = true;
            }
            Some((false, i, f)) => {
                x[i] = if f == Fix::Lower {
                    w.p.lb[i]
                } else {
                    w.p.ub[i]
                };
                w.fix[i] = f;
            }
            None => {}
        }
    }
    let objective = objective(&w.p, &x);
    QpSolution {
        x,
        lambda: lam_full,
        mu_lb,
        mu_ub,
        status,
        iterations: iters,
        elastic: 0.0,
        objective,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn solve(
        h: &[f64],
        g: &[f64],
        a: &[f64],
        b: &[f64],
        lb: &[f64],
        ub: &[f64],
        x0: &[f64],
    ) -> QpSolution {
        let p = QpProblem {
            n: g.len(),
            h,
            g,
            a,
            b,
            lb,
            ub,
        };
        solve_qp(&p, x0, &QpOptions::default())
    }

    #[test]
    fn unconstrained_minimum() {
        let s = solve(
            &[2.0, 0.0, 0.0, 4.0],
            &[-2.0, -4.0],
            &[],
            &[],
            &[-9.0; 2],
            &[9.0; 2],
            &[0.0, 0.0],
        );
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_and_row_active() {
        // min (x-2)² + (y-2)²  s.t. x + y ≤ 2, x ≤ 0.5
        let s = solve(
            &[2.0, 0.0, 0.0, 2.0],
            &[-4.0, -4.0],
            &[1.0, 1.0],
            &[2.0],
            &[-9.0, -9.0],
            &[0.5, 9.0],
            &[0.0, 0.0],
        );
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(
            (s.x[0] - 0.5).abs() < 1e-10 && (s.x[1] - 1.5).abs() < 1e-10,
            "{:?}",
            s.x
        );
        assert!((s.lambda[0] - 1.0).abs() < 1e-9);
        assert!((s.mu_ub[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_start_recovers() {
        // start violates x ≥ 1 written as −x ≤ −1
        let s = solve(&[2.0], &[0.0], &[-1.0], &[-1.0], &[-5.0], &[5.0], &[0.0]);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-9);
        assert!(s.elastic < 1e-9);
    }

    #[test]
    fn infeasible_rows_flagged() {
        // x ≥ 1 and x ≤ 0
        let s = solve(
            &[2.0],
            &[0.0],
            &[-1.0, 1.0],
            &[-1.0, 0.0],
            &[-5.0],
            &[5.0],
            &[0.0],
        );
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!((s.elastic - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky_in_place(&mut a, 2));
    }
}
