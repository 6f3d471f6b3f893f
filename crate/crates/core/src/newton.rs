//! Newton ascent on the semi-dual, used when Sinkhorn stalls.
//!
//! In scaled units (`gamma = g / eps`, `C = c / eps`) the semi-dual
//!
//! ```text
//! F(gamma) = sum_j v_j gamma_j + sum_i w_i phi_i(gamma),
//! phi_i(gamma) = -log sum_j v_j exp(gamma_j - C_ij)
//! ```
//!
//! is concave with gradient `v - col(Pi)` and negative Hessian
//! `M = diag(col) - Pi^T diag(1/w) Pi`, where `Pi` is the plan whose rows are
//! exact. Nearly triangular kernels make Sinkhorn contract very slowly while
//! Newton steps still converge quadratically.

use crate::numeric::{log_sum_exp, pairwise_sum};

/// Problems with more plan entries than this are left to Sinkhorn alone.
pub(crate) const MAX_ENTRIES: usize = 512 * 512;

pub(crate) struct SemiDual<'a> {
    pub dim: usize,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub w: &'a [f64],
    pub log_v: &'a [f64],
}

struct Linearization {
    value: f64,
    /// Row-conditional plan `Pi_ij / w_i`, row-major `n x m`.
    cond: Vec<f64>,
    col: Vec<f64>,
}

impl SemiDual<'_> {
    fn n(&self) -> usize {
        self.w.len()
    }

    fn m(&self) -> usize {
        self.log_v.len()
    }

    fn cost(&self, i: usize, j: usize) -> f64 {
        let d = self.dim;
        let x = &self.xs[i * d..(i + 1) * d];
        let y = &self.ys[j * d..(j + 1) * d];
        0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    fn value(&self, gamma: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.m());
        let row_terms: Vec<f64> = (0..self.n())
            .map(|i| {
                terms.clear();
                terms.extend((0..self.m()).map(|j| self.log_v[j] + gamma[j] - self.cost(i, j)));
                -self.w[i] * log_sum_exp(&terms)
            })
            .collect();
        let lin: Vec<f64> = gamma
            .iter()
            .zip(self.log_v)
            .map(|(g, lv)| g * lv.exp())
            .collect();
        pairwise_sum(&lin) + pairwise_sum(&row_terms)
    }

    fn linearize(&self, gamma: &[f64]) -> Linearization {
        let (n, m) = (self.n(), self.m());
        let mut cond = vec![0.0; n * m];
        let mut row_vals = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut cond[i * m..(i + 1) * m];
            for (j, r) in row.iter_mut().enumerate() {
                *r = self.log_v[j] + gamma[j] - self.cost(i, j);
            }
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|r| *r = (*r - lse).exp());
            row_vals.push(-self.w[i] * lse);
        }
        let mut col = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                col[j] += self.w[i] * cond[i * m + j];
            }
        }
        let lin: Vec<f64> = gamma
            .iter()
            .zip(self.log_v)
            .map(|(g, lv)| g * lv.exp())
            .collect();
        Linearization {
            value: pairwise_sum(&lin) + pairwise_sum(&row_vals),
            cond,
            col,
        }
    }
}

/// `out = M u` with `M = diag(col) - Pi^T diag(1/w) Pi`.
fn apply_m(lin: &Linearization, w: &[f64], u: &[f64], out: &mut [f64]) {
    let m = u.len();
    for (o, (c, ui)) in out.iter_mut().zip(lin.col.iter().zip(u)) {
        *o = c * ui;
    }
    for (i, wi) in w.iter().enumerate() {
        let row = &lin.cond[i * m..(i + 1) * m];
        let s: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
        for (o, r) in out.iter_mut().zip(row) {
            *o -= wi * r * s;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_out_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Jacobi-preconditioned CG for `M x = rhs` on the complement of constants.
fn solve_newton_system(lin: &Linearization, w: &[f64], rhs: &[f64]) -> Vec<f64> {
    let m = rhs.len();
    let mut diag = lin.col.clone();
    for (i, wi) in w.iter().enumerate() {
        for (j, d) in diag.iter_mut().enumerate() {
            let r = lin.cond[i * m + j];
            *d -= wi * r * r;
        }
    }
    let floor = 1e-14 * lin.col.iter().copied().fold(0.0, f64::max);
    let precond: Vec<f64> = diag
        .iter()
        .map(|d| 1.0 / d.max(floor).max(1e-300))
        .collect();

    let mut x = vec![0.0; m];
    let mut r = rhs.to_vec();
    project_out_mean(&mut r);
    let r0 = dot(&r, &r).sqrt();
    if r0 == 0.0 {
        return x;
    }
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut mp = vec![0.0; m];
    for _ in 0..(2 * m).max(10) {
        apply_m(lin, w, &p, &mut mp);
        let pmp = dot(&p, &mp);
        if !(pmp > 0.0) {
            break;
        }
        let alpha = rz / pmp;
        x.iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.iter_mut().zip(&mp).for_each(|(r, q)| *r -= alpha * q);
        if dot(&r, &r).sqrt() <= 1e-10 * r0 {
            break;
        }
        z = r.iter().zip(&precond).map(|(a, b)| a * b).collect();
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
    }
    project_out_mean(&mut x);
    x
}

/// Runs damped Newton steps on `gamma` until the column error of the
/// row-exact plan is below `tolerance` or progress stops.
pub(crate) fn polish(problem: &SemiDual<'_>, gamma: &mut [f64], tolerance: f64, max_steps: usize) {
    let v: Vec<f64> = problem.log_v.iter().map(|l| l.exp()).collect();
    for _ in 0..max_steps {
        let lin = problem.linearize(gamma);
        let grad: Vec<f64> = v.iter().zip(&lin.col).map(|(v, c)| v - c).collect();
        let err: f64 = grad.iter().map(|g| g.abs()).sum();
        if err <= tolerance {
            return;
        }
        let step = solve_newton_system(&lin, problem.w, &grad);
        let slope = dot(&grad, &step);
        if !(slope > 0.0) {
            return;
        }
        let mut t = 1.0;
        let mut trial = vec![0.0; gamma.len()];
        loop {
            for ((tr, g), s) in trial.iter_mut().zip(gamma.iter()).zip(&step) {
                *tr = g + t * s;
            }
            let f = problem.value(&trial);
            if f >= lin.value + 1e-4 * t * slope {
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return;
            }
        }
        gamma.copy_from_slice(&trial);
    }
}
