//! Log-domain Sinkhorn solver for entropic optimal transport.
//!
//! For weighted point clouds `P = sum_i w_i delta_{x_i}` and
//! `Q = sum_j v_j delta_{y_j}` with cost `c(x, y) = |x - y|^2 / 2` the solver
//! computes
//!
//! ```text
//! S_eps(P, Q) = min_pi  <pi, c> + eps * KL(pi | P x Q)
//! ```
//!
//! through its dual. The potentials `(f, g)` are updated alternately by the
//! soft-min fixed point
//!
//! ```text
//! f_i <- -eps log sum_j v_j exp((g_j - c_ij) / eps)
//! g_j <- -eps log sum_i w_i exp((f_i - c_ij) / eps)
//! ```
//!
//! Kernel rows are streamed: the iterations store nothing of size `n x m`.
//! Small problems on which the iterations stall (nearly triangular kernels)
//! get occasional dense Newton steps on the semi-dual.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::row_lse;
use crate::measures::{subgaussian_proxy, DiscreteMeasure};
use crate::newton;
use crate::numeric::pairwise_sum;

/// Ground cost family. Only the halved squared euclidean cost is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    SquaredEuclideanHalved,
}

/// Ground cost together with the entropic regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    kind: CostKind,
    epsilon: f64,
}

impl CostSpec {
    /// `c(x, y) = |x - y|^2 / 2` at regularization `epsilon`.
    pub fn squared_euclidean(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return invalid(format!(
                "epsilon must be positive and finite, got {epsilon}"
            ));
        }
        Ok(Self {
            kind: CostKind::SquaredEuclideanHalved,
            epsilon,
        })
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::squared_euclidean(epsilon)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            CostKind::SquaredEuclideanHalved => 0.5 * sq_dist(x, y),
        }
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// When to warm-start through a decreasing sequence of regularizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonScaling {
    /// Only when `epsilon < 0.05 * median pairwise cost`.
    #[default]
    Auto,
    Never,
    Always,
}

/// Stopping rule and iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Bound on the L1 deviation of the plan marginals.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub epsilon_scaling: EpsilonScaling,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100_000,
            epsilon_scaling: EpsilonScaling::Auto,
        }
    }
}

impl SolverSettings {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

/// Dual potentials on the two supports.
///
/// After [`solve`] the gauge is fixed so that `sum_i w_i f_i = sum_j v_j g_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
}

impl DualPotentials {
    /// Shifts `f` down and `g` up by the same constant so the weighted means agree.
    pub fn normalize(&mut self, p: &DiscreteMeasure, q: &DiscreteMeasure) {
        let mf = weighted_sum(&self.f, p.weights());
        let mg = weighted_sum(&self.g, q.weights());
        let shift = 0.5 * (mf - mg);
        self.f.iter_mut().for_each(|v| *v -= shift);
        self.g.iter_mut().for_each(|v| *v += shift);
    }

    /// Returns `(f + k, g - k)`; the implied plan is unchanged.
    pub fn shifted(&self, k: f64) -> Self {
        Self {
            f: self.f.iter().map(|v| v + k).collect(),
            g: self.g.iter().map(|v| v - k).collect(),
            epsilon: self.epsilon,
        }
    }

    /// Divides both potentials by `s` (cost unit conversion).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            f: self.f.iter().map(|v| v / s).collect(),
            g: self.g.iter().map(|v| v / s).collect(),
            epsilon: self.epsilon / s,
        }
    }
}

fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    let t: Vec<f64> = values.iter().zip(weights).map(|(a, b)| a * b).collect();
    pairwise_sum(&t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornSolution {
    pub potentials: DualPotentials,
    /// Dual objective at the returned potentials.
    pub value: f64,
    pub iterations: usize,
    /// L1 deviation of the implied plan's row marginal; columns are exact.
    pub marginal_error: f64,
    pub converged: bool,
}

/// Scaled problem: coordinates divided by `sqrt(eps)` so that
/// `c_ij / eps = |x_i - y_j|^2 / 2`.
struct Scaled<'a> {
    dim: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    log_w: Vec<f64>,
    log_v: Vec<f64>,
    p: &'a DiscreteMeasure,
}

impl<'a> Scaled<'a> {
    fn new(p: &'a DiscreteMeasure, q: &'a DiscreteMeasure, epsilon: f64) -> Self {
        let s = epsilon.sqrt().recip();
        Self {
            dim: p.dim(),
            xs: p.coords().iter().map(|x| x * s).collect(),
            ys: q.coords().iter().map(|y| y * s).collect(),
            log_w: p.weights().iter().map(|w| w.ln()).collect(),
            log_v: q.weights().iter().map(|v| v.ln()).collect(),
            p,
        }
    }
}

/// Row threshold below which the soft-min runs on the calling thread.
const PAR_MIN_ROWS: usize = 256;

/// `out_i = -log sum_j exp(h_j - |a_i - b_j|^2 / 2)` for every row `i`.
fn soft_min(a: &[f64], b: &[f64], h: &[f64], dim: usize) -> Vec<f64> {
    let rows = a.len() / dim;
    let row =
        |buf: &mut Vec<f64>, i: usize| -> f64 { -row_lse(&a[i * dim..(i + 1) * dim], b, h, buf) };
    if rows >= PAR_MIN_ROWS {
        (0..rows)
            .into_par_iter()
            .map_init(|| Vec::with_capacity(h.len()), row)
            .collect()
    } else {
        let mut buf = Vec::with_capacity(h.len());
        (0..rows).map(|i| row(&mut buf, i)).collect()
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure(format!(
            "non-finite {what} potential; epsilon too small for the point scale?"
        )))
    }
}

struct StageOutcome {
    /// Scaled potentials `f / eps`, `g / eps`.
    phi: Vec<f64>,
    gamma: Vec<f64>,
    iterations: usize,
    marginal_error: f64,
    /// Total plan mass at the returned potentials.
    mass: f64,
    converged: bool,
}

/// Sinkhorn iterations between Newton polishing attempts on small problems.
const NEWTON_EVERY: usize = 200;

/// Runs Sinkhorn at one regularization from the scaled warm start `gamma`.
fn run_stage(
    prob: &Scaled<'_>,
    mut gamma: Vec<f64>,
    tolerance: f64,
    max_iterations: usize,
) -> Result<StageOutcome> {
    let d = prob.dim;
    let h_of = |pot: &[f64], log_wt: &[f64]| -> Vec<f64> {
        pot.iter().zip(log_wt).map(|(p, l)| p + l).collect()
    };
    let mut phi = soft_min(&prob.xs, &prob.ys, &h_of(&gamma, &prob.log_v), d);
    check_finite(&phi, "f")?;
    let mut iterations = 0;
    loop {
        gamma = soft_min(&prob.ys, &prob.xs, &h_of(&phi, &prob.log_w), d);
        check_finite(&gamma, "g")?;
        iterations += 1;
        // Columns are now exact; the next f-update measures the row error.
        let phi_next = soft_min(&prob.xs, &prob.ys, &h_of(&gamma, &prob.log_v), d);
        check_finite(&phi_next, "f")?;
        let w = prob.p.weights();
        let mass_terms: Vec<f64> = (0..phi.len())
            .map(|i| w[i] * (phi[i] - phi_next[i]).exp())
            .collect();
        let err_terms: Vec<f64> = mass_terms
            .iter()
            .zip(w)
            .map(|(r, w)| (r - w).abs())
            .collect();
        let marginal_error = pairwise_sum(&err_terms);
        if !marginal_error.is_finite() {
            return Err(Error::NumericFailure("marginal error is not finite".into()));
        }
        let converged = marginal_error <= tolerance;
        if converged || iterations >= max_iterations {
            return Ok(StageOutcome {
                phi,
                gamma,
                iterations,
                marginal_error,
                mass: pairwise_sum(&mass_terms),
                converged,
            });
        }
        phi = phi_next;
        if iterations % NEWTON_EVERY == 0
            && prob.xs.len() / d * prob.log_v.len() <= newton::MAX_ENTRIES
        {
            let semi = newton::SemiDual {
                dim: d,
                xs: &prob.xs,
                ys: &prob.ys,
                w: prob.p.weights(),
                log_v: &prob.log_v,
            };
            newton::polish(&semi, &mut gamma, 0.1 * tolerance, 50);
            phi = soft_min(&prob.xs, &prob.ys, &h_of(&gamma, &prob.log_v), d);
            check_finite(&phi, "f")?;
        }
    }
}

/// Median of `c(x_i, y_j)` over a strided subsample of at most 128 x 128 pairs.
fn median_cost(p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
    let stride = |n: usize| (n / 128).max(1);
    let (sp, sq) = (stride(p.len()), stride(q.len()));
    let mut costs: Vec<f64> = (0..p.len())
        .step_by(sp)
        .flat_map(|i| {
            (0..q.len())
                .step_by(sq)
                .map(move |j| 0.5 * sq_dist(p.point(i), q.point(j)))
        })
        .collect();
    let mid = costs.len() / 2;
    let (_, m, _) = costs.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Regularizations visited before the target one: `10 eps` down to `eps`
/// geometrically in five stages.
fn epsilon_schedule(epsilon: f64) -> Vec<f64> {
    (0..5)
        .map(|k| epsilon * 10f64.powf((4 - k) as f64 / 4.0))
        .collect()
}

/// Solves the entropic transport problem between `p` and `q`.
///
/// Starts from `g = 0`. On return the potentials are gauge-normalized and
/// `value` is the dual objective
/// `sum w f + sum v g - eps (sum_ij pi_ij - 1)`. Non-convergence within
/// `settings.max_iterations` is reported through `converged = false`, not as
/// an error.
pub fn solve(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    cost: &CostSpec,
    settings: &SolverSettings,
) -> Result<SinkhornSolution> {
    if p.dim() != q.dim() {
        return invalid(format!("dimension mismatch: {} vs {}", p.dim(), q.dim()));
    }
    if !(settings.tolerance > 0.0) {
        return invalid(format!(
            "tolerance must be positive, got {}",
            settings.tolerance
        ));
    }
    if settings.max_iterations == 0 {
        return invalid("max_iterations must be at least 1");
    }
    let epsilon = cost.epsilon();
    let use_scaling = match settings.epsilon_scaling {
        EpsilonScaling::Never => false,
        EpsilonScaling::Always => true,
        EpsilonScaling::Auto => epsilon < 0.05 * median_cost(p, q),
    };
    let schedule = if use_scaling {
        epsilon_schedule(epsilon)
    } else {
        vec![epsilon]
    };

    // Warm start carried in cost units so it survives the change of epsilon.
    let mut g = vec![0.0; q.len()];
    let mut iterations = 0;
    let last = schedule.len() - 1;
    let mut outcome = None;
    for (k, &eps_k) in schedule.iter().enumerate() {
        let prob = Scaled::new(p, q, eps_k);
        let gamma: Vec<f64> = g.iter().map(|v| v / eps_k).collect();
        let (tol, budget) = if k == last {
            (
                settings.tolerance,
                settings.max_iterations.saturating_sub(iterations).max(1),
            )
        } else {
            (
                settings.tolerance.max(1e-3),
                settings.max_iterations / 10 + 1,
            )
        };
        let out = run_stage(&prob, gamma, tol, budget)?;
        iterations += out.iterations;
        g = out.gamma.iter().map(|v| v * eps_k).collect();
        outcome = Some(out);
    }
    let out = outcome.expect("schedule is never empty");

    let mut potentials = DualPotentials {
        f: out.phi.iter().map(|v| v * epsilon).collect(),
        g: out.gamma.iter().map(|v| v * epsilon).collect(),
        epsilon,
    };
    potentials.normalize(p, q);
    let value = weighted_sum(&potentials.f, p.weights()) + weighted_sum(&potentials.g, q.weights())
        - epsilon * (out.mass - 1.0);
    if !value.is_finite() {
        return Err(Error::NumericFailure("value is not finite".into()));
    }
    Ok(SinkhornSolution {
        potentials,
        value,
        iterations,
        marginal_error: out.marginal_error,
        converged: out.converged,
    })
}

fn check_potentials(p: &DiscreteMeasure, q: &DiscreteMeasure, pot: &DualPotentials) -> Result<()> {
    if pot.f.len() != p.len() || pot.g.len() != q.len() {
        return invalid(format!(
            "potentials sized {}x{} for measures {}x{}",
            pot.f.len(),
            pot.g.len(),
            p.len(),
            q.len()
        ));
    }
    if p.dim() != q.dim() {
        return invalid("dimension mismatch");
    }
    Ok(())
}

/// Calls `visit(i, j, pi_ij, c_ij, log(pi_ij / (w_i v_j)))` row by row.
fn for_each_plan_entry(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    pot: &DualPotentials,
    cost: &CostSpec,
    mut visit: impl FnMut(usize, usize, f64, f64, f64),
) {
    let eps = cost.epsilon();
    for i in 0..p.len() {
        let x = p.point(i);
        let wi = p.weights()[i];
        for j in 0..q.len() {
            let c = cost.eval(x, q.point(j));
            let log_ratio = (pot.f[i] + pot.g[j] - c) / eps;
            let pi = wi * q.weights()[j] * log_ratio.exp();
            visit(i, j, pi, c, log_ratio);
        }
    }
}

/// Row and column sums of the plan implied by `pot`.
pub fn plan_marginals(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    pot: &DualPotentials,
    cost: &CostSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_potentials(p, q, pot)?;
    let mut rows = vec![0.0; p.len()];
    let mut cols = vec![0.0; q.len()];
    for_each_plan_entry(p, q, pot, cost, |i, j, pi, _, _| {
        rows[i] += pi;
        cols[j] += pi;
    });
    Ok((rows, cols))
}

/// Primal objective `<pi, c> + eps KL(pi | P x Q)` of the plan
/// `pi_ij = w_i v_j exp((f_i + g_j - c_ij) / eps)`, with `0 log 0 = 0`.
pub fn primal_value(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    potentials: &DualPotentials,
    cost: &CostSpec,
) -> Result<f64> {
    check_potentials(p, q, potentials)?;
    let eps = cost.epsilon();
    let mut row_totals = vec![0.0; p.len()];
    let mut row = Vec::with_capacity(q.len());
    let mut current = 0;
    for_each_plan_entry(p, q, potentials, cost, |i, _, pi, c, log_ratio| {
        if i != current {
            row_totals[current] = pairwise_sum(&row);
            row.clear();
            current = i;
        }
        row.push(if pi == 0.0 {
            0.0
        } else {
            pi * c + eps * pi * log_ratio
        });
    });
    row_totals[current] = pairwise_sum(&row);
    Ok(pairwise_sum(&row_totals))
}

/// Out-of-sample soft-min extension
/// `f(x) = -eps log sum_j v_j exp((g_j - c(x, y_j)) / eps)`.
pub fn extend_potential(
    potentials_on_support: &[f64],
    support: &DiscreteMeasure,
    x: &[f64],
    cost: &CostSpec,
) -> Result<f64> {
    if potentials_on_support.is_empty() {
        return invalid("empty support");
    }
    if potentials_on_support.len() != support.len() {
        return invalid("potential length does not match support size");
    }
    if x.len() != support.dim() {
        return invalid("point dimension mismatch");
    }
    let eps = cost.epsilon();
    let terms: Vec<f64> = potentials_on_support
        .iter()
        .zip(support.weights())
        .enumerate()
        .map(|(j, (g, v))| v.ln() + (g - cost.eval(x, support.point(j))) / eps)
        .collect();
    Ok(-eps * crate::numeric::log_sum_exp(&terms))
}

/// Independent oracle for two-point uniform marginals.
///
/// Every coupling of two uniform two-point measures is
/// `[[p, 1/2 - p], [1/2 - p, p]]` with `p` in `[0, 1/2]`. The objective
/// `<pi, c> + eps KL(pi | 1/4)` is convex in `p` and is minimized by
/// golden-section search to interval width `1e-10`.
pub fn brute_force_value_2x2(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    cost: &CostSpec,
) -> Result<f64> {
    if p.len() != 2 || q.len() != 2 {
        return invalid("brute-force oracle needs exactly two points per measure");
    }
    if !p.is_uniform() || !q.is_uniform() {
        return invalid("brute-force oracle needs uniform weights");
    }
    if p.dim() != q.dim() {
        return invalid("dimension mismatch");
    }
    let c = |i: usize, j: usize| cost.eval(p.point(i), q.point(j));
    let (c00, c01, c10, c11) = (c(0, 0), c(0, 1), c(1, 0), c(1, 1));
    let eps = cost.epsilon();
    let xlogx = |t: f64| if t <= 0.0 { 0.0 } else { t * (4.0 * t).ln() };
    let objective = |t: f64| {
        let s = 0.5 - t;
        t * (c00 + c11) + s * (c01 + c10) + eps * 2.0 * (xlogx(t) + xlogx(s))
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, 0.5f64);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (objective(x1), objective(x2));
    while b - a > 1e-10 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = objective(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = objective(x2);
        }
    }
    let t = 0.5 * (a + b);
    Ok(objective(t).min(objective(0.0)).min(objective(0.5)))
}

/// Outcome of checking normalized potentials against the subgaussian envelope
/// `-d s^2 (1 + (|x| + sqrt(2d) s)^2 / 2) - 1 <= f(x) <= (|x| + sqrt(2d) s)^2 / 2`,
/// evaluated in the `epsilon = 1` scaling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialBoundReport {
    /// Larger of the two empirical subgaussian proxies of the rescaled measures.
    pub sigma2: f64,
    pub checked: usize,
    pub violations: usize,
    pub worst_excess: f64,
}

impl PotentialBoundReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            1.0 - self.violations as f64 / self.checked as f64
        }
    }
}

/// Checks every entry of the normalized potentials against the envelope.
/// Violations are logged at warn level and counted; they never fail.
pub fn potential_bounds(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    solution: &SinkhornSolution,
) -> Result<PotentialBoundReport> {
    check_potentials(p, q, &solution.potentials)?;
    let eps = solution.potentials.epsilon;
    let ps = crate::measures::rescale_measure(p, eps)?;
    let qs = crate::measures::rescale_measure(q, eps)?;
    let sigma2 = subgaussian_proxy(&ps).max(subgaussian_proxy(&qs));
    let sigma = sigma2.sqrt();
    let d = p.dim() as f64;
    let mut violations = 0;
    let mut worst_excess: f64 = 0.0;
    let mut check = |side: &str, m: &DiscreteMeasure, pot: &[f64]| {
        for (i, &v) in pot.iter().enumerate() {
            let v = v / eps;
            let norm = m.point(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = norm + (2.0 * d).sqrt() * sigma;
            let upper = 0.5 * r * r;
            let lower = -d * sigma2 * (1.0 + 0.5 * r * r) - 1.0;
            let excess = (v - upper).max(lower - v);
            if excess > 0.0 {
                violations += 1;
                worst_excess = worst_excess.max(excess);
                log::warn!("{side}-potential entry {i} = {v:.6} outside [{lower:.6}, {upper:.6}]");
            }
        }
    };
    check("f", &ps, &solution.potentials.f);
    check("g", &qs, &solution.potentials.g);
    Ok(PotentialBoundReport {
        sigma2,
        checked: p.len() + q.len(),
        violations,
        worst_excess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{rescale_measure, sample_mixture, GaussianMixture};
    use proptest::prelude::*;

    fn uniform(points: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(1, points.to_vec()).unwrap()
    }

    fn cost(eps: f64) -> CostSpec {
        CostSpec::squared_euclidean(eps).unwrap()
    }

    fn tight() -> SolverSettings {
        SolverSettings::with_tolerance(1e-10)
    }

    /// Value of the 2x2 problem P = Q = uniform{0, 1}, eps = 1, from the
    /// stationarity condition log(4p / (2 - 4p)) = 1/2.
    fn two_point_reference() -> f64 {
        let e = 0.5f64.exp();
        let t = 2.0 * e / (4.0 + 4.0 * e);
        let s = 0.5 - t;
        s + 2.0 * (t * (4.0 * t).ln() + s * (4.0 * s).ln())
    }

    #[test]
    fn reference_value_matches_stated_digits() {
        let v = two_point_reference();
        assert!((v - 0.2191).abs() < 1e-4, "{v}");
    }

    #[test]
    fn cost_spec_rejects_bad_epsilon() {
        assert!(CostSpec::squared_euclidean(0.0).is_err());
        assert!(CostSpec::squared_euclidean(-1.0).is_err());
        assert!(CostSpec::squared_euclidean(f64::NAN).is_err());
    }

    #[test]
    fn single_point_identity() {
        let p = uniform(&[0.0]);
        let sol = solve(&p, &p, &cost(1.0), &tight()).unwrap();
        assert!(sol.converged);
        assert!(sol.value.abs() < 1e-15);
        assert!(sol.potentials.f[0].abs() < 1e-15 && sol.potentials.g[0].abs() < 1e-15);
    }

    #[test]
    fn singleton_coupling() {
        let sol = solve(&uniform(&[0.0]), &uniform(&[2.0]), &cost(1.0), &tight()).unwrap();
        assert!((sol.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_value() {
        let p = uniform(&[0.0, 1.0]);
        let sol = solve(&p, &p, &cost(1.0), &tight()).unwrap();
        assert!((sol.value - two_point_reference()).abs() < 1e-9);
        let primal = primal_value(&p, &p, &sol.potentials, &cost(1.0)).unwrap();
        assert!((primal - sol.value).abs() < 1e-5);
    }

    #[test]
    fn dimension_and_tolerance_checks() {
        let p = uniform(&[0.0]);
        let q = DiscreteMeasure::uniform(2, vec![0.0, 0.0]).unwrap();
        assert!(solve(&p, &q, &cost(1.0), &tight()).is_err());
        let bad = SolverSettings::with_tolerance(0.0);
        assert!(solve(&p, &p, &cost(1.0), &bad).is_err());
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let p = sample_mixture(&GaussianMixture::standard(1).unwrap(), 40, 1).unwrap();
        let q = sample_mixture(&GaussianMixture::standard(1).unwrap(), 40, 2).unwrap();
        let settings = SolverSettings {
            tolerance: 1e-14,
            max_iterations: 2,
            epsilon_scaling: EpsilonScaling::Never,
        };
        let sol = solve(&p, &q, &cost(0.1), &settings).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 2);
        assert!(sol.marginal_error > 1e-14);
    }

    #[test]
    fn tiny_epsilon_is_numerically_stable() {
        let p = sample_mixture(&GaussianMixture::standard(1).unwrap(), 30, 1).unwrap();
        let q = sample_mixture(&GaussianMixture::standard(1).unwrap(), 30, 2).unwrap();
        let sol = solve(&p, &q, &cost(1e-3), &SolverSettings::with_tolerance(1e-6)).unwrap();
        assert!(sol.converged);
        assert!(sol.value.is_finite());
    }

    #[test]
    fn epsilon_scaling_reaches_same_fixed_point() {
        let p = sample_mixture(&GaussianMixture::standard(2).unwrap(), 60, 5).unwrap();
        let q = sample_mixture(&GaussianMixture::standard(2).unwrap(), 60, 6).unwrap();
        let base = SolverSettings::with_tolerance(1e-10);
        let never = solve(
            &p,
            &q,
            &cost(0.05),
            &SolverSettings {
                epsilon_scaling: EpsilonScaling::Never,
                ..base
            },
        )
        .unwrap();
        let always = solve(
            &p,
            &q,
            &cost(0.05),
            &SolverSettings {
                epsilon_scaling: EpsilonScaling::Always,
                ..base
            },
        )
        .unwrap();
        assert!(never.converged && always.converged);
        assert!((never.value - always.value).abs() < 1e-8);
    }

    #[test]
    fn schedule_is_geometric() {
        let s = epsilon_schedule(0.01);
        assert_eq!(s.len(), 5);
        assert!((s[0] - 0.1).abs() < 1e-15);
        assert_eq!(s[4], 0.01);
    }

    #[test]
    fn marginals_are_feasible() {
        let p = sample_mixture(&GaussianMixture::standard(2).unwrap(), 30, 1).unwrap();
        let q = sample_mixture(
            &GaussianMixture::symmetric_pair(2, 1.0, 1.0).unwrap(),
            25,
            2,
        )
        .unwrap();
        let c = cost(0.7);
        let sol = solve(&p, &q, &c, &SolverSettings::with_tolerance(1e-9)).unwrap();
        let (rows, cols) = plan_marginals(&p, &q, &sol.potentials, &c).unwrap();
        let row_err: f64 = rows
            .iter()
            .zip(p.weights())
            .map(|(r, w)| (r - w).abs())
            .sum();
        let col_err: f64 = cols
            .iter()
            .zip(q.weights())
            .map(|(r, w)| (r - w).abs())
            .sum();
        assert!(row_err <= 1e-9 * 1.0001, "{row_err}");
        assert!(col_err <= 1e-9, "{col_err}");
        assert!((row_err - sol.marginal_error).abs() < 1e-12);
    }

    #[test]
    fn normalized_gauge() {
        let p = sample_mixture(&GaussianMixture::standard(1).unwrap(), 20, 1).unwrap();
        let q = sample_mixture(&GaussianMixture::standard(1).unwrap(), 30, 2).unwrap();
        let sol = solve(&p, &q, &cost(1.0), &tight()).unwrap();
        let mf = weighted_sum(&sol.potentials.f, p.weights());
        let mg = weighted_sum(&sol.potentials.g, q.weights());
        assert!((mf - mg).abs() <= 1e-9);
        // With the gauge fixed, each mean is half the value.
        assert!((mf - 0.5 * sol.value).abs() < 1e-8);
    }

    #[test]
    fn extension_examples() {
        let c = cost(1.0);
        let q = DiscreteMeasure::uniform(2, vec![1.0, -2.0]).unwrap();
        let fx = extend_potential(&[0.0], &q, &[0.5, 0.5], &c).unwrap();
        assert!((fx - 0.5 * (0.25 + 6.25)).abs() < 1e-14);
        let q2 = uniform(&[-1.0, 1.0]);
        let f0 = extend_potential(&[0.0, 0.0], &q2, &[0.0], &c).unwrap();
        assert!((f0 - 0.5).abs() < 1e-14);
        assert!(extend_potential(&[], &q2, &[0.0], &c).is_err());
        assert!(extend_potential(&[0.0, 0.0], &q2, &[0.0, 1.0], &c).is_err());
    }

    #[test]
    fn extension_reproduces_support_potential() {
        let p = uniform(&[0.0, 1.0]);
        let c = cost(1.0);
        let sol = solve(&p, &p, &c, &SolverSettings::with_tolerance(1e-12)).unwrap();
        let f0 = extend_potential(&sol.potentials.g, &p, &[0.0], &c).unwrap();
        assert!((f0 - sol.potentials.f[0]).abs() < 1e-8);
    }

    #[test]
    fn primal_examples() {
        let c = cost(1.0);
        let z = uniform(&[0.0]);
        let zero = DualPotentials {
            f: vec![0.0],
            g: vec![0.0],
            epsilon: 1.0,
        };
        assert_eq!(primal_value(&z, &z, &zero, &c).unwrap(), 0.0);
        let two = uniform(&[2.0]);
        let pot = DualPotentials {
            f: vec![2.0],
            g: vec![0.0],
            epsilon: 1.0,
        };
        assert!((primal_value(&z, &two, &pot, &c).unwrap() - 2.0).abs() < 1e-15);
        assert!(primal_value(
            &z,
            &two,
            &DualPotentials {
                f: vec![],
                g: vec![0.0],
                epsilon: 1.0
            },
            &c
        )
        .is_err());
    }

    #[test]
    fn brute_force_examples() {
        let p = uniform(&[0.0, 1.0]);
        let v = brute_force_value_2x2(&p, &p, &cost(1.0)).unwrap();
        assert!((v - two_point_reference()).abs() < 1e-12);
        // Huge epsilon: the product plan, cost 1/4 * (0 + 1/2 + 1/2 + 0).
        let big = brute_force_value_2x2(&p, &p, &cost(1e6)).unwrap();
        assert!((big - 0.25).abs() < 1e-6, "{big}");
        let q = uniform(&[10.0, 11.0]);
        let bf = brute_force_value_2x2(&p, &q, &cost(1.0)).unwrap();
        let sk = solve(&p, &q, &cost(1.0), &tight()).unwrap().value;
        assert!((bf - sk).abs() < 1e-6);
    }

    #[test]
    fn brute_force_rejects_bad_inputs() {
        let three = uniform(&[0.0, 1.0, 2.0]);
        let two = uniform(&[0.0, 1.0]);
        assert!(brute_force_value_2x2(&three, &two, &cost(1.0)).is_err());
        let skew = DiscreteMeasure::new(1, vec![0.0, 1.0], vec![0.3, 0.7]).unwrap();
        assert!(brute_force_value_2x2(&skew, &two, &cost(1.0)).is_err());
    }

    #[test]
    fn dimensions_above_three_use_generic_kernel() {
        let m = GaussianMixture::standard(5).unwrap();
        let p = sample_mixture(&m, 20, 1).unwrap();
        let q = sample_mixture(&m, 20, 2).unwrap();
        let c = cost(2.0);
        let sol = solve(&p, &q, &c, &tight()).unwrap();
        let primal = primal_value(&p, &q, &sol.potentials, &c).unwrap();
        assert!((primal - sol.value).abs() < 1e-8);
    }

    #[test]
    fn parallel_rows_match_serial_rows() {
        // Above PAR_MIN_ROWS the rows run on the pool; values must not move.
        let m = GaussianMixture::standard(1).unwrap();
        let p = sample_mixture(&m, 300, 1).unwrap();
        let q = sample_mixture(&m, 300, 2).unwrap();
        let c = cost(1.0);
        let a = solve(&p, &q, &c, &tight()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let b = pool.install(|| solve(&p, &q, &c, &tight()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn potential_bounds_hold_on_gaussian_data() {
        let m = GaussianMixture::symmetric_pair(1, 1.0, 1.0).unwrap();
        let p = sample_mixture(&m, 200, 3).unwrap();
        let q = sample_mixture(&m, 200, 4).unwrap();
        let sol = solve(&p, &q, &cost(1.0), &SolverSettings::default()).unwrap();
        let report = potential_bounds(&p, &q, &sol).unwrap();
        assert_eq!(report.checked, 400);
        assert!(report.fraction_within() >= 0.99);
    }

    fn small_measure(coords: Vec<f64>, dim: usize) -> DiscreteMeasure {
        DiscreteMeasure::uniform(dim, coords).unwrap()
    }

    #[test]
    fn nearly_triangular_kernel_converges() {
        // Plain Sinkhorn contracts at a rate close to 1 here.
        let p = uniform(&[1.1467362381957484, -1.1462663236076602]);
        let q = uniform(&[0.0, -1.5081710969279922]);
        let c = cost(0.1);
        let sk = solve(&p, &q, &c, &tight()).unwrap();
        assert!(sk.converged);
        let bf = brute_force_value_2x2(&p, &q, &c).unwrap();
        assert!((sk.value - bf).abs() < 1e-8, "{} vs {}", sk.value, bf);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_brute_force_on_random_2x2(
            xs in prop::array::uniform2(-2.0f64..2.0),
            ys in prop::array::uniform2(-2.0f64..2.0),
            eps in prop::sample::select(vec![0.1, 1.0, 10.0]),
        ) {
            let p = uniform(&xs);
            let q = uniform(&ys);
            let c = cost(eps);
            let sk = solve(&p, &q, &c, &tight()).unwrap();
            prop_assert!(sk.converged);
            let bf = brute_force_value_2x2(&p, &q, &c).unwrap();
            prop_assert!((sk.value - bf).abs() <= 1e-6, "sk={} bf={}", sk.value, bf);
        }

        #[test]
        fn value_is_symmetric(
            xs in prop::collection::vec(-3.0f64..3.0, 2..12),
            ys in prop::collection::vec(-3.0f64..3.0, 2..12),
            eps in 0.3f64..3.0,
        ) {
            let p = small_measure(xs, 1);
            let q = small_measure(ys, 1);
            let c = cost(eps);
            let a = solve(&p, &q, &c, &SolverSettings::with_tolerance(1e-12)).unwrap();
            let b = solve(&q, &p, &c, &SolverSettings::with_tolerance(1e-12)).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-9);
        }

        #[test]
        fn value_is_translation_invariant(
            xs in prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 2..8),
            ys in prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 2..8),
            shift in prop::array::uniform2(-5.0f64..5.0),
        ) {
            let p = small_measure(xs.concat(), 2);
            let q = small_measure(ys.concat(), 2);
            let c = cost(1.0);
            let s = SolverSettings::with_tolerance(1e-12);
            let a = solve(&p, &q, &c, &s).unwrap();
            let b = solve(&p.translate(&shift).unwrap(), &q.translate(&shift).unwrap(), &c, &s).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-9);
        }

        #[test]
        fn rescaling_identity(
            xs in prop::collection::vec(-3.0f64..3.0, 2..10),
            ys in prop::collection::vec(-3.0f64..3.0, 2..10),
            eps in 0.2f64..5.0,
        ) {
            let p = small_measure(xs, 1);
            let q = small_measure(ys, 1);
            let s = SolverSettings::with_tolerance(1e-11);
            let direct = solve(&p, &q, &cost(eps), &s).unwrap().value;
            let unit = solve(
                &rescale_measure(&p, eps).unwrap(),
                &rescale_measure(&q, eps).unwrap(),
                &cost(1.0),
                &s,
            ).unwrap().value;
            prop_assert!((direct - eps * unit).abs() <= 1e-6);
        }

        #[test]
        fn duality_gap_is_bounded(
            seed in any::<u64>(),
            eps in 0.5f64..2.0,
        ) {
            let m = GaussianMixture::standard(2).unwrap();
            let p = sample_mixture(&m, 20, seed).unwrap();
            let q = sample_mixture(&m, 20, seed.wrapping_add(1)).unwrap();
            let c = cost(eps);
            let sol = solve(&p, &q, &c, &SolverSettings::default()).unwrap();
            prop_assert!(sol.converged);
            let primal = primal_value(&p, &q, &sol.potentials, &c).unwrap();
            prop_assert!((primal - sol.value).abs() <= 1e-7);
        }

        #[test]
        fn gauge_shift_keeps_the_plan(k in -5.0f64..5.0) {
            let p = uniform(&[0.0, 1.0, 3.0]);
            let q = uniform(&[0.5, 2.0]);
            let c = cost(1.0);
            let sol = solve(&p, &q, &c, &tight()).unwrap();
            let a = primal_value(&p, &q, &sol.potentials, &c).unwrap();
            let b = primal_value(&p, &q, &sol.potentials.shifted(k), &c).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
