//! Plug-in estimators built on the solver.
//!
//! [`entropic_cost_estimate`] reports `S_eps(P_n, Q_m)` with a normal
//! standard error from the two-sample variance of the potentials. The entropy
//! estimators target `h(P * N(0, sigma^2 I))` from samples of `P`:
//!
//! * [`entropy_estimate_ind`] transports `P_n` to an independent sample of the
//!   noisy law and adds the gaussian log normalizer.
//! * [`entropy_estimate_paired`] builds the noisy sample by perturbing `P_n`
//!   itself. It is usually more accurate but carries no distributional
//!   guarantee, so no interval is reported.
//! * [`entropy_estimate_mg`] integrates `-log` of the smoothed empirical
//!   density `P_n * N(0, sigma^2 I)` by Monte Carlo.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::kernel::row_lse;
use crate::measures::{
    add_gaussian_noise, convolve_with_noise, log_density_moments, subgaussian_proxy,
    DiscreteMeasure, GaussianMixture, NoiseModel,
};
use crate::numeric::{mean_sample_var, pairwise_sum, weighted_mean_var};
use crate::sinkhorn::{solve, CostSpec, DualPotentials, SinkhornSolution, SolverSettings};

/// Two-sided normal interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub low: f64,
    pub high: f64,
    pub level: f64,
}

/// Point estimate with its standard error and solver diagnostics.
///
/// The interval targets the estimator's own fluctuation around its mean. It
/// is not a bias-corrected interval for the population quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimate: f64,
    pub std_error: f64,
    /// Absent when the solver did not converge or the estimator has no
    /// limiting distribution to back it.
    pub ci: Option<ConfidenceInterval>,
    pub n: usize,
    pub m: usize,
    /// `n / (n + m)`.
    pub lambda: f64,
    pub has_clt_guarantee: bool,
    pub converged: bool,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateReport {
    pub fn diagnostic(&self, key: &str) -> Option<f64> {
        self.diagnostics.get(key).copied()
    }
}

/// Solver settings and interval level shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub solver: SolverSettings,
    pub ci_level: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            solver: SolverSettings::default(),
            ci_level: 0.95,
        }
    }
}

impl EstimatorOptions {
    fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return invalid(format!(
                "ci_level must lie in (0, 1), got {}",
                self.ci_level
            ));
        }
        Ok(())
    }
}

/// Two-sided normal interval of the given level around `estimate`.
pub fn normal_interval(estimate: f64, std_error: f64, level: f64) -> Result<ConfidenceInterval> {
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("level must lie in (0, 1), got {level}"));
    }
    if !(std_error >= 0.0) {
        return invalid(format!("std_error must be >= 0, got {std_error}"));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + 0.5 * level);
    Ok(ConfidenceInterval {
        low: estimate - z * std_error,
        high: estimate + z * std_error,
        level,
    })
}

/// Variances of the potentials under their own measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialVariance {
    pub var_f: f64,
    pub var_g: f64,
    pub lambda: f64,
    pub std_error: f64,
}

/// Plug-in standard error
/// `sqrt(((1 - lambda) var_f + lambda var_g) (n + m) / (n m))`.
///
/// Invariant under the gauge shift `(f + k, g - k)`.
pub fn plug_in_std_error(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    potentials: &DualPotentials,
) -> Result<PotentialVariance> {
    if potentials.f.len() != p.len() || potentials.g.len() != q.len() {
        return invalid("potentials do not match the measures");
    }
    let (n, m) = (p.len() as f64, q.len() as f64);
    let lambda = n / (n + m);
    let (_, var_f) = weighted_mean_var(&potentials.f, p.weights());
    let (_, var_g) = weighted_mean_var(&potentials.g, q.weights());
    let var = ((1.0 - lambda) * var_f + lambda * var_g) * (n + m) / (n * m);
    Ok(PotentialVariance {
        var_f,
        var_g,
        lambda,
        std_error: var.max(0.0).sqrt(),
    })
}

fn require_empirical(m: &DiscreteMeasure, name: &str) -> Result<()> {
    if !m.is_uniform() {
        return invalid(format!("{name} must carry uniform (empirical) weights"));
    }
    Ok(())
}

fn report_from_solution(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    solution: &SinkhornSolution,
    potentials: &DualPotentials,
    estimate: f64,
    has_clt_guarantee: bool,
    ci_level: f64,
) -> Result<EstimateReport> {
    let pv = plug_in_std_error(p, q, potentials)?;
    let ci = if solution.converged && has_clt_guarantee {
        Some(normal_interval(estimate, pv.std_error, ci_level)?)
    } else {
        None
    };
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("marginal_error".to_string(), solution.marginal_error);
    diagnostics.insert("iterations".to_string(), solution.iterations as f64);
    diagnostics.insert("var_f".to_string(), pv.var_f);
    diagnostics.insert("var_g".to_string(), pv.var_g);
    diagnostics.insert("subgaussian_p".to_string(), subgaussian_proxy(p));
    diagnostics.insert("subgaussian_q".to_string(), subgaussian_proxy(q));
    Ok(EstimateReport {
        estimate,
        std_error: pv.std_error,
        ci,
        n: p.len(),
        m: q.len(),
        lambda: pv.lambda,
        has_clt_guarantee,
        converged: solution.converged,
        diagnostics,
    })
}

/// Plug-in estimate of `S_eps(P, Q)` from two empirical measures.
///
/// Non-convergence is reported through `converged = false` and suppresses
/// the interval.
pub fn entropic_cost_estimate(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    cost: &CostSpec,
    options: &EstimatorOptions,
) -> Result<EstimateReport> {
    options.validate()?;
    require_empirical(p, "P sample")?;
    require_empirical(q, "Q sample")?;
    let solution = solve(p, q, cost, &options.solver)?;
    report_from_solution(
        p,
        q,
        &solution,
        &solution.potentials,
        solution.value,
        true,
        options.ci_level,
    )
}

fn require_noise(noise: &NoiseModel, dim: usize) -> Result<()> {
    if !(noise.sigma_g() > 0.0) {
        return invalid("noise standard deviation must be positive");
    }
    if noise.dim() != dim {
        return invalid(format!(
            "noise dimension {} does not match sample dimension {dim}",
            noise.dim()
        ));
    }
    Ok(())
}

/// Solves with `eps = sigma^2` and converts to the cost `|x - y|^2 / (2 sigma^2)`
/// at unit regularization.
fn noise_transport(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    noise: &NoiseModel,
    options: &EstimatorOptions,
    has_clt_guarantee: bool,
) -> Result<EstimateReport> {
    options.validate()?;
    require_noise(noise, p.dim())?;
    require_empirical(p, "P sample")?;
    require_empirical(q, "Q sample")?;
    let s2 = noise.variance();
    let cost = CostSpec::squared_euclidean(s2)?;
    let solution = solve(p, q, &cost, &options.solver)?;
    let converted = solution.potentials.scaled(s2);
    let transport = solution.value / s2;
    let estimate = transport + noise.log_z_g();
    let mut report = report_from_solution(
        p,
        q,
        &solution,
        &converted,
        estimate,
        has_clt_guarantee,
        options.ci_level,
    )?;
    report
        .diagnostics
        .insert("raw_value".to_string(), solution.value);
    report
        .diagnostics
        .insert("transport_value".to_string(), transport);
    report
        .diagnostics
        .insert("log_z_g".to_string(), noise.log_z_g());
    Ok(report)
}

/// Entropy of `P * N(0, sigma^2 I)` from `P_n` and an independent sample of
/// the noisy law.
///
/// Independence of the two samples is the caller's responsibility.
pub fn entropy_estimate_ind(
    sample_p: &DiscreteMeasure,
    sample_q: &DiscreteMeasure,
    noise: &NoiseModel,
    options: &EstimatorOptions,
) -> Result<EstimateReport> {
    noise_transport(sample_p, sample_q, noise, options, true)
}

/// Entropy estimate whose noisy sample is `P_n` plus fresh gaussian noise.
///
/// The standard error is the plug-in formula evaluated as if the samples were
/// independent; it is reported for reference only and no interval is given.
pub fn entropy_estimate_paired(
    sample_p: &DiscreteMeasure,
    noise: &NoiseModel,
    seed: u64,
    options: &EstimatorOptions,
) -> Result<EstimateReport> {
    require_noise(noise, sample_p.dim())?;
    let q = add_gaussian_noise(sample_p, noise, seed)?;
    noise_transport(sample_p, &q, noise, options, false)
}

/// Monte Carlo entropy of the smoothed empirical law `P_n * N(0, sigma^2 I)`.
///
/// Draws `mc_draws` points `X_I + G` with `I` chosen by weight and averages
/// `-log q_hat`. The standard error is the Monte Carlo error only.
pub fn entropy_estimate_mg(
    sample_p: &DiscreteMeasure,
    noise: &NoiseModel,
    mc_draws: usize,
    seed: u64,
) -> Result<EstimateReport> {
    require_noise(noise, sample_p.dim())?;
    if mc_draws == 0 {
        return invalid("mc_draws must be at least 1");
    }
    let d = sample_p.dim();
    let sigma = noise.sigma_g();
    let inv = sigma.recip();
    let scaled: Vec<f64> = sample_p.coords().iter().map(|v| v * inv).collect();
    let log_w: Vec<f64> = sample_p.weights().iter().map(|w| w.ln()).collect();

    // Draws are generated serially so the stream does not depend on threads.
    let mut rng = crate::rng::rng_from_seed(seed);
    let cumulative: Vec<f64> = sample_p
        .weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut draws = Vec::with_capacity(mc_draws * d);
    for _ in 0..mc_draws {
        let u: f64 = rng.gen();
        let i = cumulative
            .partition_point(|&c| c <= u)
            .min(sample_p.len() - 1);
        for a in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            draws.push(sample_p.point(i)[a] * inv + z);
        }
    }

    // In units of sigma the kernel is exp(-|z - x|^2 / 2); the density picks
    // up the normalizer of N(0, sigma^2 I).
    let log_norm = noise.log_z_g();
    let neg_log_q: Vec<f64> = draws
        .par_chunks(d)
        .map_init(Vec::new, |buf, z| {
            log_norm - row_lse(z, &scaled, &log_w, buf)
        })
        .collect();
    if neg_log_q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("smoothed density underflowed".into()));
    }
    let (mean, var) = mean_sample_var(&neg_log_q);
    let std_error = (var / mc_draws as f64).sqrt();
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("mc_draws".to_string(), mc_draws as f64);
    diagnostics.insert("log_z_g".to_string(), log_norm);
    Ok(EstimateReport {
        estimate: mean,
        std_error,
        ci: None,
        n: sample_p.len(),
        m: mc_draws,
        lambda: sample_p.len() as f64 / (sample_p.len() + mc_draws) as f64,
        has_clt_guarantee: false,
        converged: true,
        diagnostics,
    })
}

/// Grid resolution per axis used for moments of the noisy density.
fn moment_resolution(dim: usize) -> usize {
    match dim {
        1 => 4001,
        2 => 401,
        _ => 81,
    }
}

const MOMENT_RADIUS: f64 = 10.0;

/// Limiting variance `lambda Var(log q(Y))` of the independent-sample entropy
/// estimator, `Y ~ q = P * N(0, sigma^2 I)`, by grid quadrature.
pub fn asymptotic_variance_noise(
    model_p: &GaussianMixture,
    noise: &NoiseModel,
    lambda: f64,
) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return invalid(format!("lambda must lie in (0, 1), got {lambda}"));
    }
    if model_p.dim() != noise.dim() {
        return invalid("model and noise dimensions differ");
    }
    let q = convolve_with_noise(model_p, noise)?;
    let (_, var) = log_density_moments(&q, moment_resolution(q.dim()), MOMENT_RADIUS)?;
    Ok(lambda * var)
}

/// Mean of `-log q_hat` over a grid, used as an oracle for the Monte Carlo
/// estimator in tests and experiments (`d = 1` only).
pub fn smoothed_empirical_entropy_1d(
    sample_p: &DiscreteMeasure,
    noise: &NoiseModel,
    points: usize,
) -> Result<f64> {
    require_noise(noise, sample_p.dim())?;
    if sample_p.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: sample_p.dim(),
            max: 1,
        });
    }
    if points < 2 {
        return invalid("need at least 2 grid points");
    }
    let sigma = noise.sigma_g();
    let xs = sample_p.coords();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - 12.0 * sigma;
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sigma;
    let step = (hi - lo) / (points - 1) as f64;
    let inv = sigma.recip();
    let scaled: Vec<f64> = xs.iter().map(|v| v * inv).collect();
    let log_w: Vec<f64> = sample_p.weights().iter().map(|w| w.ln()).collect();
    let terms: Vec<f64> = (0..points)
        .into_par_iter()
        .map_init(Vec::new, |buf, k| {
            let z = (lo + step * k as f64) * inv;
            let lq = row_lse(&[z], &scaled, &log_w, buf) - noise.log_z_g();
            let q = lq.exp();
            if q == 0.0 {
                0.0
            } else {
                -q * lq
            }
        })
        .collect();
    Ok(pairwise_sum(&terms) * step)
}
