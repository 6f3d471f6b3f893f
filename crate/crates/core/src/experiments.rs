//! Monte Carlo harness: convergence-rate curves, fluctuation studies and the
//! entropy estimator comparison.
//!
//! Two settings are supported:
//!
//! * **entropy**: `noise` is set, `Q = P * N(0, sigma^2 I)` and every
//!   repetition produces an entropy estimate of `Q`; `epsilon` must equal
//!   `sigma^2`.
//! * **transport**: no noise, `Q` is `model_q` (or `P` itself) and every
//!   repetition produces the plug-in `S_eps(P_n, Q_n)`.
//!
//! Repetition `r` at sample size `n` draws from the seed
//! `derive_path(root_seed, [n, r])`, with sub-streams 0 (P sample), 1 (Q
//! sample), 2 (paired noise) and 3 (Monte Carlo integration). Repetitions run
//! in parallel and are collected by index, so results do not depend on the
//! number of worker threads.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::estimators::{
    asymptotic_variance_noise, entropic_cost_estimate, entropy_estimate_ind, entropy_estimate_mg,
    entropy_estimate_paired, EstimateReport, EstimatorOptions,
};
use crate::measures::{
    convolve_with_noise, entropy_by_quadrature, quadrature_measure, sample_mixture,
    DiscreteMeasure, GaussianMixture, NoiseModel,
};
use crate::numeric::{mean_sample_var, pairwise_sum};
use crate::rng::{derive_path, derive_seed};
use crate::sinkhorn::{solve, CostSpec, SolverSettings};

const STREAM_P: u64 = 0;
const STREAM_Q: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_MC: u64 = 3;

/// Where the ground truth for error curves comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    #[default]
    Quadrature,
    ClosedForm,
    None,
}

/// Which entropy estimator a single `entropy` run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyVariant {
    #[default]
    Ind,
    Paired,
    Mg,
}

impl EntropyVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ind => "ind",
            Self::Paired => "paired",
            Self::Mg => "mg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_g: f64,
}

fn default_ci_level() -> f64 {
    0.95
}

fn default_mc_draws() -> usize {
    10_000
}

fn default_quadrature_points() -> usize {
    2000
}

fn default_reference_tolerance() -> f64 {
    1e-9
}

/// One experiment, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_p: GaussianMixture,
    /// Target law in the transport setting; defaults to `model_p`.
    #[serde(default)]
    pub model_q: Option<GaussianMixture>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    pub epsilon: f64,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub root_seed: u64,
    pub dimension: usize,
    #[serde(default)]
    pub reference: ReferenceKind,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    /// Monte Carlo draws for the mixture-of-gaussians estimator.
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    #[serde(default)]
    pub variant: EntropyVariant,
    /// Grid points per axis (in one dimension) for the quadrature reference.
    #[serde(default = "default_quadrature_points")]
    pub quadrature_points: usize,
    #[serde(default = "default_reference_tolerance")]
    pub reference_tolerance: f64,
    /// Forces every repetition onto the same seed (a degenerate check).
    #[serde(default)]
    pub identical_reps: bool,
}

/// The resolved problem behind a config.
#[derive(Debug, Clone)]
enum Setting {
    Entropy {
        noise: NoiseModel,
        q: GaussianMixture,
    },
    Transport {
        q: GaussianMixture,
        cost: CostSpec,
    },
}

impl ExperimentConfig {
    /// A config with the default optional fields.
    pub fn new(
        model_p: GaussianMixture,
        epsilon: f64,
        n_list: Vec<usize>,
        reps: usize,
        root_seed: u64,
    ) -> Self {
        let dimension = model_p.dim();
        Self {
            model_p,
            model_q: None,
            noise: None,
            epsilon,
            n_list,
            reps,
            root_seed,
            dimension,
            reference: ReferenceKind::default(),
            solver: SolverSettings::default(),
            ci_level: default_ci_level(),
            mc_draws: default_mc_draws(),
            variant: EntropyVariant::default(),
            quadrature_points: default_quadrature_points(),
            reference_tolerance: default_reference_tolerance(),
            identical_reps: false,
        }
    }

    /// Entropy setting with `epsilon = sigma_g^2`.
    pub fn with_noise(mut self, sigma_g: f64) -> Self {
        self.noise = Some(NoiseConfig { sigma_g });
        self.epsilon = sigma_g * sigma_g;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    fn config_error<T>(msg: impl Into<String>) -> Result<T> {
        Err(Error::InvalidConfig(msg.into()))
    }

    /// Checks the invariants; all failures are `InvalidConfig`.
    pub fn validate(&self) -> Result<()> {
        self.setting().map(|_| ())
    }

    fn setting(&self) -> Result<Setting> {
        let d = self.dimension;
        if d == 0 {
            return Self::config_error("dimension must be at least 1");
        }
        if self.model_p.dim() != d {
            return Self::config_error(format!(
                "model_p has dimension {}, config says {d}",
                self.model_p.dim()
            ));
        }
        if self.n_list.is_empty() || self.n_list[0] == 0 {
            return Self::config_error("n_list must be non-empty with positive sizes");
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Self::config_error("n_list must be strictly increasing");
        }
        if self.reps < 2 {
            return Self::config_error("reps must be at least 2");
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Self::config_error(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Self::config_error("ci_level must lie in (0, 1)");
        }
        if !(self.solver.tolerance > 0.0) || self.solver.max_iterations == 0 {
            return Self::config_error(
                "solver tolerance must be positive and max_iterations at least 1",
            );
        }
        if self.mc_draws == 0 {
            return Self::config_error("mc_draws must be at least 1");
        }
        if self.quadrature_points < 2 || !(self.reference_tolerance > 0.0) {
            return Self::config_error(
                "quadrature_points must be >= 2 and reference_tolerance positive",
            );
        }
        match (&self.noise, &self.model_q) {
            (Some(_), Some(_)) => Self::config_error("model_q cannot be combined with noise"),
            (Some(nc), None) => {
                let noise = NoiseModel::new(nc.sigma_g, d).map_err(to_config)?;
                if !(nc.sigma_g > 0.0) {
                    return Self::config_error("noise sigma_g must be positive");
                }
                let s2 = noise.variance();
                if (self.epsilon - s2).abs() > 1e-12 * s2 {
                    return Self::config_error(format!(
                        "with noise, epsilon must equal sigma_g^2 = {s2}, got {}",
                        self.epsilon
                    ));
                }
                let q = convolve_with_noise(&self.model_p, &noise).map_err(to_config)?;
                Ok(Setting::Entropy { noise, q })
            }
            (None, q) => {
                let q = q.clone().unwrap_or_else(|| self.model_p.clone());
                if q.dim() != d {
                    return Self::config_error(format!(
                        "model_q has dimension {}, config says {d}",
                        q.dim()
                    ));
                }
                Ok(Setting::Transport {
                    q,
                    cost: CostSpec::squared_euclidean(self.epsilon).map_err(to_config)?,
                })
            }
        }
    }

    fn options(&self) -> EstimatorOptions {
        EstimatorOptions {
            solver: self.solver,
            ci_level: self.ci_level,
        }
    }

    /// Seed of repetition `rep` at sample size `n`.
    pub fn rep_seed(&self, n: usize, rep: usize) -> u64 {
        let rep = if self.identical_reps { 0 } else { rep };
        derive_path(self.root_seed, &[n as u64, rep as u64])
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidConfig(m),
        other => other,
    }
}

fn quadrature_resolution(dim: usize, points_1d: usize) -> usize {
    match dim {
        1 => points_1d,
        2 => 64,
        _ => 16,
    }
}

const QUADRATURE_RADIUS: f64 = 10.0;
const ENTROPY_GRID: usize = 4001;

/// Grid discretization, or the exact discrete law for atomic models.
fn population_measure(model: &GaussianMixture, points_1d: usize) -> Result<DiscreteMeasure> {
    if model.is_atomic() {
        let pts: Vec<f64> = model
            .components()
            .iter()
            .flat_map(|c| c.mean.clone())
            .collect();
        let masses: Vec<f64> = model.components().iter().map(|c| c.weight).collect();
        return DiscreteMeasure::from_masses(model.dim(), pts, &masses);
    }
    quadrature_measure(
        model,
        quadrature_resolution(model.dim(), points_1d),
        QUADRATURE_RADIUS,
    )
}

fn closed_form_entropy(q: &GaussianMixture) -> Option<f64> {
    match q.components() {
        [c] if c.variance > 0.0 => {
            let d = q.dim() as f64;
            Some(0.5 * d * (2.0 * std::f64::consts::PI * std::f64::consts::E * c.variance).ln())
        }
        _ => None,
    }
}

/// Ground truth for the quantity each repetition estimates.
pub fn reference_value(config: &ExperimentConfig) -> Result<Option<f64>> {
    let setting = config.setting()?;
    match (config.reference, &setting) {
        (ReferenceKind::None, _) => Ok(None),
        (ReferenceKind::ClosedForm, Setting::Entropy { q, .. }) => {
            closed_form_entropy(q).map(Some).ok_or_else(|| {
                Error::InvalidConfig("no closed-form entropy for a multi-component law".into())
            })
        }
        (ReferenceKind::ClosedForm, Setting::Transport { q, cost }) => {
            match (config.model_p.components(), q.components()) {
                ([a], [b]) if a.variance == 0.0 && b.variance == 0.0 => {
                    Ok(Some(cost.eval(&a.mean, &b.mean)))
                }
                _ => Err(Error::InvalidConfig(
                    "closed-form transport reference needs two single atoms".into(),
                )),
            }
        }
        (ReferenceKind::Quadrature, Setting::Entropy { q, .. }) => {
            if q.dim() > crate::measures::MAX_QUADRATURE_DIM {
                return Err(Error::InvalidConfig(
                    "quadrature reference needs dimension <= 3".into(),
                ));
            }
            let res = match q.dim() {
                1 => ENTROPY_GRID,
                2 => 401,
                _ => 81,
            };
            Ok(Some(entropy_by_quadrature(q, res, 12.0)?))
        }
        (ReferenceKind::Quadrature, Setting::Transport { q, cost }) => {
            if q.dim() > crate::measures::MAX_QUADRATURE_DIM {
                return Err(Error::InvalidConfig(
                    "quadrature reference needs dimension <= 3".into(),
                ));
            }
            let p = population_measure(&config.model_p, config.quadrature_points)?;
            let qm = population_measure(q, config.quadrature_points)?;
            let settings = SolverSettings {
                tolerance: config.reference_tolerance,
                ..config.solver
            };
            let sol = solve(&p, &qm, cost, &settings)?;
            if !sol.converged {
                log::warn!(
                    "reference solve stopped at marginal error {:.3e}",
                    sol.marginal_error
                );
            }
            Ok(Some(sol.value))
        }
    }
}

/// One repetition of the headline estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub estimate: f64,
    /// Plug-in variance of the rescaled estimate, `se^2 n m / (n + m)`.
    pub plug_in_variance: f64,
    pub converged: bool,
}

fn run_rep(
    config: &ExperimentConfig,
    setting: &Setting,
    n: usize,
    rep: usize,
) -> Result<RepOutcome> {
    let seed = config.rep_seed(n, rep);
    let p = sample_mixture(&config.model_p, n, derive_seed(seed, STREAM_P))?;
    let report = match setting {
        Setting::Entropy { noise, q } => {
            let qs = sample_mixture(q, n, derive_seed(seed, STREAM_Q))?;
            entropy_estimate_ind(&p, &qs, noise, &config.options())?
        }
        Setting::Transport { q, cost } => {
            let qs = sample_mixture(q, n, derive_seed(seed, STREAM_Q))?;
            entropic_cost_estimate(&p, &qs, cost, &config.options())?
        }
    };
    let scale = (report.n * report.m) as f64 / (report.n + report.m) as f64;
    Ok(RepOutcome {
        rep,
        seed,
        estimate: report.estimate,
        plug_in_variance: report.std_error * report.std_error * scale,
        converged: report.converged,
    })
}

fn run_reps(config: &ExperimentConfig, setting: &Setting, n: usize) -> Result<Vec<RepOutcome>> {
    let out: Result<Vec<RepOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|r| run_rep(config, setting, n, r))
        .collect();
    let out = out?;
    let failed = out.iter().filter(|o| !o.converged).count();
    if failed > 0 {
        log::warn!(
            "{failed} of {} repetitions at n = {n} did not converge",
            out.len()
        );
    }
    Ok(out)
}

/// Per-rep estimates of the plug-in quantity for one sample size.
pub fn run_repetitions(config: &ExperimentConfig, n: usize) -> Result<Vec<RepOutcome>> {
    let setting = config.setting()?;
    run_reps(config, &setting, n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub n: usize,
    pub mean_abs_error: f64,
    pub std_error_of_mean: f64,
    pub reps: usize,
    pub non_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateResult {
    pub rows: Vec<RateRow>,
    /// `None` when any mean error is zero or all are below solver resolution.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub reference: f64,
    /// Per-n repetitions, in the order of `rows`.
    pub reps: Vec<Vec<RepOutcome>>,
}

/// Ordinary least squares of `log value` on `log n`.
pub fn fit_loglog_slope(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.len() < 2 {
        return invalid("need at least two points");
    }
    if pairs
        .iter()
        .any(|&(n, v)| !(n > 0.0) || !(v > 0.0) || !v.is_finite())
    {
        return invalid("sizes and values must be positive and finite");
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let k = pairs.len() as f64;
    let mx = pairwise_sum(&xs) / k;
    let my = pairwise_sum(&ys) / k;
    let sxy: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .collect();
    let sxx: Vec<f64> = xs.iter().map(|x| (x - mx) * (x - mx)).collect();
    let sxx = pairwise_sum(&sxx);
    if sxx == 0.0 {
        return invalid("sizes must not all be equal");
    }
    let slope = pairwise_sum(&sxy) / sxx;
    Ok((slope, my - slope * mx))
}

/// Mean absolute error against the reference at every `n`, with a log-log fit.
pub fn run_rate_experiment(config: &ExperimentConfig) -> Result<RateResult> {
    let setting = config.setting()?;
    let reference = reference_value(config)?
        .ok_or_else(|| Error::InvalidConfig("the rate experiment needs a reference".into()))?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &n in &config.n_list {
        log::info!("rate: n = {n}, {} repetitions", config.reps);
        let reps = run_reps(config, &setting, n)?;
        let errs: Vec<f64> = reps
            .iter()
            .map(|o| (o.estimate - reference).abs())
            .collect();
        let (mean, var) = mean_sample_var(&errs);
        rows.push(RateRow {
            n,
            mean_abs_error: mean,
            std_error_of_mean: (var / errs.len() as f64).sqrt(),
            reps: errs.len(),
            non_converged: reps.iter().filter(|o| !o.converged).count(),
        });
        all.push(reps);
    }
    let resolvable = rows.iter().all(|r| r.mean_abs_error > 0.0)
        && rows
            .iter()
            .any(|r| r.mean_abs_error > config.solver.tolerance)
        && rows.len() >= 2;
    let fit = if resolvable {
        let pairs: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.n as f64, r.mean_abs_error))
            .collect();
        Some(fit_loglog_slope(&pairs)?)
    } else {
        None
    };
    Ok(RateResult {
        rows,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
        reference,
        reps: all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; a single bin when all values agree.
    pub fn build(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() || hi <= lo || bins == 0 {
            return Self {
                edges: if values.is_empty() {
                    vec![]
                } else {
                    vec![lo, hi]
                },
                counts: if values.is_empty() {
                    vec![]
                } else {
                    vec![values.len()]
                },
            };
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|k| if k == bins { hi } else { lo + width * k as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov limit `P(K > lambda)`, each series truncated at 100 terms.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.0 {
        // Jacobi-transformed form converges fast for small arguments.
        let s: f64 = (1..=100)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-j * j * std::f64::consts::PI * std::f64::consts::PI / (8.0 * lambda * lambda))
                    .exp()
            })
            .sum();
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        2.0 * (1..=100)
            .map(|k| {
                let k = k as f64;
                let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum::<f64>()
    };
    p.clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against `N(mean, stddev^2)`.
pub fn ks_test_normal(samples: &[f64], mean: f64, stddev: f64) -> Result<KsResult> {
    if !(stddev > 0.0) || !stddev.is_finite() {
        return invalid(format!("stddev must be positive, got {stddev}"));
    }
    if samples.len() < 8 {
        return invalid("the test needs at least 8 samples");
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return invalid("samples must be finite");
    }
    let dist = Normal::new(mean, stddev).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_survival(n.sqrt() * statistic),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltResult {
    pub n: usize,
    pub reps: Vec<RepOutcome>,
    /// Across-repetition mean used for centering.
    pub center: f64,
    /// `sqrt(n m / (n + m)) (estimate - center)` per repetition.
    pub fluctuations: Vec<f64>,
    pub empirical_variance: f64,
    /// Average over repetitions of the plug-in variance.
    pub plug_in_variance: f64,
    pub analytic_variance: Option<f64>,
    /// Variance of the normal law the fluctuations are tested against.
    pub reference_variance: f64,
    pub ks: Option<KsResult>,
    pub histogram: Histogram,
    /// All fluctuations are zero and no test was run.
    pub degenerate: bool,
}

/// Fluctuations of the plug-in estimate at the largest size in `n_list`.
pub fn run_clt_experiment(config: &ExperimentConfig) -> Result<CltResult> {
    let setting = config.setting()?;
    let n = *config.n_list.last().expect("validated non-empty");
    log::info!("clt: n = {n}, {} repetitions", config.reps);
    let reps = run_reps(config, &setting, n)?;
    let estimates: Vec<f64> = reps.iter().map(|o| o.estimate).collect();
    let center = pairwise_sum(&estimates) / estimates.len() as f64;
    let scale = (n as f64 * n as f64 / (2.0 * n as f64)).sqrt();
    let fluctuations: Vec<f64> = estimates.iter().map(|e| scale * (e - center)).collect();
    let (_, empirical_variance) = mean_sample_var(&fluctuations);
    let pv: Vec<f64> = reps.iter().map(|o| o.plug_in_variance).collect();
    let plug_in_variance = pairwise_sum(&pv) / pv.len() as f64;
    let analytic_variance = match &setting {
        Setting::Entropy { noise, .. }
            if config.dimension <= crate::measures::MAX_QUADRATURE_DIM =>
        {
            Some(asymptotic_variance_noise(&config.model_p, noise, 0.5)?)
        }
        _ => None,
    };
    let reference_variance = analytic_variance.unwrap_or(plug_in_variance);
    let degenerate = fluctuations.iter().all(|&f| f == 0.0);
    let ks = if degenerate || !(reference_variance > 0.0) || fluctuations.len() < 8 {
        None
    } else {
        Some(ks_test_normal(
            &fluctuations,
            0.0,
            reference_variance.sqrt(),
        )?)
    };
    let bins = (fluctuations.len() as f64).sqrt().ceil() as usize;
    let histogram = Histogram::build(&fluctuations, bins);
    Ok(CltResult {
        n,
        reps,
        center,
        fluctuations,
        empirical_variance,
        plug_in_variance,
        analytic_variance,
        reference_variance,
        ks,
        histogram,
        degenerate,
    })
}

/// One estimate in the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRecord {
    pub n: usize,
    pub rep: usize,
    pub estimator: EntropyVariant,
    pub estimate: f64,
    pub abs_error: f64,
    pub seed: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub n: usize,
    pub estimator: EntropyVariant,
    pub mean_estimate: f64,
    pub mean_abs_error: f64,
    pub std_error_of_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareTable {
    pub truth: f64,
    pub records: Vec<CompareRecord>,
    pub summary: Vec<CompareSummary>,
}

impl CompareTable {
    pub fn summary_for(&self, n: usize, estimator: EntropyVariant) -> Option<&CompareSummary> {
        self.summary
            .iter()
            .find(|s| s.n == n && s.estimator == estimator)
    }
}

const VARIANTS: [EntropyVariant; 3] = [
    EntropyVariant::Ind,
    EntropyVariant::Paired,
    EntropyVariant::Mg,
];

/// Runs one entropy estimator on the samples of repetition `seed`.
///
/// All three variants share the P sample drawn from stream 0.
pub fn entropy_rep(
    config: &ExperimentConfig,
    variant: EntropyVariant,
    n: usize,
    seed: u64,
) -> Result<EstimateReport> {
    let Setting::Entropy { noise, q } = config.setting()? else {
        return Err(Error::InvalidConfig(
            "entropy estimators need a noise model".into(),
        ));
    };
    entropy_rep_in(config, &noise, &q, variant, n, seed)
}

fn entropy_rep_in(
    config: &ExperimentConfig,
    noise: &NoiseModel,
    q: &GaussianMixture,
    variant: EntropyVariant,
    n: usize,
    seed: u64,
) -> Result<EstimateReport> {
    let p = sample_mixture(&config.model_p, n, derive_seed(seed, STREAM_P))?;
    match variant {
        EntropyVariant::Ind => {
            let qs = sample_mixture(q, n, derive_seed(seed, STREAM_Q))?;
            entropy_estimate_ind(&p, &qs, noise, &config.options())
        }
        EntropyVariant::Paired => entropy_estimate_paired(
            &p,
            noise,
            derive_seed(seed, STREAM_NOISE),
            &config.options(),
        ),
        EntropyVariant::Mg => {
            entropy_estimate_mg(&p, noise, config.mc_draws, derive_seed(seed, STREAM_MC))
        }
    }
}

/// All three entropy estimators on shared P samples, against the reference.
pub fn compare_entropy_estimators(config: &ExperimentConfig) -> Result<CompareTable> {
    let Setting::Entropy { noise, q } = config.setting()? else {
        return Err(Error::InvalidConfig(
            "the comparison needs a noise model".into(),
        ));
    };
    let truth = reference_value(config)?
        .ok_or_else(|| Error::InvalidConfig("the comparison needs a reference".into()))?;
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for &n in &config.n_list {
        log::info!("compare: n = {n}, {} repetitions", config.reps);
        let per_rep: Result<Vec<Vec<CompareRecord>>> = (0..config.reps)
            .into_par_iter()
            .map(|rep| {
                let seed = config.rep_seed(n, rep);
                VARIANTS
                    .iter()
                    .map(|&v| {
                        let r = entropy_rep_in(config, &noise, &q, v, n, seed)?;
                        Ok(CompareRecord {
                            n,
                            rep,
                            estimator: v,
                            estimate: r.estimate,
                            abs_error: (r.estimate - truth).abs(),
                            seed,
                            converged: r.converged,
                        })
                    })
                    .collect()
            })
            .collect();
        let block: Vec<CompareRecord> = per_rep?.into_iter().flatten().collect();
        for v in VARIANTS {
            let est: Vec<f64> = block
                .iter()
                .filter(|r| r.estimator == v)
                .map(|r| r.estimate)
                .collect();
            let err: Vec<f64> = block
                .iter()
                .filter(|r| r.estimator == v)
                .map(|r| r.abs_error)
                .collect();
            let (mean_err, var_err) = mean_sample_var(&err);
            summary.push(CompareSummary {
                n,
                estimator: v,
                mean_estimate: pairwise_sum(&est) / est.len() as f64,
                mean_abs_error: mean_err,
                std_error_of_mean: (var_err / err.len() as f64).sqrt(),
            });
        }
        records.extend(block);
    }
    Ok(CompareTable {
        truth,
        records,
        summary,
    })
}

/// Reals with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::NumericFailure(format!("csv output failed: {e}"))
}

fn write_rows<W: Write>(
    out: W,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::NumericFailure(e.to_string()))
}

/// `n,rep,estimate,abs_error,seed`
pub fn write_rate_csv<W: Write>(out: W, result: &RateResult) -> Result<()> {
    let rows = result
        .reps
        .iter()
        .flatten()
        .zip(
            result
                .rows
                .iter()
                .flat_map(|r| std::iter::repeat_n(r.n, r.reps)),
        )
        .map(|(o, n)| {
            vec![
                n.to_string(),
                o.rep.to_string(),
                fmt_real(o.estimate),
                fmt_real((o.estimate - result.reference).abs()),
                o.seed.to_string(),
            ]
        });
    write_rows(out, &["n", "rep", "estimate", "abs_error", "seed"], rows)
}

/// `n,mean_abs_error,sem`
pub fn write_rate_summary_csv<W: Write>(out: W, result: &RateResult) -> Result<()> {
    let rows = result.rows.iter().map(|r| {
        vec![
            r.n.to_string(),
            fmt_real(r.mean_abs_error),
            fmt_real(r.std_error_of_mean),
        ]
    });
    write_rows(out, &["n", "mean_abs_error", "sem"], rows)
}

/// `rep,estimate,rescaled`
pub fn write_fluctuations_csv<W: Write>(out: W, result: &CltResult) -> Result<()> {
    let rows = result
        .reps
        .iter()
        .zip(&result.fluctuations)
        .map(|(o, f)| vec![o.rep.to_string(), fmt_real(o.estimate), fmt_real(*f)]);
    write_rows(out, &["rep", "estimate", "rescaled"], rows)
}

/// `bin_low,bin_high,count`
pub fn write_histogram_csv<W: Write>(out: W, hist: &Histogram) -> Result<()> {
    let rows = hist.counts.iter().enumerate().map(|(k, c)| {
        vec![
            fmt_real(hist.edges[k]),
            fmt_real(hist.edges[k + 1]),
            c.to_string(),
        ]
    });
    write_rows(out, &["bin_low", "bin_high", "count"], rows)
}

/// `n,rep,estimator,estimate,abs_error,seed`
pub fn write_compare_csv<W: Write>(out: W, table: &CompareTable) -> Result<()> {
    let rows = table.records.iter().map(|r| {
        vec![
            r.n.to_string(),
            r.rep.to_string(),
            r.estimator.name().to_string(),
            fmt_real(r.estimate),
            fmt_real(r.abs_error),
            r.seed.to_string(),
        ]
    });
    write_rows(
        out,
        &["n", "rep", "estimator", "estimate", "abs_error", "seed"],
        rows,
    )
}
