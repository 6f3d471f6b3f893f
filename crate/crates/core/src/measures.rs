//! Population models, empirical measures and the operations between them.
//!
//! A [`DiscreteMeasure`] is a weighted point cloud. It stands in for an
//! empirical measure `P_n` (uniform weights) or for a grid discretization of
//! a population measure (density-proportional weights). A
//! [`GaussianMixture`] is the population model: isotropic components with
//! closed-form density, exact sampling, and exact convolution with gaussian
//! noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::{log_sum_exp, pairwise_sum};
use crate::rng::rng_from_seed;

/// Largest dimension supported by grid quadrature.
pub const MAX_QUADRATURE_DIM: usize = 3;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Weighted point cloud in `R^d`.
///
/// Points are stored row-major in one flat buffer. Weights are strictly
/// positive and sum to one within `1e-12`. Duplicate points are kept as
/// separate atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure", into = "RawMeasure")]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMeasure {
    points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

impl TryFrom<RawMeasure> for DiscreteMeasure {
    type Error = Error;

    fn try_from(raw: RawMeasure) -> Result<Self> {
        DiscreteMeasure::from_rows(&raw.points, raw.weights)
    }
}

impl From<DiscreteMeasure> for RawMeasure {
    fn from(m: DiscreteMeasure) -> Self {
        RawMeasure {
            points: m.rows(),
            weights: Some(m.weights),
        }
    }
}

impl DiscreteMeasure {
    /// Builds a measure from a flat row-major buffer and explicit weights.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be at least 1");
        }
        if weights.is_empty() {
            return invalid("measure must have at least one point");
        }
        if points.len() != dim * weights.len() {
            return invalid(format!(
                "point buffer has {} coordinates, expected {} x {}",
                points.len(),
                weights.len(),
                dim
            ));
        }
        if let Some(x) = points.iter().find(|x| !x.is_finite()) {
            return invalid(format!("non-finite coordinate {x}"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return invalid(format!("weights must be positive and finite, found {w}"));
        }
        let total = pairwise_sum(&weights);
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return invalid(format!("weights sum to {total}, not 1"));
        }
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    /// Empirical measure: every point gets weight `1/n`.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be at least 1");
        }
        let n = points.len() / dim;
        if n == 0 {
            return invalid("measure must have at least one point");
        }
        Self::new(dim, points, vec![1.0 / n as f64; n])
    }

    /// Builds a measure from nested coordinate rows. Missing weights mean
    /// uniform.
    pub fn from_rows(rows: &[Vec<f64>], weights: Option<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return invalid("points have inconsistent dimensions");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        match weights {
            Some(w) => Self::new(dim, flat, w),
            None => Self::uniform(dim, flat),
        }
    }

    /// Builds a measure from unnormalized positive masses.
    pub fn from_masses(dim: usize, points: Vec<f64>, masses: &[f64]) -> Result<Self> {
        let total = pairwise_sum(masses);
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::NumericFailure(format!("total mass {total}")));
        }
        Self::new(dim, points, masses.iter().map(|m| m / total).collect())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// Always false; measures hold at least one atom.
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat row-major coordinate buffer.
    pub fn coords(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.points.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// True when all weights are equal to `1/n` within `1e-12`.
    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= 1e-12)
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|a| {
                let terms: Vec<f64> = self
                    .points
                    .chunks(self.dim)
                    .zip(&self.weights)
                    .map(|(p, w)| p[a] * w)
                    .collect();
                pairwise_sum(&terms)
            })
            .collect()
    }

    /// Same weights, every point shifted by `shift`.
    pub fn translate(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return invalid("shift dimension mismatch");
        }
        let points = self
            .points
            .chunks(self.dim)
            .flat_map(|p| p.iter().zip(shift).map(|(x, s)| x + s))
            .collect();
        Self::new(self.dim, points, self.weights.clone())
    }

    fn map_points(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dim: self.dim,
            points: self.points.iter().map(|&x| f(x)).collect(),
            weights: self.weights.clone(),
        }
    }
}

/// One isotropic component `weight * N(mean, variance * I_d)`.
///
/// `variance == 0` denotes an atom at `mean`. Atoms can be sampled and
/// convolved but have no density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub weight: f64,
}

/// Finite mixture of isotropic gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<GaussianComponent>,
}

#[derive(Serialize, Deserialize)]
struct RawMixture {
    components: Vec<GaussianComponent>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.components)
    }
}

impl From<GaussianMixture> for RawMixture {
    fn from(m: GaussianMixture) -> Self {
        RawMixture {
            components: m.components,
        }
    }
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return invalid("mixture needs at least one component");
        };
        let dim = first.mean.len();
        if dim == 0 {
            return invalid("dimension must be at least 1");
        }
        for c in &components {
            if c.mean.len() != dim {
                return invalid("component means have inconsistent dimensions");
            }
            if c.mean.iter().any(|x| !x.is_finite()) {
                return invalid("non-finite component mean");
            }
            if !(c.variance >= 0.0) || !c.variance.is_finite() {
                return invalid(format!("variance must be >= 0, got {}", c.variance));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return invalid(format!("component weight must be > 0, got {}", c.weight));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return invalid(format!("component weights sum to {total}, not 1"));
        }
        Ok(Self { dim, components })
    }

    /// Single component `N(mean, variance * I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![GaussianComponent {
            mean,
            variance,
            weight: 1.0,
        }])
    }

    /// Standard normal in `R^d`.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::isotropic(vec![0.0; dim], 1.0)
    }

    /// `0.5 N(offset 1_d, variance I) + 0.5 N(-offset 1_d, variance I)`.
    pub fn symmetric_pair(dim: usize, offset: f64, variance: f64) -> Result<Self> {
        Self::new(vec![
            GaussianComponent {
                mean: vec![offset; dim],
                variance,
                weight: 0.5,
            },
            GaussianComponent {
                mean: vec![-offset; dim],
                variance,
                weight: 0.5,
            },
        ])
    }

    /// Point mass at `at`.
    pub fn atom(at: Vec<f64>) -> Result<Self> {
        Self::isotropic(at, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// True when every component is an atom.
    pub fn is_atomic(&self) -> bool {
        self.components.iter().all(|c| c.variance == 0.0)
    }

    fn require_density(&self) -> Result<()> {
        if self.components.iter().any(|c| c.variance == 0.0) {
            return invalid("mixture has an atom and no density");
        }
        Ok(())
    }

    /// Same components, every mean shifted by `shift`.
    pub fn translate(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return invalid("shift dimension mismatch");
        }
        Self::new(
            self.components
                .iter()
                .map(|c| GaussianComponent {
                    mean: c.mean.iter().zip(shift).map(|(m, s)| m + s).collect(),
                    ..c.clone()
                })
                .collect(),
        )
    }
}

/// Isotropic gaussian noise `N(0, sigma_g^2 I_d)`.
///
/// `log_z_g` is the log normalizer `(d/2) log(2 pi sigma_g^2)` of the
/// density `exp(-|y|^2 / (2 sigma_g^2)) / Z_g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseModel {
    sigma_g: f64,
    dim: usize,
    log_z_g: f64,
}

impl NoiseModel {
    /// `sigma_g = 0` is accepted (the noiseless identity); estimators reject it.
    pub fn new(sigma_g: f64, dim: usize) -> Result<Self> {
        if !(sigma_g >= 0.0) || !sigma_g.is_finite() {
            return invalid(format!("sigma_g must be finite and >= 0, got {sigma_g}"));
        }
        if dim == 0 {
            return invalid("dimension must be at least 1");
        }
        Ok(Self {
            sigma_g,
            dim,
            log_z_g: Self::log_normalizer(sigma_g, dim),
        })
    }

    fn log_normalizer(sigma_g: f64, dim: usize) -> f64 {
        0.5 * dim as f64 * (2.0 * std::f64::consts::PI * sigma_g * sigma_g).ln()
    }

    pub fn sigma_g(&self) -> f64 {
        self.sigma_g
    }

    pub fn variance(&self) -> f64 {
        self.sigma_g * self.sigma_g
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_z_g(&self) -> f64 {
        self.log_z_g
    }

    /// Log density of the noise law at `y`.
    pub fn log_density(&self, y: &[f64]) -> f64 {
        let sq: f64 = y.iter().map(|v| v * v).sum();
        -sq / (2.0 * self.variance()) - self.log_z_g
    }
}

fn draw_component<R: Rng>(model: &GaussianMixture, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let last = model.components.len() - 1;
    for (k, c) in model.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return k;
        }
    }
    last
}

/// Draws `n` i.i.d. points from `model` as a uniform empirical measure.
///
/// Each draw consumes one uniform (component choice) followed by `d`
/// standard normals, so the output is a pure function of `(model, n, seed)`.
pub fn sample_mixture(model: &GaussianMixture, n: usize, seed: u64) -> Result<DiscreteMeasure> {
    if n == 0 {
        return invalid("sample size must be at least 1");
    }
    let mut rng = rng_from_seed(seed);
    let d = model.dim;
    let mut points = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = &model.components[draw_component(model, &mut rng)];
        let sd = c.variance.sqrt();
        for a in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            points.push(c.mean[a] + sd * z);
        }
    }
    DiscreteMeasure::uniform(d, points)
}

/// Adds an independent `N(0, sigma_g^2 I)` draw to every point; weights are kept.
pub fn add_gaussian_noise(
    sample: &DiscreteMeasure,
    noise: &NoiseModel,
    seed: u64,
) -> Result<DiscreteMeasure> {
    if sample.dim != noise.dim {
        return invalid(format!(
            "sample dimension {} does not match noise dimension {}",
            sample.dim, noise.dim
        ));
    }
    let mut rng = rng_from_seed(seed);
    let sigma = noise.sigma_g;
    let points = sample
        .points
        .iter()
        .map(|&x| {
            let z: f64 = rng.sample(StandardNormal);
            x + sigma * z
        })
        .collect();
    DiscreteMeasure::new(sample.dim, points, sample.weights.clone())
}

fn component_log_density(c: &GaussianComponent, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    c.weight.ln()
        - 0.5 * d * (2.0 * std::f64::consts::PI * c.variance).ln()
        - sq / (2.0 * c.variance)
}

fn log_density_unchecked(model: &GaussianMixture, x: &[f64]) -> f64 {
    if model.components.len() == 1 {
        return component_log_density(&model.components[0], x);
    }
    let terms: Vec<f64> = model
        .components
        .iter()
        .map(|c| component_log_density(c, x))
        .collect();
    log_sum_exp(&terms)
}

/// Log of [`mixture_density`], computed without underflow.
pub fn mixture_log_density(model: &GaussianMixture, x: &[f64]) -> Result<f64> {
    if x.len() != model.dim {
        return invalid("point dimension mismatch");
    }
    model.require_density()?;
    Ok(log_density_unchecked(model, x))
}

/// Density of `model` at `x` with respect to Lebesgue measure.
pub fn mixture_density(model: &GaussianMixture, x: &[f64]) -> Result<f64> {
    mixture_log_density(model, x).map(f64::exp)
}

/// `P * N(0, sigma_g^2 I)`: same means and weights, variances grow by `sigma_g^2`.
pub fn convolve_with_noise(model: &GaussianMixture, noise: &NoiseModel) -> Result<GaussianMixture> {
    if model.dim != noise.dim {
        return invalid("mixture and noise dimensions differ");
    }
    GaussianMixture::new(
        model
            .components
            .iter()
            .map(|c| GaussianComponent {
                variance: c.variance + noise.variance(),
                ..c.clone()
            })
            .collect(),
    )
}

/// Regular tensor grid covering every component mean +- `radius` standard
/// deviations on each axis.
struct Grid {
    dim: usize,
    axes: Vec<Vec<f64>>,
    cell_volume: f64,
}

impl Grid {
    fn cover(model: &GaussianMixture, points_per_axis: usize, radius: f64) -> Result<Self> {
        let dim = model.dim;
        if dim > MAX_QUADRATURE_DIM {
            return Err(Error::UnsupportedDimension {
                dim,
                max: MAX_QUADRATURE_DIM,
            });
        }
        if points_per_axis < 2 {
            return invalid("grid needs at least 2 points per axis");
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return invalid(format!("radius must be positive, got {radius}"));
        }
        model.require_density()?;
        let mut axes = Vec::with_capacity(dim);
        let mut cell_volume = 1.0;
        for a in 0..dim {
            let lo = model
                .components
                .iter()
                .map(|c| c.mean[a] - radius * c.variance.sqrt())
                .fold(f64::INFINITY, f64::min);
            let hi = model
                .components
                .iter()
                .map(|c| c.mean[a] + radius * c.variance.sqrt())
                .fold(f64::NEG_INFINITY, f64::max);
            let step = (hi - lo) / (points_per_axis - 1) as f64;
            axes.push((0..points_per_axis).map(|i| lo + step * i as f64).collect());
            cell_volume *= step;
        }
        Ok(Self {
            dim,
            axes,
            cell_volume,
        })
    }

    /// Row-major flat buffer of all grid points, last axis fastest.
    fn points(&self) -> Vec<f64> {
        let total: usize = self.axes.iter().map(Vec::len).product();
        let mut out = Vec::with_capacity(total * self.dim);
        let mut idx = vec![0usize; self.dim];
        for _ in 0..total {
            out.extend(self.axes.iter().zip(&idx).map(|(axis, &i)| axis[i]));
            for a in (0..self.dim).rev() {
                idx[a] += 1;
                if idx[a] < self.axes[a].len() {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }
}

/// Grid discretization of `model` with density-proportional weights.
pub fn quadrature_measure(
    model: &GaussianMixture,
    points_per_axis: usize,
    radius_in_stddevs: f64,
) -> Result<DiscreteMeasure> {
    let grid = Grid::cover(model, points_per_axis, radius_in_stddevs)?;
    let points = grid.points();
    let log_q: Vec<f64> = points
        .chunks(grid.dim)
        .map(|x| log_density_unchecked(model, x))
        .collect();
    let norm = log_sum_exp(&log_q);
    let weights: Vec<f64> = log_q.iter().map(|l| (l - norm).exp()).collect();
    if weights.contains(&0.0) {
        return Err(Error::NumericFailure(
            "grid weight underflow; reduce the radius".into(),
        ));
    }
    // Renormalize once more so the sum is 1 to rounding.
    DiscreteMeasure::from_masses(grid.dim, points, &weights)
}

/// Differential entropy `-\int q log q` of `model` by grid quadrature.
pub fn entropy_by_quadrature(
    model: &GaussianMixture,
    resolution: usize,
    radius_in_stddevs: f64,
) -> Result<f64> {
    let grid = Grid::cover(model, resolution, radius_in_stddevs)?;
    let terms: Vec<f64> = grid
        .points()
        .chunks(grid.dim)
        .map(|x| {
            let lq = log_density_unchecked(model, x);
            let q = lq.exp();
            if q == 0.0 {
                0.0
            } else {
                q * lq
            }
        })
        .collect();
    Ok(-pairwise_sum(&terms) * grid.cell_volume)
}

/// Mean and variance of `log q(Y)` for `Y ~ model`, by self-normalized grid
/// quadrature.
pub fn log_density_moments(
    model: &GaussianMixture,
    resolution: usize,
    radius_in_stddevs: f64,
) -> Result<(f64, f64)> {
    let grid = Grid::cover(model, resolution, radius_in_stddevs)?;
    let log_q: Vec<f64> = grid
        .points()
        .chunks(grid.dim)
        .map(|x| log_density_unchecked(model, x))
        .collect();
    let norm = log_sum_exp(&log_q);
    let w: Vec<f64> = log_q.iter().map(|l| (l - norm).exp()).collect();
    let first: Vec<f64> = w.iter().zip(&log_q).map(|(w, l)| w * l).collect();
    let mean = pairwise_sum(&first);
    let second: Vec<f64> = w
        .iter()
        .zip(&log_q)
        .map(|(w, l)| w * (l - mean) * (l - mean))
        .collect();
    Ok((mean, pairwise_sum(&second)))
}

/// Smallest `tau^2` with `sum_i w_i exp(|x_i|^2 / (2 d tau^2)) <= 2`.
///
/// Found by bisection to relative tolerance `1e-6`. Zero when every point is
/// at the origin.
pub fn subgaussian_proxy(sample: &DiscreteMeasure) -> f64 {
    let d = sample.dim as f64;
    let a: Vec<f64> = sample
        .points
        .chunks(sample.dim)
        .map(|p| p.iter().map(|v| v * v).sum::<f64>() / (2.0 * d))
        .collect();
    let a_max = a.iter().copied().fold(0.0, f64::max);
    if a_max == 0.0 {
        return 0.0;
    }
    let log_w: Vec<f64> = sample.weights.iter().map(|w| w.ln()).collect();
    let ln2 = std::f64::consts::LN_2;
    // log E exp(a / tau2) - ln 2, decreasing in tau2.
    let excess = |tau2: f64| {
        let terms: Vec<f64> = a.iter().zip(&log_w).map(|(a, lw)| lw + a / tau2).collect();
        log_sum_exp(&terms) - ln2
    };
    // Jensen gives the lower bracket, the max term the upper one.
    let a_mean: f64 = pairwise_sum(
        &a.iter()
            .zip(&sample.weights)
            .map(|(a, w)| a * w)
            .collect::<Vec<_>>(),
    );
    let mut lo = a_mean / ln2;
    let mut hi = a_max / ln2;
    if excess(lo) <= 0.0 {
        return lo;
    }
    while (hi - lo) > 1e-6 * hi {
        let mid = 0.5 * (lo + hi);
        if excess(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Pushforward under `x -> epsilon^{-1/2} x`.
pub fn rescale_measure(measure: &DiscreteMeasure, epsilon: f64) -> Result<DiscreteMeasure> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    let s = epsilon.sqrt().recip();
    Ok(measure.map_points(|x| x * s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7;

    fn bimodal_mixture() -> GaussianMixture {
        GaussianMixture::symmetric_pair(1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.5]).is_ok());
        assert!(DiscreteMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
        assert!(DiscreteMeasure::new(1, vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(DiscreteMeasure::new(1, vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiscreteMeasure::new(2, vec![0.0, 1.0, 2.0], vec![1.0]).is_err());
        assert!(DiscreteMeasure::uniform(1, vec![]).is_err());
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::isotropic(vec![0.0], -1.0).is_err());
        assert!(GaussianMixture::new(vec![]).is_err());
        let bad_weights = vec![
            GaussianComponent {
                mean: vec![0.0],
                variance: 1.0,
                weight: 0.6,
            },
            GaussianComponent {
                mean: vec![1.0],
                variance: 1.0,
                weight: 0.6,
            },
        ];
        assert!(GaussianMixture::new(bad_weights).is_err());
    }

    #[test]
    fn mixture_json_is_validated() {
        let ok: GaussianMixture =
            serde_json::from_str(r#"{"components":[{"mean":[0.0],"variance":1.0,"weight":1.0}]}"#)
                .unwrap();
        assert_eq!(ok, GaussianMixture::standard(1).unwrap());
        let bad = serde_json::from_str::<GaussianMixture>(
            r#"{"components":[{"mean":[0.0],"variance":1.0,"weight":0.3}]}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn noise_normalizer_recomputes() {
        let nm = NoiseModel::new(1.7, 3).unwrap();
        let expected = 1.5 * (2.0 * std::f64::consts::PI * 1.7 * 1.7).ln();
        assert!((nm.log_z_g() - expected).abs() <= 1e-14);
        assert!(NoiseModel::new(-1.0, 1).is_err());
        assert!(NoiseModel::new(1.0, 0).is_err());
    }

    #[test]
    fn sample_weights_are_uniform() {
        let s = sample_mixture(&bimodal_mixture(), 5, 3).unwrap();
        assert!(s.weights().iter().all(|&w| w == 0.2));
        assert!(sample_mixture(&bimodal_mixture(), 0, 3).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_mixture(&bimodal_mixture(), 100, 42).unwrap();
        let b = sample_mixture(&bimodal_mixture(), 100, 42).unwrap();
        let c = sample_mixture(&bimodal_mixture(), 100, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn standard_normal_sample_mean() {
        let s = sample_mixture(&GaussianMixture::standard(1).unwrap(), 100_000, 11).unwrap();
        assert!(s.mean()[0].abs() < 0.02);
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = sample_mixture(&bimodal_mixture(), 50, 1).unwrap();
        let nm = NoiseModel::new(0.0, 1).unwrap();
        assert_eq!(add_gaussian_noise(&s, &nm, 9).unwrap(), s);
    }

    #[test]
    fn noise_is_deterministic_and_checks_dims() {
        let s = sample_mixture(&bimodal_mixture(), 50, 1).unwrap();
        let nm = NoiseModel::new(1.0, 1).unwrap();
        assert_eq!(
            add_gaussian_noise(&s, &nm, 9).unwrap(),
            add_gaussian_noise(&s, &nm, 9).unwrap()
        );
        let nm2 = NoiseModel::new(1.0, 2).unwrap();
        assert!(matches!(
            add_gaussian_noise(&s, &nm2, 9),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn noise_adds_variance() {
        let s = sample_mixture(&GaussianMixture::standard(1).unwrap(), 100_000, 5).unwrap();
        let nm = NoiseModel::new(1.0, 1).unwrap();
        let noisy = add_gaussian_noise(&s, &nm, 6).unwrap();
        let (_, var) = crate::numeric::weighted_mean_var(noisy.coords(), noisy.weights());
        assert!((var - 2.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn density_closed_forms() {
        let std = GaussianMixture::standard(1).unwrap();
        let p0 = mixture_density(&std, &[0.0]).unwrap();
        assert!((p0 - 0.398_942_280_401_432_7).abs() < 1e-15);
        let m = bimodal_mixture();
        for x in [0.3, 1.7] {
            let a = mixture_density(&m, &[x]).unwrap();
            let b = mixture_density(&m, &[-x]).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
        assert!(mixture_density(&GaussianMixture::atom(vec![0.0]).unwrap(), &[0.0]).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        // Trapezoid rule over [-10, 10] at step 0.01.
        let m = bimodal_mixture();
        let h = 0.01;
        let n = 2000;
        let mut s = 0.0;
        for i in 0..=n {
            let x = -10.0 + h * i as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * mixture_density(&m, &[x]).unwrap();
        }
        assert!((s * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn convolution_rules() {
        let nm = NoiseModel::new(1.0, 1).unwrap();
        let q = convolve_with_noise(&GaussianMixture::standard(1).unwrap(), &nm).unwrap();
        assert_eq!(q, GaussianMixture::isotropic(vec![0.0], 2.0).unwrap());
        let zero = NoiseModel::new(0.0, 1).unwrap();
        assert_eq!(
            convolve_with_noise(&bimodal_mixture(), &zero).unwrap(),
            bimodal_mixture()
        );
        assert_eq!(
            convolve_with_noise(&bimodal_mixture(), &nm).unwrap(),
            GaussianMixture::symmetric_pair(1, 1.0, 2.0).unwrap()
        );
    }

    #[test]
    fn convolution_matches_monte_carlo() {
        // Density of P * N(0, s^2) at x against the average of phi_s(x - X).
        let p = bimodal_mixture();
        let nm = NoiseModel::new(0.8, 1).unwrap();
        let q = convolve_with_noise(&p, &nm).unwrap();
        let draws = sample_mixture(&p, 1_000_000, 77).unwrap();
        for x in [0.0, 0.9, -2.5] {
            let terms: Vec<f64> = draws
                .coords()
                .iter()
                .map(|xi| nm.log_density(&[x - xi]).exp())
                .collect();
            let mc = pairwise_sum(&terms) / draws.len() as f64;
            let exact = mixture_density(&q, &[x]).unwrap();
            // MC standard error here is ~2e-4, so a tighter bound would need ~10^10 draws.
            assert!((mc - exact).abs() < 1.5e-3, "x={x} mc={mc} exact={exact}");
        }
    }

    #[test]
    fn quadrature_grid_shape() {
        let m2 = GaussianMixture::symmetric_pair(2, 1.0, 1.0).unwrap();
        let q = quadrature_measure(&m2, 50, 6.0).unwrap();
        assert_eq!(q.len(), 2500);
        assert!((pairwise_sum(q.weights()) - 1.0).abs() <= 1e-12);
        let m4 = GaussianMixture::standard(4).unwrap();
        assert!(matches!(
            quadrature_measure(&m4, 10, 6.0),
            Err(Error::UnsupportedDimension { dim: 4, .. })
        ));
    }

    #[test]
    fn quadrature_mean_of_standard_normal() {
        let q = quadrature_measure(&GaussianMixture::standard(1).unwrap(), 2000, 8.0).unwrap();
        assert!(q.mean()[0].abs() < 1e-6);
    }

    #[test]
    fn gaussian_entropies() {
        let h1 = entropy_by_quadrature(&GaussianMixture::standard(1).unwrap(), 2000, 8.0).unwrap();
        assert!((h1 - HALF_LOG_2PI_E).abs() < 1e-4, "{h1}");
        let h2 = entropy_by_quadrature(
            &GaussianMixture::isotropic(vec![0.0], 2.0).unwrap(),
            2000,
            8.0,
        )
        .unwrap();
        assert!((h2 - 1.765_512_0).abs() < 1e-4, "{h2}");
        let sep = GaussianMixture::symmetric_pair(1, 10.0, 1.0).unwrap();
        let h3 = entropy_by_quadrature(&sep, 2000, 8.0).unwrap();
        assert!(
            (h3 - (HALF_LOG_2PI_E + std::f64::consts::LN_2)).abs() < 1e-3,
            "{h3}"
        );
    }

    #[test]
    fn entropy_in_two_dimensions() {
        let m = GaussianMixture::standard(2).unwrap();
        let h = entropy_by_quadrature(&m, 400, 8.0).unwrap();
        assert!((h - 2.0 * HALF_LOG_2PI_E).abs() < 1e-4);
    }

    #[test]
    fn entropy_is_translation_invariant() {
        let m = bimodal_mixture();
        let a = entropy_by_quadrature(&m, 2000, 8.0).unwrap();
        let b = entropy_by_quadrature(&m.translate(&[5.0]).unwrap(), 2000, 8.0).unwrap();
        assert!((a - b).abs() <= 1e-6);
    }

    #[test]
    fn log_density_variance_of_gaussian_is_half() {
        let (mean, var) = log_density_moments(
            &GaussianMixture::isotropic(vec![0.0], 2.0).unwrap(),
            2000,
            10.0,
        )
        .unwrap();
        assert!((var - 0.5).abs() < 1e-6, "{var}");
        assert!((mean + 1.765_512_0).abs() < 1e-4);
    }

    #[test]
    fn subgaussian_examples() {
        let origin = DiscreteMeasure::uniform(1, vec![0.0]).unwrap();
        assert_eq!(subgaussian_proxy(&origin), 0.0);
        let one = DiscreteMeasure::uniform(1, vec![1.0]).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::LN_2);
        assert!((subgaussian_proxy(&one) - expected).abs() < 1e-6 * expected);
        let s = sample_mixture(&GaussianMixture::standard(1).unwrap(), 10_000, 2).unwrap();
        let t = subgaussian_proxy(&s);
        assert!((0.5..=3.0).contains(&t), "{t}");
    }

    #[test]
    fn subgaussian_proxy_satisfies_definition() {
        let s = sample_mixture(&bimodal_mixture(), 500, 8).unwrap();
        let tau2 = subgaussian_proxy(&s);
        let e = |t: f64| {
            s.coords()
                .iter()
                .zip(s.weights())
                .map(|(x, w)| w * (x * x / (2.0 * t)).exp())
                .sum::<f64>()
        };
        assert!(e(tau2) <= 2.0 + 1e-12);
        assert!(e(tau2 * (1.0 - 1e-5)) > 2.0);
    }

    #[test]
    fn rescale_examples() {
        let p = DiscreteMeasure::uniform(2, vec![2.0, 2.0]).unwrap();
        assert_eq!(rescale_measure(&p, 1.0).unwrap(), p);
        assert_eq!(rescale_measure(&p, 4.0).unwrap().point(0), &[1.0, 1.0]);
        let q = DiscreteMeasure::uniform(1, vec![1.0]).unwrap();
        assert_eq!(rescale_measure(&q, 0.25).unwrap().point(0), &[2.0]);
        assert!(rescale_measure(&q, 0.0).is_err());
        assert!(rescale_measure(&q, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn proxy_is_monotone_under_larger_points(
            xs in prop::collection::vec(-3.0f64..3.0, 1..40),
            extra in 0.0f64..2.0,
        ) {
            let base = DiscreteMeasure::uniform(1, xs.clone()).unwrap();
            let max_abs = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let mut grown = xs.clone();
            grown.push(max_abs + extra);
            let bigger = DiscreteMeasure::uniform(1, grown).unwrap();
            prop_assert!(subgaussian_proxy(&bigger) >= subgaussian_proxy(&base) * (1.0 - 2e-6));
        }

        #[test]
        fn operations_preserve_weight_normalization(
            seed in any::<u64>(),
            n in 1usize..60,
            eps in 0.01f64..10.0,
        ) {
            let s = sample_mixture(&bimodal_mixture(), n, seed).unwrap();
            let nm = NoiseModel::new(0.5, 1).unwrap();
            for m in [
                add_gaussian_noise(&s, &nm, seed ^ 1).unwrap(),
                rescale_measure(&s, eps).unwrap(),
                s.translate(&[3.0]).unwrap(),
            ] {
                prop_assert!((pairwise_sum(m.weights()) - 1.0).abs() <= 1e-12);
            }
        }
    }
}
