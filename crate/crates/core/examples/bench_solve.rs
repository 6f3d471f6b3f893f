use entot::measures::{sample_mixture, GaussianMixture};
use entot::sinkhorn::{solve, CostSpec, SolverSettings};
use std::time::Instant;

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2000);
    let p = sample_mixture(&GaussianMixture::standard(1).unwrap(), n, 1).unwrap();
    let q = sample_mixture(&GaussianMixture::isotropic(vec![0.0], 2.0).unwrap(), n, 2).unwrap();
    let t = Instant::now();
    let sol = solve(
        &p,
        &q,
        &CostSpec::squared_euclidean(1.0).unwrap(),
        &SolverSettings::default(),
    )
    .unwrap();
    println!(
        "n={n} value={} iters={} err={:e} time={:?}",
        sol.value,
        sol.iterations,
        sol.marginal_error,
        t.elapsed()
    );
}
