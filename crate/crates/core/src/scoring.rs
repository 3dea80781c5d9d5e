//! Energy score objective and two-sample evaluation metrics.
//!
//! The energy score `S(p, y) = ½ E ρ(X, X') − E ρ(X, y)` with
//! `ρ(x, x') = ‖x − x'‖^β` is positively oriented: the true law maximizes it
//! in expectation. Training minimizes its negation.

use crate::error::{param, Error, Result};
use crate::samplers::RngState;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use num_traits::Zero;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub beta: f64,
    pub m: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { beta: 1.0, m: 2 }
    }
}

impl ScoreConfig {
    pub fn new(beta: f64, m: usize) -> Result<Self> {
        let c = Self { beta, m };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 2.0) {
            return Err(param(format!("beta must lie in (0,2), got {}", self.beta)));
        }
        if self.m < 2 {
            return Err(param(format!("energy score needs m >= 2 samples, got {}", self.m)));
        }
        Ok(())
    }
}

#[inline]
fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖a − b‖^β`.
#[inline]
pub fn rho(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, beta: f64) -> f64 {
    let d2 = sq_dist(a, b);
    if beta == 1.0 {
        d2.sqrt()
    } else {
        d2.powf(0.5 * beta)
    }
}

/// Plug-in energy score of `samples` (one draw per row) against `target`.
pub fn energy_score_estimate(config: &ScoreConfig, samples: ArrayView2<'_, f64>, target: ArrayView1<'_, f64>) -> Result<f64> {
    let m = samples.nrows();
    if m < 2 {
        return Err(param(format!("energy score needs at least 2 samples, got {m}")));
    }
    if samples.ncols() != target.len() {
        return Err(Error::Dimension(format!("samples have {} columns, target {}", samples.ncols(), target.len())));
    }
    let beta = config.beta;
    let mut pair = 0.0;
    for j in 0..m {
        for k in (j + 1)..m {
            pair += rho(samples.row(j), samples.row(k), beta);
        }
    }
    // Σ_{j≠j'} ½ρ counts each unordered pair once
    let spread = pair / (m * (m - 1)) as f64;
    let fit: f64 = samples.axis_iter(Axis(0)).map(|x| rho(x, target, beta)).sum::<f64>() / m as f64;
    Ok(spread - fit)
}

/// Linear map from a `G × d` unit matrix to a `d`-vector aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggregateSpec {
    /// Column sums over units.
    #[default]
    Sum,
}

impl AggregateSpec {
    pub fn apply<T>(&self, units: ArrayView2<'_, T>) -> ndarray::Array1<T>
    where
        T: Clone + Zero + std::ops::Add<Output = T>,
    {
        match self {
            AggregateSpec::Sum => units.sum_axis(Axis(0)),
        }
    }
}

/// Energy score of aggregated sample groups against the observed aggregate.
pub fn aggregate_energy_score(
    config: &ScoreConfig,
    aggregate: AggregateSpec,
    sample_groups: &[ArrayView2<'_, f64>],
    target_aggregate: ArrayView1<'_, f64>,
) -> Result<f64> {
    if sample_groups.len() < 2 {
        return Err(param(format!("aggregate energy score needs at least 2 groups, got {}", sample_groups.len())));
    }
    let d = target_aggregate.len();
    let mut lifted = Array2::zeros((sample_groups.len(), d));
    for (mut row, g) in lifted.axis_iter_mut(Axis(0)).zip(sample_groups) {
        if g.ncols() != d {
            return Err(Error::Dimension(format!("group has {} columns, aggregate {}", g.ncols(), d)));
        }
        row.assign(&aggregate.apply(*g));
    }
    energy_score_estimate(config, lifted.view(), target_aggregate)
}

fn check_sets(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(param("sample sets must be nonempty"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!("sets have {} and {} columns", a.ncols(), b.ncols())));
    }
    Ok(())
}

fn mean_pairwise<F: Fn(f64) -> f64>(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, f: F) -> f64 {
    let mut total = 0.0;
    for x in a.axis_iter(Axis(0)) {
        for y in b.axis_iter(Axis(0)) {
            total += f(sq_dist(x, y));
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

/// Mean of `f(‖x−x'‖²)` over all ordered pairs of one set, diagonal included.
fn mean_self_pairs<F: Fn(f64) -> f64>(a: ArrayView2<'_, f64>, f: F, diag: f64) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += f(sq_dist(a.row(i), a.row(j)));
        }
    }
    (2.0 * total + n as f64 * diag) / (n * n) as f64
}

/// Energy distance `2 E ρ(X,Y) − E ρ(X,X') − E ρ(Y,Y')` as a V-statistic.
pub fn energy_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, beta: f64) -> Result<f64> {
    check_sets(a, b)?;
    if !(beta > 0.0 && beta < 2.0) {
        return Err(param(format!("beta must lie in (0,2), got {beta}")));
    }
    let f = |d2: f64| d2.powf(0.5 * beta);
    let cross = mean_pairwise(a, b, f);
    Ok(2.0 * cross - mean_self_pairs(a, f, 0.0) - mean_self_pairs(b, f, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    Median,
    Fixed(f64),
}

/// Median of pairwise distances over the pooled set; 1 if all points coincide.
pub fn median_pairwise_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let pooled: Vec<ArrayView1<'_, f64>> = a.axis_iter(Axis(0)).chain(b.axis_iter(Axis(0))).collect();
    let n = pooled.len();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |x, y| x.partial_cmp(y).unwrap());
    let med = m.sqrt();
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Squared MMD with the Gaussian kernel `exp(−‖x−y‖² / (2h²))`, V-statistic.
pub fn mmd_rbf(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: Bandwidth) -> Result<f64> {
    check_sets(a, b)?;
    let h = match bandwidth {
        Bandwidth::Median => median_pairwise_distance(a, b),
        Bandwidth::Fixed(h) => {
            if !(h > 0.0) || !h.is_finite() {
                return Err(param(format!("bandwidth must be > 0, got {h}")));
            }
            h
        }
    };
    let gamma = 1.0 / (2.0 * h * h);
    let k = |d2: f64| (-gamma * d2).exp();
    Ok(mean_self_pairs(a, k, 1.0) + mean_self_pairs(b, k, 1.0) - 2.0 * mean_pairwise(a, b, k))
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with row/column potentials, O(n³)). Returns the assignment row → column.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact W₂ between equal-size empirical measures via optimal assignment.
fn w2_exact(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.nrows();
    let cost = Array2::from_shape_fn((n, n), |(i, j)| sq_dist(a.row(i), b.row(j)));
    let assignment = min_cost_assignment(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    (total / n as f64).max(0.0).sqrt()
}

/// W₂ on a common-size subsample of at most `max_points` rows per set,
/// chosen with a generator seeded by `seed`.
pub fn wasserstein2_seeded(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, max_points: usize, seed: u64) -> Result<f64> {
    check_sets(a, b)?;
    if max_points == 0 {
        return Err(param("max_points must be positive"));
    }
    let n = a.nrows().min(b.nrows()).min(max_points);
    let mut rng = RngState::new(seed);
    let pick = |set: ArrayView2<'_, f64>, rng: &mut RngState| -> Array2<f64> {
        if set.nrows() == n {
            return set.to_owned();
        }
        let mut idx = sample_indices(rng, set.nrows(), n).into_vec();
        idx.sort_unstable();
        set.select(Axis(0), &idx)
    };
    let sa = pick(a, &mut rng);
    let sb = pick(b, &mut rng);
    Ok(w2_exact(sa.view(), sb.view()))
}

pub fn wasserstein2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, max_points: usize) -> Result<f64> {
    wasserstein2_seeded(a, b, max_points, 0)
}

pub const DEFAULT_W2_POINTS: usize = 1024;

/// Evaluation summary written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub mmd_rbf: f64,
    pub w2: f64,
    pub n_eval: usize,
    pub seed: u64,
}

/// All three metrics on two sample sets (already in evaluation units).
pub fn evaluate(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, w2_points: usize, seed: u64) -> Result<MetricReport> {
    Ok(MetricReport {
        energy_distance: energy_distance(a, b, 1.0)?,
        mmd_rbf: mmd_rbf(a, b, Bandwidth::Median)?,
        w2: wasserstein2_seeded(a, b, w2_points, seed)?,
        n_eval: a.nrows().min(b.nrows()),
        seed,
    })
}
