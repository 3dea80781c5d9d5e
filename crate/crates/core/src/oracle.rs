//! Brute-force oracles: exact enumeration of bridge marginals and entropic
//! optimal transport under the Skellam reference.
//!
//! Everything here trades speed for exactness and is meant for checking the
//! samplers and kernels in [`crate::bridge`], not for use inside training.

use crate::bridge::BridgeSchedule;
use crate::error::{param, Error, Result};
use crate::samplers::{bessel_logpmf, binomial_logpmf, hypergeometric_logpmf, skellam_logpmf, BesselParams};
use ndarray::Array2;
use serde::Serialize;

/// Largest mass the enumeration may leave unaccounted for.
pub const TAIL_BOUND: f64 = 1e-12;

/// Pmf windows stop once a term drops below this.
const PRUNE: f64 = 1e-22;

/// A pmf on the integer range `lo ..= lo + probs.len() - 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncatedPmf {
    lo: i64,
    probs: Vec<f64>,
    /// Upper bound on the mass lying outside the stored window.
    pub tail_bound: f64,
}

impl TruncatedPmf {
    pub fn new(lo: i64, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(param("pmf needs at least one support point"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(param("pmf entries must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(param(format!("pmf mass {total} exceeds 1")));
        }
        Ok(Self { lo, probs, tail_bound: (1.0 - total).max(0.0) })
    }

    pub fn point(x: i64) -> Self {
        Self { lo: x, probs: vec![1.0], tail_bound: 0.0 }
    }

    /// Build from `(value, mass)` pairs; repeated values are summed.
    pub fn from_points(points: &[(i64, f64)]) -> Result<Self> {
        let lo = points.iter().map(|p| p.0).min().ok_or_else(|| param("no support points"))?;
        let hi = points.iter().map(|p| p.0).max().unwrap();
        let mut probs = vec![0.0; (hi - lo + 1) as usize];
        for &(x, p) in points {
            probs[(x - lo) as usize] += p;
        }
        Self::new(lo, probs)
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.probs.len() as i64 - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: i64) -> f64 {
        if x < self.lo || x > self.hi() {
            0.0
        } else {
            self.probs[(x - self.lo) as usize]
        }
    }

    /// Support points with positive mass, in increasing order.
    pub fn atoms(&self) -> Vec<(i64, f64)> {
        self.iter().filter(|&(_, p)| p > 0.0).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.probs.iter().enumerate().map(move |(i, &p)| (self.lo + i as i64, p))
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(x, p)| x as f64 * p).sum::<f64>() / self.total()
    }

    pub fn shifted(mut self, by: i64) -> Self {
        self.lo += by;
        self
    }

    pub fn total_variation(&self, other: &TruncatedPmf) -> f64 {
        let lo = self.lo.min(other.lo);
        let hi = self.hi().max(other.hi());
        0.5 * (lo..=hi).map(|x| (self.prob(x) - other.prob(x)).abs()).sum::<f64>()
    }

    /// Drop zero entries at both ends.
    fn trimmed(mut self) -> Self {
        let first = self.probs.iter().position(|&p| p > 0.0).unwrap_or(0);
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        self.probs = self.probs[first..=last.max(first)].to_vec();
        self.lo += first as i64;
        self
    }
}

/// Unnormalised walk outward from `mode` along pmf ratios; values below
/// [`PRUNE`] end the walk. Returns the first index and the values.
fn window(
    mode: u64,
    lo: u64,
    hi: u64,
    log_p_mode: f64,
    up: impl Fn(u64) -> f64,
    down: impl Fn(u64) -> f64,
) -> (u64, Vec<f64>) {
    let p_mode = log_p_mode.exp();
    let mut right = vec![];
    let (mut k, mut p) = (mode, p_mode);
    while k < hi {
        p *= up(k);
        k += 1;
        if p < PRUNE {
            break;
        }
        right.push(p);
    }
    let mut left = vec![];
    let (mut k, mut p) = (mode, p_mode);
    while k > lo {
        p *= down(k);
        k -= 1;
        if p < PRUNE {
            break;
        }
        left.push(p);
    }
    let start = mode - left.len() as u64;
    left.reverse();
    left.push(p_mode);
    left.extend(right);
    (start, left)
}

fn binomial_window(n: u64, p: f64) -> (u64, Vec<f64>) {
    if p <= 0.0 {
        return (0, vec![1.0]);
    }
    if p >= 1.0 {
        return (n, vec![1.0]);
    }
    let odds = p / (1.0 - p);
    let mode = (((n + 1) as f64 * p).floor() as u64).min(n);
    window(
        mode,
        0,
        n,
        binomial_logpmf(n, p, mode),
        |k| (n - k) as f64 / (k + 1) as f64 * odds,
        |k| k as f64 / (n - k + 1) as f64 / odds,
    )
}

fn hypergeometric_window(population: u64, successes: u64, draws: u64) -> (u64, Vec<f64>) {
    let failures = population - successes;
    let lo = draws.saturating_sub(failures);
    let hi = successes.min(draws);
    if lo == hi {
        return (lo, vec![1.0]);
    }
    let mode = (((draws + 1) as f64 * (successes + 1) as f64 / (population + 2) as f64).floor() as u64).clamp(lo, hi);
    window(
        mode,
        lo,
        hi,
        hypergeometric_logpmf(population, successes, draws, mode),
        |k| ((successes - k) * (draws - k)) as f64 / ((k + 1) * (failures + k + 1 - draws)) as f64,
        |k| (k * (failures + k - draws)) as f64 / ((successes - k + 1) * (draws - k + 1)) as f64,
    )
}

/// Slack window for `params`, optionally capped at `slack_cap`.
fn slack_window(params: BesselParams, slack_cap: Option<u64>) -> Result<(u64, Vec<f64>)> {
    if params.lambda_prod() == 0.0 {
        return Ok((0, vec![1.0]));
    }
    let lambda = params.lambda_prod();
    let nu = params.nu();
    let cap = slack_cap.unwrap_or(u64::MAX);
    let mode = params.mode().min(cap);
    let (start, probs) = window(
        mode,
        0,
        cap,
        bessel_logpmf(params, mode),
        |m| params.ratio_up(m),
        |m| (m * (m + nu)) as f64 / lambda,
    );
    let last = start + probs.len() as u64 - 1;
    if last == cap {
        // Ratios decrease past the mode, so the tail is dominated by a geometric series.
        let next = probs[probs.len() - 1] * params.ratio_up(cap);
        let r = params.ratio_up(cap + 1);
        let tail = if r < 1.0 { next / (1.0 - r) } else { f64::INFINITY };
        if tail > TAIL_BOUND {
            return Err(Error::Truncation(format!(
                "slack cap {cap} leaves tail mass up to {tail:.3e} (nu={nu}, lambda={lambda})"
            )));
        }
    }
    Ok((start, probs))
}

/// Law of `X_s - X_0` given `X_t - X_0 = d`.
fn displacement_law(schedule: &BridgeSchedule, d: i64, s: f64, t: f64, slack_cap: Option<u64>) -> Result<TruncatedPmf> {
    if !(0.0 <= s && s <= t && t <= 1.0) {
        return Err(param(format!("need 0 <= s <= t <= 1, got s={s}, t={t}")));
    }
    if s == t {
        return Ok(TruncatedPmf::point(d));
    }
    let w_t = schedule.weight(t)?;
    if w_t == 0.0 {
        return if d == 0 {
            Ok(TruncatedPmf::point(0))
        } else {
            Err(param(format!("displacement {d} is impossible before any jump intensity")))
        };
    }
    let keep = (schedule.weight(s)? / w_t).min(1.0);
    let (slack_lo, slack) = slack_window(schedule.slack_params(d, t)?, slack_cap)?;
    let abs_d = d.unsigned_abs();
    let n_max = abs_d + 2 * (slack_lo + slack.len() as u64 - 1);
    let mut acc = vec![0.0; 2 * n_max as usize + 1];
    for (i, &pm) in slack.iter().enumerate() {
        let n = abs_d + 2 * (slack_lo + i as u64);
        let births = ((n as i64 + d) / 2) as u64;
        let (ns_lo, ns) = binomial_window(n, keep);
        for (j, &pn) in ns.iter().enumerate() {
            let n_s = ns_lo + j as u64;
            let weight = pm * pn;
            if weight < PRUNE {
                continue;
            }
            let (bs_lo, bs) = hypergeometric_window(n, births, n_s);
            for (k, &pb) in bs.iter().enumerate() {
                let b_s = bs_lo + k as u64;
                let e = 2 * b_s as i64 - n_s as i64;
                acc[(e + n_max as i64) as usize] += weight * pb;
            }
        }
    }
    Ok(TruncatedPmf::new(-(n_max as i64), acc)?.trimmed())
}

/// Exact pmf of `X_s` given `X_0 = x0` and `X_t = x_t`, `0 <= s <= t <= 1`.
///
/// With `slack_cap = None` the slack sum is extended until its terms are
/// negligible; an explicit cap that leaves more than [`TAIL_BOUND`] of
/// slack mass behind is an error.
pub fn enumerate_bridge_pmf(
    schedule: &BridgeSchedule,
    x0: i64,
    x_t: i64,
    s: f64,
    t: f64,
    slack_cap: Option<u64>,
) -> Result<TruncatedPmf> {
    let law = displacement_law(schedule, x_t - x0, s, t, slack_cap)?;
    if law.tail_bound > TAIL_BOUND {
        return Err(Error::Truncation(format!("enumeration lost {:.3e} of mass", law.tail_bound)));
    }
    Ok(law.shifted(x0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CompositionReport {
    pub total_variation: f64,
    /// Mass unaccounted for by either enumeration.
    pub truncation: f64,
}

/// Compare the one-step kernel `K_{s|0,1}` with `K_{s|0,t} ∘ K_{t|0,1}`.
pub fn composition_check(schedule: &BridgeSchedule, x0: i64, x1: i64, s: f64, t: f64) -> Result<CompositionReport> {
    if !(0.0 < s && s < t && t < 1.0) {
        return Err(param(format!("need 0 < s < t < 1, got s={s}, t={t}")));
    }
    let d = x1 - x0;
    let direct = displacement_law(schedule, d, s, 1.0, None)?;
    let middle = displacement_law(schedule, d, t, 1.0, None)?;
    let mut points = vec![];
    for (e, q) in middle.iter() {
        if q == 0.0 {
            continue;
        }
        for (x, p) in displacement_law(schedule, e, s, t, None)?.iter() {
            points.push((x, q * p));
        }
    }
    let composed = TruncatedPmf::from_points(&points)?;
    let truncation = direct.tail_bound.max(composed.tail_bound);
    if truncation > TAIL_BOUND {
        return Err(Error::Truncation(format!("composition lost {truncation:.3e} of mass")));
    }
    Ok(CompositionReport { total_variation: direct.total_variation(&composed), truncation })
}

/// Optimal transport cost between two pmfs under `|x - y|`, solved as a
/// linear program over the product of the supports.
pub fn exact_ot_cost(p0: &TruncatedPmf, p1: &TruncatedPmf) -> Result<f64> {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let (a, b) = (p0.atoms(), p1.atoms());
    let (ma, mb) = (p0.total(), p1.total());
    if (ma - mb).abs() > 1e-9 {
        return Err(param(format!("marginal masses differ: {ma} vs {mb}")));
    }
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = a
        .iter()
        .map(|&(x, _)| b.iter().map(|&(y, _)| lp.add_var((x - y).abs() as f64, (0.0, f64::INFINITY))).collect())
        .collect();
    for (i, &(_, p)) in a.iter().enumerate() {
        lp.add_constraint(vars[i].iter().map(|&v| (v, 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, p);
    }
    // One column constraint is implied by the others and the equal masses.
    for (j, &(_, q)) in b.iter().enumerate().skip(1) {
        lp.add_constraint(vars.iter().map(|row| (row[j], 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, q);
    }
    let solution = lp.solve().map_err(|e| Error::Convergence(format!("transport LP: {e}")))?;
    Ok(solution.objective())
}

#[derive(Clone, Debug, Serialize)]
pub struct SinkhornReport {
    /// Rows index the atoms of `p0`, columns those of `p1`.
    pub coupling: Array2<f64>,
    pub support0: Vec<i64>,
    pub support1: Vec<i64>,
    /// `E|X1 - X0|` under the coupling.
    pub mean_displacement: f64,
    /// L1 column-marginal error before each column update.
    pub residuals: Vec<f64>,
}

impl SinkhornReport {
    /// Total variation to the independent coupling `p0 ⊗ p1`.
    pub fn distance_to_product(&self) -> f64 {
        let rows = self.coupling.sum_axis(ndarray::Axis(1));
        let cols = self.coupling.sum_axis(ndarray::Axis(0));
        0.5 * self
            .coupling
            .indexed_iter()
            .map(|((i, j), &p)| (p - rows[i] * cols[j]).abs())
            .sum::<f64>()
    }

    pub fn diagonal_mass(&self) -> f64 {
        self.coupling
            .indexed_iter()
            .filter(|((i, j), _)| self.support0[*i] == self.support1[*j])
            .map(|(_, &p)| p)
            .sum()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Static Schrödinger bridge between `p0` and `p1` for the symmetric count
/// bridge with intensity `kappa`: iterative proportional fitting of
/// `p0(x0) * Skellam(x1 - x0; kappa, kappa)` to both marginals, in log space.
pub fn sinkhorn_schrodinger(
    p0: &TruncatedPmf,
    p1: &TruncatedPmf,
    kappa: f64,
    max_iterations: usize,
    tolerance: f64,
) -> Result<SinkhornReport> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(param(format!("kappa must be positive and finite, got {kappa}")));
    }
    let (a, b) = (p0.atoms(), p1.atoms());
    let (ma, mb) = (p0.total(), p1.total());
    if (ma - mb).abs() > 1e-9 {
        return Err(param(format!("marginal masses differ: {ma} vs {mb}")));
    }
    let (na, nb) = (a.len(), b.len());
    let mut log_k = Array2::<f64>::zeros((na, nb));
    for (i, &(x, p)) in a.iter().enumerate() {
        for (j, &(y, _)) in b.iter().enumerate() {
            log_k[[i, j]] = p.ln() + skellam_logpmf(kappa, kappa, y - x)?;
        }
    }
    let log_a: Vec<f64> = a.iter().map(|&(_, p)| p.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|&(_, p)| p.ln()).collect();
    let (mut f, mut g) = (vec![0.0; na], vec![0.0; nb]);
    let mut residuals = vec![];
    let mut converged = false;
    for _ in 0..max_iterations {
        for i in 0..na {
            f[i] = log_a[i] - log_sum_exp((0..nb).map(|j| log_k[[i, j]] + g[j]));
        }
        let col_lse: Vec<f64> = (0..nb).map(|j| log_sum_exp((0..na).map(|i| log_k[[i, j]] + f[i] + g[j]))).collect();
        let residual: f64 = (0..nb).map(|j| (col_lse[j].exp() - b[j].1).abs()).sum();
        residuals.push(residual);
        if residual < tolerance {
            converged = true;
            break;
        }
        for j in 0..nb {
            g[j] += log_b[j] - col_lse[j];
        }
    }
    if !converged {
        return Err(Error::Convergence(format!(
            "sinkhorn residual {:.3e} after {max_iterations} iterations",
            residuals.last().copied().unwrap_or(f64::NAN)
        )));
    }
    let coupling = Array2::from_shape_fn((na, nb), |(i, j)| (log_k[[i, j]] + f[i] + g[j]).exp());
    let mean_displacement =
        coupling.indexed_iter().map(|((i, j), &p)| p * (b[j].0 - a[i].0).abs() as f64).sum::<f64>();
    Ok(SinkhornReport {
        coupling,
        support0: a.iter().map(|p| p.0).collect(),
        support1: b.iter().map(|p| p.0).collect(),
        mean_displacement,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Binomial, Discrete};

    fn sched(lambda: f64) -> BridgeSchedule {
        BridgeSchedule::symmetric(lambda)
    }

    #[test]
    fn degenerate_intervals_are_point_masses() {
        let s = sched(2.0);
        assert_eq!(enumerate_bridge_pmf(&s, 1, 5, 0.4, 0.4, None).unwrap(), TruncatedPmf::point(5));
        let p = enumerate_bridge_pmf(&s, 1, 5, 0.0, 1.0, None).unwrap();
        assert!((p.prob(1) - 1.0).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn zero_intensity_is_binomial_thinning() {
        // no slack: X_s - x0 ~ Bin(d, w(s)/w(t)) for d >= 0
        let s = sched(0.0);
        let p = enumerate_bridge_pmf(&s, 2, 7, 0.3, 0.6, None).unwrap();
        let bin = Binomial::new(0.5, 5).unwrap();
        for k in 0..=5 {
            assert!((p.prob(2 + k) - bin.pmf(k as u64)).abs() < 1e-14);
        }
        let neg = enumerate_bridge_pmf(&s, 0, -3, 0.5, 1.0, None).unwrap();
        for k in 0..=3 {
            assert!((neg.prob(-k) - Binomial::new(0.5, 3).unwrap().pmf(k as u64)).abs() < 1e-14);
        }
    }

    #[test]
    fn pmf_sums_to_one() {
        for lambda in [1.0, 8.0, 32.0] {
            let p = enumerate_bridge_pmf(&sched(lambda), 0, 4, 0.3, 0.9, None).unwrap();
            assert!((p.total() - 1.0).abs() < 1e-12, "{lambda}: {}", p.total());
        }
    }

    #[test]
    fn explicit_small_cap_is_rejected() {
        let err = enumerate_bridge_pmf(&sched(32.0), 0, 0, 0.5, 1.0, Some(5)).unwrap_err();
        assert!(matches!(err, Error::Truncation(_)));
        assert!(enumerate_bridge_pmf(&sched(2.0), 0, 3, 0.5, 1.0, Some(60)).is_ok());
    }

    #[test]
    fn composition_examples() {
        let tv = composition_check(&sched(2.0), 0, 4, 0.3, 0.7).unwrap().total_variation;
        assert!(tv <= 1e-9, "{tv}");
        let tv = composition_check(&sched(0.0), -2, 3, 0.25, 0.5).unwrap().total_variation;
        assert!(tv <= 1e-12, "{tv}");
        assert_eq!(composition_check(&sched(0.0), 2, 2, 0.25, 0.5).unwrap().total_variation, 0.0);
    }

    /// 1-D transport cost via the quantile coupling.
    fn quantile_cost(p0: &TruncatedPmf, p1: &TruncatedPmf) -> f64 {
        let (a, b) = (p0.atoms(), p1.atoms());
        let (mut i, mut j) = (0, 0);
        let (mut ra, mut rb) = (a[0].1, b[0].1);
        let mut cost = 0.0;
        while i < a.len() && j < b.len() {
            let m = ra.min(rb);
            cost += m * (a[i].0 - b[j].0).abs() as f64;
            ra -= m;
            rb -= m;
            if ra <= 1e-15 {
                i += 1;
                ra = a.get(i).map_or(0.0, |p| p.1);
            }
            if rb <= 1e-15 {
                j += 1;
                rb = b.get(j).map_or(0.0, |p| p.1);
            }
        }
        cost
    }

    #[test]
    fn ot_cost_matches_quantile_formula() {
        let p0 = TruncatedPmf::from_points(&[(0, 0.1), (1, 0.3), (2, 0.2), (3, 0.25), (4, 0.15)]).unwrap();
        let p1 = TruncatedPmf::from_points(&[(1, 0.3), (2, 0.1), (4, 0.25), (5, 0.2), (7, 0.15)]).unwrap();
        let lp = exact_ot_cost(&p0, &p1).unwrap();
        assert!((lp - quantile_cost(&p0, &p1)).abs() < 1e-9, "{lp}");
        assert!((lp - 1.5).abs() < 1e-9);
        assert!(exact_ot_cost(&p0, &p0).unwrap().abs() < 1e-12);
        let cost = exact_ot_cost(&TruncatedPmf::point(0), &TruncatedPmf::point(6)).unwrap();
        assert!((cost - 6.0).abs() < 1e-12);
        let short = TruncatedPmf::from_points(&[(0, 0.5)]).unwrap();
        assert!(exact_ot_cost(&p0, &short).is_err());
    }

    #[test]
    fn sinkhorn_marginals_and_residuals() {
        let p0 = TruncatedPmf::from_points(&[(0, 0.2), (1, 0.5), (3, 0.3)]).unwrap();
        let p1 = TruncatedPmf::from_points(&[(1, 0.4), (2, 0.6)]).unwrap();
        let rep = sinkhorn_schrodinger(&p0, &p1, 1.0, 10_000, 1e-13).unwrap();
        let rows = rep.coupling.sum_axis(ndarray::Axis(1));
        for (r, (_, p)) in rows.iter().zip(p0.atoms()) {
            assert!((r - p).abs() < 1e-12);
        }
        assert!(rep.residuals.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert!(sinkhorn_schrodinger(&p0, &p1, 0.0, 10, 1e-9).is_err());
    }

    #[test]
    fn sinkhorn_self_transport_concentrates() {
        let p = TruncatedPmf::from_points(&[(0, 0.25), (2, 0.5), (5, 0.25)]).unwrap();
        let rep = sinkhorn_schrodinger(&p, &p, 0.01, 1_000_000, 1e-7).unwrap();
        assert!(rep.diagonal_mass() > 0.999, "{}", rep.diagonal_mass());
    }
}
