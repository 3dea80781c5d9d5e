//! Statistical test helpers and the named verification suites run by
//! `countbridge verify`.

use crate::bridge::{bridge_step, corrupt, BridgeSchedule};
use crate::deconv::{project, randomized_round, rescale_to_aggregate};
use crate::error::{param, Result};
use crate::oracle::{composition_check, exact_ot_cost, sinkhorn_schrodinger, TruncatedPmf};
use crate::samplers::{
    bessel_sample, binomial_sample, hypergeometric_sample, poisson_sample, BesselParams, RngState,
};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete, Hypergeometric, Poisson};
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeMap;

/// Minimum expected count per chi-square cell.
const MIN_EXPECTED: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square goodness of fit of integer `samples` against `pmf`.
///
/// `support` must cover essentially all the mass of `pmf`. Adjacent cells are
/// merged until each expects at least five draws; whatever mass lies outside
/// `support` forms one extra cell, so stray samples are penalised rather than
/// ignored.
pub fn chi_square_gof(
    samples: &[i64],
    pmf: impl Fn(i64) -> f64,
    support: std::ops::RangeInclusive<i64>,
) -> Result<TestOutcome> {
    if samples.is_empty() {
        return Err(param("goodness of fit needs samples"));
    }
    let n = samples.len() as f64;
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    for &x in samples {
        *counts.entry(x).or_default() += 1;
    }
    let mut cells: Vec<(f64, f64)> = vec![];
    let (mut exp_acc, mut obs_acc, mut mass) = (0.0, 0.0, 0.0);
    for x in support.clone() {
        let p = pmf(x);
        mass += p;
        exp_acc += n * p;
        obs_acc += *counts.get(&x).unwrap_or(&0) as f64;
        if exp_acc >= MIN_EXPECTED {
            cells.push((obs_acc, exp_acc));
            exp_acc = 0.0;
            obs_acc = 0.0;
        }
    }
    if let Some(last) = cells.last_mut() {
        last.0 += obs_acc;
        last.1 += exp_acc;
    } else {
        cells.push((obs_acc, exp_acc));
    }
    let outside = counts.range(..*support.start()).chain(counts.range(support.end() + 1..)).map(|(_, &c)| c).sum::<u64>();
    let outside_expected = n * (1.0 - mass).max(0.0);
    let mut statistic: f64 = cells.iter().map(|&(o, e)| (o - e).powi(2) / e).sum();
    if outside > 0 {
        statistic += (outside as f64 - outside_expected).powi(2) / outside_expected.max(1e-300);
    }
    let dof = cells.len().saturating_sub(1);
    let p_value = if dof == 0 {
        if statistic < 1e-9 { 1.0 } else { 0.0 }
    } else {
        let chi = ChiSquared::new(dof as f64).map_err(|e| param(e.to_string()))?;
        chi.sf(statistic)
    };
    Ok(TestOutcome { statistic, dof, p_value })
}

/// Kolmogorov survival function `P(K > x)`.
fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// (conservative for discrete data).
pub fn ks_two_sample(a: &[i64], b: &[i64]) -> Result<TestOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(param("KS test needs two nonempty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    let p_value = kolmogorov_sf((ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d);
    Ok(TestOutcome { statistic: d, dof: 0, p_value })
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CaseResult {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value <= threshold }
    }

    fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value > threshold }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    fn new(suite: &str, cases: Vec<CaseResult>) -> Self {
        Self { suite: suite.into(), passed: cases.iter().all(|c| c.passed), cases }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

pub const SUITES: [&str; 4] = ["composition", "samplers", "schrodinger", "projection"];

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "composition" => composition_suite(),
        "samplers" => sampler_suite(seed, 100_000),
        "schrodinger" => schrodinger_suite(),
        "projection" => projection_suite(seed, 10_000, 100_000),
        other => Err(param(format!("unknown suite '{other}', expected one of {SUITES:?}"))),
    }
}

pub const COMPOSITION_KAPPAS: [f64; 4] = [0.0, 1.0, 8.0, 32.0];
pub const COMPOSITION_TIMES: [(f64, f64); 3] = [(0.25, 0.5), (0.3, 0.9), (0.5, 0.75)];

/// Exact one-step vs two-step total variation over the full endpoint grid.
pub fn composition_suite() -> Result<SuiteReport> {
    let mut cases = vec![];
    for kappa in COMPOSITION_KAPPAS {
        let schedule = BridgeSchedule::symmetric(kappa);
        for (s, t) in COMPOSITION_TIMES {
            for x0 in -3..=3 {
                for x1 in -3..=3 {
                    let rep = composition_check(&schedule, x0, x1, s, t)?;
                    cases.push(CaseResult::at_most(
                        format!("kappa={kappa} s={s} t={t} x0={x0} x1={x1}"),
                        rep.total_variation,
                        1e-9,
                    ));
                }
            }
        }
    }
    Ok(SuiteReport::new("composition", cases))
}

/// Sampled composition: `X_s` drawn directly from the bridge vs via `X_t`.
pub fn sampled_composition_suite(seed: u64, draws: usize) -> Result<SuiteReport> {
    let schedule = BridgeSchedule::symmetric(8.0);
    let (s, t) = (0.3, 0.7);
    let base = RngState::new(seed);
    let mut cases = vec![];
    for (k, gap) in [0i64, 1, 3, 7, 15].into_iter().enumerate() {
        let (x0, x1) = (10i64, 10 + gap);
        let mut rng_a = base.substream(2 * k as u64);
        let mut rng_b = base.substream(2 * k as u64 + 1);
        let mut one = Vec::with_capacity(draws);
        let mut two = Vec::with_capacity(draws);
        for _ in 0..draws {
            one.push(corrupt(&mut rng_a, &schedule, &[x0], &[x1], s)?.x_t[0]);
            let x_t = corrupt(&mut rng_b, &schedule, &[x0], &[x1], t)?.x_t;
            two.push(bridge_step(&mut rng_b, &schedule, &x_t, &[x0], t, s)?[0]);
        }
        let ks = ks_two_sample(&one, &two)?;
        cases.push(CaseResult::above(format!("gap={gap} KS p"), ks.p_value, 0.01));
    }
    Ok(SuiteReport::new("sampled-composition", cases))
}

fn draw_many(n: usize, mut f: impl FnMut() -> Result<u64>) -> Result<Vec<i64>> {
    (0..n).map(|_| f().map(|v| v as i64)).collect()
}

/// Bessel pmf normalised by direct summation with `ln_gamma`.
fn bessel_reference(nu: u64, lambda: f64) -> impl Fn(i64) -> f64 {
    let log_term = move |m: u64| m as f64 * lambda.ln() - ln_gamma((m + nu + 1) as f64) - ln_gamma((m + 1) as f64);
    let terms: Vec<f64> = (0..20_000).map(log_term).collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    move |m: i64| if m < 0 { 0.0 } else { (log_term(m as u64) - log_z).exp() }
}

fn spread(mean: f64, sd: f64, lo: i64, hi: i64) -> std::ops::RangeInclusive<i64> {
    ((mean - 12.0 * sd - 5.0).floor().max(lo as f64) as i64)..=((mean + 12.0 * sd + 5.0).ceil().min(hi as f64) as i64)
}

/// Chi-square goodness of fit for each exact sampler over a parameter grid.
pub fn sampler_suite(seed: u64, draws: usize) -> Result<SuiteReport> {
    let base = RngState::new(seed);
    let mut cases = vec![];
    let mut idx = 0u64;
    let mut next_rng = || {
        idx += 1;
        base.substream(idx)
    };
    let threshold = 0.001;

    for mean in [0.05, 4.0, 29.9, 30.1, 250.0] {
        let mut rng = next_rng();
        let xs = draw_many(draws, || poisson_sample(&mut rng, mean))?;
        let law = Poisson::new(mean).map_err(|e| param(e.to_string()))?;
        let gof = chi_square_gof(&xs, |k| if k < 0 { 0.0 } else { law.pmf(k as u64) }, spread(mean, mean.sqrt(), 0, i64::MAX))?;
        cases.push(CaseResult::above(format!("poisson mean={mean}"), gof.p_value, threshold));
    }

    for (n, p) in [(1u64, 0.5), (20, 0.35), (1000, 0.01), (100, 0.9), (200, 0.3), (5000, 0.5)] {
        let mut rng = next_rng();
        let xs = draw_many(draws, || binomial_sample(&mut rng, n, p))?;
        let law = Binomial::new(p, n).map_err(|e| param(e.to_string()))?;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let gof = chi_square_gof(&xs, |k| if k < 0 { 0.0 } else { law.pmf(k as u64) }, spread(n as f64 * p, sd, 0, n as i64))?;
        cases.push(CaseResult::above(format!("binomial n={n} p={p}"), gof.p_value, threshold));
    }

    for (pop, succ, draws_h) in [(30u64, 12u64, 9u64), (10, 4, 9), (1000, 500, 500), (100, 1, 50), (500, 450, 100), (60, 30, 59)] {
        let mut rng = next_rng();
        let xs = draw_many(draws, || hypergeometric_sample(&mut rng, pop, succ, draws_h))?;
        let law = Hypergeometric::new(pop, succ, draws_h).map_err(|e| param(e.to_string()))?;
        let gof = chi_square_gof(&xs, |k| if k < 0 { 0.0 } else { law.pmf(k as u64) }, 0..=succ.min(draws_h) as i64)?;
        cases.push(CaseResult::above(format!("hypergeometric N={pop} K={succ} n={draws_h}"), gof.p_value, threshold));
    }

    for (nu, lambda) in [(0u64, 1.0), (3, 1024.0), (0, 1024.0), (50, 10.0), (200, 1e4), (0, 1e-3)] {
        let mut rng = next_rng();
        let params = BesselParams::new(nu, lambda)?;
        let xs = draw_many(draws, || Ok(bessel_sample(&mut rng, params)))?;
        let pmf = bessel_reference(nu, lambda);
        let mean = lambda.sqrt();
        let gof = chi_square_gof(&xs, &pmf, spread(mean, mean.sqrt() + 1.0, 0, i64::MAX))?;
        cases.push(CaseResult::above(format!("bessel nu={nu} lambda={lambda}"), gof.p_value, threshold));
    }
    Ok(SuiteReport::new("samplers", cases))
}

/// Five-point marginals used by the Schrödinger checks.
pub fn schrodinger_marginals() -> (TruncatedPmf, TruncatedPmf) {
    let p0 = TruncatedPmf::from_points(&[(0, 0.1), (1, 0.3), (2, 0.2), (3, 0.25), (4, 0.15)]).expect("valid pmf");
    let p1 = TruncatedPmf::from_points(&[(1, 0.3), (2, 0.1), (4, 0.25), (5, 0.2), (7, 0.15)]).expect("valid pmf");
    (p0, p1)
}

pub const SCHRODINGER_KAPPAS: [f64; 5] = [32.0, 8.0, 1.0, 0.1, 0.01];

/// Low- and high-noise limits of the Schrödinger coupling and monotonicity
/// of its mean displacement in `kappa`.
pub fn schrodinger_suite() -> Result<SuiteReport> {
    let (p0, p1) = schrodinger_marginals();
    let ot = exact_ot_cost(&p0, &p1)?;
    let mut cases = vec![];
    let mut displacements = vec![];
    for kappa in SCHRODINGER_KAPPAS {
        let rep = sinkhorn_schrodinger(&p0, &p1, kappa, 2_000_000, 1e-9)?;
        let decreasing = rep.residuals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15);
        cases.push(CaseResult::at_most(
            format!("kappa={kappa} residual increases"),
            if decreasing { 0.0 } else { 1.0 },
            0.0,
        ));
        displacements.push(rep.mean_displacement);
        if kappa == 0.01 {
            cases.push(CaseResult::at_most("kappa=0.01 relative gap to OT cost", (rep.mean_displacement - ot).abs() / ot, 0.05));
        }
    }
    let worst_rise = displacements.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    cases.push(CaseResult::at_most("largest rise of E|X1-X0| as kappa decreases", worst_rise, 1e-9));
    let high = sinkhorn_schrodinger(&p0, &p1, 1e3, 2_000_000, 1e-9)?;
    cases.push(CaseResult::at_most("kappa=1000 TV to product coupling", high.distance_to_product(), 1e-3));
    Ok(SuiteReport::new("schrodinger", cases))
}

/// Exactness and boundedness of the aggregate projection on random
/// instances, and unbiasedness of randomized rounding.
pub fn projection_suite(seed: u64, instances: usize, repetitions: usize) -> Result<SuiteReport> {
    let base = RngState::new(seed);
    let mut rng = base.substream(0);
    let (mut sum_violations, mut worst_gap) = (0usize, 0.0f64);
    for _ in 0..instances {
        let g = rng.random_range(1..=8usize);
        let d = rng.random_range(1..=4usize);
        let units = Array2::from_shape_fn((g, d), |_| {
            if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..20.0) }
        });
        let targets: Vec<i64> = (0..d).map(|_| rng.random_range(0..60)).collect();
        let scaled = rescale_to_aggregate(units.view(), &targets.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
        let out = project(&mut rng, units.view(), &targets)?;
        for j in 0..d {
            if out.column(j).sum() != targets[j] {
                sum_violations += 1;
            }
        }
        for (y, x) in out.iter().zip(scaled.iter()) {
            worst_gap = worst_gap.max((*y as f64 - x).abs());
        }
    }
    let mut cases = vec![
        CaseResult::at_most("column sums differing from targets", sum_violations as f64, 0.0),
        CaseResult::at_most("largest |rounded - scaled|", worst_gap, 1.0),
    ];
    let mut rng = base.substream(1);
    for x in [0.25, 2.25, 0.999, 7.5, 3.0] {
        let values = Array1::from_elem(repetitions, x);
        let rounded = randomized_round(&mut rng, values.view())?;
        let mean = rounded.iter().sum::<i64>() as f64 / repetitions as f64;
        let frac = x - x.floor();
        let sd = (frac * (1.0 - frac) / repetitions as f64).sqrt();
        // z-score; an exact integer must reproduce itself
        let z = if sd == 0.0 { (mean - x).abs() * 1e12 } else { (mean - x).abs() / sd };
        cases.push(CaseResult::at_most(format!("randomized rounding of {x}: |z|"), z, 3.0));
    }
    Ok(SuiteReport::new("projection", cases))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_tail_values() {
        // classical critical values
        assert!((kolmogorov_sf(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.628) - 0.01).abs() < 1e-3);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }

    #[test]
    fn ks_detects_shift_and_accepts_identity() {
        let a: Vec<i64> = (0..2000).map(|i| i % 50).collect();
        assert_eq!(ks_two_sample(&a, &a).unwrap().p_value, 1.0);
        let b: Vec<i64> = a.iter().map(|v| v + 5).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value < 1e-6);
    }

    #[test]
    fn gof_rejects_wrong_law_and_accepts_right_one() {
        let mut rng = RngState::new(3);
        let xs: Vec<i64> = (0..20_000).map(|_| rng.random_range(0..6)).collect();
        let uniform = chi_square_gof(&xs, |k| if (0..6).contains(&k) { 1.0 / 6.0 } else { 0.0 }, 0..=5).unwrap();
        assert!(uniform.p_value > 0.001 && uniform.dof == 5);
        let skewed = chi_square_gof(&xs, |k| [0.3, 0.1, 0.15, 0.15, 0.15, 0.15][k as usize], 0..=5).unwrap();
        assert!(skewed.p_value < 1e-6);
        let narrow = chi_square_gof(&xs, |k| if k < 5 { 0.2 } else { 0.0 }, 0..=4).unwrap();
        assert!(narrow.p_value < 1e-6, "samples outside the support must fail");
    }

    #[test]
    fn bessel_reference_matches_known_value() {
        let pmf = bessel_reference(0, 1.0);
        assert!((pmf(0) - 1.0 / 2.279_585_302_336_067).abs() < 1e-12);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nope", 0).is_err());
    }
}
