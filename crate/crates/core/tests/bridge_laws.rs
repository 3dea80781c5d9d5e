//! Sampled laws of the bridge kernels against exact pmfs.

use countbridge::bridge::{ancestral_sample_batch, bridge_step, corrupt, decompose_endpoints, BridgeSchedule, FixedEndpoint, TimeGrid};
use countbridge::oracle::enumerate_bridge_pmf;
use countbridge::samplers::{bessel_logpmf, BesselParams, RngState};
use countbridge::verify::{chi_square_gof, ks_two_sample};
use ndarray::Array2;
use statrs::distribution::{Binomial, Discrete};

const DRAWS: usize = 100_000;

fn binomial_pmf(n: u64, p: f64, shift: i64) -> impl Fn(i64) -> f64 {
    let b = Binomial::new(p, n).unwrap();
    move |k| if k < shift { 0.0 } else { b.pmf((k - shift) as u64) }
}

#[test]
fn slack_at_zero_displacement_follows_bessel_law() {
    let mut rng = RngState::new(11);
    let schedule = BridgeSchedule::symmetric(32.0);
    let draws: Vec<i64> =
        (0..DRAWS).map(|_| decompose_endpoints(&mut rng, &schedule, 0, 1.0).unwrap().slack as i64).collect();
    let params = BesselParams::new(0, 1024.0).unwrap();
    let out = chi_square_gof(&draws, |m| bessel_logpmf(params, m as u64).exp(), 0..=200).unwrap();
    assert!(out.p_value > 0.001, "{out:?}");
}

#[test]
fn zero_intensity_corruption_is_binomial() {
    let mut rng = RngState::new(12);
    let schedule = BridgeSchedule::symmetric(0.0);
    let draws: Vec<i64> = (0..DRAWS).map(|_| corrupt(&mut rng, &schedule, &[0], &[3], 0.5).unwrap().x_t[0]).collect();
    let out = chi_square_gof(&draws, binomial_pmf(3, 0.5, 0), 0..=3).unwrap();
    assert!(out.p_value > 0.001, "{out:?}");
}

#[test]
fn zero_intensity_step_is_shifted_binomial() {
    let mut rng = RngState::new(13);
    let schedule = BridgeSchedule::symmetric(0.0);
    let draws: Vec<i64> = (0..DRAWS).map(|_| bridge_step(&mut rng, &schedule, &[7], &[3], 1.0, 0.5).unwrap()[0]).collect();
    let out = chi_square_gof(&draws, binomial_pmf(4, 0.5, 3), 3..=7).unwrap();
    assert!(out.p_value > 0.001, "{out:?}");
}

#[test]
fn ten_million_steps_match_enumeration() {
    let schedule = BridgeSchedule::symmetric(8.0);
    let (x0, x_t, t, s) = (2i64, 6i64, 0.8, 0.3);
    let exact = enumerate_bridge_pmf(&schedule, x0, x_t, s, t, None).unwrap();
    let mut rng = RngState::new(14);
    let block = 100_000;
    let mut counts = std::collections::BTreeMap::<i64, u64>::new();
    let mut draws = Vec::with_capacity(10_000_000);
    for _ in 0..100 {
        let out = bridge_step(&mut rng, &schedule, &vec![x_t; block], &vec![x0; block], t, s).unwrap();
        for v in out {
            *counts.entry(v).or_default() += 1;
            draws.push(v);
        }
    }
    let n = draws.len() as f64;
    for &v in counts.keys() {
        assert!(exact.prob(v) > 0.0, "sampled {v} outside the enumerated support");
    }
    // every atom within 5 standard errors
    for (v, p) in exact.iter() {
        let freq = *counts.get(&v).unwrap_or(&0) as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt().max(1e-9);
        assert!((freq - p).abs() <= 5.0 * se + 1e-7, "x={v}: freq {freq} vs p {p}");
    }
    let out = chi_square_gof(&draws, |v| exact.prob(v), exact.lo()..=exact.hi()).unwrap();
    assert!(out.p_value > 0.001, "{out:?}");
}

#[test]
fn grid_refinement_keeps_the_intermediate_law() {
    // X at time 0.5 reached from x1 = 9 towards x0 = 2 in one step or in four
    let schedule = BridgeSchedule::symmetric(8.0);
    let n = 20_000;
    let mut rng = RngState::new(15);
    let coarse = bridge_step(&mut rng, &schedule, &vec![9; n], &vec![2; n], 1.0, 0.5).unwrap();
    let mut fine = vec![9; n];
    for (t, s) in [(1.0, 0.875), (0.875, 0.75), (0.75, 0.625), (0.625, 0.5)] {
        fine = bridge_step(&mut rng, &schedule, &fine, &vec![2; n], t, s).unwrap();
    }
    let out = ks_two_sample(&coarse, &fine).unwrap();
    assert!(out.p_value > 0.01, "{out:?}");

    // full grids with an oracle denoiser end exactly on its endpoint
    let x1 = Array2::from_elem((2_000, 2), 9i64);
    let oracle = FixedEndpoint::constant(vec![2, 12]);
    for k in [8, 32] {
        let grid = TimeGrid::uniform(k).unwrap();
        let out = ancestral_sample_batch(&RngState::new(17), &schedule, &oracle, x1.view(), &grid, None, 1).unwrap();
        assert!(out.rows().into_iter().all(|r| r[0] == 2 && r[1] == 12));
    }
}
