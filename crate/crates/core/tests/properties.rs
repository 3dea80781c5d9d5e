use countbridge::bridge::{bridge_step, corrupt, decompose_endpoints, BridgeSchedule};
use countbridge::datasets::reflect;
use countbridge::deconv::{groupwise_exact_round, project_with, rescale_to_aggregate, Rounding};
use countbridge::denoiser::clip_global_norm;
use countbridge::oracle::enumerate_bridge_pmf;
use countbridge::samplers::RngState;
use countbridge::scoring::{energy_distance, mmd_rbf, wasserstein2, Bandwidth};
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..40.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decompositions_are_consistent(seed in any::<u64>(), d in -40i64..40, lambda in 0.0f64..64.0, t in 0.01f64..=1.0) {
        let mut rng = RngState::new(seed);
        let jd = decompose_endpoints(&mut rng, &BridgeSchedule::symmetric(lambda), d, t).unwrap();
        prop_assert!(jd.is_consistent());
        prop_assert_eq!(jd.total, d.unsigned_abs() + 2 * jd.slack);
        prop_assert_eq!(jd.births as i64 - jd.deaths as i64, d);
    }

    #[test]
    fn corruption_pins_both_endpoints(
        seed in any::<u64>(),
        x0 in prop::collection::vec(-50i64..50, 1..6),
        shift in -30i64..30,
        lambda in 0.0f64..64.0,
    ) {
        let x1: Vec<i64> = x0.iter().map(|v| v + shift).collect();
        let schedule = BridgeSchedule::symmetric(lambda);
        let mut rng = RngState::new(seed);
        prop_assert_eq!(corrupt(&mut rng, &schedule, &x0, &x1, 1.0).unwrap().x_t, x1.clone());
        prop_assert_eq!(corrupt(&mut rng, &schedule, &x0, &x1, 0.0).unwrap().x_t, x0.clone());
        prop_assert_eq!(bridge_step(&mut rng, &schedule, &x1, &x0, 0.7, 0.0).unwrap(), x0);
    }

    #[test]
    fn steps_stay_on_the_enumerated_support(
        seed in any::<u64>(), x0 in -5i64..5, x_t in -5i64..5, lambda in 0.0f64..16.0, s in 0.05f64..0.45,
    ) {
        let schedule = BridgeSchedule::symmetric(lambda);
        let pmf = enumerate_bridge_pmf(&schedule, x0, x_t, s, 0.5, None).unwrap();
        let mut rng = RngState::new(seed);
        let out = bridge_step(&mut rng, &schedule, &vec![x_t; 200], &vec![x0; 200], 0.5, s).unwrap();
        prop_assert!(out.iter().all(|&v| pmf.prob(v) > 0.0));
        prop_assert!((pmf.total() - 1.0).abs() <= pmf.tail_bound + 1e-12);
    }

    #[test]
    fn projection_is_exact_and_bounded(
        seed in any::<u64>(),
        units in small_matrix(5, 3),
        targets in prop::collection::vec(0i64..200, 3),
    ) {
        let mut rng = RngState::new(seed);
        let scaled = rescale_to_aggregate(units.view(), &targets.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
        for rounding in [Rounding::Exact, Rounding::Randomized, Rounding::Round] {
            let y = project_with(&mut rng, units.view(), &targets, rounding).unwrap();
            prop_assert!(y.iter().all(|&v| v >= 0));
            for (j, (a, b)) in y.iter().zip(scaled.iter()).enumerate() {
                prop_assert!((*a as f64 - b).abs() <= 1.0 + 1e-9, "entry {}: {} vs {}", j, a, b);
            }
            if rounding == Rounding::Exact {
                prop_assert_eq!(y.sum_axis(Axis(0)).to_vec(), targets.clone());
            }
        }
    }

    #[test]
    fn exact_rounding_keeps_integer_column_sums(seed in any::<u64>(), units in small_matrix(6, 2)) {
        // columns rescaled to integer totals first
        let targets: Vec<f64> = units.sum_axis(Axis(0)).iter().map(|v| v.round()).collect();
        let scaled = rescale_to_aggregate(units.view(), &targets).unwrap();
        let y = groupwise_exact_round(&mut RngState::new(seed), scaled.view()).unwrap();
        prop_assert_eq!(y.sum_axis(Axis(0)).mapv(|v| v as f64).to_vec(), targets);
        prop_assert!(y.iter().zip(scaled.iter()).all(|(&a, &b)| (a as f64 - b).abs() < 1.0));
    }

    #[test]
    fn metrics_are_symmetric_and_nonnegative(a in small_matrix(7, 2), b in small_matrix(7, 2)) {
        let e = energy_distance(a.view(), b.view(), 1.0).unwrap();
        let m = mmd_rbf(a.view(), b.view(), Bandwidth::Median).unwrap();
        let w = wasserstein2(a.view(), b.view(), 64).unwrap();
        prop_assert!(e >= -1e-12 && m >= -1e-12 && w >= -1e-12);
        prop_assert!((e - energy_distance(b.view(), a.view(), 1.0).unwrap()).abs() < 1e-10);
        prop_assert!((m - mmd_rbf(b.view(), a.view(), Bandwidth::Median).unwrap()).abs() < 1e-12);
        prop_assert!((w - wasserstein2(b.view(), a.view(), 64).unwrap()).abs() < 1e-9);
        prop_assert!(energy_distance(a.view(), a.view(), 1.0).unwrap().abs() < 1e-12);
        prop_assert!(mmd_rbf(a.view(), a.view(), Bandwidth::Median).unwrap().abs() < 1e-12);
        prop_assert_eq!(wasserstein2(a.view(), a.view(), 64).unwrap(), 0.0);
    }

    #[test]
    fn reflection_never_leaves_the_range(v in -100_000i64..100_000) {
        let r = reflect(v, 0, 255);
        prop_assert!((0..=255).contains(&r));
        if (0..=255).contains(&v) {
            prop_assert_eq!(r, v);
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm(g in prop::collection::vec(-1e3f64..1e3, 1..50), max in 0.01f64..10.0) {
        let mut g = g;
        clip_global_norm(&mut g, max);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm <= max + 1e-9);
    }
}
