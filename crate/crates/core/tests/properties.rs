//! Property tests for the exact oracles.

use proptest::prelude::*;

use koopman_lorenz::safety::{compute_images, sculpt_naive, sculpt_pruned, NoiseModel, SafetyGrid, SafetyRegion};
use koopman_lorenz::sim::{IntegratorConfig, LorenzParams, State3};
use koopman_lorenz::stats::{average_ranks, error_density, mae, mse, r2, to_fixed, wilcoxon_signed_rank, ErrorPoint};

/// Two-sided p from all sign patterns.
fn enumerated_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
    let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let total: f64 = ranks.iter().sum();
    let wp: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let t = wp.min(total - wp);
    let n = d.len();
    let below = (0u32..1 << n)
        .filter(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| ranks[i]).sum::<f64>() <= t + 1e-9)
        .count();
    (2.0 * below as f64 / (1u64 << n) as f64).min(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wilcoxon_exact_matches_enumeration(d in prop::collection::vec(-6i32..=6, 5..=12)) {
        let a: Vec<f64> = d.iter().map(|x| *x as f64 / 2.0).collect();
        let b = vec![0.0; a.len()];
        prop_assume!(a.iter().filter(|x| **x != 0.0).count() >= 5);
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        prop_assert!(w.exact);
        prop_assert_eq!(w.p_value, enumerated_p(&a));
        prop_assert_eq!(w.w_plus + w.w_minus, (w.n * (w.n + 1)) as f64 / 2.0);
    }

    #[test]
    fn wilcoxon_is_symmetric(d in prop::collection::vec(-50i32..50, 5..40)) {
        let a: Vec<f64> = d.iter().map(|x| *x as f64).collect();
        let b = vec![0.0; a.len()];
        prop_assume!(a.iter().filter(|x| **x != 0.0).count() >= 5);
        let fwd = wilcoxon_signed_rank(&a, &b).unwrap();
        let rev = wilcoxon_signed_rank(&b, &a).unwrap();
        prop_assert_eq!(fwd.p_value, rev.p_value);
        prop_assert_eq!(fwd.w_plus, rev.w_minus);
        prop_assert!(fwd.p_value > 0.0 && fwd.p_value <= 1.0);
    }

    #[test]
    fn ranks_sum_to_triangle(v in prop::collection::vec(0u8..10, 1..30)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let n = v.len() as f64;
        prop_assert_eq!(average_ranks(&v).iter().sum::<f64>(), n * (n + 1.0) / 2.0);
    }

    #[test]
    fn metric_identities(y in prop::collection::vec(-100.0f64..100.0, 2..50), e in prop::collection::vec(-5.0f64..5.0, 50)) {
        let yhat: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a + b).collect();
        prop_assert_eq!(mse(&y, &y).unwrap(), 0.0);
        let (m, a) = (mse(&y, &yhat).unwrap(), mae(&y, &yhat).unwrap());
        prop_assert!(a * a <= m * (1.0 + 1e-12) + 1e-300);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        if y.iter().any(|v| (v - mean).abs() > 1e-9) {
            prop_assert_eq!(r2(&y, &y).unwrap(), 1.0);
            let flat = vec![mean; y.len()];
            prop_assert!(r2(&y, &flat).unwrap().abs() < 1e-9);
            prop_assert!(r2(&y, &yhat).unwrap() <= 1.0);
        }
    }

    #[test]
    fn density_is_conserved(
        pts in prop::collection::vec((-20.0f64..20.0, -25.0f64..25.0, 0.0f64..50.0, -3.0f64..3.0, -3.0f64..3.0), 1..200),
        nx in 1usize..30,
        nz in 1usize..30,
    ) {
        let points: Vec<ErrorPoint> = pts
            .iter()
            .map(|&(x, y, z, t, p)| ErrorPoint { state: State3::new(x, y, z), truth: t, prediction: p })
            .collect();
        let m = error_density(&points, nx, nz, &LorenzParams::default()).unwrap();
        prop_assert!(m.is_conserved());
        let direct: i128 = points.iter().map(|p| to_fixed((p.prediction - p.truth).abs())).sum();
        prop_assert_eq!(m.point_sum, direct);
        prop_assert_eq!(m.bins.iter().sum::<i128>(), m.total);
        prop_assert_eq!(m.quadrants.iter().map(|q| q.count).sum::<usize>(), points.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pruned_sculpting_equals_naive(
        res in (2usize..6, 2usize..6, 2usize..6),
        tau in 0.01f64..0.4,
        bound in (0.0f64..4.0, 0.0f64..4.0, 0.0f64..4.0),
        threads in 1usize..4,
    ) {
        let grid = SafetyGrid::new(SafetyRegion::default(), [res.0, res.1, res.2]).unwrap();
        let noise = NoiseModel::axis_extremes(State3::new(bound.0, bound.1, bound.2));
        let images = compute_images(&grid, &noise, tau, &IntegratorConfig::default(), &LorenzParams::default()).unwrap();
        let mut u = vec![0.0; grid.len()];
        for _ in 0..50 {
            let naive = sculpt_naive(&u, &grid, &images);
            let pruned = sculpt_pruned(&u, &grid, &images, threads);
            prop_assert!(naive.iter().zip(&pruned).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert!(naive.iter().zip(&u).all(|(a, b)| a >= b));
            if naive == u {
                break;
            }
            u = naive;
        }
    }
}
