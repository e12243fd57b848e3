use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cellfree::estimation::nmse_from_eigenvalues;
use cellfree::harness::{quantile, CdfTable};
use cellfree::linalg::{random_psd, C64};
use cellfree::metrics::hardening_metric;
use cellfree::powerctl::{ul_maxmin_fixedpoint, ul_sumse_bcd, UlCoefficients};

proptest! {
    #[test]
    fn cdf_table_is_sorted_with_consistent_quantiles(xs in prop::collection::vec(0.0f64..20.0, 1..200)) {
        let t = CdfTable::from_samples(xs.clone(), vec![]).unwrap();
        prop_assert!(t.samples.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(t.count, xs.len());
        for &(q, v) in &t.quantiles {
            prop_assert!(v >= t.samples[0] && v <= t.samples[t.count - 1]);
            prop_assert_eq!(v, quantile(&t.samples, q));
        }
        prop_assert!(t.quantiles.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn nmse_lies_in_unit_interval(lambda in prop::collection::vec(0.0f64..5.0, 1..8), snr in 1e-3f64..1e3) {
        prop_assume!(lambda.iter().sum::<f64>() > 1e-6);
        let v = nmse_from_eigenvalues(&lambda, snr, 1.0);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn hardening_metric_is_at_most_one(seed in 0u64..1000, m in 1usize..6, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rs: Vec<_> = (0..m).map(|j| random_psd(n, 1 + j % n, &mut rng) * C64::new(0.5 + j as f64, 0.0)).collect();
        let links: Vec<_> = rs.iter().enumerate().map(|(j, r)| (1.0 / (1.0 + j as f64), r)).collect();
        let v = hardening_metric(&links).unwrap();
        prop_assert!(v > 0.0 && v <= 1.0 + 1e-12);
    }

    #[test]
    fn uplink_solvers_respect_constraints(
        b in prop::collection::vec(0.1f64..10.0, 2..6),
        seed in 0u64..1000,
    ) {
        let k = b.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DMatrix::from_fn(k, k, |_, _| rand::Rng::random_range(&mut rng, 0.01..1.0));
        let coeffs = UlCoefficients { b, c, noise: vec![0.1; k], p_max: 2.0 };
        let mm = ul_maxmin_fixedpoint(&coeffs, 1e-7).unwrap();
        prop_assert!(coeffs.feasible(&mm.power));
        let s = coeffs.sinr(&mm.power);
        let (lo, hi) = s.iter().fold((f64::INFINITY, 0.0f64), |(a, z), &x| (a.min(x), z.max(x)));
        prop_assert!(hi - lo <= 1e-7);
        let bcd = ul_sumse_bcd(&coeffs, 1e-8, &vec![1.0; k]).unwrap();
        prop_assert!(coeffs.feasible(&bcd.power));
        prop_assert!(bcd.trace.windows(2).all(|w| w[1].objective >= w[0].objective));
        let full: f64 = coeffs.sinr(&vec![1.0; k]).iter().map(|x| (1.0 + x).log2()).sum();
        prop_assert!(bcd.objective >= full - 1e-12);
    }
}
