use proptest::prelude::*;

use msical_core::estimators::compute_weights;
use msical_core::inference::bootstrap_p_value;
use msical_core::io::{read_f64le, write_f64le};
use msical_core::models::simulate_path;
use msical_core::theory::wv_oracle;
use msical_core::{estimate_wv, theoretical_wv, CompositeModel, LatentBlock, Replicate, StreamKey, WvOptions};

fn model_strategy() -> impl Strategy<Value = CompositeModel> {
    (
        0.01f64..10.0,
        0.01f64..0.999,
        1e-4f64..1.0,
        prop::option::of(1e-6f64..1e-2),
        prop::option::of(1e-5f64..1e-2),
    )
        .prop_map(|(sigma2, phi, eta2, gamma2, omega)| {
            let mut blocks = vec![
                LatentBlock::WhiteNoise { sigma2 },
                LatentBlock::AutoRegressive { phi, eta2 },
            ];
            if let Some(gamma2) = gamma2 {
                blocks.push(LatentBlock::RandomWalk { gamma2 });
            }
            if let Some(omega) = omega {
                blocks.push(LatentBlock::Drift { omega });
            }
            CompositeModel::new(blocks).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_matches_brute_force(m in model_strategy()) {
        let oracle = wv_oracle(&m, 8).unwrap().nu;
        let fast = theoretical_wv(&m, 8).unwrap().nu;
        for (a, b) in fast.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn block_contributions_sum_to_total(m in model_strategy()) {
        let t = theoretical_wv(&m, 8).unwrap();
        for (r, nu) in t.nu.iter().enumerate() {
            let s: f64 = t.per_block.row(r).iter().sum();
            prop_assert!((s - nu).abs() <= 1e-12 * nu.abs());
        }
    }

    #[test]
    fn empirical_wv_scales_quadratically(seed in 0u64..1000, c in 0.1f64..10.0) {
        let wn = CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 1.0 }]).unwrap();
        let x = simulate_path(&wn, 1024, StreamKey::new(seed)).unwrap();
        let y = Replicate::new(x.samples.iter().map(|v| c * v).collect(), 1.0, "scaled").unwrap();
        let a = estimate_wv(&x, 6, &WvOptions::default()).unwrap();
        let b = estimate_wv(&y, 6, &WvOptions::default()).unwrap();
        for (u, v) in a.nu_hat.iter().zip(&b.nu_hat) {
            prop_assert!((c * c * u - v).abs() <= 1e-10 * v.abs());
        }
    }

    #[test]
    fn wv_is_shift_invariant(seed in 0u64..1000, shift in -1e3f64..1e3) {
        let wn = CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 1.0 }]).unwrap();
        let x = simulate_path(&wn, 512, StreamKey::new(seed)).unwrap();
        let y = Replicate::new(x.samples.iter().map(|v| v + shift).collect(), 1.0, "shifted").unwrap();
        let a = estimate_wv(&x, 5, &WvOptions::default()).unwrap();
        let b = estimate_wv(&y, 5, &WvOptions::default()).unwrap();
        for (u, v) in a.nu_hat.iter().zip(&b.nu_hat) {
            prop_assert!((u - v).abs() <= 1e-8 * (1.0 + shift.abs()) * u.abs().max(1e-3));
        }
    }

    #[test]
    fn confidence_interval_brackets_estimate(seed in 0u64..1000) {
        let wn = CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 2.0 }]).unwrap();
        let x = simulate_path(&wn, 2048, StreamKey::new(seed)).unwrap();
        let wv = estimate_wv(&x, 7, &WvOptions::default()).unwrap();
        for j in 0..7 {
            prop_assert!(wv.ci_low[j] <= wv.nu_hat[j] && wv.nu_hat[j] <= wv.ci_high[j]);
        }
    }

    #[test]
    fn weights_form_a_simplex(
        lengths in prop::collection::vec(1usize..100_000, 1..10),
        scale in 0.1f64..10.0,
    ) {
        let d = vec![scale; lengths.len()];
        let w = compute_weights(&lengths, &d).unwrap();
        let sum: f64 = w.w.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(w.w.iter().all(|&v| v > 0.0));
        prop_assert!(w.k_effective() <= lengths.len() as f64 + 1e-9);
    }

    #[test]
    fn p_value_is_a_probability(obs in -10.0f64..10.0, boot in prop::collection::vec(-10.0f64..10.0, 1..200)) {
        let p = bootstrap_p_value(obs, &boot);
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert!(p >= 1.0 / (boot.len() + 1) as f64);
    }

    #[test]
    fn f64le_roundtrip(samples in prop::collection::vec(-1e300f64..1e300, 2..300)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f64");
        let r = Replicate::new(samples, 100.0, "x").unwrap();
        write_f64le(&path, &r, None).unwrap();
        let back = read_f64le(&path).unwrap();
        prop_assert_eq!(back.samples, r.samples);
        prop_assert_eq!(back.rate_hz, 100.0);
    }
}
