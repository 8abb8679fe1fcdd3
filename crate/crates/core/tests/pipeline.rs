use approx::assert_relative_eq;

use msical_core::estimators::{awv_objective, msgmwm_objective};
use msical_core::experiments::model_to_state_space;
use msical_core::models::{draw_parameters, simulate_path};
use msical_core::theory::wv_oracle_monte_carlo;
use msical_core::{
    awv_fit, gmwm_fit, msgmwm_fit, resolve_omega, theoretical_wv, BetaLaw, CompositeModel, FitOptions,
    InternalSensorModel, LatentBlock, ObjectiveSpec, OmegaMode, StreamKey, WVEstimate, WeightScheme, WvOptions,
};
use msical_core::estimate_wv;

fn wn_ar1() -> CompositeModel {
    CompositeModel::new(vec![
        LatentBlock::WhiteNoise { sigma2: 1.0 },
        LatentBlock::AutoRegressive { phi: 0.99, eta2: 0.01 },
    ])
    .unwrap()
}

#[test]
fn simulated_wv_matches_theory_on_average() {
    let m = wn_ar1();
    let theory = theoretical_wv(&m, 8).unwrap().nu;
    let (mean, se) = wv_oracle_monte_carlo(&m, 8, 1 << 14, 200, StreamKey::new(3)).unwrap();
    for j in 0..8 {
        assert!((mean[j] - theory[j]).abs() < 4.0 * se[j], "scale {j}: {} vs {}", mean[j], theory[j]);
    }
}

#[test]
fn gmwm_recovers_a_long_replicate() {
    let m = wn_ar1();
    let x = simulate_path(&m, 1 << 18, StreamKey::new(11)).unwrap();
    let wv = estimate_wv(&x, 13, &WvOptions::default()).unwrap();
    let spec = ObjectiveSpec::identity(13, WeightScheme::uniform_d(&[1 << 18]).unwrap());
    let fit = gmwm_fit(&wv, &m, &spec, &FitOptions::default()).unwrap();
    let theta = fit.theta_hat.flatten();
    assert_relative_eq!(theta[0], 1.0, max_relative = 0.02);
    assert_relative_eq!(theta[1], 0.99, max_relative = 0.005);
    assert_relative_eq!(theta[2], 0.01, max_relative = 0.3);
    assert!(fit.lambda_hat.is_some());
}

fn replicates(k: usize, length: usize, boot: usize) -> Vec<WVEstimate> {
    let g = InternalSensorModel::new(
        wn_ar1(),
        vec![
            BetaLaw::new(0.8, 1.2, 2.0, 2.0).unwrap(),
            BetaLaw::new(0.98, 0.995, 2.0, 2.0).unwrap(),
            BetaLaw::new(0.005, 0.02, 2.0, 2.0).unwrap(),
        ],
    )
    .unwrap();
    let key = StreamKey::new(21);
    draw_parameters(&g, k, key.child(0))
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let x = simulate_path(m, length, key.child(1).child(i as u64)).unwrap();
            let opts = if boot > 0 {
                WvOptions::with_bootstrap(boot, key.child(2).child(i as u64))
            } else {
                WvOptions::default()
            };
            estimate_wv(&x, 10, &opts).unwrap()
        })
        .collect()
}

#[test]
fn msgmwm_objective_decomposes_around_the_average() {
    let wvs = replicates(4, 4096, 30);
    let spec = resolve_omega(&wvs, &WeightScheme::uniform_d(&[4096; 4]).unwrap(), OmegaMode::Averaged).unwrap();
    let opts = FitOptions {
        n_starts: 4,
        compute_covariance: false,
        ..FitOptions::default()
    };
    let fit = msgmwm_fit(&wvs, &wn_ar1(), &spec, &opts).unwrap();

    let mut bar = vec![0.0; 10];
    for (wv, w) in wvs.iter().zip(&spec.weights.w) {
        for (b, v) in bar.iter_mut().zip(&wv.nu_hat) {
            *b += w * v;
        }
    }
    let mut spread = 0.0;
    for (wv, w) in wvs.iter().zip(&spec.weights.w) {
        let r: Vec<f64> = wv.nu_hat.iter().zip(&bar).map(|(a, b)| a - b).collect();
        for i in 0..10 {
            for j in 0..10 {
                spread += w * r[i] * spec.omega[(i, j)] * r[j];
            }
        }
    }
    let whole = msgmwm_objective(&wvs, &fit.theta_hat, &spec);
    let part = awv_objective(&wvs, &fit.theta_hat, &spec);
    assert_relative_eq!(whole, part + spread, max_relative = 1e-9);
    assert_relative_eq!(fit.objective_value, whole, max_relative = 1e-9);
}

#[test]
fn awv_and_msgmwm_share_the_minimizer() {
    let wvs = replicates(5, 8192, 0);
    let spec = ObjectiveSpec::identity(10, WeightScheme::uniform_d(&[8192; 5]).unwrap());
    let opts = FitOptions {
        n_starts: 4,
        ..FitOptions::default()
    };
    let a = awv_fit(&wvs, &wn_ar1(), &spec, &opts).unwrap();
    let b = msgmwm_fit(&wvs, &wn_ar1(), &spec, &opts).unwrap();
    for (x, y) in a.theta_hat.flatten().iter().zip(b.theta_hat.flatten()) {
        assert_relative_eq!(*x, y, max_relative = 1e-6);
    }
}

#[test]
fn fitted_model_maps_to_filter_states() {
    let s = model_to_state_space(&wn_ar1(), 100.0).unwrap();
    assert_eq!(s.n_states(), 1);
    assert_relative_eq!(s.white_noise_variance, 1.0);
}
