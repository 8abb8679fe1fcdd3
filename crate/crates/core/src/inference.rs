//! Parametric-bootstrap test of near-stationarity: do all replicates share a
//! single parameter vector?
//!
//! The statistic is the attained MS-GMWM objective at the AWV fit. Null
//! resamples simulate `K` replicates of the observed lengths from the fitted
//! model, refit with the same frozen Ω and recompute the statistic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{awv_fit, msgmwm_objective, FitOptions, ObjectiveSpec};
use crate::models::{simulate_path, CompositeModel};
use crate::rng::StreamKey;
use crate::wv::{estimate_wv, WVEstimate, WvOptions};

/// Refit failure share above which the test is declared unreliable.
pub const MAX_FAILED_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic_observed: f64,
    /// Statistics of the successful null resamples, in resample order.
    pub bootstrap_statistics: Vec<f64>,
    pub p_value: f64,
    pub n_boot: usize,
    pub failed_refits: usize,
    pub level: f64,
    pub reject: bool,
    /// Model fitted under the null and used to simulate the resamples.
    pub theta_null: CompositeModel,
}

/// `(1 + #{boot >= observed}) / (n + 1)`.
pub fn bootstrap_p_value(observed: f64, boot: &[f64]) -> f64 {
    let exceed = boot.iter().filter(|&&s| s >= observed).count();
    (1 + exceed) as f64 / (boot.len() + 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOptions {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
    /// Options of the observed fit.
    pub fit: FitOptions,
    /// Options of each null refit; the null model is always added as a start.
    pub refit: FitOptions,
}

impl TestOptions {
    pub fn new(n_boot: usize, level: f64, seed: u64) -> Self {
        let fit = FitOptions {
            seed,
            compute_covariance: false,
            ..FitOptions::default()
        };
        let refit = FitOptions {
            n_starts: 3,
            ..fit.clone()
        };
        Self {
            n_boot,
            level,
            seed,
            fit,
            refit,
        }
    }
}

pub fn near_stationarity_test(
    wv_list: &[WVEstimate],
    template: &CompositeModel,
    spec: &ObjectiveSpec,
    opts: &TestOptions,
) -> Result<TestResult> {
    if wv_list.len() < 2 {
        return Err(Error::Size(format!(
            "the test needs at least 2 replicates, got {}",
            wv_list.len()
        )));
    }
    if opts.n_boot < 19 {
        return Err(Error::Config(format!(
            "n_boot must be >= 19, got {}",
            opts.n_boot
        )));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Config(format!("level must be in (0, 1), got {}", opts.level)));
    }
    let fit = awv_fit(wv_list, template, spec, &opts.fit)?;
    let theta_null = fit.theta_hat;
    let observed = msgmwm_objective(wv_list, &theta_null, spec);
    let lengths: Vec<usize> = wv_list.iter().map(|w| w.replicate_length).collect();

    let mut refit = opts.refit.clone();
    refit.compute_covariance = false;
    refit.extra_starts = vec![theta_null.flatten()];
    let key = StreamKey::new(opts.seed).child(0x7465_7374);
    let draws: Vec<Option<f64>> = (0..opts.n_boot)
        .into_par_iter()
        .map(|b| {
            let key = key.child(b as u64);
            let resample: Result<Vec<WVEstimate>> = lengths
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let path = simulate_path(&theta_null, t, key.child(i as u64))?;
                    estimate_wv(&path, spec.j, &WvOptions::default())
                })
                .collect();
            let resample = resample.ok()?;
            let refit = awv_fit(&resample, template, spec, &refit).ok()?;
            let s = msgmwm_objective(&resample, &refit.theta_hat, spec);
            s.is_finite().then_some(s)
        })
        .collect();

    let failed = draws.iter().filter(|d| d.is_none()).count();
    if failed as f64 > MAX_FAILED_SHARE * opts.n_boot as f64 {
        return Err(Error::UnreliableTest {
            failed,
            total: opts.n_boot,
        });
    }
    let bootstrap_statistics: Vec<f64> = draws.into_iter().flatten().collect();
    let p_value = bootstrap_p_value(observed, &bootstrap_statistics);
    Ok(TestResult {
        statistic_observed: observed,
        p_value,
        n_boot: opts.n_boot,
        failed_refits: failed,
        level: opts.level,
        reject: p_value <= opts.level,
        bootstrap_statistics,
        theta_null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::WeightScheme;
    use crate::models::LatentBlock;

    #[test]
    fn smoothed_p_value() {
        let boot: Vec<f64> = (0..99).map(|i| i as f64).collect();
        assert!((bootstrap_p_value(1e9, &boot) - 0.01).abs() < 1e-15);
        assert_eq!(bootstrap_p_value(-1.0, &boot), 1.0);
        assert!((bootstrap_p_value(49.0, &boot) - 51.0 / 100.0).abs() < 1e-15);
    }

    fn dataset(k: usize, seed: u64) -> (Vec<WVEstimate>, CompositeModel) {
        let model = CompositeModel::new(vec![
            LatentBlock::WhiteNoise { sigma2: 1.0 },
            LatentBlock::RandomWalk { gamma2: 1e-4 },
        ])
        .unwrap();
        let wvs = (0..k)
            .map(|i| {
                let x = simulate_path(&model, 4096, StreamKey::new(seed).child(i as u64)).unwrap();
                estimate_wv(&x, 8, &WvOptions::default()).unwrap()
            })
            .collect();
        (wvs, model)
    }

    #[test]
    fn rejects_bad_inputs() {
        let (wvs, model) = dataset(2, 1);
        let spec = ObjectiveSpec::identity(8, WeightScheme::uniform_d(&[4096, 4096]).unwrap());
        let opts = TestOptions::new(10, 0.05, 0);
        assert!(matches!(
            near_stationarity_test(&wvs, &model, &spec, &opts),
            Err(Error::Config(_))
        ));
        let single = ObjectiveSpec::identity(8, WeightScheme::uniform_d(&[4096]).unwrap());
        assert!(matches!(
            near_stationarity_test(&wvs[..1], &model, &single, &TestOptions::new(19, 0.05, 0)),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn reproducible_and_order_invariant_statistic() {
        let (wvs, model) = dataset(3, 7);
        let spec = ObjectiveSpec::identity(8, WeightScheme::uniform_d(&[4096; 3]).unwrap());
        let opts = TestOptions::new(19, 0.05, 11);
        let a = near_stationarity_test(&wvs, &model, &spec, &opts).unwrap();
        let b = near_stationarity_test(&wvs, &model, &spec, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.p_value > 0.0 && a.p_value <= 1.0);
        let reversed: Vec<WVEstimate> = wvs.iter().rev().cloned().collect();
        let c = near_stationarity_test(&reversed, &model, &spec, &opts).unwrap();
        let rel = (a.statistic_observed - c.statistic_observed).abs() / a.statistic_observed;
        assert!(rel < 1e-6, "{rel}");
    }
}
