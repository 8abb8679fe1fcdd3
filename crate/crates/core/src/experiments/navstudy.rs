//! End-to-end navigation comparison on synthetic sensors: fit single-replicate
//! GMWM models and one pooled AWV model on training replicates drawn from G,
//! then evaluate every model on validation sensors drawn from the same G.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{awv_fit, gmwm_fit, FitOptions, ObjectiveSpec, WeightScheme};
use crate::experiments::nav::{nav_eval, NamedModel, NavMetrics, NavScenario};
use crate::models::{draw_parameters, simulate_path, BetaLaw, CompositeModel, InternalSensorModel, LatentBlock};
use crate::rng::StreamKey;
use crate::wv::{default_scales, estimate_wv, WvOptions};

/// Label of the pooled model in the metrics.
pub const AWV_LABEL: &str = "awv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavStudyConfig {
    #[serde(default)]
    pub scenario: NavScenario,
    pub g: InternalSensorModel,
    pub k_train: usize,
    pub train_length: usize,
    pub k_validation: usize,
    #[serde(default = "default_n_starts")]
    pub n_starts: usize,
    #[serde(default = "default_phi_bounds")]
    pub phi_bounds: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

fn default_n_starts() -> usize {
    10
}

fn default_phi_bounds() -> (f64, f64) {
    FitOptions::default().phi_bounds
}

impl Default for NavStudyConfig {
    /// Gyro with white noise plus a slow Gauss-Markov bias at 100 Hz, spread
    /// over a range of correlation times.
    fn default() -> Self {
        let template = CompositeModel::new(vec![
            LatentBlock::WhiteNoise { sigma2: 5e-5 },
            LatentBlock::AutoRegressive {
                phi: 0.9995,
                eta2: 7e-10,
            },
        ])
        .expect("valid template");
        let g = InternalSensorModel::new(
            template,
            vec![
                BetaLaw::new(4e-5, 7e-5, 8.0, 5.0).expect("valid law"),
                BetaLaw::new(0.999, 0.9999, 7.0, 2.0).expect("valid law"),
                BetaLaw::new(6e-10, 8e-10, 3.0, 5.0).expect("valid law"),
            ],
        )
        .expect("valid G");
        Self {
            scenario: NavScenario::default(),
            g,
            k_train: 8,
            train_length: 70_000,
            k_validation: 8,
            n_starts: default_n_starts(),
            phi_bounds: default_phi_bounds(),
            seed: 9,
        }
    }
}

impl NavStudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.g.validate()?;
        if self.k_train < 2 || self.k_validation == 0 {
            return Err(Error::Config(
                "need at least 2 training and 1 validation replicates".into(),
            ));
        }
        let j = default_scales(self.train_length);
        if j < self.g.template.n_params() {
            return Err(Error::UnderIdentified {
                scales: j,
                params: self.g.template.n_params(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavStudyReport {
    pub config: NavStudyConfig,
    /// The AWV model first, then one GMWM model per training replicate.
    pub models: Vec<NamedModel>,
    pub train_truth: Vec<CompositeModel>,
    pub validation_truth: Vec<CompositeModel>,
    pub metrics: NavMetrics,
}

pub fn run_nav_study(cfg: &NavStudyConfig) -> Result<NavStudyReport> {
    cfg.validate()?;
    let key = StreamKey::new(cfg.seed);
    let train_truth = draw_parameters(&cfg.g, cfg.k_train, key.child(0))?;
    let validation_truth = draw_parameters(&cfg.g, cfg.k_validation, key.child(1))?;
    let j = default_scales(cfg.train_length);
    let wvs = train_truth
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let x = simulate_path(m, cfg.train_length, key.child(2).child(i as u64))?;
            estimate_wv(&x, j, &WvOptions::default())
        })
        .collect::<Result<Vec<_>>>()?;

    let opts = FitOptions {
        n_starts: cfg.n_starts,
        seed: cfg.seed,
        phi_bounds: cfg.phi_bounds,
        compute_covariance: false,
        ..FitOptions::default()
    };
    let template = &cfg.g.template;
    let pooled = ObjectiveSpec::identity(j, WeightScheme::uniform_d(&vec![cfg.train_length; cfg.k_train])?);
    let single = ObjectiveSpec::identity(j, WeightScheme::uniform_d(&[cfg.train_length])?);
    let mut models = vec![NamedModel {
        label: AWV_LABEL.into(),
        model: awv_fit(&wvs, template, &pooled, &opts)?.theta_hat,
    }];
    for (i, wv) in wvs.iter().enumerate() {
        models.push(NamedModel {
            label: format!("gmwm{i}"),
            model: gmwm_fit(wv, template, &single, &opts)?.theta_hat,
        });
    }

    let len = cfg.scenario.steps() * cfg.scenario.n_runs;
    let sources = validation_truth
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut r = simulate_path(m, len, key.child(3).child(i as u64))?;
            r.label = format!("val{i}");
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = nav_eval(&cfg.scenario, &models, &sources, cfg.seed)?;
    Ok(NavStudyReport {
        config: cfg.clone(),
        models,
        train_truth,
        validation_truth,
        metrics,
    })
}
