//! Monte Carlo study of the AGMWM and AWV estimators under a known G.
//!
//! Ω is resolved once from a pilot batch of `K` replicates and then frozen
//! for every trial and for the θ₀ oracle, so all estimates target the same θ₀.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    agmwm_fit, awv_fit, compute_weights, gmwm_fit, resolve_omega, FitOptions, FitResult,
    ObjectiveSpec, OmegaMode, WeightScheme,
};
use crate::experiments::oracle::{theta0_oracle, OracleTargets};
use crate::experiments::{median, median_se};
use crate::models::{draw_parameters, simulate_path, InternalSensorModel};
use crate::rng::StreamKey;
use crate::wv::{default_scales, estimate_wv, WvOptions};

/// Share of failed fits in a trial above which the trial is skipped.
pub const MAX_FAILED_FIT_SHARE: f64 = 0.1;

const PILOT_TAG: u64 = 0x7069_6c6f;
const TRIAL_TAG: u64 = 0x7472_6961;

fn default_pilot_boot() -> usize {
    100
}
fn default_oracle_draws() -> usize {
    1000
}
fn default_n_starts() -> usize {
    10
}
fn default_phi_bounds() -> (f64, f64) {
    (0.9, 0.99999)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub g: InternalSensorModel,
    pub k: usize,
    pub length: usize,
    pub trials: usize,
    /// Number of scales; defaults to the rule for `length`.
    #[serde(default)]
    pub j: Option<usize>,
    #[serde(default)]
    pub omega_mode: OmegaMode,
    /// Bootstrap resamples per pilot replicate when Ω needs covariances.
    #[serde(default = "default_pilot_boot")]
    pub pilot_boot: usize,
    #[serde(default = "default_oracle_draws")]
    pub oracle_draws: usize,
    #[serde(default = "default_n_starts")]
    pub n_starts: usize,
    #[serde(default = "default_phi_bounds")]
    pub phi_bounds: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.g.validate()?;
        if self.k == 0 || self.trials == 0 {
            return Err(Error::Config("k and trials must be >= 1".into()));
        }
        let j = self.scales();
        if j > crate::wv::max_scales(self.length) {
            return Err(Error::Scale(format!(
                "{j} scales do not fit replicates of length {}",
                self.length
            )));
        }
        if j < self.g.template.n_params() {
            return Err(Error::UnderIdentified {
                scales: j,
                params: self.g.template.n_params(),
            });
        }
        Ok(())
    }

    pub fn scales(&self) -> usize {
        self.j.unwrap_or_else(|| default_scales(self.length))
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            n_starts: self.n_starts,
            seed: self.seed,
            phi_bounds: self.phi_bounds,
            compute_covariance: false,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub agmwm: Option<Vec<f64>>,
    pub awv: Option<Vec<f64>>,
    pub failed_fits: usize,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub label: String,
    pub theta_zero: f64,
    pub theta_zero_se: f64,
    pub theta_circ: f64,
    pub agmwm_median: f64,
    pub agmwm_median_se: f64,
    pub awv_median: f64,
    pub awv_median_se: f64,
    /// 95% band around θ₀ for the AWV median.
    pub awv_band: (f64, f64),
    /// 95% band around θ° for the AGMWM median.
    pub agmwm_band: (f64, f64),
    pub awv_centered: bool,
    pub agmwm_centered: bool,
    /// `|θ₀ - θ°|` in units of the oracle standard error.
    pub target_separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub parameter_labels: Vec<String>,
    pub objective: ObjectiveSpec,
    pub oracle: OracleTargets,
    pub trials: Vec<TrialRecord>,
    pub completed_trials: usize,
    pub summary: Vec<ComponentSummary>,
}

impl StudyReport {
    /// One row per trial and method: `trial,method,<parameter labels>`.
    pub fn write_estimates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["trial".to_string(), "method".to_string()];
        header.extend(self.parameter_labels.iter().cloned());
        w.write_record(&header)?;
        for t in &self.trials {
            for (name, est) in [("agmwm", &t.agmwm), ("awv", &t.awv)] {
                if let Some(theta) = est {
                    let mut row = vec![t.trial.to_string(), name.to_string()];
                    row.extend(theta.iter().map(|v| format!("{v:e}")));
                    w.write_record(&row)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "parameter",
            "theta_zero",
            "theta_zero_se",
            "theta_circ",
            "agmwm_median",
            "agmwm_median_se",
            "awv_median",
            "awv_median_se",
            "awv_centered",
            "agmwm_centered",
        ])?;
        for s in &self.summary {
            w.write_record([
                s.label.clone(),
                format!("{:e}", s.theta_zero),
                format!("{:e}", s.theta_zero_se),
                format!("{:e}", s.theta_circ),
                format!("{:e}", s.agmwm_median),
                format!("{:e}", s.agmwm_median_se),
                format!("{:e}", s.awv_median),
                format!("{:e}", s.awv_median_se),
                s.awv_centered.to_string(),
                s.agmwm_centered.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Resolves the frozen objective from a pilot batch drawn from G.
pub fn pilot_objective(cfg: &StudyConfig) -> Result<ObjectiveSpec> {
    let j = cfg.scales();
    let weights = WeightScheme::uniform_d(&vec![cfg.length; cfg.k])?;
    if cfg.omega_mode == OmegaMode::Identity {
        return Ok(ObjectiveSpec::identity(j, weights));
    }
    let key = StreamKey::new(cfg.seed).child(PILOT_TAG);
    let params = draw_parameters(&cfg.g, cfg.k, key.child(0))?;
    let wvs = params
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let x = simulate_path(m, cfg.length, key.child(1).child(i as u64))?;
            let opts = WvOptions::with_bootstrap(cfg.pilot_boot, key.child(2).child(i as u64));
            estimate_wv(&x, j, &opts)
        })
        .collect::<Result<Vec<_>>>()?;
    resolve_omega(&wvs, &weights, cfg.omega_mode)
}

fn run_trial(
    cfg: &StudyConfig,
    spec: &ObjectiveSpec,
    opts: &FitOptions,
    trial: usize,
) -> TrialRecord {
    let key = StreamKey::new(cfg.seed).child(TRIAL_TAG).child(trial as u64);
    let failed = |error: Error, failed_fits: usize| TrialRecord {
        trial,
        agmwm: None,
        awv: None,
        failed_fits,
        skipped: true,
        error: Some(error.to_string()),
    };
    let wvs = draw_parameters(&cfg.g, cfg.k, key.child(0)).and_then(|params| {
        params
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let x = simulate_path(m, cfg.length, key.child(1).child(i as u64))?;
                estimate_wv(&x, spec.j, &WvOptions::default())
            })
            .collect::<Result<Vec<_>>>()
    });
    let wvs = match wvs {
        Ok(w) => w,
        Err(e) => return failed(e, 0),
    };

    let single = spec.with_weights(match WeightScheme::uniform_d(&[cfg.length]) {
        Ok(w) => w,
        Err(e) => return failed(e, 0),
    });
    let individual: Vec<Result<FitResult>> =
        wvs.iter().map(|wv| gmwm_fit(wv, &cfg.g.template, &single, opts)).collect();
    let awv = awv_fit(&wvs, &cfg.g.template, spec, opts);

    let n_failed = individual.iter().filter(|r| r.is_err()).count() + usize::from(awv.is_err());
    let first_error = individual
        .iter()
        .chain(std::iter::once(&awv))
        .find_map(|r| r.as_ref().err().map(ToString::to_string));
    if n_failed as f64 > MAX_FAILED_FIT_SHARE * (cfg.k + 1) as f64 {
        return TrialRecord {
            trial,
            agmwm: None,
            awv: None,
            failed_fits: n_failed,
            skipped: true,
            error: first_error,
        };
    }
    let ok: Vec<FitResult> = individual.into_iter().filter_map(Result::ok).collect();
    let agmwm = compute_weights(&vec![cfg.length; ok.len()], &vec![1.0; ok.len()])
        .and_then(|w| agmwm_fit(&ok, &w))
        .map(|f| f.theta_hat.flatten());
    TrialRecord {
        trial,
        failed_fits: n_failed,
        skipped: false,
        error: first_error.or_else(|| agmwm.as_ref().err().map(ToString::to_string)),
        agmwm: agmwm.ok(),
        awv: awv.ok().map(|f| f.theta_hat.flatten()),
    }
}

fn summarize(
    labels: &[String],
    oracle: &OracleTargets,
    trials: &[TrialRecord],
) -> Vec<ComponentSummary> {
    let zero = oracle.theta_star_zero.flatten();
    let circ = oracle.theta_circ.flatten();
    labels
        .iter()
        .enumerate()
        .map(|(c, label)| {
            let column = |pick: fn(&TrialRecord) -> &Option<Vec<f64>>| -> Vec<f64> {
                trials.iter().filter_map(|t| pick(t).as_ref().map(|v| v[c])).collect()
            };
            let ag = column(|t| &t.agmwm);
            let aw = column(|t| &t.awv);
            let (ag_med, ag_se) = (median(&ag), median_se(&ag));
            let (aw_med, aw_se) = (median(&aw), median_se(&aw));
            let se0 = oracle.theta_zero_se[c];
            let aw_half = 1.96 * (aw_se * aw_se + se0 * se0).sqrt();
            let ag_half = 1.96 * ag_se;
            let awv_band = (zero[c] - aw_half, zero[c] + aw_half);
            let agmwm_band = (circ[c] - ag_half, circ[c] + ag_half);
            ComponentSummary {
                label: label.clone(),
                theta_zero: zero[c],
                theta_zero_se: se0,
                theta_circ: circ[c],
                agmwm_median: ag_med,
                agmwm_median_se: ag_se,
                awv_median: aw_med,
                awv_median_se: aw_se,
                awv_centered: awv_band.0 <= aw_med && aw_med <= awv_band.1,
                agmwm_centered: agmwm_band.0 <= ag_med && ag_med <= agmwm_band.1,
                awv_band,
                agmwm_band,
                target_separation: (zero[c] - circ[c]).abs() / se0,
            }
        })
        .collect()
}

pub fn run_simulation_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let spec = pilot_objective(cfg)?;
    let opts = cfg.fit_options();
    let oracle = theta0_oracle(&cfg.g, &spec.omega, cfg.oracle_draws, cfg.seed, &opts)?;
    let trials: Vec<TrialRecord> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &spec, &opts, t))
        .collect();
    for t in trials.iter().filter(|t| t.skipped) {
        log::warn!(
            "trial {} skipped ({} failed fits): {}",
            t.trial,
            t.failed_fits,
            t.error.as_deref().unwrap_or("")
        );
    }
    let labels = cfg.g.template.shape().param_labels();
    let summary = summarize(&labels, &oracle, &trials);
    Ok(StudyReport {
        config: cfg.clone(),
        parameter_labels: labels,
        objective: spec,
        oracle,
        completed_trials: trials.iter().filter(|t| !t.skipped).count(),
        trials,
        summary,
    })
}
