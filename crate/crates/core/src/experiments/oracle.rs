//! Targets of the multi-signal estimators under a known G.
//!
//! θ° = E[ϑ] is the analytic mean of the rescaled-Beta marginals. θ₀
//! minimizes `(1/n) sum_i || nu_i - nu(theta) ||^2_Ω` over draws from G,
//! which equals the distance to the mean of the `nu_i` up to a constant.
//!
//! The draws enter through the control variate
//! `nu_i = nu(ϑ_i) - A(θ°) (ϑ_i - θ°)`, which has the same expectation as
//! `nu(ϑ_i)` because `E[ϑ_i] = θ°`. It removes the first-order Monte Carlo
//! noise, so for models whose WV is linear in θ every `nu_i` equals `nu(θ°)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{match_wv, FitOptions};
use crate::linalg::{equilibrated_inverse, rows_serde};
use crate::models::{draw_parameters, CompositeModel, InternalSensorModel};
use crate::rng::StreamKey;
use crate::theory::{self, wv_jacobian, JacobianMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTargets {
    pub theta_star_zero: CompositeModel,
    pub theta_circ: CompositeModel,
    /// Monte Carlo standard error of each θ₀ component (delta method).
    pub theta_zero_se: Vec<f64>,
    pub n_draws: usize,
    #[serde(with = "rows_serde")]
    pub omega: DMatrix<f64>,
    pub objective: f64,
}

pub fn theta0_oracle(
    g: &InternalSensorModel,
    omega: &DMatrix<f64>,
    n_draws: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<OracleTargets> {
    if n_draws < 100 {
        return Err(Error::Config(format!("n_draws must be >= 100, got {n_draws}")));
    }
    g.validate()?;
    let j = omega.nrows();
    let draws = draw_parameters(g, n_draws, StreamKey::new(seed).child(0x6f72_6163))?;
    let theta_circ = g.mean_model()?;
    let circ = theta_circ.flatten();
    let a_circ = wv_jacobian(&theta_circ, j, JacobianMode::Auto)?.matrix;
    let nus: Vec<Vec<f64>> = draws
        .iter()
        .map(|m| {
            let mut nu = theory::theoretical_wv(m, j)?.nu;
            let th = m.flatten();
            for (r, v) in nu.iter_mut().enumerate() {
                *v -= (0..th.len()).map(|c| a_circ[(r, c)] * (th[c] - circ[c])).sum::<f64>();
            }
            Ok(nu)
        })
        .collect::<Result<_>>()?;
    let mut bar = vec![0.0; j];
    for nu in &nus {
        for (b, v) in bar.iter_mut().zip(nu) {
            *b += v / n_draws as f64;
        }
    }
    let mut fit_opts = opts.clone();
    fit_opts.extra_starts.push(circ);
    let (theta_star_zero, objective, _) = match_wv(&g.template, &bar, omega, &fit_opts)?;
    let theta_zero_se = if g.marginals.iter().all(|m| m.is_dirac()) {
        vec![0.0; g.template.n_params()]
    } else {
        delta_method_se(&theta_star_zero, &nus, omega)?
    };
    Ok(OracleTargets {
        theta_star_zero,
        theta_circ,
        theta_zero_se,
        n_draws,
        omega: omega.clone(),
        objective,
    })
}

/// Componentwise standard errors of θ₀ from `H^-1 Cov(s) H^-1 / n` with
/// scores `s_i = A' Ω (nu_i - nu(θ₀))` and `H = A' Ω A`.
fn delta_method_se(
    theta0: &CompositeModel,
    nus: &[Vec<f64>],
    omega: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let j = omega.nrows();
    let p = theta0.n_params();
    let n = nus.len();
    let a = wv_jacobian(theta0, j, JacobianMode::Auto)?.matrix;
    let nu0 = theory::theoretical_wv(theta0, j)?.nu;
    let at_omega = a.transpose() * omega;
    let scores = DMatrix::<f64>::from_fn(p, n, |r, i| {
        (0..j).map(|c| at_omega[(r, c)] * (nus[i][c] - nu0[c])).sum::<f64>()
    });
    let mean = scores.column_mean();
    let centered = DMatrix::from_fn(p, n, |r, i| scores[(r, i)] - mean[r]);
    let cov: DMatrix<f64> = &centered * centered.transpose() / (n - 1) as f64;
    let spread = cov.iter().any(|&v| v != 0.0);
    if !spread {
        return Ok(vec![0.0; p]);
    }
    let (h_inv, _) = equilibrated_inverse(&(&at_omega * &a))?;
    let v = &h_inv * cov * &h_inv / n as f64;
    Ok((0..p).map(|i| v[(i, i)].max(0.0).sqrt()).collect())
}
