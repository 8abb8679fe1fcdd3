//! Model-implied wavelet variance, its Jacobian, and an independent
//! autocovariance oracle.
//!
//! The closed forms used here are WN `sigma2 / tau`, RW
//! `gamma2 (tau^2 + 2) / (12 tau)` and DR `omega^2 tau^2 / 16`. AR1 and QN go
//! through the exact autocovariance route: with `c(k)` the autocorrelation
//! of the Haar filter at lag `k`,
//! `nu = c(0) g(0) + 2 sum_{k >= 1} c(k) g(k)`, an O(tau) sum per scale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::rows_serde;
use crate::models::{BlockKind, CompositeModel, LatentBlock, ModelShape};
use crate::rng::StreamKey;
use crate::wv::{self, WvOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalWV {
    pub scales: Vec<u64>,
    pub nu: Vec<f64>,
    /// `J x blocks` contributions; `nu` is their row sum.
    #[serde(with = "rows_serde")]
    pub per_block: DMatrix<f64>,
}

/// `sum_l h_l h_{l+k}` for the level filter of length `tau`.
fn haar_filter_acf(tau: usize, k: usize) -> f64 {
    let half = tau / 2;
    let t2 = (tau * tau) as f64;
    if k <= half {
        (2.0 * half as f64 - 3.0 * k as f64) / t2
    } else if k < tau {
        -((tau - k) as f64) / t2
    } else {
        0.0
    }
}

/// WV at scale `tau` of a stationary block with finitely supported
/// autocovariance `acvf[0..]`.
fn wv_from_acvf(acvf: &[f64], tau: usize) -> f64 {
    acvf.iter()
        .enumerate()
        .take(tau)
        .map(|(k, g)| {
            let mult = if k == 0 { 1.0 } else { 2.0 };
            mult * haar_filter_acf(tau, k) * g
        })
        .sum()
}

/// AR1 WV at scale `tau`.
///
/// Because the filter autocorrelation sums to zero, `g(k)` can be replaced by
/// `g(k) - g(0) = -eta2 (1 - phi^k) / (1 - phi^2)`; the factors `1 - phi^k` are
/// built by the cancellation-free recursion
/// `1 - phi^(k+1) = (1 - phi) + phi (1 - phi^k)`.
fn ar1_wv(phi: f64, eta2: f64, tau: usize) -> f64 {
    let one_minus = 1.0 - phi;
    let mut d = 0.0;
    let mut acc = 0.0;
    for k in 1..tau {
        d = one_minus + phi * d;
        acc += haar_filter_acf(tau, k) * d;
    }
    -2.0 * eta2 * acc / (one_minus * (1.0 + phi))
}

/// WV contribution of a single block at scale `tau`. Parameters are not
/// validated.
pub fn block_wv(kind: BlockKind, params: &[f64], tau: u64) -> f64 {
    let t = tau as f64;
    match kind {
        BlockKind::WhiteNoise => params[0] / t,
        BlockKind::Quantization => wv_from_acvf(&[params[0], -0.5 * params[0]], tau as usize),
        BlockKind::AutoRegressive => ar1_wv(params[0], params[1], tau as usize),
        BlockKind::RandomWalk => params[0] * (t * t + 2.0) / (12.0 * t),
        BlockKind::Drift => params[0] * params[0] * t * t / 16.0,
    }
}

/// Fills `out[j]` with the total WV of `(shape, theta)` at `scales[j]`.
pub fn wv_into(shape: &ModelShape, theta: &[f64], scales: &[u64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut off = 0;
    for &kind in &shape.0 {
        let n = kind.n_params();
        let p = &theta[off..off + n];
        for (o, &tau) in out.iter_mut().zip(scales) {
            *o += block_wv(kind, p, tau);
        }
        off += n;
    }
}

fn check_j(j: usize) -> Result<()> {
    if j == 0 || j > 40 {
        return Err(Error::Scale(format!("J must be in 1..=40, got {j}")));
    }
    Ok(())
}

fn assemble(
    model: &CompositeModel,
    j: usize,
    f: impl Fn(&LatentBlock, u64) -> f64,
) -> Result<TheoreticalWV> {
    check_j(j)?;
    for b in model.blocks() {
        b.validate()?;
    }
    let scales = wv::scales(j);
    let nb = model.blocks().len();
    let per_block = DMatrix::from_fn(j, nb, |r, c| f(&model.blocks()[c], scales[r]));
    let nu = (0..j).map(|r| per_block.row(r).sum()).collect();
    Ok(TheoreticalWV {
        scales,
        nu,
        per_block,
    })
}

/// Model-implied WV at scales `2^1 .. 2^J`.
pub fn theoretical_wv(model: &CompositeModel, j: usize) -> Result<TheoreticalWV> {
    assemble(model, j, |b, tau| block_wv(b.kind(), &b.params(), tau))
}

fn haar_weights(tau: usize) -> Vec<f64> {
    let inv = 1.0 / tau as f64;
    (0..tau)
        .map(|l| if l < tau / 2 { inv } else { -inv })
        .collect()
}

fn oracle_block(block: &LatentBlock, tau: u64) -> f64 {
    let tau = tau as usize;
    let h = haar_weights(tau);
    let double_sum = |g: &dyn Fn(usize) -> f64| {
        let mut acc = 0.0;
        for (l, hl) in h.iter().enumerate() {
            for (m, hm) in h.iter().enumerate() {
                acc += hl * hm * g(l.abs_diff(m));
            }
        }
        acc
    };
    match *block {
        LatentBlock::WhiteNoise { sigma2 } => {
            double_sum(&|k| if k == 0 { sigma2 } else { 0.0 })
        }
        LatentBlock::Quantization { q2 } => double_sum(&|k| match k {
            0 => q2,
            1 => -0.5 * q2,
            _ => 0.0,
        }),
        LatentBlock::AutoRegressive { phi, eta2 } => {
            // Centered autocovariance g(k) - g(0); the filter sums to zero.
            let ln_phi = phi.ln();
            let scale = eta2 / ((1.0 - phi) * (1.0 + phi));
            double_sum(&|k| scale * (k as f64 * ln_phi).exp_m1())
        }
        LatentBlock::RandomWalk { gamma2 } => {
            // W_t = sum_r u_{t-r} (h_0 + ... + h_r) over increments u.
            let mut partial = 0.0;
            let mut acc = 0.0;
            for hl in &h {
                partial += hl;
                acc += partial * partial;
            }
            gamma2 * acc
        }
        LatentBlock::Drift { omega } => {
            // W_t = -omega * sum_l l h_l for every t.
            let w: f64 = -omega * h.iter().enumerate().map(|(l, hl)| l as f64 * hl).sum::<f64>();
            w * w
        }
    }
}

/// Independent evaluation of the theoretical WV by brute-force double sums
/// over the Haar filter (O(tau^2) per scale).
pub fn wv_oracle(model: &CompositeModel, j: usize) -> Result<TheoreticalWV> {
    assemble(model, j, oracle_block)
}

/// Monte Carlo evaluation: mean and standard error of the empirical WV over
/// `reps` simulated paths of `length` samples.
pub fn wv_oracle_monte_carlo(
    model: &CompositeModel,
    j: usize,
    length: usize,
    reps: usize,
    key: StreamKey,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if reps < 2 {
        return Err(Error::Config("Monte Carlo oracle needs at least 2 paths".into()));
    }
    let mut sum = vec![0.0; j];
    let mut sum_sq = vec![0.0; j];
    for r in 0..reps {
        let path = crate::models::simulate_path(model, length, key.child(r as u64))?;
        let est = wv::estimate_wv(&path, j, &WvOptions::default())?;
        for (k, v) in est.nu_hat.iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let n = reps as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(s2, m)| ((s2 / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    Ok((mean, se))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Analytic columns where available, central differences otherwise.
    #[default]
    Auto,
    /// Central differences for every column.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jacobian {
    /// `J x p`, `d nu / d theta^T`.
    #[serde(with = "rows_serde")]
    pub matrix: DMatrix<f64>,
    /// `CentralDifference` as soon as one column is differenced.
    pub method: JacobianMethod,
    pub column_methods: Vec<JacobianMethod>,
}

/// Step for the central difference in `theta`; for `phi` the step also stays
/// well inside `(0, 1)`.
fn fd_step(value: f64, is_phi: bool) -> Result<f64> {
    let mut h = if value != 0.0 { 1e-6 * value.abs() } else { 1e-10 };
    if is_phi {
        h = h.min(1e-3 * (1.0 - value)).min(0.5 * value);
    }
    if !(h > 0.0) || value + h == value || value - h == value {
        return Err(Error::Numerical(format!(
            "finite-difference step underflow at parameter value {value}"
        )));
    }
    Ok(h)
}

/// Jacobian of the WV with respect to the flat parameter vector.
pub fn wv_jacobian(model: &CompositeModel, j: usize, mode: JacobianMode) -> Result<Jacobian> {
    check_j(j)?;
    for b in model.blocks() {
        b.validate()?;
    }
    let scales = wv::scales(j);
    let p = model.n_params();
    let mut matrix = DMatrix::zeros(j, p);
    let mut column_methods = Vec::with_capacity(p);
    let mut col = 0;
    for block in model.blocks() {
        let kind = block.kind();
        let params = block.params();
        for (i, _) in params.iter().enumerate() {
            let analytic: Option<Box<dyn Fn(u64) -> f64>> = match (mode, *block, i) {
                (JacobianMode::FiniteDifference, _, _) => None,
                (_, LatentBlock::WhiteNoise { .. }, _) => Some(Box::new(|tau| 1.0 / tau as f64)),
                (_, LatentBlock::Quantization { .. }, _) => {
                    Some(Box::new(|tau| block_wv(BlockKind::Quantization, &[1.0], tau)))
                }
                (_, LatentBlock::RandomWalk { .. }, _) => Some(Box::new(|tau| {
                    let t = tau as f64;
                    (t * t + 2.0) / (12.0 * t)
                })),
                (_, LatentBlock::Drift { omega }, _) => Some(Box::new(move |tau| {
                    let t = tau as f64;
                    omega * t * t / 8.0
                })),
                // nu is linear in eta2 at fixed phi.
                (_, LatentBlock::AutoRegressive { phi, .. }, 1) => {
                    Some(Box::new(move |tau| ar1_wv(phi, 1.0, tau as usize)))
                }
                _ => None,
            };
            match analytic {
                Some(f) => {
                    for (r, &tau) in scales.iter().enumerate() {
                        matrix[(r, col)] = f(tau);
                    }
                    column_methods.push(JacobianMethod::Analytic);
                }
                None => {
                    let is_phi = kind == BlockKind::AutoRegressive && i == 0;
                    let h = fd_step(params[i], is_phi)?;
                    let mut up = params.clone();
                    let mut down = params.clone();
                    up[i] += h;
                    down[i] -= h;
                    let width = up[i] - down[i];
                    for (r, &tau) in scales.iter().enumerate() {
                        matrix[(r, col)] =
                            (block_wv(kind, &up, tau) - block_wv(kind, &down, tau)) / width;
                    }
                    column_methods.push(JacobianMethod::CentralDifference);
                }
            }
            col += 1;
        }
    }
    if matrix.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Jacobian entry".into()));
    }
    let method = if column_methods.contains(&JacobianMethod::CentralDifference) {
        JacobianMethod::CentralDifference
    } else {
        JacobianMethod::Analytic
    };
    Ok(Jacobian {
        matrix,
        method,
        column_methods,
    })
}
