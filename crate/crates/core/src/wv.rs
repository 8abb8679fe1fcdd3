//! Haar MODWT wavelet coefficients and the unbiased wavelet variance
//! estimator, with chi-squared confidence intervals and a moving-block
//! bootstrap covariance.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::{psd_floor, rows_serde};
use crate::models::Replicate;
use crate::rng::StreamKey;

/// Largest scale count recommended for any data set.
pub const DEFAULT_MAX_SCALES: usize = 13;

/// `floor(log2 T) - 1`, the largest admissible `J` for a signal of length `T`.
pub fn max_scales(length: usize) -> usize {
    if length < 2 {
        return 0;
    }
    (usize::BITS - 1 - length.leading_zeros()) as usize - 1
}

/// `min(13, floor(log2 T) - 1)`.
pub fn default_scales(length: usize) -> usize {
    max_scales(length).min(DEFAULT_MAX_SCALES)
}

/// Default scale count shared by several replicates (minimum over them).
pub fn common_scales(lengths: &[usize]) -> usize {
    lengths.iter().map(|&t| default_scales(t)).min().unwrap_or(0)
}

pub fn scales(j: usize) -> Vec<u64> {
    (1..=j).map(|l| 1u64 << l).collect()
}

/// `ceil(T^(1/3))`.
pub fn default_block_len(length: usize) -> usize {
    let mut b = (length as f64).cbrt().round() as usize;
    while b.pow(3) < length {
        b += 1;
    }
    while b > 1 && (b - 1).pow(3) >= length {
        b -= 1;
    }
    b.max(1)
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!("non-finite sample at index {i}"))),
        None => Ok(()),
    }
}

/// Runs the Haar pyramid up to `levels`, handing each level's MODWT
/// coefficients (for `t = tau - 1 .. T - 1`) to `f`.
///
/// Each level's coefficient is the difference of two adjacent window sums
/// of length `tau / 2`; window sums double in length from level to level,
/// so the whole pyramid costs O(T) per level without global prefix sums.
fn for_each_level(x: &[f64], levels: usize, mut f: impl FnMut(usize, &[f64])) {
    let n = x.len();
    let mut win = x.to_vec();
    let mut coeffs = Vec::with_capacity(n);
    for level in 1..=levels {
        let half = 1usize << (level - 1);
        let tau = half * 2;
        if tau > n {
            break;
        }
        let inv = 1.0 / tau as f64;
        coeffs.clear();
        coeffs.extend((tau - 1..n).map(|t| (win[t] - win[t - half]) * inv));
        f(level, &coeffs);
        for t in (tau - 1..n).rev() {
            win[t] += win[t - half];
        }
    }
}

/// MODWT Haar coefficients of `x` at `level` (`tau = 2^level`).
///
/// `W_t = (sum_{l < tau/2} x_{t-l} - sum_{tau/2 <= l < tau} x_{t-l}) / tau`
/// for every `t` with a full filter window, so the output has
/// `T - tau + 1` entries.
pub fn haar_coefficients(x: &[f64], level: usize) -> Result<Vec<f64>> {
    if level == 0 || level >= usize::BITS as usize || (1usize << level) > x.len() {
        return Err(Error::Scale(format!(
            "level {level} needs 2^{level} <= T = {}",
            x.len()
        )));
    }
    check_finite(x)?;
    let mut out = Vec::new();
    for_each_level(x, level, |l, c| {
        if l == level {
            out = c.to_vec();
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMethod {
    /// Moving-block bootstrap.
    Mbb,
    /// Diagonal `2 nu^2 / edof` from the chi-squared approximation.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOptions {
    /// `None` means `ceil(T^(1/3))`.
    pub block_len: Option<usize>,
    pub n_boot: usize,
    pub key: StreamKey,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WvOptions {
    pub ci_level: f64,
    /// Without a bootstrap the covariance falls back to the diagonal
    /// chi-squared approximation.
    pub bootstrap: Option<BootstrapOptions>,
}

impl Default for WvOptions {
    fn default() -> Self {
        Self {
            ci_level: 0.95,
            bootstrap: None,
        }
    }
}

impl WvOptions {
    pub fn with_bootstrap(n_boot: usize, key: StreamKey) -> Self {
        Self {
            ci_level: 0.95,
            bootstrap: Some(BootstrapOptions {
                block_len: None,
                n_boot,
                key,
            }),
        }
    }
}

/// Empirical wavelet variance of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WVEstimate {
    pub scales: Vec<u64>,
    pub nu_hat: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub ci_level: f64,
    pub edof: Vec<f64>,
    pub m_j: Vec<usize>,
    #[serde(rename = "cov", with = "rows_serde")]
    pub cov_hat: DMatrix<f64>,
    pub cov_method: CovMethod,
    pub replicate_length: usize,
}

impl WVEstimate {
    pub fn n_scales(&self) -> usize {
        self.nu_hat.len()
    }

    /// Keeps the first `j` scales.
    pub fn truncated(&self, j: usize) -> Result<Self> {
        if j == 0 || j > self.n_scales() {
            return Err(Error::Scale(format!(
                "cannot truncate {} scales to {j}",
                self.n_scales()
            )));
        }
        Ok(Self {
            scales: self.scales[..j].to_vec(),
            nu_hat: self.nu_hat[..j].to_vec(),
            ci_low: self.ci_low[..j].to_vec(),
            ci_high: self.ci_high[..j].to_vec(),
            ci_level: self.ci_level,
            edof: self.edof[..j].to_vec(),
            m_j: self.m_j[..j].to_vec(),
            cov_hat: self.cov_hat.view((0, 0), (j, j)).into_owned(),
            cov_method: self.cov_method,
            replicate_length: self.replicate_length,
        })
    }

    /// Plot table with columns `scale,nu,lo,hi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scale", "nu", "lo", "hi"])?;
        for j in 0..self.n_scales() {
            w.write_record([
                self.scales[j].to_string(),
                self.nu_hat[j].to_string(),
                self.ci_low[j].to_string(),
                self.ci_high[j].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Chi-squared interval `[edof nu / q_hi, edof nu / q_lo]` at `level`.
pub fn chi2_interval(nu: f64, edof: f64, level: f64) -> (f64, f64) {
    let alpha = 1.0 - level;
    let chi = ChiSquared::new(edof).expect("edof >= 1");
    let q_lo = chi.inverse_cdf(alpha / 2.0);
    let q_hi = chi.inverse_cdf(1.0 - alpha / 2.0);
    (edof * nu / q_hi, edof * nu / q_lo)
}

fn check_scales(length: usize, j: usize) -> Result<()> {
    let max = max_scales(length);
    if j == 0 || j > max {
        return Err(Error::Scale(format!(
            "J = {j} outside 1..={max} for a signal of length {length}"
        )));
    }
    Ok(())
}

/// Unbiased MODWT wavelet variance over scales `2^1 .. 2^J`.
pub fn estimate_wv(x: &Replicate, j: usize, opts: &WvOptions) -> Result<WVEstimate> {
    let data = &x.samples;
    let n = data.len();
    check_scales(n, j)?;
    check_finite(data)?;
    if !(opts.ci_level > 0.0 && opts.ci_level < 1.0) {
        return Err(Error::Config(format!(
            "CI level must be in (0, 1), got {}",
            opts.ci_level
        )));
    }

    let mut nu_hat = vec![0.0; j];
    for_each_level(data, j, |level, c| {
        nu_hat[level - 1] = c.iter().map(|w| w * w).sum::<f64>() / c.len() as f64;
    });

    let scales = scales(j);
    let m_j: Vec<usize> = scales.iter().map(|&tau| n - tau as usize + 1).collect();
    let edof: Vec<f64> = m_j
        .iter()
        .zip(&scales)
        .map(|(&m, &tau)| (m as f64 / tau as f64).max(1.0))
        .collect();
    let (ci_low, ci_high): (Vec<f64>, Vec<f64>) = nu_hat
        .iter()
        .zip(&edof)
        .map(|(&nu, &e)| chi2_interval(nu, e, opts.ci_level))
        .unzip();

    let (cov_hat, cov_method) = match &opts.bootstrap {
        Some(b) => {
            let block = b.block_len.unwrap_or_else(|| default_block_len(n));
            (estimate_wv_cov(x, j, block, b.n_boot, b.key)?, CovMethod::Mbb)
        }
        None => (
            DMatrix::from_fn(j, j, |a, c| {
                if a == c {
                    2.0 * nu_hat[a] * nu_hat[a] / edof[a]
                } else {
                    0.0
                }
            }),
            CovMethod::Gaussian,
        ),
    };

    Ok(WVEstimate {
        scales,
        nu_hat,
        ci_low,
        ci_high,
        ci_level: opts.ci_level,
        edof,
        m_j,
        cov_hat,
        cov_method,
        replicate_length: n,
    })
}

/// Moving-block bootstrap covariance of the WV vector.
///
/// Blocks of `block_len` signal-time indices are drawn with replacement
/// until `T` indices are covered; each resample averages the squared
/// coefficients (computed once on the original signal) whose time index falls
/// in a drawn block. Resampling coefficient times rather than raw samples keeps
/// non-stationary components such as random walks free of artificial jumps at
/// block joins.
pub fn estimate_wv_cov(
    x: &Replicate,
    j: usize,
    block_len: usize,
    n_boot: usize,
    key: StreamKey,
) -> Result<DMatrix<f64>> {
    let data = &x.samples;
    let n = data.len();
    if block_len == 0 {
        return Err(Error::Config("block length must be >= 1".into()));
    }
    if n_boot < 2 {
        return Err(Error::Config(format!("n_boot must be >= 2, got {n_boot}")));
    }
    if n < block_len {
        return Err(Error::Size(format!(
            "signal length {n} shorter than block length {block_len}"
        )));
    }
    check_scales(n, j)?;
    check_finite(data)?;

    let n_blocks = n.div_ceil(block_len);
    let last_len = n - (n_blocks - 1) * block_len;
    let mut rng = key.rng();
    let starts: Vec<usize> = (0..n_boot * n_blocks)
        .map(|_| rng.random_range(0..=n - block_len))
        .collect();

    let mut draws = DMatrix::<f64>::zeros(n_boot, j);
    let mut prefix = Vec::with_capacity(n + 1);
    for_each_level(data, j, |level, c| {
        let tau = 1usize << level;
        let first = tau - 1;
        // prefix[i] = sum of W^2 over coefficient times < first + i.
        prefix.clear();
        prefix.push(0.0);
        let mut acc = 0.0;
        for w in c {
            acc += w * w;
            prefix.push(acc);
        }
        let full = prefix[c.len()] / c.len() as f64;
        for b in 0..n_boot {
            let mut sum = 0.0;
            let mut count = 0usize;
            for k in 0..n_blocks {
                let s = starts[b * n_blocks + k];
                let len = if k + 1 == n_blocks { last_len } else { block_len };
                let lo = s.max(first);
                let hi = s + len;
                if hi > lo {
                    sum += prefix[hi - first] - prefix[lo - first];
                    count += hi - lo;
                }
            }
            draws[(b, level - 1)] = if count > 0 { sum / count as f64 } else { full };
        }
    });

    let mean = draws.row_mean();
    let mut cov = DMatrix::<f64>::zeros(j, j);
    for b in 0..n_boot {
        let d = draws.row(b) - &mean;
        cov += d.transpose() * d;
    }
    cov /= (n_boot - 1) as f64;
    Ok(psd_floor(&cov))
}
