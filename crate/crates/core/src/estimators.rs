//! Wavelet-variance moment matching: the single-signal GMWM and the
//! multi-signal AGMWM, AWV and MS-GMWM estimators.
//!
//! All estimators minimize an Ω-weighted quadratic distance between empirical
//! and model-implied WV over a transformed parameter space (log for
//! variances, scaled logit for AR1 `phi`) with a multi-start Nelder-Mead.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    equilibrated_inverse, min_eigenvalue, psd_floor, quad_form, regularized_inverse, rows_serde,
    symmetrize,
};
use crate::models::{BlockKind, CompositeModel, LatentBlock, ModelShape};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::rng::StreamKey;
use crate::theory::{self, block_wv, wv_into, JacobianMethod, JacobianMode, TheoreticalWV};
use crate::wv::WVEstimate;

/// Condition number above which `H = A' Ω A` is treated as singular.
pub const MAX_H_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GMWM")]
    Gmwm,
    #[serde(rename = "AGMWM")]
    Agmwm,
    #[serde(rename = "AWV")]
    Awv,
    #[serde(rename = "MSGMWM")]
    Msgmwm,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Gmwm => "gmwm",
            Method::Agmwm => "agmwm",
            Method::Awv => "awv",
            Method::Msgmwm => "msgmwm",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmwm" => Ok(Method::Gmwm),
            "agmwm" => Ok(Method::Agmwm),
            "awv" => Ok(Method::Awv),
            "msgmwm" | "ms-gmwm" => Ok(Method::Msgmwm),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Replicate weights `w_i = d_i T_i / sum_j T_j`, renormalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub d: Vec<f64>,
    pub lengths: Vec<usize>,
    pub w: Vec<f64>,
    /// Set when some weight exceeds `10 / K`.
    pub dominated: bool,
}

impl WeightScheme {
    pub fn k(&self) -> usize {
        self.w.len()
    }

    /// `1 / sum w_i^2`; equals `K` for uniform weights.
    pub fn k_effective(&self) -> f64 {
        1.0 / self.w.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn uniform_d(lengths: &[usize]) -> Result<Self> {
        compute_weights(lengths, &vec![1.0; lengths.len()])
    }
}

pub fn compute_weights(lengths: &[usize], d: &[f64]) -> Result<WeightScheme> {
    if lengths.is_empty() {
        return Err(Error::Shape("need at least one replicate".into()));
    }
    if lengths.len() != d.len() {
        return Err(Error::Shape(format!(
            "{} replicate lengths but {} user constants",
            lengths.len(),
            d.len()
        )));
    }
    if lengths.contains(&0) {
        return Err(Error::Size("replicate lengths must be >= 1".into()));
    }
    if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::DegenerateWeights("user constants must be finite and >= 0".into()));
    }
    let total: f64 = lengths.iter().map(|&t| t as f64).sum();
    let raw: Vec<f64> = lengths
        .iter()
        .zip(d)
        .map(|(&t, &di)| di * t as f64 / total)
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateWeights("all user constants are zero".into()));
    }
    let w: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    let k = w.len() as f64;
    let dominated = w.iter().any(|&v| v > 10.0 / k);
    if dominated {
        log::warn!("replicate weights are not O(1/K): max weight exceeds 10/K");
    }
    Ok(WeightScheme {
        d: d.to_vec(),
        lengths: lengths.to_vec(),
        w,
        dominated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    #[default]
    Identity,
    DiagInvVar,
    InvVar,
    Averaged,
}

impl FromStr for OmegaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "identity" => Ok(OmegaMode::Identity),
            "diag_inv_var" => Ok(OmegaMode::DiagInvVar),
            "inv_var" => Ok(OmegaMode::InvVar),
            "averaged" => Ok(OmegaMode::Averaged),
            other => Err(Error::Config(format!("unknown omega mode {other:?}"))),
        }
    }
}

/// Everything that defines an objective except the data: Ω, `J` and the
/// replicate weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub omega_mode: OmegaMode,
    #[serde(with = "rows_serde")]
    pub omega: DMatrix<f64>,
    pub j: usize,
    pub weights: WeightScheme,
}

impl ObjectiveSpec {
    pub fn identity(j: usize, weights: WeightScheme) -> Self {
        Self {
            omega_mode: OmegaMode::Identity,
            omega: DMatrix::identity(j, j),
            j,
            weights,
        }
    }

    /// Uses a fixed Ω; checks that it is symmetric positive definite.
    pub fn with_omega(
        omega: DMatrix<f64>,
        mode: OmegaMode,
        weights: WeightScheme,
    ) -> Result<Self> {
        let j = omega.nrows();
        if omega.ncols() != j {
            return Err(Error::Shape("omega must be square".into()));
        }
        check_spd(&omega)?;
        Ok(Self {
            omega_mode: mode,
            omega: symmetrize(&omega),
            j,
            weights,
        })
    }

    pub fn with_weights(&self, weights: WeightScheme) -> Self {
        Self {
            weights,
            ..self.clone()
        }
    }
}

fn check_spd(omega: &DMatrix<f64>) -> Result<()> {
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning("omega has non-finite entries".into()));
    }
    let eig = symmetrize(omega).symmetric_eigenvalues();
    let hi = eig.iter().copied().fold(0.0, f64::max);
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::Conditioning(format!(
            "omega is not positive definite (eigenvalues in [{lo:.3e}, {hi:.3e}])"
        )));
    }
    Ok(())
}

fn common_j(wv_list: &[WVEstimate]) -> Result<usize> {
    wv_list
        .iter()
        .map(WVEstimate::n_scales)
        .min()
        .ok_or_else(|| Error::Shape("need at least one WV estimate".into()))
}

fn truncated_cov(wv: &WVEstimate, j: usize) -> DMatrix<f64> {
    wv.cov_hat.view((0, 0), (j, j)).into_owned()
}

/// Weighted average of the replicate covariances `sum w_i V_i`.
pub fn averaged_cov(wv_list: &[WVEstimate], weights: &WeightScheme, j: usize) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(j, j);
    for (wv, w) in wv_list.iter().zip(&weights.w) {
        v += truncated_cov(wv, j) * *w;
    }
    v
}

/// Builds the weighting matrix for `mode` from per-replicate covariances.
pub fn resolve_omega(
    wv_list: &[WVEstimate],
    weights: &WeightScheme,
    mode: OmegaMode,
) -> Result<ObjectiveSpec> {
    let j = common_j(wv_list)?;
    if weights.k() != wv_list.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} replicates",
            weights.k(),
            wv_list.len()
        )));
    }
    let omega = match mode {
        OmegaMode::Identity => DMatrix::identity(j, j),
        OmegaMode::DiagInvVar => {
            let mut o = DMatrix::zeros(j, j);
            for (wv, w) in wv_list.iter().zip(&weights.w) {
                for r in 0..j {
                    let v = wv.cov_hat[(r, r)];
                    if !(v > 0.0) {
                        return Err(Error::Conditioning(format!(
                            "zero WV variance at scale {}",
                            wv.scales[r]
                        )));
                    }
                    o[(r, r)] += w / v;
                }
            }
            o
        }
        OmegaMode::InvVar => regularized_inverse(&averaged_cov(wv_list, weights, j), 1e-12)?,
        OmegaMode::Averaged => {
            let mut o = DMatrix::zeros(j, j);
            for (wv, w) in wv_list.iter().zip(&weights.w) {
                o += regularized_inverse(&truncated_cov(wv, j), 1e-12)? * *w;
            }
            o
        }
    };
    ObjectiveSpec::with_omega(omega, mode, weights.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Total starts: one heuristic plus `n_starts - 1` jittered copies.
    pub n_starts: usize,
    pub seed: u64,
    /// Θ box for every AR1 `phi`.
    pub phi_bounds: (f64, f64),
    /// Standard deviation of the start jitter in transformed coordinates.
    pub jitter: f64,
    pub nelder_mead: NelderMeadOptions,
    pub jacobian: JacobianMode,
    pub compute_covariance: bool,
    /// Additional starts tried before the heuristic ones (e.g. a warm start).
    pub extra_starts: Vec<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_starts: 10,
            seed: 0,
            phi_bounds: (0.9, 0.99999),
            jitter: 1.0,
            nelder_mead: NelderMeadOptions::default(),
            jacobian: JacobianMode::Auto,
            compute_covariance: true,
            extra_starts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    pub starts: usize,
    pub best_start: usize,
    pub converged: bool,
    /// Objective at each start point, in start order.
    pub start_objectives: Vec<f64>,
    pub jacobian_method: Option<JacobianMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    #[serde(rename = "theta")]
    pub theta_hat: CompositeModel,
    pub parameter_labels: Vec<String>,
    #[serde(rename = "objective")]
    pub objective_value: f64,
    /// Plug-in asymptotic covariance (`None` when not requested or `H` is
    /// singular; see `diagnostics.covariance_error`).
    #[serde(rename = "lambda", with = "opt_rows")]
    pub lambda_hat: Option<DMatrix<f64>>,
    pub implied_wv: TheoreticalWV,
    pub diagnostics: FitDiagnostics,
    pub weights: Vec<f64>,
    /// Individual GMWM fits ϑ̃_i (AGMWM only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replicate_fits: Vec<CompositeModel>,
}

mod opt_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(crate::linalg::to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Option::<Vec<Vec<f64>>>::deserialize(d)?
            .map(|r| crate::linalg::from_rows(&r).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Map between natural parameters and the unconstrained search space.
#[derive(Debug, Clone)]
struct Transform {
    kinds: Vec<(BlockKind, usize)>,
    phi_lo: f64,
    phi_hi: f64,
}

impl Transform {
    fn new(shape: &ModelShape, phi_bounds: (f64, f64)) -> Result<Self> {
        let (lo, hi) = phi_bounds;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "phi bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        let mut kinds = Vec::new();
        for &k in &shape.0 {
            for i in 0..k.n_params() {
                kinds.push((k, i));
            }
        }
        Ok(Self {
            kinds,
            phi_lo: lo,
            phi_hi: hi,
        })
    }

    fn is_phi(kind: BlockKind, i: usize) -> bool {
        kind == BlockKind::AutoRegressive && i == 0
    }

    fn to_internal(&self, theta: &[f64]) -> Vec<f64> {
        let width = self.phi_hi - self.phi_lo;
        self.kinds
            .iter()
            .zip(theta)
            .map(|(&(k, i), &v)| {
                if Self::is_phi(k, i) {
                    let u = ((v - self.phi_lo) / width).clamp(1e-9, 1.0 - 1e-9);
                    (u / (1.0 - u)).ln()
                } else {
                    v.abs().max(f64::MIN_POSITIVE).ln()
                }
            })
            .collect()
    }

    fn to_natural(&self, z: &[f64], out: &mut [f64]) {
        let width = self.phi_hi - self.phi_lo;
        for ((o, &(k, i)), &v) in out.iter_mut().zip(&self.kinds).zip(z) {
            *o = if Self::is_phi(k, i) {
                let u = 1.0 / (1.0 + (-v).exp());
                (self.phi_lo + width * u).clamp(self.phi_lo, self.phi_hi)
            } else {
                v.exp()
            };
        }
    }
}

/// Data the objective is matched against.
enum Target<'a> {
    /// `|| nu_bar - nu(theta) ||^2_Ω`.
    Average(&'a [f64]),
    /// `sum_i w_i || nu_i - nu(theta) ||^2_Ω`.
    WeightedSum {
        nus: &'a [Vec<f64>],
        w: &'a [f64],
    },
}

fn objective_at(
    shape: &ModelShape,
    scales: &[u64],
    omega: &DMatrix<f64>,
    target: &Target<'_>,
    theta: &[f64],
    nu: &mut [f64],
    diff: &mut [f64],
) -> f64 {
    wv_into(shape, theta, scales, nu);
    match target {
        Target::Average(bar) => {
            for ((d, b), n) in diff.iter_mut().zip(bar.iter()).zip(nu.iter()) {
                *d = b - n;
            }
            quad_form(diff, omega)
        }
        Target::WeightedSum { nus, w } => {
            let mut acc = 0.0;
            for (nu_i, wi) in nus.iter().zip(w.iter()) {
                for ((d, b), n) in diff.iter_mut().zip(nu_i).zip(nu.iter()) {
                    *d = b - n;
                }
                acc += wi * quad_form(diff, omega);
            }
            acc
        }
    }
}

/// Explicit GMWM solution `(W' Ω W)^-1 W' Ω nu` for models whose WV is
/// linear in the parameters (WN, QN, RW). `None` for other shapes.
pub fn linear_gmwm_solution(
    shape: &ModelShape,
    scales: &[u64],
    omega: &DMatrix<f64>,
    nu: &[f64],
) -> Option<Vec<f64>> {
    if !shape.is_linear() {
        return None;
    }
    let j = scales.len();
    let p = shape.n_params();
    let w = DMatrix::from_fn(j, p, |r, c| block_wv(shape.0[c], &[1.0], scales[r]));
    let wt_omega = w.transpose() * omega;
    let lhs = &wt_omega * &w;
    let rhs = wt_omega * DVector::from_column_slice(nu);
    let (inv, _) = equilibrated_inverse(&lhs).ok()?;
    Some((inv * rhs).iter().copied().collect())
}

/// Heuristic start: WN from the first scale, RW from the last-scale level,
/// AR1 `phi = 1 - 1/tau` at the elbow of the residual WV and `eta2` matching
/// the residual amplitude there.
pub fn heuristic_start(
    shape: &ModelShape,
    scales: &[u64],
    omega: &DMatrix<f64>,
    nu: &[f64],
    phi_bounds: (f64, f64),
) -> Result<Vec<f64>> {
    let j = nu.len();
    let top = nu.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) || nu.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cannot fit a WV that is identically zero".into()));
    }
    let floor = top * 1e-12;
    let nu: Vec<f64> = nu.iter().map(|v| v.max(floor)).collect();
    let tau: Vec<f64> = scales.iter().map(|&t| t as f64).collect();

    if let Some(sol) = linear_gmwm_solution(shape, scales, omega, &nu) {
        if sol.iter().all(|v| *v > 0.0) {
            return Ok(sol);
        }
    }

    let has = |k: BlockKind| shape.0.contains(&k);
    let n_ar = shape.0.iter().filter(|&&k| k == BlockKind::AutoRegressive).count();
    let sigma2 = tau[0] * nu[0] * if has(BlockKind::Quantization) { 0.5 } else { 1.0 };
    let residual: Vec<f64> = (0..j)
        .map(|r| {
            let wn = if has(BlockKind::WhiteNoise) { sigma2 / tau[r] } else { 0.0 };
            (nu[r] - wn).max(1e-3 * nu[r])
        })
        .collect();
    let elbow = (0..j)
        .max_by(|&a, &b| residual[a].total_cmp(&residual[b]))
        .unwrap_or(0);
    let rising = j >= 2 && nu[j - 1] > nu[j - 2];

    let (lo, hi) = phi_bounds;
    let margin = 0.01 * (hi - lo);
    let mut theta = Vec::with_capacity(shape.n_params());
    let mut ar_index = 0;
    for &kind in &shape.0 {
        match kind {
            BlockKind::WhiteNoise => theta.push(sigma2),
            BlockKind::Quantization => theta.push((tau[0] * tau[0] * nu[0] / 3.0) * 0.5),
            BlockKind::RandomWalk => {
                let full = 12.0 * nu[j - 1] / tau[j - 1];
                theta.push(if rising { 0.5 * full } else { 1e-3 * full });
            }
            BlockKind::Drift => theta.push(0.3 * 4.0 * nu[j - 1].sqrt() / tau[j - 1]),
            BlockKind::AutoRegressive => {
                let e = elbow.saturating_sub(2 * ar_index);
                let phi = (1.0 - 1.0 / tau[e]).clamp(lo + margin, hi - margin);
                let unit = block_wv(BlockKind::AutoRegressive, &[phi, 1.0], scales[e]);
                theta.push(phi);
                theta.push((residual[e] / unit / n_ar as f64).max(floor));
                ar_index += 1;
            }
        }
    }
    Ok(theta)
}

/// Natural-space starts: extra starts, the heuristic, then jittered copies of
/// the heuristic.
pub fn multi_starts(
    shape: &ModelShape,
    scales: &[u64],
    omega: &DMatrix<f64>,
    nu_bar: &[f64],
    opts: &FitOptions,
) -> Result<Vec<Vec<f64>>> {
    let t = Transform::new(shape, opts.phi_bounds)?;
    let base = heuristic_start(shape, scales, omega, nu_bar, opts.phi_bounds)?;
    let z0 = t.to_internal(&base);
    let mut starts: Vec<Vec<f64>> = opts.extra_starts.clone();
    starts.push(base);
    let key = StreamKey::new(opts.seed).child(0x5747_4152);
    for s in 1..opts.n_starts.max(1) {
        let mut rng = key.child(s as u64).rng();
        let z: Vec<f64> = z0
            .iter()
            .map(|v| v + opts.jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut theta = vec![0.0; z.len()];
        t.to_natural(&z, &mut theta);
        starts.push(theta);
    }
    Ok(starts)
}

struct Minimum {
    theta: Vec<f64>,
    value: f64,
    diagnostics: FitDiagnostics,
}

fn minimize(
    shape: &ModelShape,
    scales: &[u64],
    omega: &DMatrix<f64>,
    target: Target<'_>,
    starts: &[Vec<f64>],
    opts: &FitOptions,
) -> Result<Minimum> {
    let t = Transform::new(shape, opts.phi_bounds)?;
    let p = shape.n_params();
    let j = scales.len();
    let mut nu = vec![0.0; j];
    let mut diff = vec![0.0; j];
    let mut theta = vec![0.0; p];

    let mut best: Option<(Vec<f64>, f64, bool, usize)> = None;
    let mut iterations = 0;
    let mut evaluations = 0;
    let mut start_objectives = Vec::with_capacity(starts.len());
    for (s, start) in starts.iter().enumerate() {
        if start.len() != p {
            return Err(Error::Shape(format!(
                "start {s} has {} parameters, model has {p}",
                start.len()
            )));
        }
        let z0 = t.to_internal(start);
        // The reported start objective is taken at the (box-projected) point
        // the search actually starts from.
        t.to_natural(&z0, &mut theta);
        start_objectives.push(objective_at(
            shape, scales, omega, &target, &theta, &mut nu, &mut diff,
        ));
        let res = nelder_mead(
            |z: &[f64]| {
                t.to_natural(z, &mut theta);
                objective_at(shape, scales, omega, &target, &theta, &mut nu, &mut diff)
            },
            &z0,
            &opts.nelder_mead,
        );
        iterations += res.iterations;
        evaluations += res.evals;
        if best.as_ref().is_none_or(|b| res.f < b.1) {
            best = Some((res.x, res.f, res.converged, s));
        }
    }
    let (z, value, converged, best_start) =
        best.ok_or_else(|| Error::Config("no starting values".into()))?;
    let mut out = vec![0.0; p];
    t.to_natural(&z, &mut out);
    Ok(Minimum {
        theta: out,
        value,
        diagnostics: FitDiagnostics {
            iterations,
            evaluations,
            starts: starts.len(),
            best_start,
            converged,
            start_objectives,
            jacobian_method: None,
            covariance_error: None,
        },
    })
}

fn model_from_theta(template: &CompositeModel, theta: &[f64]) -> Result<CompositeModel> {
    let shape = template.shape();
    let blocks: Vec<LatentBlock> = shape
        .0
        .iter()
        .zip(shape.offsets())
        .map(|(&k, o)| LatentBlock::from_params(k, &theta[o..o + k.n_params()]))
        .collect();
    CompositeModel::canonical(blocks).map_err(|e| Error::Numerical(format!("fitted model: {e}")))
}

/// Plug-in sandwich `H^-1 A' Ω V Ω A H^-1` with `H = A' Ω A` at `model`.
pub fn sandwich(
    model: &CompositeModel,
    omega: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mode: JacobianMode,
) -> Result<(DMatrix<f64>, JacobianMethod)> {
    let j = omega.nrows();
    if v.nrows() != j || v.ncols() != j {
        return Err(Error::Shape(format!(
            "covariance is {}x{}, omega is {j}x{j}",
            v.nrows(),
            v.ncols()
        )));
    }
    let jac = theory::wv_jacobian(model, j, mode)?;
    let a = &jac.matrix;
    let at_omega = a.transpose() * omega;
    let h = &at_omega * a;
    let (h_inv, condition) = equilibrated_inverse(&h)?;
    if condition > MAX_H_CONDITION {
        return Err(Error::SingularHessian { condition });
    }
    let middle = &at_omega * v * at_omega.transpose();
    let lambda = &h_inv * middle * &h_inv;
    Ok((psd_floor(&symmetrize(&lambda)), jac.method))
}

/// Λ̂₀ of the AWV / MS-GMWM fit: the sandwich at θ̂ with `V̄ = sum w_i V̂_i`.
pub fn asymptotic_covariance(
    fit: &FitResult,
    wv_list: &[WVEstimate],
    spec: &ObjectiveSpec,
) -> Result<DMatrix<f64>> {
    let v_bar = averaged_cov(wv_list, &spec.weights, spec.j);
    Ok(sandwich(&fit.theta_hat, &spec.omega, &v_bar, JacobianMode::Auto)?.0)
}

fn check_inputs(wv_list: &[WVEstimate], template: &CompositeModel, spec: &ObjectiveSpec) -> Result<()> {
    if wv_list.is_empty() {
        return Err(Error::Shape("need at least one WV estimate".into()));
    }
    let j_min = common_j(wv_list)?;
    if spec.j > j_min {
        return Err(Error::Scale(format!(
            "objective uses {} scales, shortest estimate has {j_min}",
            spec.j
        )));
    }
    if spec.omega.nrows() != spec.j || spec.omega.ncols() != spec.j {
        return Err(Error::Shape("omega does not match J".into()));
    }
    if spec.weights.k() != wv_list.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} replicates",
            spec.weights.k(),
            wv_list.len()
        )));
    }
    if spec.j < template.n_params() {
        return Err(Error::UnderIdentified {
            scales: spec.j,
            params: template.n_params(),
        });
    }
    Ok(())
}

fn weighted_average_nu(wv_list: &[WVEstimate], w: &[f64], j: usize) -> Vec<f64> {
    let mut bar = vec![0.0; j];
    for (wv, wi) in wv_list.iter().zip(w) {
        for (b, v) in bar.iter_mut().zip(&wv.nu_hat[..j]) {
            *b += wi * v;
        }
    }
    bar
}

fn finish(
    method: Method,
    template: &CompositeModel,
    min: Minimum,
    spec: &ObjectiveSpec,
    v: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let theta_hat = model_from_theta(template, &min.theta)?;
    let implied_wv = theory::theoretical_wv(&theta_hat, spec.j)?;
    let mut diagnostics = min.diagnostics;
    let lambda_hat = if opts.compute_covariance {
        match sandwich(&theta_hat, &spec.omega, v, opts.jacobian) {
            Ok((l, m)) => {
                diagnostics.jacobian_method = Some(m);
                Some(l)
            }
            Err(e) if e.is_numerical() => {
                diagnostics.covariance_error = Some(e.to_string());
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let fit = FitResult {
        method,
        parameter_labels: theta_hat.shape().param_labels(),
        theta_hat,
        objective_value: min.value,
        lambda_hat,
        implied_wv,
        diagnostics,
        weights: spec.weights.w.clone(),
        replicate_fits: Vec::new(),
    };
    if !fit.diagnostics.converged {
        return Err(Error::Convergence {
            message: format!(
                "no start converged within {} evaluations",
                opts.nelder_mead.max_evals
            ),
            best: Some(Box::new(fit)),
        });
    }
    Ok(fit)
}

/// Single-signal GMWM.
pub fn gmwm_fit(
    wv: &WVEstimate,
    template: &CompositeModel,
    spec: &ObjectiveSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    let single = spec.with_weights(WeightScheme::uniform_d(&[wv.replicate_length])?);
    let mut fit = awv_fit(std::slice::from_ref(wv), template, &single, opts)?;
    fit.method = Method::Gmwm;
    Ok(fit)
}

/// AWV: GMWM on the weighted average WV `sum w_i nu_i`.
pub fn awv_fit(
    wv_list: &[WVEstimate],
    template: &CompositeModel,
    spec: &ObjectiveSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_inputs(wv_list, template, spec)?;
    let shape = template.shape();
    let scales = crate::wv::scales(spec.j);
    let bar = weighted_average_nu(wv_list, &spec.weights.w, spec.j);
    let starts = multi_starts(&shape, &scales, &spec.omega, &bar, opts)?;
    let min = minimize(&shape, &scales, &spec.omega, Target::Average(&bar), &starts, opts)?;
    let v_bar = averaged_cov(wv_list, &spec.weights, spec.j);
    finish(Method::Awv, template, min, spec, &v_bar, opts)
}

/// MS-GMWM: minimizes `sum_i w_i || nu_i - nu(theta) ||^2_Ω` directly, from
/// the same starts the AWV uses.
pub fn msgmwm_fit(
    wv_list: &[WVEstimate],
    template: &CompositeModel,
    spec: &ObjectiveSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_inputs(wv_list, template, spec)?;
    let shape = template.shape();
    let scales = crate::wv::scales(spec.j);
    let bar = weighted_average_nu(wv_list, &spec.weights.w, spec.j);
    let starts = multi_starts(&shape, &scales, &spec.omega, &bar, opts)?;
    let nus: Vec<Vec<f64>> = wv_list.iter().map(|w| w.nu_hat[..spec.j].to_vec()).collect();
    let min = minimize(
        &shape,
        &scales,
        &spec.omega,
        Target::WeightedSum {
            nus: &nus,
            w: &spec.weights.w,
        },
        &starts,
        opts,
    )?;
    let v_bar = averaged_cov(wv_list, &spec.weights, spec.j);
    finish(Method::Msgmwm, template, min, spec, &v_bar, opts)
}

/// Fits `template` to a fixed WV vector `nu` (scales `2^1 .. 2^J`) under
/// `omega`. Returns the fitted model and the attained objective.
pub fn match_wv(
    template: &CompositeModel,
    nu: &[f64],
    omega: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<(CompositeModel, f64, FitDiagnostics)> {
    let j = nu.len();
    if omega.nrows() != j || omega.ncols() != j {
        return Err(Error::Shape("omega does not match the WV length".into()));
    }
    if j < template.n_params() {
        return Err(Error::UnderIdentified {
            scales: j,
            params: template.n_params(),
        });
    }
    let shape = template.shape();
    let scales = crate::wv::scales(j);
    let starts = multi_starts(&shape, &scales, omega, nu, opts)?;
    let min = minimize(&shape, &scales, omega, Target::Average(nu), &starts, opts)?;
    if !min.diagnostics.converged {
        return Err(Error::Convergence {
            message: "WV matching did not converge".into(),
            best: None,
        });
    }
    Ok((model_from_theta(template, &min.theta)?, min.value, min.diagnostics))
}

/// Evaluates the MS-GMWM objective at `model`.
pub fn msgmwm_objective(wv_list: &[WVEstimate], model: &CompositeModel, spec: &ObjectiveSpec) -> f64 {
    let nu = theory::theoretical_wv(model, spec.j).map(|t| t.nu);
    let Ok(nu) = nu else { return f64::NAN };
    wv_list
        .iter()
        .zip(&spec.weights.w)
        .map(|(wv, w)| {
            let d: Vec<f64> = wv.nu_hat[..spec.j].iter().zip(&nu).map(|(a, b)| a - b).collect();
            w * quad_form(&d, &spec.omega)
        })
        .sum()
}

/// Evaluates the AWV objective at `model`.
pub fn awv_objective(wv_list: &[WVEstimate], model: &CompositeModel, spec: &ObjectiveSpec) -> f64 {
    let Ok(nu) = theory::theoretical_wv(model, spec.j).map(|t| t.nu) else {
        return f64::NAN;
    };
    let bar = weighted_average_nu(wv_list, &spec.weights.w, spec.j);
    let d: Vec<f64> = bar.iter().zip(&nu).map(|(a, b)| a - b).collect();
    quad_form(&d, &spec.omega)
}

/// AGMWM: weighted average of individual GMWM fits in natural parameter
/// space. Λ̂° is the weighted average of the individual sandwiches.
pub fn agmwm_fit(replicate_fits: &[FitResult], weights: &WeightScheme) -> Result<FitResult> {
    let first = replicate_fits
        .first()
        .ok_or_else(|| Error::Shape("AGMWM needs at least one replicate fit".into()))?;
    let shape = first.theta_hat.shape();
    if replicate_fits.iter().any(|f| f.theta_hat.shape() != shape) {
        return Err(Error::Shape("replicate fits use different templates".into()));
    }
    if weights.k() != replicate_fits.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} fits",
            weights.k(),
            replicate_fits.len()
        )));
    }
    let p = shape.n_params();
    let mut theta = vec![0.0; p];
    for (f, w) in replicate_fits.iter().zip(&weights.w) {
        for (t, v) in theta.iter_mut().zip(f.theta_hat.flatten()) {
            *t += w * v;
        }
    }
    let theta_hat = model_from_theta(&first.theta_hat, &theta)?;
    let j = first.implied_wv.nu.len();
    let implied_wv = theory::theoretical_wv(&theta_hat, j)?;
    let lambda_hat = replicate_fits
        .iter()
        .zip(&weights.w)
        .try_fold(DMatrix::zeros(p, p), |acc, (f, w)| {
            f.lambda_hat.as_ref().map(|l| acc + l * *w)
        });
    let objective_value = replicate_fits
        .iter()
        .zip(&weights.w)
        .map(|(f, w)| w * f.objective_value)
        .sum();
    let diagnostics = FitDiagnostics {
        iterations: replicate_fits.iter().map(|f| f.diagnostics.iterations).sum(),
        evaluations: replicate_fits.iter().map(|f| f.diagnostics.evaluations).sum(),
        starts: replicate_fits.iter().map(|f| f.diagnostics.starts).sum(),
        best_start: 0,
        converged: replicate_fits.iter().all(|f| f.diagnostics.converged),
        start_objectives: Vec::new(),
        jacobian_method: first.diagnostics.jacobian_method,
        covariance_error: replicate_fits
            .iter()
            .find_map(|f| f.diagnostics.covariance_error.clone()),
    };
    Ok(FitResult {
        method: Method::Agmwm,
        parameter_labels: theta_hat.shape().param_labels(),
        theta_hat,
        objective_value,
        lambda_hat: lambda_hat.map(|l| psd_floor(&symmetrize(&l))),
        implied_wv,
        diagnostics,
        weights: weights.w.clone(),
        replicate_fits: replicate_fits.iter().map(|f| f.theta_hat.clone()).collect(),
    })
}

/// Individual GMWM fits of each replicate (in parallel), then AGMWM.
pub fn agmwm_fit_wvs(
    wv_list: &[WVEstimate],
    template: &CompositeModel,
    spec: &ObjectiveSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_inputs(wv_list, template, spec)?;
    let fits: Vec<FitResult> = wv_list
        .par_iter()
        .map(|wv| {
            let trimmed = wv.truncated(spec.j)?;
            gmwm_fit(&trimmed, template, spec, opts)
        })
        .collect::<Result<_>>()?;
    agmwm_fit(&fits, &spec.weights)
}

/// Dispatches to the estimator named by `method`.
pub fn fit(
    method: Method,
    wv_list: &[WVEstimate],
    template: &CompositeModel,
    spec: &ObjectiveSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    match method {
        Method::Gmwm => {
            if wv_list.len() != 1 {
                return Err(Error::Config(format!(
                    "GMWM takes exactly one signal, got {}",
                    wv_list.len()
                )));
            }
            gmwm_fit(&wv_list[0], template, spec, opts)
        }
        Method::Agmwm => agmwm_fit_wvs(wv_list, template, spec, opts),
        Method::Awv => awv_fit(wv_list, template, spec, opts),
        Method::Msgmwm => msgmwm_fit(wv_list, template, spec, opts),
    }
}

/// Smallest eigenvalue of Ω relative to its largest.
pub fn omega_conditioning(spec: &ObjectiveSpec) -> f64 {
    let lo = min_eigenvalue(&spec.omega);
    let hi = symmetrize(&spec.omega)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(0.0, f64::max);
    lo / hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wv::CovMethod;

    fn synthetic(model: &CompositeModel, j: usize, length: usize) -> WVEstimate {
        let t = theory::theoretical_wv(model, j).unwrap();
        let m_j: Vec<usize> = t.scales.iter().map(|&s| length - s as usize + 1).collect();
        let edof: Vec<f64> = m_j.iter().zip(&t.scales).map(|(&m, &s)| m as f64 / s as f64).collect();
        WVEstimate {
            scales: t.scales.clone(),
            ci_low: t.nu.clone(),
            ci_high: t.nu.clone(),
            ci_level: 0.95,
            cov_hat: DMatrix::from_fn(j, j, |a, b| {
                if a == b {
                    2.0 * t.nu[a] * t.nu[a] / edof[a]
                } else {
                    0.0
                }
            }),
            cov_method: CovMethod::Gaussian,
            nu_hat: t.nu,
            edof,
            m_j,
            replicate_length: length,
        }
    }

    #[test]
    fn weights_examples() {
        let w = compute_weights(&[10, 30], &[1.0, 1.0]).unwrap();
        assert_eq!(w.w, vec![0.25, 0.75]);
        let w = compute_weights(&[10, 10], &[1.0, 3.0]).unwrap();
        assert!((w.w[0] - 0.25).abs() < 1e-15 && (w.w[1] - 0.75).abs() < 1e-15);
        let w = compute_weights(&[5, 5, 5, 5], &[1.0; 4]).unwrap();
        assert!(w.w.iter().all(|&v| v == 0.25));
        assert!(matches!(
            compute_weights(&[5, 5], &[0.0, 0.0]),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn dominated_weights_are_flagged() {
        let mut d = vec![1e-6; 30];
        d[0] = 1.0;
        let w = compute_weights(&vec![100; 30], &d).unwrap();
        assert!(w.dominated);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("AWV".parse::<Method>().unwrap(), Method::Awv);
        assert!("nope".parse::<Method>().is_err());
        assert_eq!("diag_inv_var".parse::<OmegaMode>().unwrap(), OmegaMode::DiagInvVar);
    }

    #[test]
    fn omega_modes() {
        let m = CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 1.0 }]).unwrap();
        let mut a = synthetic(&m, 2, 1000);
        let mut b = a.clone();
        a.cov_hat = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]));
        b.cov_hat = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / 3.0, 0.25]));
        let w = WeightScheme::uniform_d(&[1000, 1000]).unwrap();
        let id = resolve_omega(&[a.clone(), b.clone()], &w, OmegaMode::Identity).unwrap();
        assert_eq!(id.omega, DMatrix::identity(2, 2));
        // Ω_1 = diag(1, 2), Ω_2 = diag(3, 4) -> average diag(2, 3).
        let avg = resolve_omega(&[a.clone(), b.clone()], &w, OmegaMode::Averaged).unwrap();
        assert!((avg.omega.clone() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).abs().max() < 1e-12);
        let single = resolve_omega(
            std::slice::from_ref(&a),
            &WeightScheme::uniform_d(&[1000]).unwrap(),
            OmegaMode::Averaged,
        )
        .unwrap();
        assert!((single.omega[(1, 1)] - 2.0).abs() < 1e-12);
        let mut zero = a.clone();
        zero.cov_hat = DMatrix::zeros(2, 2);
        assert!(matches!(
            resolve_omega(&[zero], &WeightScheme::uniform_d(&[1000]).unwrap(), OmegaMode::InvVar),
            Err(Error::Conditioning(_))
        ));
    }

    #[test]
    fn zero_residual_fixed_point() {
        let truth = CompositeModel::new(vec![
            LatentBlock::WhiteNoise { sigma2: 2.0 },
            LatentBlock::RandomWalk { gamma2: 1e-3 },
        ])
        .unwrap();
        let wv = synthetic(&truth, 8, 100_000);
        let spec = ObjectiveSpec::identity(8, WeightScheme::uniform_d(&[100_000]).unwrap());
        let fit = gmwm_fit(&wv, &truth, &spec, &FitOptions::default()).unwrap();
        for (a, b) in fit.theta_hat.flatten().iter().zip(truth.flatten()) {
            assert!((a - b).abs() < 1e-6 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_residual_ar1() {
        let truth = CompositeModel::new(vec![
            LatentBlock::WhiteNoise { sigma2: 1e-4 },
            LatentBlock::AutoRegressive { phi: 0.995, eta2: 1e-8 },
        ])
        .unwrap();
        let wv = synthetic(&truth, 12, 100_000);
        let spec = ObjectiveSpec::identity(12, WeightScheme::uniform_d(&[100_000]).unwrap());
        let fit = gmwm_fit(&wv, &truth, &spec, &FitOptions::default()).unwrap();
        for (a, b) in fit.theta_hat.flatten().iter().zip(truth.flatten()) {
            assert!((a - b).abs() < 1e-6 * b, "{a} vs {b}");
        }
        assert!(fit
            .diagnostics
            .start_objectives
            .iter()
            .all(|&s| fit.objective_value <= s));
    }

    #[test]
    fn under_identified_rejected() {
        let truth = CompositeModel::new(vec![
            LatentBlock::WhiteNoise { sigma2: 1.0 },
            LatentBlock::AutoRegressive { phi: 0.95, eta2: 0.1 },
            LatentBlock::RandomWalk { gamma2: 1e-3 },
        ])
        .unwrap();
        let wv = synthetic(&truth, 2, 1000);
        let spec = ObjectiveSpec::identity(2, WeightScheme::uniform_d(&[1000]).unwrap());
        assert!(matches!(
            gmwm_fit(&wv, &truth, &spec, &FitOptions::default()),
            Err(Error::UnderIdentified { scales: 2, params: 4 })
        ));
    }

    #[test]
    fn agmwm_arithmetic() {
        let template = CompositeModel::new(vec![LatentBlock::AutoRegressive { phi: 0.95, eta2: 1.0 }])
            .unwrap();
        let wv = synthetic(&template, 4, 1000);
        let spec = ObjectiveSpec::identity(4, WeightScheme::uniform_d(&[1000]).unwrap());
        let base = gmwm_fit(&wv, &template, &spec, &FitOptions::default()).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        a.theta_hat = CompositeModel::new(vec![LatentBlock::AutoRegressive { phi: 0.5, eta2: 1.0 }]).unwrap();
        b.theta_hat = CompositeModel::new(vec![LatentBlock::AutoRegressive { phi: 0.7, eta2: 3.0 }]).unwrap();
        let w = WeightScheme::uniform_d(&[10, 10]).unwrap();
        let avg = agmwm_fit(&[a, b], &w).unwrap();
        let th = avg.theta_hat.flatten();
        assert!((th[0] - 0.6).abs() < 1e-15 && (th[1] - 2.0).abs() < 1e-15);
        assert_eq!(avg.replicate_fits.len(), 2);
    }

    #[test]
    fn agmwm_rejects_mixed_templates() {
        let t1 = CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 1.0 }]).unwrap();
        let t2 = CompositeModel::new(vec![LatentBlock::RandomWalk { gamma2: 1.0 }]).unwrap();
        let spec = ObjectiveSpec::identity(3, WeightScheme::uniform_d(&[1000]).unwrap());
        let f1 = gmwm_fit(&synthetic(&t1, 3, 1000), &t1, &spec, &FitOptions::default()).unwrap();
        let f2 = gmwm_fit(&synthetic(&t2, 3, 1000), &t2, &spec, &FitOptions::default()).unwrap();
        let w = WeightScheme::uniform_d(&[10, 10]).unwrap();
        assert!(matches!(agmwm_fit(&[f1, f2], &w), Err(Error::Shape(_))));
    }

    #[test]
    fn sandwich_reduces_under_inverse_covariance_weighting() {
        let m = CompositeModel::new(vec![
            LatentBlock::WhiteNoise { sigma2: 1.0 },
            LatentBlock::AutoRegressive { phi: 0.97, eta2: 0.01 },
        ])
        .unwrap();
        let j = 6;
        let v = DMatrix::from_fn(j, j, |a, b| {
            0.3f64.powi((a as i32 - b as i32).abs()) * 1e-3 / (1 + a.min(b)) as f64
        });
        let omega = regularized_inverse(&v, 1e-14).unwrap();
        let (lambda, _) = sandwich(&m, &omega, &v, JacobianMode::Auto).unwrap();
        let a = theory::wv_jacobian(&m, j, JacobianMode::Auto).unwrap().matrix;
        let (efficient, _) = equilibrated_inverse(&(a.transpose() * &omega * &a)).unwrap();
        let rel = (lambda.clone() - &efficient).abs().max() / efficient.abs().max();
        assert!(rel < 1e-8, "{rel}");
        let (zero, _) = sandwich(&m, &omega, &DMatrix::zeros(j, j), JacobianMode::Auto).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }
}
