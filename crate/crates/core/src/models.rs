//! Latent noise blocks, composite models, internal sensor models and path
//! simulation.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// Minimum separation between the correlation parameters of two AR1 blocks.
pub const AR1_PHI_MIN_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "WN")]
    WhiteNoise,
    #[serde(rename = "QN")]
    Quantization,
    #[serde(rename = "AR1")]
    AutoRegressive,
    #[serde(rename = "RW")]
    RandomWalk,
    #[serde(rename = "DR")]
    Drift,
}

impl BlockKind {
    pub fn n_params(self) -> usize {
        match self {
            BlockKind::AutoRegressive => 2,
            _ => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            BlockKind::WhiteNoise => "WN",
            BlockKind::Quantization => "QN",
            BlockKind::AutoRegressive => "AR1",
            BlockKind::RandomWalk => "RW",
            BlockKind::Drift => "DR",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            BlockKind::WhiteNoise => &["sigma2"],
            BlockKind::Quantization => &["q2"],
            BlockKind::AutoRegressive => &["phi", "eta2"],
            BlockKind::RandomWalk => &["gamma2"],
            BlockKind::Drift => &["omega"],
        }
    }

    /// WV of these blocks is linear in their (single) parameter.
    pub fn is_linear(self) -> bool {
        matches!(
            self,
            BlockKind::WhiteNoise | BlockKind::Quantization | BlockKind::RandomWalk
        )
    }
}

/// One independent latent process of a composite error model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LatentBlock {
    #[serde(rename = "WN")]
    WhiteNoise { sigma2: f64 },
    #[serde(rename = "QN")]
    Quantization { q2: f64 },
    #[serde(rename = "AR1")]
    AutoRegressive { phi: f64, eta2: f64 },
    #[serde(rename = "RW")]
    RandomWalk { gamma2: f64 },
    #[serde(rename = "DR")]
    Drift { omega: f64 },
}

fn check_variance(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::ParameterDomain(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl LatentBlock {
    pub fn kind(&self) -> BlockKind {
        match self {
            LatentBlock::WhiteNoise { .. } => BlockKind::WhiteNoise,
            LatentBlock::Quantization { .. } => BlockKind::Quantization,
            LatentBlock::AutoRegressive { .. } => BlockKind::AutoRegressive,
            LatentBlock::RandomWalk { .. } => BlockKind::RandomWalk,
            LatentBlock::Drift { .. } => BlockKind::Drift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LatentBlock::WhiteNoise { sigma2 } => check_variance("WN sigma2", sigma2),
            LatentBlock::Quantization { q2 } => check_variance("QN q2", q2),
            LatentBlock::AutoRegressive { phi, eta2 } => {
                if !(phi > 0.0 && phi < 1.0) {
                    return Err(Error::ParameterDomain(format!(
                        "AR1 phi must lie strictly inside (0, 1), got {phi}"
                    )));
                }
                check_variance("AR1 eta2", eta2)
            }
            LatentBlock::RandomWalk { gamma2 } => check_variance("RW gamma2", gamma2),
            LatentBlock::Drift { omega } => {
                if omega.is_finite() {
                    Ok(())
                } else {
                    Err(Error::ParameterDomain(format!("DR omega must be finite, got {omega}")))
                }
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            LatentBlock::WhiteNoise { sigma2 } => vec![sigma2],
            LatentBlock::Quantization { q2 } => vec![q2],
            LatentBlock::AutoRegressive { phi, eta2 } => vec![phi, eta2],
            LatentBlock::RandomWalk { gamma2 } => vec![gamma2],
            LatentBlock::Drift { omega } => vec![omega],
        }
    }

    /// Builds a block of `kind` from its parameter slice (unvalidated).
    pub fn from_params(kind: BlockKind, p: &[f64]) -> Self {
        match kind {
            BlockKind::WhiteNoise => LatentBlock::WhiteNoise { sigma2: p[0] },
            BlockKind::Quantization => LatentBlock::Quantization { q2: p[0] },
            BlockKind::AutoRegressive => LatentBlock::AutoRegressive {
                phi: p[0],
                eta2: p[1],
            },
            BlockKind::RandomWalk => LatentBlock::RandomWalk { gamma2: p[0] },
            BlockKind::Drift => LatentBlock::Drift { omega: p[0] },
        }
    }
}

/// Ordered list of block kinds: the shape of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape(pub Vec<BlockKind>);

impl ModelShape {
    pub fn n_params(&self) -> usize {
        self.0.iter().map(|k| k.n_params()).sum()
    }

    pub fn is_linear(&self) -> bool {
        self.0.iter().all(|k| k.is_linear())
    }

    /// Parameter labels such as `AR1[1].phi`, in flattening order.
    pub fn param_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_params());
        for (i, kind) in self.0.iter().enumerate() {
            for name in kind.param_names() {
                out.push(format!("{}[{}].{}", kind.tag(), i, name));
            }
        }
        out
    }

    /// Offsets of each block's parameters in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.0
            .iter()
            .map(|k| {
                let o = off;
                off += k.n_params();
                o
            })
            .collect()
    }
}

/// A sum of independent latent blocks.
///
/// Invariants: at most one WN, QN, RW and DR block; AR1 blocks appear in
/// descending `phi` order with gaps larger than [`AR1_PHI_MIN_GAP`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct CompositeModel {
    blocks: Vec<LatentBlock>,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    blocks: Vec<LatentBlock>,
}

impl TryFrom<RawModel> for CompositeModel {
    type Error = Error;
    fn try_from(raw: RawModel) -> Result<Self> {
        CompositeModel::new(raw.blocks)
    }
}

impl From<CompositeModel> for RawModel {
    fn from(m: CompositeModel) -> Self {
        RawModel { blocks: m.blocks }
    }
}

impl CompositeModel {
    pub fn new(blocks: Vec<LatentBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Shape("a composite model needs at least one block".into()));
        }
        for kind in [
            BlockKind::WhiteNoise,
            BlockKind::Quantization,
            BlockKind::RandomWalk,
            BlockKind::Drift,
        ] {
            if blocks.iter().filter(|b| b.kind() == kind).count() > 1 {
                return Err(Error::Shape(format!(
                    "at most one {} block is identifiable",
                    kind.tag()
                )));
            }
        }
        for b in &blocks {
            b.validate()?;
        }
        let phis: Vec<f64> = blocks
            .iter()
            .filter_map(|b| match b {
                LatentBlock::AutoRegressive { phi, .. } => Some(*phi),
                _ => None,
            })
            .collect();
        for w in phis.windows(2) {
            if w[0] - w[1] <= AR1_PHI_MIN_GAP {
                return Err(Error::ParameterDomain(format!(
                    "AR1 blocks must be in descending phi order separated by more than \
                     {AR1_PHI_MIN_GAP}, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { blocks })
    }

    /// Like [`CompositeModel::new`] but first reorders AR1 parameter pairs
    /// (within the AR1 slots) by descending `phi`.
    pub fn canonical(mut blocks: Vec<LatentBlock>) -> Result<Self> {
        let slots: Vec<usize> = blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind() == BlockKind::AutoRegressive)
            .map(|(i, _)| i)
            .collect();
        let mut ar: Vec<LatentBlock> = slots.iter().map(|&i| blocks[i]).collect();
        ar.sort_by(|a, b| {
            let pa = a.params()[0];
            let pb = b.params()[0];
            pb.total_cmp(&pa)
        });
        for (slot, block) in slots.into_iter().zip(ar) {
            blocks[slot] = block;
        }
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[LatentBlock] {
        &self.blocks
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape(self.blocks.iter().map(|b| b.kind()).collect())
    }

    /// Parameter count `p`.
    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.kind().n_params()).sum()
    }

    /// Flat parameter vector in block declaration order, AR1 as `(phi, eta2)`.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    /// Rebuilds a model with the shape of `self` from a flat vector.
    pub fn unflatten(&self, theta: &[f64]) -> Result<Self> {
        Self::from_shape(&self.shape(), theta)
    }

    pub fn from_shape(shape: &ModelShape, theta: &[f64]) -> Result<Self> {
        if theta.len() != shape.n_params() {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, model expects {}",
                theta.len(),
                shape.n_params()
            )));
        }
        let mut blocks = Vec::with_capacity(shape.0.len());
        let mut off = 0;
        for &kind in &shape.0 {
            let n = kind.n_params();
            blocks.push(LatentBlock::from_params(kind, &theta[off..off + n]));
            off += n;
        }
        Self::new(blocks)
    }
}

/// Rescaled Beta law: `lower + Y (upper - lower)` with `Y ~ Beta(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaLaw {
    pub lower: f64,
    pub upper: f64,
    pub beta_a: f64,
    pub beta_b: f64,
}

impl BetaLaw {
    pub fn new(lower: f64, upper: f64, beta_a: f64, beta_b: f64) -> Result<Self> {
        let law = Self {
            lower,
            upper,
            beta_a,
            beta_b,
        };
        law.validate()?;
        Ok(law)
    }

    pub fn dirac(value: f64) -> Self {
        Self {
            lower: value,
            upper: value,
            beta_a: 1.0,
            beta_b: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower <= self.upper) {
            return Err(Error::ParameterDomain(format!(
                "rescaled Beta bounds must satisfy lower <= upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "Beta shape parameters must be > 0, got ({}, {})",
                self.beta_a, self.beta_b
            )));
        }
        Ok(())
    }

    pub fn is_dirac(&self) -> bool {
        self.lower == self.upper
    }

    pub fn mean(&self) -> f64 {
        self.lower + self.beta_a / (self.beta_a + self.beta_b) * (self.upper - self.lower)
    }

    pub fn variance(&self) -> f64 {
        let (a, b) = (self.beta_a, self.beta_b);
        let w = self.upper - self.lower;
        w * w * a * b / ((a + b) * (a + b) * (a + b + 1.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_dirac() {
            return self.lower;
        }
        // Shapes were validated, Beta::new cannot fail.
        let y: f64 = Beta::new(self.beta_a, self.beta_b)
            .expect("validated Beta shapes")
            .sample(rng);
        (self.lower + y * (self.upper - self.lower)).clamp(self.lower, self.upper)
    }
}

/// The distribution G of per-replicate parameters: independent rescaled Beta
/// marginals over the flat parameter vector of `template`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalSensorModel {
    pub template: CompositeModel,
    pub marginals: Vec<BetaLaw>,
}

impl InternalSensorModel {
    pub fn new(template: CompositeModel, marginals: Vec<BetaLaw>) -> Result<Self> {
        let g = Self {
            template,
            marginals,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.marginals.len() != self.template.n_params() {
            return Err(Error::Shape(format!(
                "internal sensor model has {} marginals, template has {} parameters",
                self.marginals.len(),
                self.template.n_params()
            )));
        }
        self.marginals.iter().try_for_each(BetaLaw::validate)
    }

    /// Point mass at `model`.
    pub fn dirac(model: &CompositeModel) -> Self {
        Self {
            template: model.clone(),
            marginals: model.flatten().into_iter().map(BetaLaw::dirac).collect(),
        }
    }

    /// θ° = E[ϑ], componentwise analytic mean.
    pub fn mean_vector(&self) -> Vec<f64> {
        self.marginals.iter().map(BetaLaw::mean).collect()
    }

    pub fn mean_model(&self) -> Result<CompositeModel> {
        self.template.unflatten(&self.mean_vector())
    }

    pub fn lower(&self) -> Vec<f64> {
        self.marginals.iter().map(|m| m.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.marginals.iter().map(|m| m.upper).collect()
    }
}

/// Draws `k` independent parameter sets from `g`; draw `i` uses stream
/// `key.child(i)`.
pub fn draw_parameters(
    g: &InternalSensorModel,
    k: usize,
    key: StreamKey,
) -> Result<Vec<CompositeModel>> {
    g.validate()?;
    (0..k)
        .map(|i| {
            let mut rng = key.child(i as u64).rng();
            let theta: Vec<f64> = g.marginals.iter().map(|m| m.sample(&mut rng)).collect();
            let shape = g.template.shape();
            let blocks = shape
                .0
                .iter()
                .zip(shape.offsets())
                .map(|(&kind, o)| LatentBlock::from_params(kind, &theta[o..o + kind.n_params()]))
                .collect();
            CompositeModel::canonical(blocks)
        })
        .collect()
}

/// One recorded (or simulated) error signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub samples: Vec<f64>,
    pub rate_hz: f64,
    pub label: String,
}

impl Replicate {
    pub fn new(samples: Vec<f64>, rate_hz: f64, label: impl Into<String>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Size(format!(
                "a replicate needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "sampling rate must be > 0, got {rate_hz}"
            )));
        }
        Ok(Self {
            samples,
            rate_hz,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Simulates one block; the composite path uses `key.child(block_index)`.
pub fn simulate_block(block: &LatentBlock, length: usize, key: StreamKey) -> Result<Vec<f64>> {
    block.validate()?;
    if length < 2 {
        return Err(Error::Size(format!("path length must be >= 2, got {length}")));
    }
    let mut rng = key.rng();
    let mut out = Vec::with_capacity(length);
    match *block {
        LatentBlock::WhiteNoise { sigma2 } => {
            let s = sigma2.sqrt();
            out.extend((0..length).map(|_| s * rng.sample::<f64, _>(StandardNormal)));
        }
        LatentBlock::Quantization { q2 } => {
            // Differenced uniform levels; the 1/sqrt(2) makes the marginal
            // variance of the block equal to q2.
            let half = (3.0 * q2).sqrt();
            let u = Uniform::new_inclusive(-half, half)
                .map_err(|e| Error::ParameterDomain(e.to_string()))?;
            let mut prev: f64 = u.sample(&mut rng);
            for _ in 0..length {
                let next: f64 = u.sample(&mut rng);
                out.push((next - prev) * std::f64::consts::FRAC_1_SQRT_2);
                prev = next;
            }
        }
        LatentBlock::AutoRegressive { phi, eta2 } => {
            let eta = eta2.sqrt();
            let mut x = (eta2 / (1.0 - phi * phi)).sqrt() * rng.sample::<f64, _>(StandardNormal);
            out.push(x);
            for _ in 1..length {
                x = phi * x + eta * rng.sample::<f64, _>(StandardNormal);
                out.push(x);
            }
        }
        LatentBlock::RandomWalk { gamma2 } => {
            let g = gamma2.sqrt();
            let mut x = 0.0;
            out.push(x);
            for _ in 1..length {
                x += g * rng.sample::<f64, _>(StandardNormal);
                out.push(x);
            }
        }
        LatentBlock::Drift { omega } => {
            out.extend((1..=length).map(|t| omega * t as f64));
        }
    }
    Ok(out)
}

/// Sample-wise sum of independently simulated block paths.
pub fn simulate_path(model: &CompositeModel, length: usize, key: StreamKey) -> Result<Replicate> {
    if length < 2 {
        return Err(Error::Size(format!("path length must be >= 2, got {length}")));
    }
    let mut total = vec![0.0; length];
    for (i, block) in model.blocks().iter().enumerate() {
        let path = simulate_block(block, length, key.child(i as u64))?;
        for (t, v) in total.iter_mut().zip(path) {
            *t += v;
        }
    }
    Replicate::new(total, 1.0, "simulated")
}
