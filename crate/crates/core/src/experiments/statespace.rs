//! Mapping of a fitted error model onto Kalman-filter bias states.
//!
//! Parameters stay in per-sample units and the filter propagates once per
//! sensor sample, so no continuous-time conversion is needed. Correlation
//! times are reported in seconds for reference: `1 / ((1 - phi) rate_hz)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CompositeModel, LatentBlock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum AugmentedState {
    /// First-order Gauss-Markov bias `b' = phi b + w`, `Var(w) = q`.
    GaussMarkov {
        phi: f64,
        q: f64,
        stationary_variance: f64,
        correlation_time_s: f64,
    },
    /// Random-walk bias `b' = b + w`, `Var(w) = q`.
    RandomWalk { q: f64 },
    /// Deterministic ramp `b' = b + omega`.
    Drift { omega: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceSpec {
    pub rate_hz: f64,
    /// Per-sample white measurement-noise variance (zero without a WN block).
    pub white_noise_variance: f64,
    /// The same noise as a density, `sigma2 / rate_hz`.
    pub white_noise_density: f64,
    pub states: Vec<AugmentedState>,
}

impl StateSpaceSpec {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }
}

pub fn model_to_state_space(model: &CompositeModel, rate_hz: f64) -> Result<StateSpaceSpec> {
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(Error::Config(format!("rate must be > 0, got {rate_hz}")));
    }
    let mut white = 0.0;
    let mut states = Vec::new();
    for block in model.blocks() {
        match *block {
            LatentBlock::WhiteNoise { sigma2 } => white += sigma2,
            LatentBlock::Quantization { .. } => {
                return Err(Error::Unsupported(
                    "quantization noise has no Markov state-space form in this filter".into(),
                ))
            }
            LatentBlock::AutoRegressive { phi, eta2 } => states.push(AugmentedState::GaussMarkov {
                phi,
                q: eta2,
                stationary_variance: eta2 / (1.0 - phi * phi),
                correlation_time_s: 1.0 / ((1.0 - phi) * rate_hz),
            }),
            LatentBlock::RandomWalk { gamma2 } => {
                states.push(AugmentedState::RandomWalk { q: gamma2 })
            }
            LatentBlock::Drift { omega } => states.push(AugmentedState::Drift { omega }),
        }
    }
    Ok(StateSpaceSpec {
        rate_hz,
        white_noise_variance: white,
        white_noise_density: white / rate_hz,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_noise_only_has_no_states() {
        let m = CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 2.0 }]).unwrap();
        let s = model_to_state_space(&m, 100.0).unwrap();
        assert_eq!(s.n_states(), 0);
        assert_eq!(s.white_noise_variance, 2.0);
        assert!((s.white_noise_density - 0.02).abs() < 1e-15);
    }

    #[test]
    fn counts_augmented_states() {
        let m = CompositeModel::new(vec![
            LatentBlock::WhiteNoise { sigma2: 1.0 },
            LatentBlock::AutoRegressive { phi: 0.999, eta2: 1e-6 },
            LatentBlock::AutoRegressive { phi: 0.99, eta2: 1e-5 },
            LatentBlock::AutoRegressive { phi: 0.9, eta2: 1e-4 },
            LatentBlock::RandomWalk { gamma2: 1e-8 },
        ])
        .unwrap();
        assert_eq!(model_to_state_space(&m, 200.0).unwrap().n_states(), 4);
    }

    #[test]
    fn correlation_time_in_seconds() {
        let m = CompositeModel::new(vec![LatentBlock::AutoRegressive { phi: 0.999, eta2: 1e-6 }])
            .unwrap();
        let s = model_to_state_space(&m, 200.0).unwrap();
        let AugmentedState::GaussMarkov { correlation_time_s, .. } = s.states[0] else {
            panic!("expected a Gauss-Markov state");
        };
        assert!((correlation_time_s - 5.0).abs() < 1e-9);
    }

    #[test]
    fn quantization_is_unsupported() {
        let m = CompositeModel::new(vec![LatentBlock::Quantization { q2: 1.0 }]).unwrap();
        assert!(matches!(model_to_state_space(&m, 100.0), Err(Error::Unsupported(_))));
    }
}
