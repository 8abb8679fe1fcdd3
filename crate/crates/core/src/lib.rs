//! Calibration of inertial-sensor stochastic error models from multiple
//! replicates using wavelet-variance moment matching.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod estimators;
pub mod experiments;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod rng;
pub mod theory;
pub mod wv;

pub use error::{Error, Result};
pub use estimators::{
    agmwm_fit, awv_fit, compute_weights, gmwm_fit, msgmwm_fit, resolve_omega, FitOptions,
    FitResult, Method, ObjectiveSpec, OmegaMode, WeightScheme,
};
pub use models::{BetaLaw, BlockKind, CompositeModel, InternalSensorModel, LatentBlock, Replicate};
pub use rng::StreamKey;
pub use theory::{theoretical_wv, JacobianMode, TheoreticalWV};
pub use wv::{estimate_wv, WVEstimate, WvOptions};
