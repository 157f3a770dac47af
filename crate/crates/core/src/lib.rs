//! Adaptive Bayesian identification of an unknown coherent state `|alpha>`
//! with a displaced vacuum detector.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: detector likelihoods, readout errors and the simulated detector
//! - [`smc`]: particle-cloud posterior with Liu–West resampling
//! - [`policy`]: controllers that choose the next drive amplitude
//! - [`experiment`]: single estimation runs and the restart-based outlier check
//! - [`bench`]: ensembles, median error curves, outlier tables and grid search
//! - [`oracle`]: dense-grid exact posterior used to validate the particle filter

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod experiment;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod smc;

pub use model::{InferenceModel, NoiseModel, Outcome, PhasePoint, ShotRecord};
pub use policy::{PolicyKind, PolicyParams};
pub use smc::{ParticleCloud, PosteriorMoments, ResampleConfig};
