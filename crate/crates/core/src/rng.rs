//! Deterministic random streams.
//!
//! Every run draws from ChaCha8 streams keyed by `(master_seed, sample_index,
//! role)`. The master seed picks the ChaCha key and `sample_index * ROLES +
//! role` picks the stream id, so streams never overlap and a sample's draws do
//! not depend on how an ensemble is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose of a random stream inside one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    TrueState = 0,
    Prior = 1,
    Policy = 2,
    Detector = 3,
    Resample = 4,
}

const ROLES: u64 = 5;

pub fn stream(master_seed: u64, sample_index: u64, role: StreamRole) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(sample_index.wrapping_mul(ROLES).wrapping_add(role as u64));
    rng
}

/// The full set of streams used by one run.
#[derive(Debug, Clone)]
pub struct RunStreams {
    pub true_state: SimRng,
    pub prior: SimRng,
    pub policy: SimRng,
    pub detector: SimRng,
    pub resample: SimRng,
}

impl RunStreams {
    pub fn new(master_seed: u64, sample_index: u64) -> Self {
        Self {
            true_state: stream(master_seed, sample_index, StreamRole::TrueState),
            prior: stream(master_seed, sample_index, StreamRole::Prior),
            policy: stream(master_seed, sample_index, StreamRole::Policy),
            detector: stream(master_seed, sample_index, StreamRole::Detector),
            resample: stream(master_seed, sample_index, StreamRole::Resample),
        }
    }
}
