//! One complete estimation run.
//!
//! Each shot runs controller -> detector -> Bayes update -> conditional
//! resample. The normalized squared error `2 |alpha_true - mean|^2 / R0^2` is
//! recorded on a snapshot schedule. The outlier-checked variant estimates the
//! state twice from scratch and only trusts the result when the two estimates
//! agree.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    uniform_disk_point, Detector, InferenceModel, NoiseModel, Outcome, PhasePoint, ShotRecord,
    SimulatedDetector,
};
use crate::policy::{Controller, PolicyError, PolicyParams, PolicyState};
use crate::rng::{RunStreams, SimRng};
use crate::smc::{ParticleCloud, PosteriorMoments, ResampleConfig, SmcError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("run {sample} aborted at shot {shot}: {source}")]
    RunAborted {
        sample: u64,
        shot: u64,
        #[source]
        source: SmcError,
    },
    #[error(transparent)]
    Prior(SmcError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Shot indices at which the error is recorded. The last shot of a run is
/// always recorded.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SnapshotSchedule {
    /// Powers of two.
    #[default]
    Geometric,
    /// Every `every`-th shot.
    Stride { every: u64 },
    /// An explicit list of shot indices.
    Explicit { shots: Vec<u64> },
}

impl SnapshotSchedule {
    pub fn includes(&self, shot: u64, max_shots: u64) -> bool {
        if shot == max_shots {
            return true;
        }
        match self {
            SnapshotSchedule::Geometric => shot.is_power_of_two(),
            SnapshotSchedule::Stride { every } => shot.is_multiple_of(*every),
            SnapshotSchedule::Explicit { shots } => shots.contains(&shot),
        }
    }

    /// All recorded shot indices for a run of `max_shots`.
    pub fn points(&self, max_shots: u64) -> Vec<u64> {
        match self {
            SnapshotSchedule::Explicit { shots } => {
                let mut pts: Vec<u64> =
                    shots.iter().copied().filter(|s| (1..max_shots).contains(s)).collect();
                pts.push(max_shots);
                pts.sort_unstable();
                pts.dedup();
                pts
            }
            _ => (1..=max_shots).filter(|s| self.includes(*s, max_shots)).collect(),
        }
    }

    fn is_valid(&self) -> bool {
        !matches!(self, SnapshotSchedule::Stride { every: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierConfig {
    pub block_shots: u64,
    /// Largest accepted phase-space distance between the two block estimates.
    pub agreement_threshold: f64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            block_shots: 10_000,
            agreement_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_particles: usize,
    pub radius_r0: f64,
    /// Centre of the prior disk (and of the true-state distribution).
    pub prior_center: PhasePoint,
    pub max_shots: u64,
    pub policy: PolicyParams,
    pub noise: NoiseModel,
    pub inference: InferenceModel,
    pub resample: ResampleConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outlier_correction: Option<OutlierConfig>,
    pub snapshots: SnapshotSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_particles: 50_000,
            radius_r0: 10.0,
            prior_center: PhasePoint::ORIGIN,
            max_shots: 100_000,
            policy: PolicyParams::default(),
            noise: NoiseModel::NOISELESS,
            inference: InferenceModel::ErrorInclusive,
            resample: ResampleConfig::default(),
            seed: 0,
            outlier_correction: None,
            snapshots: SnapshotSchedule::Geometric,
        }
    }
}

impl RunConfig {
    /// Dotted name of the first violated constraint, if any.
    pub fn invalid_field(&self) -> Option<&'static str> {
        if self.n_particles < 2 {
            return Some("n_particles");
        }
        if !(self.radius_r0 > 0.0 && self.radius_r0.is_finite()) {
            return Some("radius_r0");
        }
        if !self.prior_center.is_finite() {
            return Some("prior_center");
        }
        if self.max_shots == 0 {
            return Some("max_shots");
        }
        if let Some(field) = self.policy.invalid_field() {
            return Some(match field {
                "a" => "policy.a",
                "b" => "policy.b",
                "m_prime_max" => "policy.m_prime_max",
                _ => "policy.c_threshold",
            });
        }
        if !self.noise.is_valid() {
            return Some("noise.p_error");
        }
        if !(self.resample.a_lw > 0.0 && self.resample.a_lw < 1.0) {
            return Some("resample.a_lw");
        }
        if !(self.resample.ess_threshold > 0.0 && self.resample.ess_threshold <= 1.0) {
            return Some("resample.ess_threshold");
        }
        if let Some(oc) = &self.outlier_correction {
            if oc.block_shots == 0 {
                return Some("outlier_correction.block_shots");
            }
            if !(oc.agreement_threshold > 0.0) {
                return Some("outlier_correction.agreement_threshold");
            }
        }
        if !self.snapshots.is_valid() {
            return Some("snapshots.every");
        }
        None
    }

    pub fn validate(&self) -> Result<(), RunError> {
        match self.invalid_field() {
            Some(field) => Err(RunError::InvalidConfig(field)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub shot: u64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub sample_index: u64,
    pub true_state: PhasePoint,
    pub estimate: PhasePoint,
    pub error_trace: Vec<ErrorPoint>,
    pub total_shots_used: u64,
    pub restarts: u32,
    pub first_vacuum_shot: Option<u64>,
    /// `false` when the outlier check ran out of budget before two block
    /// estimates agreed.
    pub converged: bool,
    pub resamples: u64,
}

impl RunResult {
    pub fn final_error(&self) -> f64 {
        self.error_trace.last().map_or(f64::NAN, |p| p.error)
    }

    /// Recorded error at exactly `shot`, if that shot was a snapshot.
    pub fn error_at(&self, shot: u64) -> Option<f64> {
        self.error_trace
            .binary_search_by_key(&shot, |p| p.shot)
            .ok()
            .map(|i| self.error_trace[i].error)
    }
}

/// Uniform on the open disk of radius `radius_r0` about the origin.
pub fn sample_true_state<R: Rng + ?Sized>(radius_r0: f64, rng: &mut R) -> PhasePoint {
    uniform_disk_point(radius_r0, rng)
}

pub fn normalized_sq_error(true_state: PhasePoint, estimate: PhasePoint, radius_r0: f64) -> f64 {
    2.0 * (true_state - estimate).norm_sqr() / (radius_r0 * radius_r0)
}

/// Posterior plus controller state for one estimation attempt.
#[derive(Debug, Clone)]
struct Estimator {
    cloud: ParticleCloud,
    moments: PosteriorMoments,
    policy: PolicyState,
    last: Option<ShotRecord>,
}

struct Engine<'a, D> {
    cfg: &'a RunConfig,
    sample: u64,
    controller: Controller,
    detector: D,
    streams: RunStreams,
    true_state: PhasePoint,
    shots_used: u64,
    first_vacuum: Option<u64>,
    resamples: u64,
    trace: Vec<ErrorPoint>,
    records: Option<Vec<ShotRecord>>,
}

impl<'a, D: Detector> Engine<'a, D> {
    fn new(cfg: &'a RunConfig, sample: u64, streams: RunStreams, true_state: PhasePoint, detector: D) -> Self {
        Self {
            cfg,
            sample,
            controller: Controller::new(cfg.policy, cfg.radius_r0),
            detector,
            streams,
            true_state,
            shots_used: 0,
            first_vacuum: None,
            resamples: 0,
            trace: Vec::new(),
            records: None,
        }
    }

    fn fresh(&mut self) -> Result<Estimator, RunError> {
        let mut cloud = ParticleCloud::uniform_disk(self.cfg.n_particles, self.cfg.radius_r0, &mut self.streams.prior)
            .map_err(RunError::Prior)?;
        cloud.translate(self.cfg.prior_center);
        let moments = cloud.moments();
        Ok(Estimator {
            cloud,
            moments,
            policy: PolicyState::default(),
            last: None,
        })
    }

    fn advance(&mut self, est: &mut Estimator, shots: u64) -> Result<(), RunError> {
        let cfg = self.cfg;
        for _ in 0..shots {
            let index = self.shots_used + 1;
            let (policy, beta) = self.controller.step(
                &est.policy,
                est.last.as_ref(),
                &est.cloud,
                &est.moments,
                &mut self.streams.policy,
            )?;
            let outcome = self.detector.measure(beta, &mut self.streams.detector);
            update_with_recovery(&mut est.cloud, outcome, beta, cfg, &mut self.streams.resample)
                .map_err(|source| RunError::RunAborted { sample: self.sample, shot: index, source })?;
            if est.cloud.maybe_resample(&cfg.resample, &mut self.streams.resample) {
                self.resamples += 1;
            }
            est.moments = est.cloud.moments();
            est.policy = policy;
            let record = ShotRecord { index, beta, outcome };
            if let Some(records) = &mut self.records {
                records.push(record);
            }
            est.last = Some(record);
            self.shots_used = index;
            if outcome == Outcome::Vacuum && self.first_vacuum.is_none() {
                self.first_vacuum = Some(index);
            }
            if cfg.snapshots.includes(index, cfg.max_shots) {
                self.trace.push(ErrorPoint {
                    shot: index,
                    error: normalized_sq_error(self.true_state, est.moments.mean, cfg.radius_r0),
                });
            }
        }
        Ok(())
    }

    fn finish(self, estimate: PhasePoint, restarts: u32, converged: bool) -> RunResult {
        RunResult {
            sample_index: self.sample,
            true_state: self.true_state,
            estimate,
            error_trace: self.trace,
            total_shots_used: self.shots_used,
            restarts,
            first_vacuum_shot: self.first_vacuum,
            converged,
            resamples: self.resamples,
        }
    }
}

/// Bayes update; if every weight vanishes, redraw the pre-update cloud once
/// and retry before giving up.
fn update_with_recovery(
    cloud: &mut ParticleCloud,
    outcome: Outcome,
    beta: PhasePoint,
    cfg: &RunConfig,
    rng: &mut SimRng,
) -> Result<(), SmcError> {
    match cloud.bayes_update(outcome, beta, cfg.noise, cfg.inference) {
        Err(SmcError::DegenerateWeights { .. }) => {
            *cloud = cloud.liu_west_resample(&cfg.resample, rng);
            cloud.bayes_update(outcome, beta, cfg.noise, cfg.inference)
        }
        other => other,
    }
}

fn resolve_true_state(cfg: &RunConfig, streams: &mut RunStreams, given: Option<PhasePoint>) -> PhasePoint {
    // Always draw so that the other streams do not depend on `given`.
    let drawn = cfg.prior_center + sample_true_state(cfg.radius_r0, &mut streams.true_state);
    given.unwrap_or(drawn)
}

/// Plain run with the simulated detector, using the streams of sample 0.
pub fn run_single(cfg: &RunConfig, true_state: Option<PhasePoint>) -> Result<RunResult, RunError> {
    run_sample(cfg, 0, true_state)
}

/// Plain run for ensemble member `sample`.
pub fn run_sample(cfg: &RunConfig, sample: u64, true_state: Option<PhasePoint>) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let mut streams = RunStreams::new(cfg.seed, sample);
    let alpha = resolve_true_state(cfg, &mut streams, true_state);
    let detector = SimulatedDetector { alpha_true: alpha, noise: cfg.noise };
    run_with_detector(cfg, sample, streams, alpha, detector)
}

/// Plain run against an arbitrary detector; `true_state` is only used to
/// score the estimate.
pub fn run_with_detector<D: Detector>(
    cfg: &RunConfig,
    sample: u64,
    streams: RunStreams,
    true_state: PhasePoint,
    detector: D,
) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let mut engine = Engine::new(cfg, sample, streams, true_state, detector);
    let mut est = engine.fresh()?;
    engine.advance(&mut est, cfg.max_shots)?;
    let estimate = est.moments.mean;
    Ok(engine.finish(estimate, 0, true))
}

/// Plain run for ensemble member `sample` that also returns every shot.
pub fn run_sample_recorded(
    cfg: &RunConfig,
    sample: u64,
    true_state: Option<PhasePoint>,
) -> Result<(RunResult, Vec<ShotRecord>), RunError> {
    cfg.validate()?;
    let mut streams = RunStreams::new(cfg.seed, sample);
    let alpha = resolve_true_state(cfg, &mut streams, true_state);
    let detector = SimulatedDetector { alpha_true: alpha, noise: cfg.noise };
    let mut engine = Engine::new(cfg, sample, streams, alpha, detector);
    engine.records = Some(Vec::with_capacity(cfg.max_shots as usize));
    let mut est = engine.fresh()?;
    engine.advance(&mut est, cfg.max_shots)?;
    let estimate = est.moments.mean;
    let records = engine.records.take().unwrap_or_default();
    Ok((engine.finish(estimate, 0, true), records))
}

/// Initial particle cloud of sample `sample`, as a run would draw it.
pub fn prior_cloud(cfg: &RunConfig, sample: u64) -> Result<ParticleCloud, RunError> {
    let mut streams = RunStreams::new(cfg.seed, sample);
    let mut cloud = ParticleCloud::uniform_disk(cfg.n_particles, cfg.radius_r0, &mut streams.prior)
        .map_err(RunError::Prior)?;
    cloud.translate(cfg.prior_center);
    Ok(cloud)
}

/// Outlier-checked run for sample 0.
pub fn run_with_outlier_correction(
    cfg: &RunConfig,
    true_state: Option<PhasePoint>,
) -> Result<RunResult, RunError> {
    run_sample_with_outlier_correction(cfg, 0, true_state)
}

pub fn run_sample_with_outlier_correction(
    cfg: &RunConfig,
    sample: u64,
    true_state: Option<PhasePoint>,
) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let mut streams = RunStreams::new(cfg.seed, sample);
    let alpha = resolve_true_state(cfg, &mut streams, true_state);
    let detector = SimulatedDetector { alpha_true: alpha, noise: cfg.noise };
    outlier_corrected_with_detector(cfg, sample, streams, alpha, detector)
}

/// Runs pairs of independent blocks from the initial prior until the two
/// block estimates agree, then keeps refining the second block's posterior
/// for the rest of the budget. A pair is only started if it fits in the
/// remaining budget; leftover shots refine the last block unconverged.
pub fn outlier_corrected_with_detector<D: Detector>(
    cfg: &RunConfig,
    sample: u64,
    streams: RunStreams,
    true_state: PhasePoint,
    detector: D,
) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let oc = cfg
        .outlier_correction
        .ok_or(RunError::InvalidConfig("outlier_correction"))?;
    let budget = cfg.max_shots;
    let block = oc.block_shots;
    let mut engine = Engine::new(cfg, sample, streams, true_state, detector);
    let mut restarts = 0u32;
    let mut pairs = 0u32;
    let mut current: Option<Estimator> = None;

    while budget - engine.shots_used >= 2 * block {
        if pairs > 0 {
            restarts += 1;
        }
        pairs += 1;
        let mut first = engine.fresh()?;
        engine.advance(&mut first, block)?;
        let mut second = engine.fresh()?;
        engine.advance(&mut second, block)?;
        let agree = first.moments.mean.distance(second.moments.mean) < oc.agreement_threshold;
        if agree {
            let remaining = budget - engine.shots_used;
            engine.advance(&mut second, remaining)?;
            let estimate = second.moments.mean;
            return Ok(engine.finish(estimate, restarts, true));
        }
        current = Some(second);
    }

    let mut est = match current {
        Some(est) => est,
        None => engine.fresh()?,
    };
    let remaining = budget - engine.shots_used;
    engine.advance(&mut est, remaining)?;
    let estimate = est.moments.mean;
    Ok(engine.finish(estimate, restarts, false))
}
