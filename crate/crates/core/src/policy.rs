//! Measurement-setting controllers.
//!
//! Before any vacuum has been seen the drive is sampled from the mirrored
//! posterior, so `-beta` lands where the state is still believed to be. After
//! a vacuum click the drive is drawn uniformly from a disk of radius
//! `r(C) * R_alpha` around `-mean`, with `r(C) = a * C^b` and `C` the number of
//! vacuum clicks. The robust controller first repeats the clicking setting
//! `M'_max` times and only focuses when at least `C_t` of those shots also read
//! vacuum; otherwise it forgets the click and searches again.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{uniform_disk_point, Outcome, PhasePoint, ShotRecord};
use crate::smc::{ParticleCloud, PosteriorMoments};

/// Smallest focus radius handed to the disk sampler.
pub const MIN_FOCUS_RADIUS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("power-law radius is undefined before the first vacuum click (C = 0)")]
    ZeroVacuumCount,
    #[error("invalid policy state: {0}")]
    InvalidState(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Mirrored-posterior search, then focus after the first vacuum click.
    #[default]
    Adaptive,
    /// Like `Adaptive`, but a vacuum click must survive a repetition test.
    Robust,
    /// Nonadaptive baseline: `-beta` uniform on the prior disk for every shot.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyParams {
    #[serde(rename = "a")]
    pub a_policy: f64,
    #[serde(rename = "b")]
    pub b_policy: f64,
    pub m_prime_max: u32,
    pub c_threshold: u32,
    pub kind: PolicyKind,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            a_policy: 0.04,
            b_policy: 0.05,
            m_prime_max: 39,
            c_threshold: 15,
            kind: PolicyKind::Adaptive,
        }
    }
}

impl PolicyParams {
    pub fn adaptive(a_policy: f64, b_policy: f64) -> Self {
        Self { a_policy, b_policy, ..Self::default() }
    }

    pub fn robust(a_policy: f64, b_policy: f64) -> Self {
        Self { a_policy, b_policy, kind: PolicyKind::Robust, ..Self::default() }
    }

    pub fn uniform() -> Self {
        Self { kind: PolicyKind::Uniform, ..Self::default() }
    }

    /// Name of the first violated constraint, if any.
    pub fn invalid_field(&self) -> Option<&'static str> {
        if !(self.a_policy > 0.0 && self.a_policy.is_finite()) {
            return Some("a");
        }
        if !self.b_policy.is_finite() {
            return Some("b");
        }
        if self.m_prime_max == 0 {
            return Some("m_prime_max");
        }
        if self.c_threshold == 0 || self.c_threshold > self.m_prime_max + 1 {
            return Some("c_threshold");
        }
        None
    }

    /// Short label such as `adaptive(a=0.04,b=0.05)`.
    pub fn label(&self) -> String {
        match self.kind {
            PolicyKind::Adaptive => format!("adaptive(a={},b={})", self.a_policy, self.b_policy),
            PolicyKind::Robust => format!(
                "robust(a={},b={},m={},ct={})",
                self.a_policy, self.b_policy, self.m_prime_max, self.c_threshold
            ),
            PolicyKind::Uniform => "uniform".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Searching,
    Confirming,
    Focused,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyState {
    /// Vacuum clicks counted so far (`C`).
    pub c_count: u32,
    /// Shots taken at `beta_one` since the confirming click (`M'`).
    pub m_prime: u32,
    pub beta_one: Option<PhasePoint>,
    pub phase: Phase,
}

impl PolicyState {
    pub fn check(&self, params: &PolicyParams) -> Result<(), PolicyError> {
        let bad = |msg: &str| Err(PolicyError::InvalidState(format!("{msg}: {self:?}")));
        match self.phase {
            Phase::Searching if self.c_count != 0 || self.beta_one.is_some() => {
                bad("searching with a pending click")
            }
            Phase::Confirming if params.kind != PolicyKind::Robust => {
                bad("only the robust policy confirms")
            }
            Phase::Confirming if self.beta_one.is_none() => bad("confirming without a setting"),
            Phase::Confirming if self.m_prime > params.m_prime_max => bad("M' beyond M'_max"),
            Phase::Focused if params.kind == PolicyKind::Uniform => bad("baseline never focuses"),
            Phase::Focused if self.c_count == 0 => bad("focused without a vacuum click"),
            Phase::Focused
                if params.kind == PolicyKind::Robust && self.c_count < params.c_threshold =>
            {
                bad("focused below the confirmation threshold")
            }
            _ => Ok(()),
        }
    }
}

/// `r(C) = a * C^b`.
pub fn power_law_radius(c_count: u32, params: &PolicyParams) -> Result<f64, PolicyError> {
    if c_count == 0 {
        return Err(PolicyError::ZeroVacuumCount);
    }
    Ok(params.a_policy * f64::from(c_count).powf(params.b_policy))
}

/// Width `R_alpha = sqrt(Tr Cov + 1/2)` of the region holding the likelihood
/// weight; the 1/2 is the vacuum likelihood's own spread.
pub fn r_alpha(moments: &PosteriorMoments) -> f64 {
    (moments.covariance.trace().max(0.0) + 0.5).sqrt()
}

/// `beta = -alpha_n` with `n` drawn from the posterior weights.
pub fn choose_beta_searching<R: Rng + ?Sized>(cloud: &ParticleCloud, rng: &mut R) -> PhasePoint {
    -cloud.positions()[cloud.sample_index(rng)]
}

/// Uniform on the disk `|beta + mean| < r(C) * R_alpha`.
pub fn choose_beta_focused<R: Rng + ?Sized>(
    moments: &PosteriorMoments,
    c_count: u32,
    params: &PolicyParams,
    rng: &mut R,
) -> Result<PhasePoint, PolicyError> {
    let radius = (power_law_radius(c_count, params)? * r_alpha(moments)).max(MIN_FOCUS_RADIUS);
    Ok(uniform_disk_point(radius, rng) - moments.mean)
}

/// A policy bound to the prior it searches (the baseline needs its radius).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controller {
    pub params: PolicyParams,
    pub prior_radius: f64,
}

impl Controller {
    pub fn new(params: PolicyParams, prior_radius: f64) -> Self {
        Self { params, prior_radius }
    }

    /// Folds the previous shot into the controller state and picks the next
    /// drive. `last` is `None` only before the first shot.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &PolicyState,
        last: Option<&ShotRecord>,
        cloud: &ParticleCloud,
        moments: &PosteriorMoments,
        rng: &mut R,
    ) -> Result<(PolicyState, PhasePoint), PolicyError> {
        let params = &self.params;
        state.check(params)?;
        let mut next = *state;
        let vacuum = last.is_some_and(|r| r.outcome == Outcome::Vacuum);

        match params.kind {
            PolicyKind::Uniform => {
                let beta = -uniform_disk_point(self.prior_radius, rng);
                return Ok((next, beta));
            }
            PolicyKind::Adaptive => {
                match next.phase {
                    Phase::Searching if vacuum => {
                        next.c_count = 1;
                        next.phase = Phase::Focused;
                    }
                    Phase::Focused if vacuum => next.c_count += 1,
                    _ => {}
                }
            }
            PolicyKind::Robust => match next.phase {
                Phase::Searching if vacuum => {
                    // `last` is present whenever `vacuum` is true.
                    next.beta_one = last.map(|r| r.beta);
                    next.c_count = 1;
                    next.m_prime = 0;
                    next.phase = Phase::Confirming;
                }
                Phase::Confirming => {
                    next.m_prime += 1;
                    if vacuum {
                        next.c_count += 1;
                    }
                }
                Phase::Focused if vacuum => next.c_count += 1,
                _ => {}
            },
        }

        if next.phase == Phase::Confirming && next.m_prime >= params.m_prime_max {
            if next.c_count >= params.c_threshold {
                next.phase = Phase::Focused;
            } else {
                next = PolicyState::default();
            }
        }

        let beta = match next.phase {
            Phase::Searching => choose_beta_searching(cloud, rng),
            Phase::Confirming => next
                .beta_one
                .ok_or_else(|| PolicyError::InvalidState("confirming without a setting".into()))?,
            Phase::Focused => choose_beta_focused(moments, next.c_count, params, rng)?,
        };
        Ok((next, beta))
    }
}
