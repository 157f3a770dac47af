//! Sequential Monte-Carlo posterior over the coherent amplitude.
//!
//! The posterior is a cloud of weighted phase-space points. Each detector
//! readout reweights the cloud by its likelihood; when the effective sample
//! size collapses the cloud is redrawn with the Liu–West kernel, which shrinks
//! every selected point towards the posterior mean and adds Gaussian jitter so
//! that mean and covariance are preserved.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{apply_likelihood, uniform_disk_point, InferenceModel, NoiseModel, Outcome, PhasePoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmcError {
    #[error("particle cloud needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("prior radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("positions ({positions}) and weights ({weights}) differ in length")]
    LengthMismatch { positions: usize, weights: usize },
    #[error("weights must be nonnegative, finite and sum to 1")]
    InvalidWeights,
    #[error("every particle has zero likelihood for {outcome:?} at beta = {beta}")]
    DegenerateWeights { outcome: Outcome, beta: PhasePoint },
}

/// Symmetric 2x2 covariance of the (Re, Im) quadratures.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Covariance {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Covariance {
    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            xx: self.xx * factor,
            xy: self.xy * factor,
            yy: self.yy * factor,
        }
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * self.trace();
        let det = self.xx * self.yy - self.xy * self.xy;
        let disc = (half_tr * half_tr - det).max(0.0).sqrt();
        (half_tr - disc, half_tr + disc)
    }

    /// Lower Cholesky factor `(l11, l21, l22)`; `None` for a non-positive pivot.
    fn cholesky(&self) -> Option<(f64, f64, f64)> {
        if !(self.xx > 0.0) {
            return None;
        }
        let l11 = self.xx.sqrt();
        let l21 = self.xy / l11;
        let rem = self.yy - l21 * l21;
        if !(rem > 0.0) {
            return None;
        }
        Some((l11, l21, rem.sqrt()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PosteriorMoments {
    pub mean: PhasePoint,
    pub covariance: Covariance,
}

/// How particle indices are drawn from the weights during resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleScheme {
    /// Independent categorical draws, produced as one sorted batch of uniforms.
    #[default]
    Multinomial,
    /// One uniform offset on an evenly spaced comb.
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResampleConfig {
    /// Liu–West shrinkage parameter.
    pub a_lw: f64,
    /// Resample when `ESS < ess_threshold * N_p`.
    pub ess_threshold: f64,
    pub scheme: ResampleScheme,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            a_lw: 0.99995,
            ess_threshold: 0.5,
            scheme: ResampleScheme::Multinomial,
        }
    }
}

impl ResampleConfig {
    pub fn is_valid(&self) -> bool {
        self.a_lw > 0.0 && self.a_lw < 1.0 && self.ess_threshold > 0.0 && self.ess_threshold <= 1.0
    }
}

// Independent partial sums so that reductions are not latency bound.
const LANES: usize = 4;

#[inline]
fn fold(acc: [f64; LANES]) -> f64 {
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Calls `f(lane, item, weight)` over paired slices, cycling through the
/// lanes.
#[inline(always)]
fn for_lanes<T: Copy>(items: &[T], weights: &[f64], mut f: impl FnMut(usize, T, f64)) {
    let n = items.len().min(weights.len());
    let (items, weights) = (&items[..n], &weights[..n]);
    let mut ic = items.chunks_exact(LANES);
    let mut wc = weights.chunks_exact(LANES);
    for (is, ws) in (&mut ic).zip(&mut wc) {
        for k in 0..LANES {
            f(k, is[k], ws[k]);
        }
    }
    for (k, (i, w)) in ic.remainder().iter().zip(wc.remainder()).enumerate() {
        f(k, *i, *w);
    }
}

fn lane_sum(values: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    for_lanes(values, values, |k, v, _| acc[k] += v);
    fold(acc)
}

/// Weighted point-mass approximation of the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    positions: Vec<PhasePoint>,
    weights: Vec<f64>,
}

impl ParticleCloud {
    /// Draws `n_particles` i.i.d. points uniformly on `|alpha| < radius`, all
    /// with weight `1 / n_particles`.
    pub fn uniform_disk<R: Rng + ?Sized>(
        n_particles: usize,
        radius: f64,
        rng: &mut R,
    ) -> Result<Self, SmcError> {
        if n_particles < 2 {
            return Err(SmcError::TooFewParticles(n_particles));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(SmcError::InvalidRadius(radius));
        }
        let positions = (0..n_particles).map(|_| uniform_disk_point(radius, rng)).collect();
        Ok(Self {
            positions,
            weights: vec![1.0 / n_particles as f64; n_particles],
        })
    }

    /// Builds a cloud from explicit parts. Weights must already be normalized.
    pub fn from_parts(positions: Vec<PhasePoint>, weights: Vec<f64>) -> Result<Self, SmcError> {
        if positions.len() != weights.len() {
            return Err(SmcError::LengthMismatch {
                positions: positions.len(),
                weights: weights.len(),
            });
        }
        if positions.is_empty() {
            return Err(SmcError::TooFewParticles(0));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(SmcError::InvalidWeights);
        }
        Ok(Self { positions, weights })
    }

    /// Equal-weight cloud over `positions`.
    pub fn from_positions(positions: Vec<PhasePoint>) -> Result<Self, SmcError> {
        let n = positions.len();
        if n == 0 {
            return Err(SmcError::TooFewParticles(0));
        }
        Self::from_parts(positions, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[PhasePoint] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Shifts every particle by `offset`.
    pub fn translate(&mut self, offset: PhasePoint) {
        for p in &mut self.positions {
            *p = *p + offset;
        }
    }

    /// Multiplies each weight by the likelihood of `outcome` and renormalizes.
    ///
    /// On `DegenerateWeights` the cloud is left untouched.
    pub fn bayes_update(
        &mut self,
        outcome: Outcome,
        beta: PhasePoint,
        noise: NoiseModel,
        inference: InferenceModel,
    ) -> Result<(), SmcError> {
        let mut updated = self.weights.clone();
        apply_likelihood(outcome, &self.positions, beta, noise, inference, &mut updated);
        let total = lane_sum(&updated);
        if !(total > 0.0) || !total.is_finite() {
            return Err(SmcError::DegenerateWeights { outcome, beta });
        }
        for v in &mut updated {
            *v /= total;
        }
        self.weights = updated;
        Ok(())
    }

    /// Weighted mean and covariance. The covariance is accumulated about the
    /// mean (two passes) so that narrow posteriors far from the origin keep
    /// their precision.
    pub fn moments(&self) -> PosteriorMoments {
        let (mut mx, mut my) = ([0.0; LANES], [0.0; LANES]);
        for_lanes(&self.positions, &self.weights, |k, p, w| {
            mx[k] += w * p.re;
            my[k] += w * p.im;
        });
        let (mx, my) = (fold(mx), fold(my));
        let (mut sxx, mut sxy, mut syy) = ([0.0; LANES], [0.0; LANES], [0.0; LANES]);
        for_lanes(&self.positions, &self.weights, |k, p, w| {
            let (dx, dy) = (p.re - mx, p.im - my);
            sxx[k] += w * dx * dx;
            sxy[k] += w * dx * dy;
            syy[k] += w * dy * dy;
        });
        PosteriorMoments {
            mean: PhasePoint::new(mx, my),
            covariance: Covariance { xx: fold(sxx), xy: fold(sxy), yy: fold(syy) },
        }
    }

    pub fn effective_sample_size(&self) -> f64 {
        let mut acc = [0.0; LANES];
        for_lanes(&self.weights, &self.weights, |k, _, w| acc[k] += w * w);
        1.0 / fold(acc)
    }

    /// Index drawn from the categorical distribution given by the weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // Rounding left `acc` a hair below `u`; take the last nonzero weight.
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// `n` ancestor indices, returned in nondecreasing order.
    fn draw_ancestors<R: Rng + ?Sized>(&self, scheme: ResampleScheme, rng: &mut R) -> Vec<usize> {
        let n = self.len();
        let points: Vec<f64> = match scheme {
            ResampleScheme::Multinomial => {
                // Sorted uniforms from normalized exponential spacings.
                let mut acc = 0.0;
                let mut cum: Vec<f64> = (0..n)
                    .map(|_| {
                        acc += rng.sample::<f64, _>(Exp1);
                        acc
                    })
                    .collect();
                let total = acc + rng.sample::<f64, _>(Exp1);
                for c in &mut cum {
                    *c /= total;
                }
                cum
            }
            ResampleScheme::Systematic => {
                let offset: f64 = rng.random();
                (0..n).map(|k| (k as f64 + offset) / n as f64).collect()
            }
        };
        let last_live = self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(n - 1);
        let mut out = Vec::with_capacity(n);
        let mut idx = 0;
        let mut acc = self.weights[0];
        for u in points {
            while u >= acc && idx < last_live {
                idx += 1;
                acc += self.weights[idx];
            }
            out.push(idx);
        }
        out
    }

    /// Liu–West redraw: ancestors from the weights, each mapped to
    /// `a * alpha_n + (1 - a) * mean` plus `Normal(0, (1 - a^2) Cov)`.
    pub fn liu_west_resample<R: Rng + ?Sized>(&self, cfg: &ResampleConfig, rng: &mut R) -> Self {
        let moments = self.moments();
        let a = cfg.a_lw;
        let cov = moments.covariance;
        let jitter = 1e-12 * cov.trace().max(1.0);
        let kernel = Covariance {
            xx: cov.xx + jitter,
            xy: cov.xy,
            yy: cov.yy + jitter,
        }
        .scaled(1.0 - a * a);
        let (l11, l21, l22) = kernel.cholesky().unwrap_or_else(|| {
            // Rounding pushed the jittered matrix out of the PD cone; fall back
            // to the diagonal.
            (kernel.xx.max(0.0).sqrt(), 0.0, kernel.yy.max(0.0).sqrt())
        });
        let shrink = (1.0 - a) * moments.mean;
        let ancestors = self.draw_ancestors(cfg.scheme, rng);
        let n = ancestors.len();
        let positions = ancestors
            .into_iter()
            .map(|i| {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                let centre = a * self.positions[i] + shrink;
                PhasePoint::new(centre.re + l11 * z1, centre.im + l21 * z1 + l22 * z2)
            })
            .collect();
        Self {
            positions,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Resamples in place when the effective sample size drops below
    /// `cfg.ess_threshold * N_p`. Returns whether a resample happened.
    pub fn maybe_resample<R: Rng + ?Sized>(&mut self, cfg: &ResampleConfig, rng: &mut R) -> bool {
        if self.effective_sample_size() < cfg.ess_threshold * self.len() as f64 {
            *self = self.liu_west_resample(cfg, rng);
            true
        } else {
            false
        }
    }
}
