//! Measurement model for a coherent state probed by a displaced vacuum detector.
//!
//! A drive with amplitude `beta` shifts the unknown state `|alpha>` to
//! `|alpha + beta>` before it reaches a detector that only distinguishes the
//! vacuum from "one or more photons". The vacuum probability is the overlap
//! `|<0|alpha + beta>|^2 = exp(-|alpha + beta|^2)`, which is also `pi` times the
//! Husimi Q-function of `|alpha>` evaluated at `-beta`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A point in phase space, i.e. a complex amplitude `re + i im`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhasePoint {
    pub re: f64,
    pub im: f64,
}

impl PhasePoint {
    pub const ORIGIN: PhasePoint = PhasePoint { re: 0.0, im: 0.0 };

    pub const fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn from_polar(radius: f64, angle: f64) -> Self {
        Self::new(radius * angle.cos(), radius * angle.sin())
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn norm(self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn distance(self, other: PhasePoint) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    /// Rotates the point about the origin by `angle` radians.
    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.re - s * self.im, s * self.re + c * self.im)
    }
}

impl fmt::Display for PhasePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.re, self.im)
    }
}

impl Add for PhasePoint {
    type Output = PhasePoint;
    fn add(self, rhs: PhasePoint) -> PhasePoint {
        PhasePoint::new(self.re + rhs.re, self.im + rhs.im)
    }
}

impl Sub for PhasePoint {
    type Output = PhasePoint;
    fn sub(self, rhs: PhasePoint) -> PhasePoint {
        PhasePoint::new(self.re - rhs.re, self.im - rhs.im)
    }
}

impl Neg for PhasePoint {
    type Output = PhasePoint;
    fn neg(self) -> PhasePoint {
        PhasePoint::new(-self.re, -self.im)
    }
}

impl Mul<PhasePoint> for f64 {
    type Output = PhasePoint;
    fn mul(self, rhs: PhasePoint) -> PhasePoint {
        PhasePoint::new(self * rhs.re, self * rhs.im)
    }
}

/// Binary detector readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Vacuum,
    Photon,
}

impl Outcome {
    pub fn flipped(self) -> Self {
        match self {
            Outcome::Vacuum => Outcome::Photon,
            Outcome::Photon => Outcome::Vacuum,
        }
    }
}

/// Symmetric readout-error channel: each outcome is misreported with
/// probability `p_error`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub p_error: f64,
}

impl NoiseModel {
    pub const NOISELESS: NoiseModel = NoiseModel { p_error: 0.0 };

    /// Returns `None` unless `0 <= p_error <= 1`.
    pub fn new(p_error: f64) -> Option<Self> {
        (0.0..=1.0).contains(&p_error).then_some(Self { p_error })
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.p_error)
    }
}

/// One executed shot: its 1-based index, the drive setting and the readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub index: u64,
    pub beta: PhasePoint,
    pub outcome: Outcome,
}

/// Which likelihood the Bayesian update assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceModel {
    /// Mixes the ideal likelihood with the readout-error channel.
    #[default]
    ErrorInclusive,
    /// Uses the noiseless detector likelihood regardless of the true channel.
    Ideal,
}

/// Below this squared distance `1 - exp(-x2)` would lose more than ~1e-13
/// relative precision, so a short Taylor series is used instead.
const SERIES_CUTOFF: f64 = 1e-3;

/// Past this point `exp(-x)` is subnormal and is flushed to zero.
const EXP_FLUSH: f64 = 708.0;

const LN2_HI: f64 = f64::from_bits(0x3fe6_2e42_fee0_0000);
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND_SHIFT: f64 = 6_755_399_441_055_744.0;

/// `exp(-x)` for `x >= 0`, written without branches or fused operations so
/// that scalar and vector code give bitwise identical results. Accurate to a
/// few ulps.
#[inline(always)]
fn exp_neg(x: f64) -> f64 {
    let t = -x.min(EXP_FLUSH);
    let shifted = t * std::f64::consts::LOG2_E + ROUND_SHIFT;
    let k = shifted - ROUND_SHIFT;
    let r = (t - k * LN2_HI) - k * LN2_LO;
    let mut poly = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        poly = poly * r + c;
    }
    let k_bits = shifted.to_bits().wrapping_sub(ROUND_SHIFT.to_bits());
    let scale = f64::from_bits(k_bits.wrapping_add(1023) << 52);
    let v = poly * scale;
    if x < EXP_FLUSH {
        v
    } else {
        0.0
    }
}

#[inline(always)]
fn photon_from_vacuum(x2: f64, vac: f64) -> f64 {
    let series = x2 * (1.0 - x2 / 2.0 * (1.0 - x2 / 3.0 * (1.0 - x2 / 4.0 * (1.0 - x2 / 5.0))));
    if x2 > SERIES_CUTOFF {
        1.0 - vac
    } else {
        series
    }
}

/// Weights `(on_vacuum, on_photon)` with which the reported `outcome` mixes
/// the ideal vacuum and photon probabilities.
#[inline]
fn mixing(outcome: Outcome, noise: NoiseModel, inference: InferenceModel) -> (f64, f64) {
    let p = match inference {
        InferenceModel::ErrorInclusive => noise.p_error,
        InferenceModel::Ideal => 0.0,
    };
    match outcome {
        Outcome::Vacuum => (1.0 - p, p),
        Outcome::Photon => (p, 1.0 - p),
    }
}

#[inline(always)]
fn mixed(x2: f64, (on_vac, on_pho): (f64, f64)) -> f64 {
    let vac = exp_neg(x2);
    on_vac * vac + on_pho * photon_from_vacuum(x2, vac)
}

/// `exp(-|alpha + beta|^2)`.
#[inline]
pub fn likelihood_vacuum(alpha: PhasePoint, beta: PhasePoint) -> f64 {
    exp_neg((alpha + beta).norm_sqr())
}

/// `1 - exp(-|alpha + beta|^2)`, with full relative precision for small
/// displacements.
#[inline]
pub fn likelihood_photon(alpha: PhasePoint, beta: PhasePoint) -> f64 {
    let x2 = (alpha + beta).norm_sqr();
    photon_from_vacuum(x2, exp_neg(x2))
}

#[inline]
pub fn likelihood_ideal(outcome: Outcome, alpha: PhasePoint, beta: PhasePoint) -> f64 {
    match outcome {
        Outcome::Vacuum => likelihood_vacuum(alpha, beta),
        Outcome::Photon => likelihood_photon(alpha, beta),
    }
}

/// Probability of reporting `outcome` when the ideal detector is followed by
/// the symmetric flip channel.
#[inline]
pub fn likelihood_with_noise(
    outcome: Outcome,
    alpha: PhasePoint,
    beta: PhasePoint,
    noise: NoiseModel,
) -> f64 {
    likelihood(outcome, alpha, beta, noise, InferenceModel::ErrorInclusive)
}

/// Likelihood as seen by the inference engine.
#[inline]
pub fn likelihood(
    outcome: Outcome,
    alpha: PhasePoint,
    beta: PhasePoint,
    noise: NoiseModel,
    inference: InferenceModel,
) -> f64 {
    mixed((alpha + beta).norm_sqr(), mixing(outcome, noise, inference))
}

/// Multiplies each `weights[i]` by the [`likelihood`] at `alphas[i]`. Gives
/// the same bits as the scalar form.
pub fn apply_likelihood(
    outcome: Outcome,
    alphas: &[PhasePoint],
    beta: PhasePoint,
    noise: NoiseModel,
    inference: InferenceModel,
    weights: &mut [f64],
) {
    assert_eq!(alphas.len(), weights.len());
    let coeffs = mixing(outcome, noise, inference);
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { batch_avx2(alphas, beta, coeffs, weights) };
        return;
    }
    batch_portable(alphas, beta, coeffs, weights);
}

#[inline(always)]
fn batch_portable(alphas: &[PhasePoint], beta: PhasePoint, coeffs: (f64, f64), weights: &mut [f64]) {
    for (w, a) in weights.iter_mut().zip(alphas) {
        *w *= mixed((*a + beta).norm_sqr(), coeffs);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn batch_avx2(alphas: &[PhasePoint], beta: PhasePoint, coeffs: (f64, f64), weights: &mut [f64]) {
    batch_portable(alphas, beta, coeffs, weights);
}

/// Draws one detector readout for the true state `alpha_true`.
pub fn simulate_shot<R: Rng + ?Sized>(
    alpha_true: PhasePoint,
    beta: PhasePoint,
    noise: NoiseModel,
    rng: &mut R,
) -> Outcome {
    let ideal = if rng.random::<f64>() < likelihood_vacuum(alpha_true, beta) {
        Outcome::Vacuum
    } else {
        Outcome::Photon
    };
    if rng.random::<f64>() < noise.p_error {
        ideal.flipped()
    } else {
        ideal
    }
}

/// Uniform draw from the open disk `|z| < radius` (radius scaled by `sqrt(u)`).
pub fn uniform_disk_point<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> PhasePoint {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * PI * rng.random::<f64>();
    PhasePoint::from_polar(r, theta)
}

/// Husimi Q-function of `|alpha>` at phase-space point `-beta`.
pub fn q_function(alpha: PhasePoint, beta: PhasePoint) -> f64 {
    likelihood_vacuum(alpha, beta) / PI
}

/// Anything that answers "vacuum or photon?" for a drive setting.
pub trait Detector {
    fn measure<R: Rng + ?Sized>(&mut self, beta: PhasePoint, rng: &mut R) -> Outcome;
}

/// Detector simulated from a known true state and readout-error channel.
#[derive(Debug, Clone, Copy)]
pub struct SimulatedDetector {
    pub alpha_true: PhasePoint,
    pub noise: NoiseModel,
}

impl Detector for SimulatedDetector {
    fn measure<R: Rng + ?Sized>(&mut self, beta: PhasePoint, rng: &mut R) -> Outcome {
        simulate_shot(self.alpha_true, beta, self.noise, rng)
    }
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const E: f64 = std::f64::consts::E;

    fn p(re: f64, im: f64) -> PhasePoint {
        PhasePoint::new(re, im)
    }

    #[test]
    fn vacuum_likelihood_examples() {
        assert_eq!(likelihood_vacuum(p(1.0, 0.0), p(-1.0, 0.0)), 1.0);
        assert!((likelihood_vacuum(p(1.0, 0.0), p(0.0, 0.0)) - 1.0 / E).abs() < 1e-15);
        assert!((likelihood_vacuum(p(1.0, 1.0), p(1.0, 1.0)) - (-8.0f64).exp()).abs() < 1e-18);
        assert!((likelihood_vacuum(p(1.0, 1.0), p(1.0, 1.0)) - 3.3546e-4).abs() < 1e-8);
    }

    #[test]
    fn photon_likelihood_examples() {
        assert_eq!(likelihood_photon(p(1.0, 0.0), p(-1.0, 0.0)), 0.0);
        assert!((likelihood_photon(p(1.0, 0.0), p(0.0, 0.0)) - 0.632121).abs() < 1e-6);
        assert!((likelihood_photon(p(3.0, 0.0), p(0.0, 0.0)) - 0.9998766).abs() < 1e-7);
    }

    #[test]
    fn noisy_likelihood_examples() {
        let clean = NoiseModel::NOISELESS;
        let noisy = NoiseModel::new(0.1).unwrap();
        assert_eq!(
            likelihood_with_noise(Outcome::Vacuum, p(1.0, 0.0), p(-1.0, 0.0), clean),
            1.0
        );
        assert!(
            (likelihood_with_noise(Outcome::Vacuum, p(1.0, 0.0), p(-1.0, 0.0), noisy) - 0.9).abs()
                < 1e-15
        );
        let got = likelihood_with_noise(Outcome::Photon, p(1.0, 0.0), p(0.0, 0.0), noisy);
        assert!((got - (0.9 * (1.0 - 1.0 / E) + 0.1 / E)).abs() < 1e-15);
        assert!((got - 0.605697).abs() < 1e-6);
    }

    #[test]
    fn photon_likelihood_small_displacement() {
        for x in [1e-9, 1e-6, 1e-4, 0.01, 0.0316, 0.0317, 0.1] {
            let got = likelihood_photon(p(x, 0.0), PhasePoint::ORIGIN);
            let want = -(-x * x).exp_m1();
            assert!((got / want - 1.0).abs() < 2e-13, "x = {x}: {got} vs {want}");
        }
    }

    #[test]
    fn exp_kernel_accuracy() {
        let mut x = 0.0;
        while x < EXP_FLUSH {
            let want = (-x).exp();
            assert!(((exp_neg(x) - want) / want).abs() < 1e-15, "x = {x}");
            x += 0.0123;
        }
        assert_eq!(exp_neg(0.0), 1.0);
        assert_eq!(exp_neg(800.0), 0.0);
        assert_eq!(exp_neg(f64::INFINITY), 0.0);
    }

    #[test]
    fn batch_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alphas: Vec<PhasePoint> = (0..103).map(|_| uniform_disk_point(6.0, &mut rng)).collect();
        let beta = p(-0.3, 1.7);
        for inference in [InferenceModel::ErrorInclusive, InferenceModel::Ideal] {
            for outcome in [Outcome::Vacuum, Outcome::Photon] {
                let noise = NoiseModel { p_error: 0.1 };
                let mut out = vec![1.0; alphas.len()];
                apply_likelihood(outcome, &alphas, beta, noise, inference, &mut out);
                for (a, got) in alphas.iter().zip(&out) {
                    let want = likelihood(outcome, *a, beta, noise, inference);
                    assert_eq!(got.to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn noise_model_range() {
        assert!(NoiseModel::new(-0.01).is_none());
        assert!(NoiseModel::new(1.5).is_none());
        assert!(NoiseModel::new(1.0).is_some());
    }

    #[test]
    fn q_function_examples() {
        assert!((q_function(p(1.0, 0.0), p(-1.0, 0.0)) - 0.318310).abs() < 1e-6);
        assert!((q_function(p(1.0, 0.0), p(0.0, 0.0)) - 0.117099).abs() < 1e-6);
    }

    #[test]
    fn q_function_normalized() {
        // Midpoint rule on [-8, 8]^2 around alpha = (1, -0.5).
        let alpha = p(1.0, -0.5);
        let n = 800;
        let h = 16.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let b = p(-8.0 + (i as f64 + 0.5) * h, -8.0 + (j as f64 + 0.5) * h);
                total += q_function(alpha, b) * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn shot_at_exact_nulling_is_vacuum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            assert_eq!(
                simulate_shot(PhasePoint::ORIGIN, PhasePoint::ORIGIN, NoiseModel::NOISELESS, &mut rng),
                Outcome::Vacuum
            );
        }
    }

    fn within_binomial_band(hits: usize, n: usize, prob: f64) -> bool {
        let sigma = (prob * (1.0 - prob) / n as f64).sqrt();
        let freq = hits as f64 / n as f64;
        (freq - prob).abs() <= 3.0 * sigma
    }

    #[test]
    fn far_state_vacuum_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| {
                simulate_shot(p(5.0, 0.0), PhasePoint::ORIGIN, NoiseModel::NOISELESS, &mut rng)
                    == Outcome::Vacuum
            })
            .count();
        // e^-25 ~ 1.4e-11: essentially no hits expected.
        assert!(within_binomial_band(hits, n, (-25.0f64).exp()) || hits == 0);
        assert_eq!(hits, 0);
    }

    #[test]
    fn readout_flip_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 1_000_000;
        let noise = NoiseModel::new(0.1).unwrap();
        let hits = (0..n)
            .filter(|_| {
                simulate_shot(PhasePoint::ORIGIN, PhasePoint::ORIGIN, noise, &mut rng)
                    == Outcome::Photon
            })
            .count();
        assert!(within_binomial_band(hits, n, 0.1), "hits {hits}");
    }

    #[test]
    fn shot_frequency_matches_noisy_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 200_000;
        let noise = NoiseModel::new(0.2).unwrap();
        let (a, b) = (p(0.7, -0.2), p(-0.1, 0.4));
        let hits = (0..n)
            .filter(|_| simulate_shot(a, b, noise, &mut rng) == Outcome::Vacuum)
            .count();
        let expected = likelihood_with_noise(Outcome::Vacuum, a, b, noise);
        assert!(within_binomial_band(hits, n, expected));
    }

    #[test]
    fn shots_are_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..256)
                .map(|_| simulate_shot(p(0.3, 0.1), p(0.0, 0.2), NoiseModel::new(0.1).unwrap(), &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    fn finite() -> impl Strategy<Value = f64> {
        -20.0f64..20.0
    }

    proptest! {
        #[test]
        fn outcomes_sum_to_one(ar in finite(), ai in finite(), br in finite(), bi in finite(), pe in 0.0f64..=1.0) {
            let (a, b) = (p(ar, ai), p(br, bi));
            prop_assert!((likelihood_vacuum(a, b) + likelihood_photon(a, b) - 1.0).abs() < 1e-12);
            let noise = NoiseModel { p_error: pe };
            let total = likelihood_with_noise(Outcome::Vacuum, a, b, noise)
                + likelihood_with_noise(Outcome::Photon, a, b, noise);
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rotation_invariance(ar in finite(), ai in finite(), br in finite(), bi in finite(), t in 0.0f64..6.3) {
            let (a, b) = (p(ar, ai), p(br, bi));
            let direct = likelihood_vacuum(a, b);
            let rotated = likelihood_vacuum(a.rotate(t), b.rotate(t));
            prop_assert!((direct - rotated).abs() < 1e-12);
        }

        #[test]
        fn noiseless_mixture_is_bitwise_ideal(ar in finite(), ai in finite(), br in finite(), bi in finite()) {
            let (a, b) = (p(ar, ai), p(br, bi));
            for o in [Outcome::Vacuum, Outcome::Photon] {
                prop_assert_eq!(
                    likelihood_with_noise(o, a, b, NoiseModel::NOISELESS).to_bits(),
                    likelihood_ideal(o, a, b).to_bits()
                );
            }
        }
    }
}
