//! Exact Bayes on a dense grid, used as a reference for the particle filter.
//!
//! The grid covers the prior disk with square cells; every cell center inside
//! the disk carries equal prior mass. Updates accumulate log-likelihoods so
//! long shot sequences never underflow.

use crate::experiment::{prior_cloud, run_sample_recorded, RunConfig, RunError};
use crate::model::{likelihood, InferenceModel, NoiseModel, PhasePoint, ShotRecord};

/// Largest instance the reference is meant for.
pub const MAX_RADIUS: f64 = 3.0;
pub const MAX_SHOTS: u64 = 100;
/// Agreement required between the particle filter and the grid.
pub const TOLERANCE: f64 = 0.05;
pub const DEFAULT_CELLS: usize = 400;

#[derive(Debug, Clone)]
pub struct GridPosterior {
    points: Vec<PhasePoint>,
    log_weights: Vec<f64>,
}

impl GridPosterior {
    /// `cells` cells per axis over the square bounding the disk.
    pub fn uniform_disk(center: PhasePoint, radius: f64, cells: usize) -> Self {
        let step = 2.0 * radius / cells as f64;
        let mut points = Vec::new();
        for i in 0..cells {
            for j in 0..cells {
                let offset = PhasePoint::new(
                    -radius + (i as f64 + 0.5) * step,
                    -radius + (j as f64 + 0.5) * step,
                );
                if offset.norm() < radius {
                    points.push(center + offset);
                }
            }
        }
        let log_weights = vec![0.0; points.len()];
        Self { points, log_weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn update(&mut self, shot: &ShotRecord, noise: NoiseModel, inference: InferenceModel) {
        for (lw, point) in self.log_weights.iter_mut().zip(&self.points) {
            *lw += likelihood(shot.outcome, *point, shot.beta, noise, inference).ln();
        }
    }

    pub fn mean(&self) -> PhasePoint {
        let top = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut total, mut re, mut im) = (0.0, 0.0, 0.0);
        for (lw, point) in self.log_weights.iter().zip(&self.points) {
            let w = (lw - top).exp();
            total += w;
            re += w * point.re;
            im += w * point.im;
        }
        PhasePoint::new(re / total, im / total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub sample: u64,
    pub shots: u64,
    pub smc_mean: PhasePoint,
    pub grid_mean: PhasePoint,
    pub discrepancy: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.discrepancy < TOLERANCE
    }
}

/// Runs sample `sample` of `cfg` through the particle filter, replays its
/// shots on the grid and compares the posterior means. `max_shots = 0`
/// compares the priors.
pub fn compare(cfg: &RunConfig, sample: u64, cells: usize) -> Result<OracleReport, RunError> {
    if !(cfg.radius_r0 <= MAX_RADIUS) {
        return Err(RunError::InvalidConfig("radius_r0"));
    }
    if cfg.max_shots > MAX_SHOTS {
        return Err(RunError::InvalidConfig("max_shots"));
    }
    if cells < 2 {
        return Err(RunError::InvalidConfig("grid_cells"));
    }
    let mut grid = GridPosterior::uniform_disk(cfg.prior_center, cfg.radius_r0, cells);
    let smc_mean = if cfg.max_shots == 0 {
        RunConfig { max_shots: 1, ..cfg.clone() }.validate()?;
        prior_cloud(cfg, sample)?.moments().mean
    } else {
        let (result, records) = run_sample_recorded(cfg, sample, None)?;
        for shot in &records {
            grid.update(shot, cfg.noise, cfg.inference);
        }
        result.estimate
    };
    let grid_mean = grid.mean();
    Ok(OracleReport {
        sample,
        shots: cfg.max_shots,
        smc_mean,
        grid_mean,
        discrepancy: smc_mean.distance(grid_mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Outcome;

    #[test]
    fn grid_prior_is_centered_disk() {
        let grid = GridPosterior::uniform_disk(PhasePoint::new(1.0, -2.0), 3.0, 300);
        let expected = std::f64::consts::PI * 150.0 * 150.0;
        assert!((grid.len() as f64 / expected - 1.0).abs() < 0.01);
        assert!(grid.mean().distance(PhasePoint::new(1.0, -2.0)) < 1e-9);
    }

    #[test]
    fn single_vacuum_pulls_mean_toward_minus_beta() {
        let mut grid = GridPosterior::uniform_disk(PhasePoint::ORIGIN, 3.0, 300);
        let beta = PhasePoint::new(-1.5, 0.5);
        grid.update(
            &ShotRecord { index: 1, beta, outcome: Outcome::Vacuum },
            NoiseModel::NOISELESS,
            InferenceModel::Ideal,
        );
        // The posterior is a Gaussian of variance 1/2 per axis clipped by the
        // disk, so the mean sits close to -beta.
        assert!(grid.mean().distance(-beta) < 0.1);
    }

    #[test]
    fn oversized_instances_rejected() {
        let cfg = RunConfig { radius_r0: 4.0, max_shots: 10, ..RunConfig::default() };
        assert!(matches!(compare(&cfg, 0, 100), Err(RunError::InvalidConfig("radius_r0"))));
        let cfg = RunConfig { radius_r0: 3.0, max_shots: 101, ..RunConfig::default() };
        assert!(matches!(compare(&cfg, 0, 100), Err(RunError::InvalidConfig("max_shots"))));
    }

    #[test]
    fn zero_shots_compares_priors() {
        let cfg = RunConfig { radius_r0: 3.0, max_shots: 0, n_particles: 100_000, ..RunConfig::default() };
        let report = compare(&cfg, 0, 300).unwrap();
        assert!(report.discrepancy < 0.02, "{report:?}");
    }
}
