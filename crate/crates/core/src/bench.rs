//! Ensembles of runs: median error curves, outlier tables, parameter sweeps.
//!
//! Every variant of an ensemble reuses the same master seed and sample
//! indices, so all variants see the same true states and the same random
//! streams. Runs are spread over a fixed-size worker pool and gathered in
//! sample order, which makes every result independent of the pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{
    run_sample, run_sample_with_outlier_correction, RunConfig, RunError, RunResult,
    SnapshotSchedule,
};
use crate::policy::PolicyParams;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("median of an empty list")]
    EmptyInput,
    #[error("invalid ensemble setting `{0}`")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{aborted} of {total} runs aborted (more than 1%)")]
    TooManyAborts { aborted: usize, total: usize },
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_samples: u64,
    pub base: RunConfig,
    /// Policies to compare; empty means just `base.policy`.
    pub variants: Vec<PolicyParams>,
    pub parallelism: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_samples: 300,
            base: RunConfig {
                n_particles: 5_000,
                max_shots: 5_000,
                ..RunConfig::default()
            },
            variants: Vec::new(),
            parallelism: 1,
        }
    }
}

impl EnsembleConfig {
    pub fn invalid_field(&self) -> Option<&'static str> {
        if self.n_samples == 0 {
            return Some("n_samples");
        }
        if self.parallelism == 0 {
            return Some("parallelism");
        }
        if let Some(field) = self.base.invalid_field() {
            return Some(field);
        }
        for v in &self.variants {
            if let Some(field) = v.invalid_field() {
                return Some(match field {
                    "a" => "variants.a",
                    "b" => "variants.b",
                    "m_prime_max" => "variants.m_prime_max",
                    _ => "variants.c_threshold",
                });
            }
        }
        None
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        match self.invalid_field() {
            Some(field) => Err(BenchError::InvalidConfig(field)),
            None => Ok(()),
        }
    }

    pub fn policies(&self) -> Vec<PolicyParams> {
        if self.variants.is_empty() {
            vec![self.base.policy]
        } else {
            self.variants.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub shot: u64,
    pub median_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub policy_label: String,
    pub points: Vec<CurvePoint>,
}

/// All completed runs of one policy.
#[derive(Debug, Clone)]
pub struct VariantRuns {
    pub policy: PolicyParams,
    /// Completed runs in sample order.
    pub results: Vec<RunResult>,
    pub aborted: usize,
}

impl VariantRuns {
    pub fn label(&self) -> String {
        self.policy.label()
    }

    /// Median error over the completed runs at each recorded shot.
    pub fn curve(&self) -> Result<ErrorCurve, BenchError> {
        let shots: Vec<u64> = match self.results.first() {
            Some(first) => first.error_trace.iter().map(|p| p.shot).collect(),
            None => return Err(BenchError::EmptyInput),
        };
        let mut points = Vec::with_capacity(shots.len());
        let mut column = Vec::with_capacity(self.results.len());
        for (k, &shot) in shots.iter().enumerate() {
            column.clear();
            column.extend(self.results.iter().map(|r| r.error_trace[k].error));
            points.push(CurvePoint { shot, median_error: median(&column)? });
        }
        Ok(ErrorCurve { policy_label: self.label(), points })
    }
}

/// Median; an even count averages the two central values.
pub fn median(values: &[f64]) -> Result<f64, BenchError> {
    if values.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool, BenchError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))
}

/// Runs `n_samples` independent samples of `cfg` and keeps them in order.
/// Configuration errors fail immediately; aborted runs are counted and only
/// fail the ensemble above 1%.
pub fn run_samples<F>(
    cfg: &RunConfig,
    n_samples: u64,
    parallelism: usize,
    run: F,
) -> Result<(Vec<RunResult>, usize), BenchError>
where
    F: Fn(&RunConfig, u64) -> Result<RunResult, RunError> + Sync,
{
    cfg.validate()?;
    let outcomes: Vec<Result<RunResult, RunError>> =
        pool(parallelism)?.install(|| (0..n_samples).into_par_iter().map(|s| run(cfg, s)).collect());
    let mut results = Vec::with_capacity(outcomes.len());
    let mut aborted = 0;
    for outcome in outcomes {
        match outcome {
            Ok(result) => results.push(result),
            Err(RunError::RunAborted { .. }) => aborted += 1,
            Err(other) => return Err(other.into()),
        }
    }
    let total = n_samples as usize;
    if aborted * 100 > total {
        return Err(BenchError::TooManyAborts { aborted, total });
    }
    Ok((results, aborted))
}

/// Runs every policy variant over the same samples.
pub fn run_variants(cfg: &EnsembleConfig) -> Result<Vec<VariantRuns>, BenchError> {
    cfg.validate()?;
    let corrected = cfg.base.outlier_correction.is_some();
    cfg.policies()
        .into_iter()
        .map(|policy| {
            let run_cfg = RunConfig { policy, ..cfg.base.clone() };
            let (results, aborted) = if corrected {
                run_samples(&run_cfg, cfg.n_samples, cfg.parallelism, |c, s| {
                    run_sample_with_outlier_correction(c, s, None)
                })?
            } else {
                run_samples(&run_cfg, cfg.n_samples, cfg.parallelism, |c, s| run_sample(c, s, None))?
            };
            Ok(VariantRuns { policy, results, aborted })
        })
        .collect()
}

/// One median error curve per policy variant.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<Vec<ErrorCurve>, BenchError> {
    run_variants(cfg)?.iter().map(VariantRuns::curve).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierTable {
    pub thresholds: Vec<f64>,
    pub shot_checkpoints: Vec<u64>,
    /// `raw_counts[i][j]`: samples above `thresholds[i]` at `shot_checkpoints[j]`.
    pub raw_counts: Vec<Vec<u64>>,
    pub n_samples: u64,
}

impl OutlierTable {
    pub fn per_10k(&self, raw: u64) -> f64 {
        raw as f64 * 10_000.0 / self.n_samples as f64
    }

    pub fn count_per_10k(&self, row: usize, col: usize) -> f64 {
        self.per_10k(self.raw_counts[row][col])
    }

    /// One-sigma Poisson uncertainty of a cell, per 10 000 samples.
    pub fn uncertainty_per_10k(&self, row: usize, col: usize) -> f64 {
        self.per_10k(1).max(0.0) * (self.raw_counts[row][col] as f64).sqrt()
    }

    /// Whether every row is nonincreasing as shots grow.
    pub fn rows_nonincreasing(&self) -> bool {
        self.raw_counts.iter().all(|row| row.windows(2).all(|w| w[1] <= w[0]))
    }
}

/// Counts outlier-corrected samples whose error exceeds each threshold at
/// each checkpoint. Uses the first policy variant. Without an explicit
/// outlier setting the default one applies.
pub fn outlier_table(
    cfg: &EnsembleConfig,
    thresholds: &[f64],
    checkpoints: &[u64],
) -> Result<OutlierTable, BenchError> {
    if thresholds.is_empty() || thresholds.iter().any(|t| t.is_nan()) {
        return Err(BenchError::InvalidConfig("thresholds"));
    }
    if checkpoints.is_empty()
        || checkpoints.windows(2).any(|w| w[1] <= w[0])
        || checkpoints[0] == 0
        || *checkpoints.last().unwrap() > cfg.base.max_shots
    {
        return Err(BenchError::InvalidConfig("checkpoints"));
    }
    let mut base = cfg.base.clone();
    base.outlier_correction = Some(base.outlier_correction.unwrap_or_default());
    base.snapshots = SnapshotSchedule::Explicit { shots: checkpoints.to_vec() };
    let ensemble = EnsembleConfig {
        base,
        variants: cfg.policies().into_iter().take(1).collect(),
        ..cfg.clone()
    };
    let runs = run_variants(&ensemble)?.remove(0);
    let mut raw_counts = vec![vec![0u64; checkpoints.len()]; thresholds.len()];
    for result in &runs.results {
        for (j, &shot) in checkpoints.iter().enumerate() {
            let error = result.error_at(shot).ok_or(BenchError::InvalidConfig("checkpoints"))?;
            for (i, &threshold) in thresholds.iter().enumerate() {
                if error > threshold {
                    raw_counts[i][j] += 1;
                }
            }
        }
    }
    Ok(OutlierTable {
        thresholds: thresholds.to_vec(),
        shot_checkpoints: checkpoints.to_vec(),
        raw_counts,
        n_samples: runs.results.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub a_policy: f64,
    pub b_policy: f64,
    pub median_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub budget_shots: u64,
    pub grid: Vec<GridCell>,
    pub best: GridCell,
}

/// Median final error at `budget_shots` for every `(a, b)` pair, all cells
/// on the same samples. Ties go to the earlier cell.
pub fn grid_search(
    cfg: &EnsembleConfig,
    a_values: &[f64],
    b_values: &[f64],
    budget_shots: u64,
) -> Result<GridSearchResult, BenchError> {
    if a_values.is_empty() || b_values.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    if budget_shots == 0 {
        return Err(BenchError::InvalidConfig("budget_shots"));
    }
    let template = cfg.policies()[0];
    let mut grid = Vec::with_capacity(a_values.len() * b_values.len());
    for &a in a_values {
        for &b in b_values {
            let policy = PolicyParams { a_policy: a, b_policy: b, ..template };
            let ensemble = EnsembleConfig {
                base: RunConfig {
                    max_shots: budget_shots,
                    snapshots: SnapshotSchedule::Explicit { shots: vec![budget_shots] },
                    ..cfg.base.clone()
                },
                variants: vec![policy],
                ..cfg.clone()
            };
            let runs = run_variants(&ensemble)?.remove(0);
            let finals: Vec<f64> = runs.results.iter().map(RunResult::final_error).collect();
            grid.push(GridCell { a_policy: a, b_policy: b, median_error: median(&finals)? });
        }
    }
    let best = grid
        .iter()
        .copied()
        .reduce(|best, cell| if cell.median_error < best.median_error { cell } else { best })
        .ok_or(BenchError::EmptyInput)?;
    Ok(GridSearchResult { budget_shots, grid, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub first: String,
    pub second: String,
    /// Last shot with the old ordering.
    pub from_shot: u64,
    /// First shot with the reversed ordering.
    pub to_shot: u64,
}

/// Every reversal of the median ordering between two curves, over the shots
/// both curves share. Ties do not count as an ordering.
pub fn crossing_check(curves: &[ErrorCurve]) -> Vec<Crossing> {
    let mut crossings = Vec::new();
    for (i, a) in curves.iter().enumerate() {
        for b in &curves[i + 1..] {
            let mut last: Option<(u64, std::cmp::Ordering)> = None;
            let mut k = 0;
            for pa in &a.points {
                while k < b.points.len() && b.points[k].shot < pa.shot {
                    k += 1;
                }
                let Some(pb) = b.points.get(k).filter(|pb| pb.shot == pa.shot) else {
                    continue;
                };
                let order = pa.median_error.total_cmp(&pb.median_error);
                if order == std::cmp::Ordering::Equal {
                    continue;
                }
                if let Some((shot, prev)) = last {
                    if prev != order {
                        crossings.push(Crossing {
                            first: a.policy_label.clone(),
                            second: b.policy_label.clone(),
                            from_shot: shot,
                            to_shot: pa.shot,
                        });
                    }
                }
                last = Some((pa.shot, order));
            }
        }
    }
    crossings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{ErrorPoint, OutlierConfig};
    use crate::model::PhasePoint;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0]).unwrap(), 3.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(median(&[0.5, 0.1, 0.9]).unwrap(), 0.5);
        assert!(matches!(median(&[]), Err(BenchError::EmptyInput)));
    }

    fn curve(label: &str, values: &[(u64, f64)]) -> ErrorCurve {
        ErrorCurve {
            policy_label: label.to_string(),
            points: values.iter().map(|&(shot, median_error)| CurvePoint { shot, median_error }).collect(),
        }
    }

    #[test]
    fn parallel_curves_do_not_cross() {
        let a = curve("a", &[(1, 1.0), (2, 1.0), (4, 1.0)]);
        let b = curve("b", &[(1, 0.5), (2, 0.5), (4, 0.5)]);
        assert!(crossing_check(&[a, b]).is_empty());
    }

    #[test]
    fn swap_is_bracketed() {
        let a = curve("a", &[(1, 1.0), (2, 0.9), (4, 0.1), (8, 0.05)]);
        let b = curve("b", &[(1, 0.5), (2, 0.5), (4, 0.2), (8, 0.2)]);
        let found = crossing_check(&[a, b]);
        assert_eq!(
            found,
            vec![Crossing { first: "a".into(), second: "b".into(), from_shot: 2, to_shot: 4 }]
        );
    }

    #[test]
    fn ties_do_not_reset_ordering() {
        let a = curve("a", &[(1, 1.0), (2, 0.5), (4, 1.0)]);
        let b = curve("b", &[(1, 0.5), (2, 0.5), (4, 0.5)]);
        assert!(crossing_check(&[a, b]).is_empty());
    }

    fn constant_run(sample: u64, error: f64) -> RunResult {
        RunResult {
            sample_index: sample,
            true_state: PhasePoint::ORIGIN,
            estimate: PhasePoint::ORIGIN,
            error_trace: [1, 2, 4].iter().map(|&shot| ErrorPoint { shot, error }).collect(),
            total_shots_used: 4,
            restarts: 0,
            first_vacuum_shot: None,
            converged: true,
            resamples: 0,
        }
    }

    #[test]
    fn constant_ensemble_has_constant_median() {
        let (results, aborted) =
            run_samples(&RunConfig::default(), 101, 2, |_, s| Ok(constant_run(s, 0.25))).unwrap();
        assert_eq!(aborted, 0);
        let runs = VariantRuns { policy: PolicyParams::default(), results, aborted };
        let c = runs.curve().unwrap();
        assert!(c.points.iter().all(|p| p.median_error == 0.25));
        assert_eq!(c.points.iter().map(|p| p.shot).collect::<Vec<_>>(), vec![1, 2, 4]);
    }

    fn aborted(sample: u64) -> RunError {
        RunError::RunAborted {
            sample,
            shot: 1,
            source: crate::smc::SmcError::InvalidWeights,
        }
    }

    #[test]
    fn abort_budget_is_one_percent() {
        let cfg = RunConfig::default();
        let one = run_samples(&cfg, 100, 1, |_, s| if s == 7 { Err(aborted(s)) } else { Ok(constant_run(s, 0.1)) });
        let (results, count) = one.unwrap();
        assert_eq!((results.len(), count), (99, 1));
        let two = run_samples(&cfg, 100, 1, |_, s| if s < 2 { Err(aborted(s)) } else { Ok(constant_run(s, 0.1)) });
        assert!(matches!(two, Err(BenchError::TooManyAborts { aborted: 2, total: 100 })));
    }

    #[test]
    fn single_sample_curve_is_its_trace() {
        let cfg = EnsembleConfig {
            n_samples: 1,
            base: RunConfig { n_particles: 500, radius_r0: 3.0, max_shots: 64, ..RunConfig::default() },
            ..EnsembleConfig::default()
        };
        let curve = run_ensemble(&cfg).unwrap().remove(0);
        let run = run_sample(&cfg.base, 0, None).unwrap();
        let trace: Vec<(u64, f64)> = run.error_trace.iter().map(|p| (p.shot, p.error)).collect();
        let got: Vec<(u64, f64)> = curve.points.iter().map(|p| (p.shot, p.median_error)).collect();
        assert_eq!(got, trace);
    }

    #[test]
    fn single_cell_grid_is_best() {
        let cfg = EnsembleConfig {
            n_samples: 3,
            base: RunConfig { n_particles: 300, radius_r0: 3.0, ..RunConfig::default() },
            ..EnsembleConfig::default()
        };
        let res = grid_search(&cfg, &[0.3], &[0.1], 50).unwrap();
        assert_eq!(res.grid.len(), 1);
        assert_eq!((res.best.a_policy, res.best.b_policy), (0.3, 0.1));
    }

    #[test]
    fn infinite_threshold_counts_nothing() {
        let cfg = EnsembleConfig {
            n_samples: 4,
            base: RunConfig {
                n_particles: 300,
                radius_r0: 3.0,
                max_shots: 40,
                outlier_correction: Some(OutlierConfig { block_shots: 10, agreement_threshold: 0.5 }),
                ..RunConfig::default()
            },
            ..EnsembleConfig::default()
        };
        let table = outlier_table(&cfg, &[f64::INFINITY], &[20, 40]).unwrap();
        assert_eq!(table.raw_counts, vec![vec![0, 0]]);
        assert_eq!(table.n_samples, 4);
        assert_eq!(table.count_per_10k(0, 1), 0.0);
    }

    #[test]
    fn checkpoints_must_fit_budget() {
        let cfg = EnsembleConfig {
            n_samples: 1,
            base: RunConfig { max_shots: 10, ..RunConfig::default() },
            ..EnsembleConfig::default()
        };
        assert!(matches!(
            outlier_table(&cfg, &[1e-3], &[20]),
            Err(BenchError::InvalidConfig("checkpoints"))
        ));
    }
}
