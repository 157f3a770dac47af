//! Configuration loading, subcommand execution and result serialization for
//! the `coherent-bayes` binary.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use coherent_bayes::bench::{
    grid_search, outlier_table, run_ensemble, BenchError, EnsembleConfig, ErrorCurve, GridSearchResult,
    OutlierTable,
};
use coherent_bayes::experiment::{run_single, run_with_outlier_correction, RunConfig, RunError, RunResult};
use coherent_bayes::oracle::{self, OracleReport};
use coherent_bayes::PolicyParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config value for `{field}`")]
    Validation { field: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

impl CliError {
    fn validation(field: &str) -> Self {
        CliError::Validation { field: field.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub n_samples: u64,
    pub parallelism: usize,
    pub variants: Vec<PolicyParams>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let defaults = EnsembleConfig::default();
        Self {
            n_samples: defaults.n_samples,
            parallelism: defaults.parallelism,
            variants: defaults.variants,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableSection {
    pub thresholds: Vec<f64>,
    pub checkpoints: Vec<u64>,
}

impl Default for TableSection {
    fn default() -> Self {
        Self {
            thresholds: vec![1e-5, 1e-4, 1e-3],
            checkpoints: vec![20_000, 40_000, 60_000, 80_000, 100_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    pub budget_shots: u64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            a_values: vec![0.02, 0.04, 0.1, 0.3, 1.0],
            b_values: vec![0.0, 0.05, 0.1],
            budget_shots: 5_000,
        }
    }
}

/// Small instance compared against the dense grid. Policy, noise, resampling
/// and seed come from `[run]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub n_particles: usize,
    pub radius_r0: f64,
    pub max_shots: u64,
    pub grid_cells: usize,
    pub samples: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            radius_r0: 3.0,
            max_shots: 50,
            grid_cells: oracle::DEFAULT_CELLS,
            samples: 1,
        }
    }
}

/// The whole configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunConfig,
    pub ensemble: EnsembleSection,
    pub table: TableSection,
    pub gridsearch: GridSection,
    pub oracle: OracleSection,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match unknown_field(&msg) {
                Some(field) => CliError::Validation { field },
                None => CliError::Parse(e.to_string()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(field) = self.run.invalid_field() {
            return Err(CliError::validation(&format!("run.{field}")));
        }
        if let Some(field) = self.ensemble_config().invalid_field() {
            return Err(CliError::validation(&format!("ensemble.{field}")));
        }
        let t = &self.table;
        if t.thresholds.is_empty() || t.thresholds.iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(CliError::validation("table.thresholds"));
        }
        if t.checkpoints.is_empty() || t.checkpoints[0] == 0 || t.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::validation("table.checkpoints"));
        }
        let g = &self.gridsearch;
        if g.a_values.is_empty() || g.a_values.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(CliError::validation("gridsearch.a_values"));
        }
        if g.b_values.is_empty() || g.b_values.iter().any(|b| !b.is_finite()) {
            return Err(CliError::validation("gridsearch.b_values"));
        }
        if g.budget_shots == 0 {
            return Err(CliError::validation("gridsearch.budget_shots"));
        }
        let o = &self.oracle;
        if o.n_particles < 2 {
            return Err(CliError::validation("oracle.n_particles"));
        }
        if !(o.radius_r0 > 0.0 && o.radius_r0 <= oracle::MAX_RADIUS) {
            return Err(CliError::validation("oracle.radius_r0"));
        }
        if o.max_shots > oracle::MAX_SHOTS {
            return Err(CliError::validation("oracle.max_shots"));
        }
        if o.grid_cells < 2 {
            return Err(CliError::validation("oracle.grid_cells"));
        }
        if o.samples == 0 {
            return Err(CliError::validation("oracle.samples"));
        }
        Ok(())
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            n_samples: self.ensemble.n_samples,
            base: self.run.clone(),
            variants: self.ensemble.variants.clone(),
            parallelism: self.ensemble.parallelism,
        }
    }

    pub fn oracle_run_config(&self) -> RunConfig {
        RunConfig {
            n_particles: self.oracle.n_particles,
            radius_r0: self.oracle.radius_r0,
            max_shots: self.oracle.max_shots,
            outlier_correction: None,
            ..self.run.clone()
        }
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest.split('`').next()?.to_string())
}

/// Reads, parses and validates a configuration document.
pub fn load_config(path: &Path) -> Result<Config, CliError> {
    Config::parse(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    JsonLines,
}

#[derive(Debug, Clone)]
pub enum Results {
    Run(RunResult),
    Curves(Vec<ErrorCurve>),
    Table(OutlierTable),
    Grid(GridSearchResult),
    Oracle(Vec<OracleReport>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Ensemble,
    Table,
    GridSearch,
    OracleCheck,
}

pub fn execute(command: Command, cfg: &Config) -> Result<Results, CliError> {
    cfg.validate()?;
    Ok(match command {
        Command::Run => Results::Run(if cfg.run.outlier_correction.is_some() {
            run_with_outlier_correction(&cfg.run, None)?
        } else {
            run_single(&cfg.run, None)?
        }),
        Command::Ensemble => Results::Curves(run_ensemble(&cfg.ensemble_config())?),
        Command::Table => {
            let t = &cfg.table;
            Results::Table(outlier_table(&cfg.ensemble_config(), &t.thresholds, &t.checkpoints)?)
        }
        Command::GridSearch => {
            let g = &cfg.gridsearch;
            Results::Grid(grid_search(&cfg.ensemble_config(), &g.a_values, &g.b_values, g.budget_shots)?)
        }
        Command::OracleCheck => {
            let run = cfg.oracle_run_config();
            let reports = (0..cfg.oracle.samples)
                .map(|s| oracle::compare(&run, s, cfg.oracle.grid_cells))
                .collect::<Result<Vec<_>, _>>()?;
            Results::Oracle(reports)
        }
    })
}

/// `x` with 9 significant digits, in the shorter of fixed and exponent
/// notation, trailing zeros removed.
pub fn format_real(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn rounded(x: f64) -> f64 {
    format_real(x).parse().unwrap_or(x)
}

#[derive(Serialize)]
struct CurveRecord<'a> {
    policy_label: &'a str,
    shot_count: u64,
    median_error: f64,
}

#[derive(Serialize)]
struct TableRecord {
    epsilon_sq: f64,
    checkpoint: u64,
    count_per_10k: f64,
    n_samples: u64,
}

#[derive(Serialize)]
struct TraceRecord {
    sample_index: u64,
    shot_count: u64,
    normalized_sq_error: f64,
}

#[derive(Serialize)]
struct GridRecord {
    a_policy: f64,
    b_policy: f64,
    budget_shots: u64,
    median_error: f64,
    best: bool,
}

#[derive(Serialize)]
struct OracleRecord {
    sample_index: u64,
    shots: u64,
    discrepancy: f64,
    tolerance: f64,
    passed: bool,
}

fn json<T: Serialize>(record: &T) -> serde_json::Value {
    serde_json::to_value(record).expect("records always serialize")
}

/// Header and rows: `(csv fields, json object)` per record.
fn records(results: &Results) -> (Vec<&'static str>, Vec<(Vec<String>, serde_json::Value)>) {
    let mut rows = Vec::new();
    let header = match results {
        Results::Curves(curves) => {
            for c in curves {
                for p in &c.points {
                    let rec = CurveRecord {
                        policy_label: &c.policy_label,
                        shot_count: p.shot,
                        median_error: rounded(p.median_error),
                    };
                    rows.push((
                        vec![c.policy_label.clone(), p.shot.to_string(), format_real(p.median_error)],
                        json(&rec),
                    ));
                }
            }
            vec!["policy_label", "shot_count", "median_error"]
        }
        Results::Table(t) => {
            for (i, &eps) in t.thresholds.iter().enumerate() {
                for (j, &checkpoint) in t.shot_checkpoints.iter().enumerate() {
                    let count = t.count_per_10k(i, j);
                    let rec = TableRecord {
                        epsilon_sq: rounded(eps),
                        checkpoint,
                        count_per_10k: rounded(count),
                        n_samples: t.n_samples,
                    };
                    rows.push((
                        vec![format_real(eps), checkpoint.to_string(), format_real(count), t.n_samples.to_string()],
                        json(&rec),
                    ));
                }
            }
            vec!["epsilon_sq", "checkpoint", "count_per_10k", "n_samples"]
        }
        Results::Run(r) => {
            for p in &r.error_trace {
                let rec = TraceRecord {
                    sample_index: r.sample_index,
                    shot_count: p.shot,
                    normalized_sq_error: rounded(p.error),
                };
                rows.push((
                    vec![r.sample_index.to_string(), p.shot.to_string(), format_real(p.error)],
                    json(&rec),
                ));
            }
            vec!["sample_index", "shot_count", "normalized_sq_error"]
        }
        Results::Grid(g) => {
            for cell in &g.grid {
                let best = cell == &g.best;
                let rec = GridRecord {
                    a_policy: rounded(cell.a_policy),
                    b_policy: rounded(cell.b_policy),
                    budget_shots: g.budget_shots,
                    median_error: rounded(cell.median_error),
                    best,
                };
                rows.push((
                    vec![
                        format_real(cell.a_policy),
                        format_real(cell.b_policy),
                        g.budget_shots.to_string(),
                        format_real(cell.median_error),
                        best.to_string(),
                    ],
                    json(&rec),
                ));
            }
            vec!["a_policy", "b_policy", "budget_shots", "median_error", "best"]
        }
        Results::Oracle(reports) => {
            for r in reports {
                let rec = OracleRecord {
                    sample_index: r.sample,
                    shots: r.shots,
                    discrepancy: rounded(r.discrepancy),
                    tolerance: oracle::TOLERANCE,
                    passed: r.passed(),
                };
                rows.push((
                    vec![
                        r.sample.to_string(),
                        r.shots.to_string(),
                        format_real(r.discrepancy),
                        format_real(oracle::TOLERANCE),
                        r.passed().to_string(),
                    ],
                    json(&rec),
                ));
            }
            vec!["sample_index", "shots", "discrepancy", "tolerance", "passed"]
        }
    };
    (header, rows)
}

/// Writes `results` as CSV (header plus one line per record) or as one JSON
/// object per line.
pub fn write_results<W: Write>(results: &Results, format: Format, out: W) -> Result<(), CliError> {
    let (header, rows) = records(results);
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
            let io_err = |e: csv::Error| CliError::Io(io::Error::other(e));
            w.write_record(&header).map_err(io_err)?;
            for (fields, _) in &rows {
                w.write_record(fields).map_err(io_err)?;
            }
            w.flush()?;
        }
        Format::JsonLines => {
            let mut out = io::BufWriter::new(out);
            for (_, value) in &rows {
                serde_json::to_writer(&mut out, value).map_err(|e| CliError::Io(e.into()))?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

pub fn emit_results(results: &Results, format: Format, path: &Path) -> Result<(), CliError> {
    write_results(results, format, fs::File::create(path)?)
}

/// Human-readable digest for the terminal.
pub fn summary(results: &Results) -> String {
    match results {
        Results::Run(r) => format!(
            "true state {} estimate {} final error {} after {} shots, restarts {}, converged {}",
            r.true_state,
            r.estimate,
            format_real(r.final_error()),
            r.total_shots_used,
            r.restarts,
            r.converged
        ),
        Results::Curves(curves) => curves
            .iter()
            .map(|c| {
                let last = c.points.last().map_or(f64::NAN, |p| p.median_error);
                format!("{}: final median error {}", c.policy_label, format_real(last))
            })
            .collect::<Vec<_>>()
            .join("\n"),
        Results::Table(t) => {
            let mut lines = vec![format!("outliers per 10 000 samples ({} samples)", t.n_samples)];
            for (i, eps) in t.thresholds.iter().enumerate() {
                let cells: Vec<String> = (0..t.shot_checkpoints.len())
                    .map(|j| {
                        format!(
                            "{}±{}",
                            format_real(t.count_per_10k(i, j)),
                            format_real(t.uncertainty_per_10k(i, j))
                        )
                    })
                    .collect();
                lines.push(format!("  {}: {}", format_real(*eps), cells.join("  ")));
            }
            lines.join("\n")
        }
        Results::Grid(g) => format!(
            "best a={} b={} median error {}",
            format_real(g.best.a_policy),
            format_real(g.best.b_policy),
            format_real(g.best.median_error)
        ),
        Results::Oracle(reports) => reports
            .iter()
            .map(|r| {
                format!(
                    "{} sample {}: discrepancy {} (tolerance {})",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.sample,
                    format_real(r.discrepancy),
                    format_real(oracle::TOLERANCE)
                )
            })
            .collect::<Vec<_>>()
            .join("\n"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_formatting() {
        assert_eq!(format_real(0.5), "0.5");
        assert_eq!(format_real(207.0), "207");
        assert_eq!(format_real(1e-3), "0.001");
        assert_eq!(format_real(1e-5), "0.00001");
        assert_eq!(format_real(1e-6), "1e-6");
        assert_eq!(format_real(1.0 / 3.0), "0.333333333");
        assert_eq!(format_real(123456789.0), "123456789");
        assert_eq!(format_real(1.23456789e9), "1.23456789e9");
        assert_eq!(format_real(2.0f64.sqrt() * 1e-7), "1.41421356e-7");
        assert_eq!(format_real(f64::INFINITY), "inf");
    }

    #[test]
    fn unknown_field_names_field() {
        assert_eq!(unknown_field("unknown field `foo`, expected one of `a`"), Some("foo".into()));
        assert_eq!(unknown_field("invalid type"), None);
    }
}
