//! Library side of the `qlb` binary: scenario loading, single runs,
//! policy comparisons and output files.
//!
//! Exit codes:
//!
//! | code | meaning                                            |
//! |------|----------------------------------------------------|
//! | 0    | success                                            |
//! | 1    | other failure                                      |
//! | 2    | usage error (bad flags, bad policy or seed lists)  |
//! | 3    | I/O error (unreadable scenario, unwritable output) |
//! | 4    | scenario validation error                          |
//! | 5    | invariant violation during a run                   |

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use qlb_core::event_log::write_jsonl;
use qlb_core::metrics::{csv_header, csv_row, fmt_sig6, CSV_COLUMNS};
use qlb_core::scenario::OutputFormat;
use qlb_core::{normalized_dump, parse_scenario, run, EngineError, MetricsReport, Mode, ScenarioConfig, ScenarioError, SupervisorConfig};
use rayon::prelude::*;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_VALIDATION: u8 = 4;
pub const EXIT_INVARIANT: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Validation {
        path: PathBuf,
        #[source]
        source: ScenarioError,
    },
    #[error("{run_id}: {source}")]
    Run {
        run_id: String,
        #[source]
        source: EngineError,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Validation { .. } => EXIT_VALIDATION,
            CliError::Run {
                source: EngineError::Config(_),
                ..
            } => EXIT_VALIDATION,
            CliError::Run {
                source: EngineError::InvariantViolation { .. },
                ..
            } => EXIT_INVARIANT,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_scenario(&text).map_err(|source| CliError::Validation {
        path: path.to_path_buf(),
        source,
    })
}

/// Normalized dump of a valid scenario.
pub fn validate_command(path: &Path) -> Result<String, CliError> {
    load_scenario(path).map(|cfg| normalized_dump(&cfg))
}

/// Files written by one run, in the order they were written.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub run_id: String,
    pub paths: Vec<PathBuf>,
    pub report: MetricsReport,
}

fn out_dir(cfg: &ScenarioConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output.dir))
}

fn execute(cfg: &ScenarioConfig) -> Result<qlb_core::RunOutput, CliError> {
    run(cfg).map_err(|source| CliError::Run {
        run_id: cfg.run_id(),
        source,
    })
}

/// Runs one scenario and writes `<run_id>.events.jsonl`,
/// `<run_id>.report.json` and `<run_id>.report.csv` (as selected by the
/// scenario's output formats) into `out`, or the scenario's output dir.
pub fn run_command(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunFiles, CliError> {
    let mut cfg = load_scenario(path)?;
    if let Some(seed) = seed {
        cfg.workload.seed = seed;
    }
    let dir = out_dir(&cfg, out);
    let output = execute(&cfg)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let run_id = cfg.run_id();
    let mut paths = Vec::new();
    for format in &cfg.output.formats {
        let (file, bytes) = match format {
            OutputFormat::Jsonl => {
                let mut buf = Vec::new();
                write_jsonl(&output.log, &mut buf).map_err(|e| CliError::Other(e.to_string()))?;
                (format!("{run_id}.events.jsonl"), buf)
            }
            OutputFormat::Json => {
                let mut buf = serde_json::to_vec_pretty(&output.report).map_err(|e| CliError::Other(e.to_string()))?;
                buf.push(b'\n');
                (format!("{run_id}.report.json"), buf)
            }
            OutputFormat::Csv => (
                format!("{run_id}.report.csv"),
                format!("{}\n{}\n", csv_header(), csv_row(&output.report)).into_bytes(),
            ),
        };
        let p = dir.join(file);
        fs::write(&p, bytes).map_err(io_err(&p))?;
        paths.push(p);
    }
    Ok(RunFiles {
        run_id,
        paths,
        report: output.report,
    })
}

/// Parses a comma-separated list, skipping empty items.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    split_list(s)
        .iter()
        .map(|x| x.parse::<u64>().map_err(|_| CliError::Usage(format!("bad seed {x:?}"))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub csv: String,
    pub path: PathBuf,
    pub reports: Vec<MetricsReport>,
}

/// Runs every (policy, seed) pair and builds the comparison table: one row
/// per pair in policy order then seed order, followed by one `mean` row
/// per policy.
///
/// `PULL_RL` selects pull mode; any other label is a push policy tag. Pull
/// sub-runs reuse the scenario's supervisor section when it has one.
pub fn compare_command(path: &Path, policies: &[String], seeds: &[u64], out: Option<&Path>) -> Result<Comparison, CliError> {
    if policies.len() < 2 {
        return Err(CliError::Usage("compare needs at least two policies".into()));
    }
    if seeds.is_empty() {
        return Err(CliError::Usage("compare needs at least one seed".into()));
    }
    let base = load_scenario(path)?;
    let supervisor = match &base.mode {
        Mode::PullRl(s) => s.clone(),
        Mode::Push(_) => SupervisorConfig::default(),
    };
    let modes: Vec<Mode> = policies
        .iter()
        .map(|p| Mode::from_label(p, supervisor.clone()).ok_or_else(|| CliError::Usage(format!("unknown policy {p:?}"))))
        .collect::<Result<_, _>>()?;

    let jobs: Vec<ScenarioConfig> = modes
        .iter()
        .flat_map(|m| {
            seeds.iter().map(|&seed| {
                let mut cfg = base.clone();
                cfg.mode = m.clone();
                cfg.workload.seed = seed;
                cfg
            })
        })
        .collect();
    let results: Vec<Result<MetricsReport, CliError>> = jobs.par_iter().map(|cfg| execute(cfg).map(|o| o.report)).collect();
    let reports: Vec<MetricsReport> = results.into_iter().collect::<Result<_, _>>()?;

    let mut csv = csv_header();
    csv.push('\n');
    for r in &reports {
        csv += &csv_row(r);
        csv.push('\n');
    }
    for (i, m) in modes.iter().enumerate() {
        let group = &reports[i * seeds.len()..(i + 1) * seeds.len()];
        csv += &mean_row(&base.name, m.name(), &m.policy_label(), group);
        csv.push('\n');
    }

    let dir = out_dir(&base, out);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let p = dir.join(format!("{}-compare.csv", base.name));
    fs::write(&p, &csv).map_err(io_err(&p))?;
    Ok(Comparison { csv, path: p, reports })
}

/// Numeric columns of a report in CSV order, `None` where the report has
/// no value (no completions, say).
pub fn numeric_columns(r: &MetricsReport) -> Vec<Option<f64>> {
    let rt = r.response_time;
    let dt = r.distribution_time;
    vec![
        Some(r.generated as f64),
        Some(r.completed as f64),
        Some(r.dropped as f64),
        Some(r.throughput),
        rt.map(|x| x.mean),
        rt.map(|x| x.p50),
        rt.map(|x| x.p95),
        rt.map(|x| x.p99),
        dt.map(|x| x.mean),
        dt.map(|x| x.p95),
        Some(r.skew as f64),
        r.jain,
        Some(r.evictions.len() as f64),
    ]
}

fn mean_row(name: &str, mode: &str, policy: &str, group: &[MetricsReport]) -> String {
    let cols: Vec<Vec<Option<f64>>> = group.iter().map(numeric_columns).collect();
    let mut fields = vec![
        format!("{name}-{}-mean", policy.to_ascii_lowercase()),
        mode.to_string(),
        policy.to_string(),
        "mean".to_string(),
    ];
    for c in 0..CSV_COLUMNS.len() - 4 {
        let present: Vec<f64> = cols.iter().filter_map(|row| row[c]).collect();
        fields.push(if present.is_empty() {
            String::new()
        } else {
            fmt_sig6(present.iter().sum::<f64>() / present.len() as f64)
        });
    }
    fields.join(",")
}
