//! Run records and overhead statistics.
//!
//! Medians use the mean of the two middle values for even counts, standard
//! deviations the `n - 1` denominator, and box-plot quartiles linear
//! interpolation between closest ranks (`h = (n - 1) p`).

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sample list is empty")]
    EmptySamples,
    #[error("sample {0} is not a finite number")]
    NonFinite(String),
    #[error("time must be positive, got {0}")]
    NonPositiveTime(String),
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl MetricsError {
    pub fn name(&self) -> &'static str {
        match self {
            MetricsError::EmptySamples => "EmptySamples",
            MetricsError::NonFinite(_) => "NonFinite",
            MetricsError::NonPositiveTime(_) => "NonPositiveTime",
            MetricsError::Parse { .. } => "ParseError",
            MetricsError::IoFailure { .. } => "IoFailure",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> MetricsError + '_ {
    move |source| MetricsError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted<F: Scalar>(samples: &[F]) -> Result<Vec<F>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(bad.to_string()));
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values are ordered"));
    Ok(v)
}

fn median_of_sorted<F: Scalar>(v: &[F]) -> F {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / F::lit(2.0)
    }
}

pub fn median<F: Scalar>(samples: &[F]) -> Result<F, MetricsError> {
    Ok(median_of_sorted(&sorted(samples)?))
}

pub fn mean<F: Scalar>(samples: &[F]) -> Result<F, MetricsError> {
    let v = sorted(samples)?;
    Ok(v.iter().copied().sum::<F>() / F::from_count(v.len()))
}

/// Sample standard deviation (`n - 1` denominator); zero for a single sample.
pub fn sample_std<F: Scalar>(samples: &[F]) -> Result<F, MetricsError> {
    let m = mean(samples)?;
    let n = samples.len();
    if n < 2 {
        return Ok(F::zero());
    }
    let ss: F = samples.iter().map(|&x| (x - m) * (x - m)).sum();
    Ok((ss / F::from_count(n - 1)).sqrt())
}

fn quantile_of_sorted<F: Scalar>(v: &[F], p: F) -> F {
    let h = F::from_count(v.len() - 1) * p;
    let lo = h.floor();
    let i = lo.to_usize().unwrap_or(0).min(v.len() - 1);
    let j = (i + 1).min(v.len() - 1);
    v[i] + (h - lo) * (v[j] - v[i])
}

/// Quantile `p` in `[0, 1]` by linear interpolation between closest ranks.
pub fn quantile<F: Scalar>(samples: &[F], p: F) -> Result<F, MetricsError> {
    Ok(quantile_of_sorted(&sorted(samples)?, p))
}

/// Five-number summary for a box plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSummary<F> {
    pub count: usize,
    pub min: F,
    pub q1: F,
    pub median: F,
    pub q3: F,
    pub max: F,
}

impl<F: Scalar> BoxSummary<F> {
    pub fn of(samples: &[F]) -> Result<Self, MetricsError> {
        let v = sorted(samples)?;
        Ok(BoxSummary {
            count: v.len(),
            min: v[0],
            q1: quantile_of_sorted(&v, F::lit(0.25)),
            median: median_of_sorted(&v),
            q3: quantile_of_sorted(&v, F::lit(0.75)),
            max: v[v.len() - 1],
        })
    }
}

/// Median relative overhead of an instrumented variant against a baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadReport<F> {
    pub median_with_s: F,
    pub median_without_s: F,
    /// `(median_with - median_without) / median_with`
    pub relative_overhead: F,
    pub std_with_s: F,
    pub std_without_s: F,
}

pub fn relative_overhead<F: Scalar>(
    samples_with: &[F],
    samples_without: &[F],
) -> Result<OverheadReport<F>, MetricsError> {
    let median_with_s = median(samples_with)?;
    let median_without_s = median(samples_without)?;
    if median_with_s <= F::zero() {
        return Err(MetricsError::NonPositiveTime(median_with_s.to_string()));
    }
    Ok(OverheadReport {
        median_with_s,
        median_without_s,
        relative_overhead: (median_with_s - median_without_s) / median_with_s,
        std_with_s: sample_std(samples_with)?,
        std_without_s: sample_std(samples_without)?,
    })
}

/// Failure-free overhead `(t_ff - t_base) / t_ff`.
pub fn failure_free_overhead<F: Scalar>(t_ff: F, t_base: F) -> Result<F, MetricsError> {
    if !(t_ff > F::zero()) || !t_ff.is_finite() {
        return Err(MetricsError::NonPositiveTime(t_ff.to_string()));
    }
    if !t_base.is_finite() {
        return Err(MetricsError::NonFinite(t_base.to_string()));
    }
    Ok((t_ff - t_base) / t_ff)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Instrumented,
    Baseline,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Instrumented => "instrumented",
            Variant::Baseline => "baseline",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "instrumented" => Ok(Variant::Instrumented),
            "baseline" => Ok(Variant::Baseline),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

/// Timing record of one harness run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub variant: Variant,
    pub total_wall_s: f64,
    pub superstep_wall_s: Vec<f64>,
    pub checkpoint_cost_s: Vec<f64>,
    pub recovery_cost_s: Vec<f64>,
    pub fault_count: u64,
}

impl RunRecord {
    pub fn new(run_id: impl Into<String>, variant: Variant) -> Self {
        RunRecord {
            run_id: run_id.into(),
            variant,
            total_wall_s: 0.0,
            superstep_wall_s: Vec::new(),
            checkpoint_cost_s: Vec::new(),
            recovery_cost_s: Vec::new(),
            fault_count: 0,
        }
    }
}

/// Splits records into (instrumented, baseline) wall-time samples.
pub fn wall_times(records: &[RunRecord]) -> (Vec<f64>, Vec<f64>) {
    let pick = |v: Variant| {
        records
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.total_wall_s)
            .collect::<Vec<_>>()
    };
    (pick(Variant::Instrumented), pick(Variant::Baseline))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    /// `.csv` means CSV, anything else JSON.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ExportFormat::Csv,
            _ => ExportFormat::Json,
        }
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown format {other:?}, expected csv or json")),
        }
    }
}

pub const CSV_HEADER: [&str; 4] = ["run_id", "variant", "total_wall_s", "fault_count"];
pub const SUMMARY_HEADER: &str = "variant,count,min,q1,median,q3,max";

/// Path of the box-plot summary written next to `path`.
pub fn summary_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".summary");
    PathBuf::from(s)
}

/// Writes `records` to `path` and per-variant box-plot summaries to `<path>.summary`.
pub fn export(records: &[RunRecord], path: &Path, format: ExportFormat) -> Result<(), MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    match format {
        ExportFormat::Json => {
            let text = serde_json::to_string_pretty(records).expect("records serialize");
            fs::write(path, text + "\n").map_err(io_err(path))?;
        }
        ExportFormat::Csv => {
            let file = File::create(path).map_err(io_err(path))?;
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            let csv_err = |e: csv::Error| MetricsError::IoFailure {
                path: path.to_path_buf(),
                source: io::Error::other(e),
            };
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in records {
                w.write_record([
                    r.run_id.clone(),
                    r.variant.to_string(),
                    r.total_wall_s.to_string(),
                    r.fault_count.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(io_err(path))?;
        }
    }
    write_summary(records, &summary_path(path))
}

/// Writes one summary row per variant present in `records`.
pub fn write_summary(records: &[RunRecord], path: &Path) -> Result<(), MetricsError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{SUMMARY_HEADER}").map_err(io_err(path))?;
    for variant in [Variant::Instrumented, Variant::Baseline] {
        let samples: Vec<f64> = records
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.total_wall_s)
            .collect();
        if samples.is_empty() {
            continue;
        }
        let s = BoxSummary::of(&samples)?;
        writeln!(
            w,
            "{variant},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.count, s.min, s.q1, s.median, s.q3, s.max
        )
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn import_json(path: &Path) -> Result<Vec<RunRecord>, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| MetricsError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

/// Reads the CSV export. Per-superstep and cost lists are not part of the
/// CSV layout and come back empty.
pub fn import_csv(path: &Path) -> Result<Vec<RunRecord>, MetricsError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: u64, message: String| MetricsError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if i == 0 {
            if row.iter().map(str::trim).ne(CSV_HEADER) {
                return Err(parse_err(
                    line,
                    format!("expected header {}", CSV_HEADER.join(",")),
                ));
            }
            continue;
        }
        if row.len() != CSV_HEADER.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", CSV_HEADER.len(), row.len()),
            ));
        }
        let variant = row[1].parse::<Variant>().map_err(|m| parse_err(line, m))?;
        let total_wall_s: f64 = row[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad total_wall_s {:?}", &row[2])))?;
        if !(total_wall_s.is_finite() && total_wall_s > 0.0) {
            return Err(parse_err(line, format!("total_wall_s must be positive, got {total_wall_s}")));
        }
        let fault_count: u64 = row[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad fault_count {:?}", &row[3])))?;
        records.push(RunRecord {
            total_wall_s,
            fault_count,
            ..RunRecord::new(row[0].trim(), variant)
        });
    }
    Ok(records)
}

/// Loads records, choosing the parser from the file extension.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>, MetricsError> {
    match ExportFormat::for_path(path) {
        ExportFormat::Csv => import_csv(path),
        ExportFormat::Json => import_json(path),
    }
}
