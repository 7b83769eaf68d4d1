use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use faultline::config::{Config, ConfigError};
use faultline::detector::TerminationWatcher;
use faultline::harness::{self, FaultPlan, Harness, HarnessError, RunOutcome, RunStatus, WorkerMode};
use faultline::metrics::{self, ExportFormat, MetricsError, RunRecord, Variant};
use faultline::store::{self, StoreError};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_RESUMABLE: u8 = 3;

#[derive(Parser)]
#[command(name = "faultline", version, about = "Checkpoint/restart harness for BSP applications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured application from its initial state.
    Run(ConfigArgs),
    /// Continue from the latest valid checkpoint.
    Resume(ConfigArgs),
    /// Paired instrumented and baseline runs.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides run.repetitions.
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Overhead report over one or more run-record files.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Record file format; inferred from the extension by default.
        #[arg(long)]
        format: Option<ExportFormat>,
        /// Box-plot summary output; defaults to `<first records file>.summary`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Describe a checkpoint file, or every checkpoint in a directory.
    Inspect { path: PathBuf },
    #[command(hide = true)]
    Worker,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// `section.key=value`, applied after the file is parsed.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(format!("{}: {e}", e.name())),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::Runtime(format!("{}: {e}", e.name()))
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::Runtime(format!("{}: {e}", e.name()))
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Run(args) => execute(&args, false),
        Command::Resume(args) => execute(&args, true),
        Command::Bench {
            config,
            repetitions,
        } => bench(&config, repetitions),
        Command::Report {
            records,
            format,
            summary,
        } => report(&records, format, summary),
        Command::Inspect { path } => inspect(&path),
        Command::Worker => {
            harness::worker_main(io::stdin().lock(), io::stdout().lock())
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            Ok(0)
        }
    }
}

fn process_workers() -> Result<WorkerMode, Failure> {
    Ok(WorkerMode::Process {
        program: std::env::current_exe()?,
        args: vec!["worker".to_owned()],
    })
}

fn execute(args: &ConfigArgs, resuming: bool) -> Result<u8, Failure> {
    let cfg = Config::load(&args.config, &args.overrides)?;
    let signal = cfg.detector.signal()?;
    let watcher = TerminationWatcher::bind_os_signal(signal)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let h = Harness::new(cfg.app, cfg.run_config(process_workers()?)).with_watcher(Arc::new(watcher));
    let outcome = if resuming {
        h.resume(&FaultPlan::none())?
    } else {
        h.run(&cfg.fault_plan()?)?
    };
    if let Some(path) = &cfg.output.records {
        append_records(path, std::slice::from_ref(&outcome.record))?;
    }
    print_outcome(&outcome, cfg.output.records.as_deref())?;
    Ok(match outcome.status {
        RunStatus::Completed => 0,
        RunStatus::Resumable { .. } => EXIT_RESUMABLE,
    })
}

fn print_outcome(o: &RunOutcome, records: Option<&Path>) -> io::Result<()> {
    let mut out = io::stdout().lock();
    match o.status {
        RunStatus::Completed => writeln!(out, "status: completed")?,
        RunStatus::Resumable { epoch } => writeln!(out, "status: resumable\nepoch: {epoch}")?,
    }
    writeln!(out, "supersteps_run: {}", o.record.superstep_wall_s.len())?;
    writeln!(out, "faults: {}", o.record.fault_count)?;
    writeln!(out, "checkpoints: {}", o.committed_epochs.len())?;
    writeln!(out, "total_wall_s: {:.6}", o.record.total_wall_s)?;
    writeln!(out, "state_crc32: {:08x}", store::format::crc32(&o.global))?;
    if let Some(p) = records {
        writeln!(out, "records: {}", p.display())?;
    }
    Ok(())
}

fn append_records(path: &Path, new: &[RunRecord]) -> Result<(), Failure> {
    let mut all = if path.exists() {
        metrics::load_records(path)?
    } else {
        Vec::new()
    };
    all.extend_from_slice(new);
    metrics::export(&all, path, ExportFormat::for_path(path))?;
    Ok(())
}

fn bench(args: &ConfigArgs, repetitions: Option<usize>) -> Result<u8, Failure> {
    let cfg = Config::load(&args.config, &args.overrides)?;
    let reps = repetitions.unwrap_or(cfg.run.repetitions);
    let result = harness::bench(&cfg.app, &cfg.run_config(process_workers()?), reps)?;
    let mut records = result.instrumented;
    records.extend(result.baseline);
    if let Some(path) = &cfg.output.records {
        append_records(path, &records)?;
    }
    print_report(&records)?;
    Ok(0)
}

fn report(paths: &[PathBuf], format: Option<ExportFormat>, summary: Option<PathBuf>) -> Result<u8, Failure> {
    let mut records = Vec::new();
    for p in paths {
        let loaded = match format.unwrap_or_else(|| ExportFormat::for_path(p)) {
            ExportFormat::Csv => metrics::import_csv(p)?,
            ExportFormat::Json => metrics::import_json(p)?,
        };
        records.extend(loaded);
    }
    print_report(&records)?;
    let summary = summary.unwrap_or_else(|| metrics::summary_path(&paths[0]));
    metrics::write_summary(&records, &summary)?;
    Ok(0)
}

fn print_report(records: &[RunRecord]) -> Result<(), Failure> {
    let (with, without) = metrics::wall_times(records);
    let r = metrics::relative_overhead(&with, &without)?;
    let mut out = io::stdout().lock();
    writeln!(out, "runs_with: {}", with.len())?;
    writeln!(out, "runs_without: {}", without.len())?;
    writeln!(out, "median_with_s: {:.6}", r.median_with_s)?;
    writeln!(out, "median_without_s: {:.6}", r.median_without_s)?;
    writeln!(out, "relative_overhead: {:.6}", r.relative_overhead)?;
    writeln!(out, "std_with_s: {:.6}", r.std_with_s)?;
    writeln!(out, "std_without_s: {:.6}", r.std_without_s)?;
    let fault_free: Vec<f64> = records
        .iter()
        .filter(|r| r.variant == Variant::Instrumented && r.fault_count == 0)
        .map(|r| r.total_wall_s)
        .collect();
    match metrics::median(&fault_free) {
        Ok(t_ff) => writeln!(
            out,
            "failure_free_overhead: {:.6}",
            metrics::failure_free_overhead(t_ff, r.median_without_s)?
        )?,
        Err(_) => writeln!(out, "failure_free_overhead: n/a")?,
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<u8, Failure> {
    let mut out = io::stdout().lock();
    if path.is_dir() {
        let files = store::list_checkpoints(path)?;
        if files.is_empty() {
            return Err(Failure::Runtime(format!("no checkpoint files in {}", path.display())));
        }
        for (i, (_, file)) in files.iter().enumerate() {
            if i > 0 {
                writeln!(out)?;
            }
            write!(out, "{}", store::inspect(file)?)?;
        }
    } else {
        write!(out, "{}", store::inspect(path)?)?;
    }
    Ok(0)
}
