//! The `htsr` command line.
//!
//! Exit codes: 0 success, 2 bad input (flags, config, checkpoint or run
//! artifacts), 3 spectral failure, 4 training divergence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt_f64;
use crate::schedule::plans_to_csv;
use crate::spectral::{analyze_all, FitConfig, FitMethod, ModuleError};
use crate::tensor_io::{read_checkpoint, write_checkpoint, ModuleKind, TensorError, WeightMatrix};
use crate::train::{train_run, ExperimentConfig, RunLog, TrainError};

pub const THREADS_ENV: &str = "HTSR_THREADS";

pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const PLANS_FILE: &str = "plans.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Parser)]
#[command(name = "htsr", version, about = "Spectral diagnostics and module-wise weight decay")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fit tail exponents for every projection in a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "median")]
        fit: FitMethod,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export alpha-group and decay tables from a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
        format: ReportFormat,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Spectral(#[from] ModuleError),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Spectral(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Worker cap from `HTSR_THREADS`, else the machine's core count.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; diagnostics go to stderr.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("htsr: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Analyze { ckpt, fit, out } => cmd_analyze(ckpt, *fit, out),
        Command::Train { config, out } => cmd_train(config, out),
        Command::Report { run, format } => cmd_report(run, *format),
    }
}

pub const ANALYZE_HEADER: &str = "raw_name,layer,kind,n,m,alpha,k,xmin,spectral_norm,frobenius_norm";

/// CSV rows for every projection matrix, in canonical module order.
pub fn analyze_csv(entries: &[WeightMatrix], fit: FitMethod, threads: usize) -> Result<String, CliError> {
    let mut mats: Vec<&WeightMatrix> = entries.iter().filter(|w| w.id.kind.is_projection()).collect();
    mats.sort_by(|a, b| a.id.cmp(&b.id));
    let items: Vec<(&WeightMatrix, Option<&WeightMatrix>)> = mats.iter().map(|w| (*w, None)).collect();
    let reports = analyze_all(&items, fit, &FitConfig::default(), threads)?;
    let mut out = String::from(ANALYZE_HEADER);
    out.push('\n');
    for (w, r) in mats.iter().zip(&reports) {
        let row = [
            w.id.raw_name.clone(),
            w.id.layer_index.to_string(),
            w.id.kind.as_str().to_string(),
            w.rows().to_string(),
            w.cols().to_string(),
            fmt_f64(r.alpha.alpha),
            r.alpha.k.to_string(),
            fmt_f64(r.alpha.xmin),
            fmt_f64(r.spectral_norm),
            fmt_f64(r.frobenius_norm),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_analyze(ckpt: &Path, fit: FitMethod, out: &Path) -> Result<(), CliError> {
    let checkpoint = read_checkpoint(ckpt)?;
    let csv = analyze_csv(&checkpoint.entries, fit, thread_cap())?;
    write_file(out, csv)
}

/// Deterministic run outcome. Wall-clock time lives in a separate file so
/// that identical runs produce identical summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_val_loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub steps_completed: usize,
    pub aborted_at_step: Option<usize>,
    pub abort_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_seconds: f64,
}

fn write_run_artifacts(out: &Path, log: &RunLog, summary: &RunSummary) -> Result<(), CliError> {
    write_file(&out.join(RUNLOG_FILE), log.to_json_lines())?;
    write_file(&out.join(PLANS_FILE), plans_to_csv(&log.plans()))?;
    let json = serde_json::to_string_pretty(summary).expect("serializable");
    write_file(&out.join(SUMMARY_FILE), json + "\n")
}

pub fn cmd_train(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| io_err(config_path, e))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", config_path.display())))?;
    cfg.train.analysis_threads = cfg.train.analysis_threads.min(thread_cap()).max(1);
    let base = config_path.parent().unwrap_or(Path::new("."));
    let corpus = cfg.corpus.load(base).map_err(|e| CliError::Input(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let started = std::time::Instant::now();
    let result = train_run(&cfg.model, &cfg.train, &corpus);
    let timing = RunTiming { wall_seconds: started.elapsed().as_secs_f64() };
    write_file(&out.join(TIMING_FILE), serde_json::to_string_pretty(&timing).expect("serializable") + "\n")?;

    match result {
        Ok(outcome) => {
            let summary = RunSummary {
                final_val_loss: outcome.log.final_val_loss,
                perplexity: outcome.log.perplexity,
                steps_completed: outcome.log.steps.len(),
                aborted_at_step: None,
                abort_reason: None,
            };
            write_run_artifacts(out, &outcome.log, &summary)?;
            let mut metadata = BTreeMap::new();
            metadata.insert("step".to_string(), cfg.train.steps.to_string());
            metadata.insert("seed".to_string(), cfg.train.seed.to_string());
            metadata.insert("model".to_string(), serde_json::to_string(&cfg.model).expect("serializable"));
            write_checkpoint(&outcome.params.to_weight_matrices()?, &metadata, out.join(CHECKPOINT_FILE))?;
            Ok(())
        }
        Err(TrainError::Diverged { step, reason, partial }) => {
            let summary = RunSummary {
                final_val_loss: None,
                perplexity: None,
                steps_completed: partial.steps.len(),
                aborted_at_step: Some(step),
                abort_reason: Some(reason.clone()),
            };
            write_run_artifacts(out, &partial, &summary)?;
            Err(CliError::Diverged(format!("training diverged at step {step}: {reason}")))
        }
        Err(TrainError::Spectral(e)) => Err(CliError::Spectral(e)),
        Err(TrainError::Schedule(e)) => Err(CliError::Input(format!("scheduler: {e}"))),
        Err(e) => Err(CliError::Input(e.to_string())),
    }
}

/// Module groups used for alpha trajectories.
pub const ALPHA_GROUPS: [(&str, &[ModuleKind]); 3] = [
    ("att.q/k", &[ModuleKind::AttQ, ModuleKind::AttK]),
    ("att.v/o", &[ModuleKind::AttV, ModuleKind::AttO]),
    ("mlp", &[ModuleKind::MlpGate, ModuleKind::MlpUp, ModuleKind::MlpDown]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGroupRow {
    pub step: usize,
    pub module_kind: String,
    pub mean_alpha: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub step: usize,
    pub module: String,
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub alpha_groups: Vec<AlphaGroupRow>,
    pub decay: Vec<DecayRow>,
}

pub fn build_report(log: &RunLog) -> Report {
    let mut alpha_groups = Vec::new();
    let mut decay = Vec::new();
    for rec in &log.recomputes {
        for (name, kinds) in ALPHA_GROUPS {
            let alphas: Vec<f64> =
                rec.reports.iter().filter(|r| kinds.contains(&r.module.kind)).map(|r| r.alpha.alpha).collect();
            if alphas.is_empty() {
                continue;
            }
            alpha_groups.push(AlphaGroupRow {
                step: rec.step,
                module_kind: name.to_string(),
                mean_alpha: alphas.iter().sum::<f64>() / alphas.len() as f64,
                min_alpha: alphas.iter().copied().fold(f64::INFINITY, f64::min),
                max_alpha: alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
        for (module, &d) in &rec.plan.assignments {
            decay.push(DecayRow { step: rec.step, module: module.raw_name.clone(), decay: d });
        }
    }
    Report { alpha_groups, decay }
}

pub const ALPHA_REPORT_FILE: &str = "report_alpha.csv";
pub const DECAY_REPORT_FILE: &str = "report_decay.csv";
pub const JSON_REPORT_FILE: &str = "report.json";

pub fn alpha_csv(rows: &[AlphaGroupRow]) -> String {
    let mut out = String::from("step,module_kind,mean_alpha,min_alpha,max_alpha\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            r.module_kind,
            fmt_f64(r.mean_alpha),
            fmt_f64(r.min_alpha),
            fmt_f64(r.max_alpha)
        ));
    }
    out
}

pub fn decay_csv(rows: &[DecayRow]) -> String {
    let mut out = String::from("step,module,decay\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.module, fmt_f64(r.decay)));
    }
    out
}

/// Writes the report tables into the run directory.
pub fn cmd_report(run_dir: &Path, format: ReportFormat) -> Result<(), CliError> {
    let path = run_dir.join(RUNLOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let log = RunLog::from_json_lines(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if log.recomputes.is_empty() {
        return Err(CliError::Input(format!("{}: no recompute records", path.display())));
    }
    let report = build_report(&log);
    match format {
        ReportFormat::Csv => {
            write_file(&run_dir.join(ALPHA_REPORT_FILE), alpha_csv(&report.alpha_groups))?;
            write_file(&run_dir.join(DECAY_REPORT_FILE), decay_csv(&report.decay))
        }
        ReportFormat::Json => {
            let json = serde_json::to_string_pretty(&report).expect("serializable");
            write_file(&run_dir.join(JSON_REPORT_FILE), json + "\n")
        }
    }
}
