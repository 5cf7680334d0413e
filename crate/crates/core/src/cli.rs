//! `aergia run | compare | inspect`.
//!
//! Exit codes: 0 success, 1 invalid config or usage, 2 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{manifest, PartitionManifestEntry};
use crate::sim::{run_experiment, Experiment, ExperimentResult, ExperimentSummary, SimError};
use crate::ClientId;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "aergia", version, about = "Virtual-time federated learning straggler simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every configured strategy and write traces plus a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the master seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the replicate count in the config.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Total-time reduction and accuracy delta of strategy A against B.
    Compare {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
    /// Print per-client class counts and the pairwise distance matrix.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        /// Also write the manifest and matrix as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Traces(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_INVALID,
            CliError::Sim(SimError::Config(_)) => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row of `trace_<label>_<seed>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub duration_s: f64,
    pub accuracy: f64,
    /// Dropped client ids joined by `;`, empty when none.
    pub dropped: String,
    pub num_offloads: usize,
}

pub fn trace_file_name(label: &str, seed: u64) -> String {
    format!("trace_{label}_{seed}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub mean_total_time: f64,
    pub mean_final_accuracy: f64,
    pub mean_best_accuracy: f64,
    pub mean_round_duration: f64,
    pub sd_round_duration: f64,
    pub per_seed: Vec<ExperimentSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Groups results by label, keeping file order.
pub fn summarize(results: &[ExperimentResult]) -> Vec<StrategyReport> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        if !groups.contains_key(r.label.as_str()) {
            order.push(&r.label);
        }
        groups.entry(&r.label).or_default().push(r);
    }
    order
        .into_iter()
        .map(|label| {
            let rs = &groups[label];
            // Round durations pooled over replicates.
            let all: Vec<f64> = rs.iter().flat_map(|r| r.traces.iter().map(|t| t.duration)).collect();
            let m = mean(all.iter().copied());
            let sd = if all.len() < 2 {
                0.0
            } else {
                (all.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (all.len() - 1) as f64).sqrt()
            };
            StrategyReport {
                label: label.to_string(),
                seeds: rs.iter().map(|r| r.seed).collect(),
                mean_total_time: mean(rs.iter().map(|r| r.summary.total_time)),
                mean_final_accuracy: mean(rs.iter().map(|r| r.summary.final_accuracy)),
                mean_best_accuracy: mean(rs.iter().map(|r| r.summary.best_accuracy)),
                mean_round_duration: m,
                sd_round_duration: sd,
                per_seed: rs.iter().map(|r| r.summary.clone()).collect(),
            }
        })
        .collect()
}

fn write_trace_csv(path: &Path, result: &ExperimentResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Traces(format!("{}: {e}", path.display())))?;
    for t in &result.traces {
        let dropped: Vec<String> = t.dropped.iter().map(ClientId::to_string).collect();
        w.serialize(TraceRow {
            round: t.round,
            duration_s: t.duration,
            accuracy: t.accuracy,
            dropped: dropped.join(";"),
            num_offloads: t.num_offloads(),
        })
        .map_err(|e| CliError::Traces(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn cmd_run(config: &Path, out: &Path, seed: Option<u64>, replicates: Option<usize>) -> Result<Vec<StrategyReport>, CliError> {
    let mut cfg = ExperimentConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(k) = replicates {
        cfg.replicates = k;
    }
    cfg.validate()?;
    let labels: Vec<String> = cfg.resolved_strategies().into_iter().map(|(l, _)| l).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(CliError::Usage(format!("strategy label '{l}' appears twice; give one a `name`")));
        }
        if l.is_empty() || !l.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.') {
            return Err(CliError::Usage(format!(
                "strategy label '{l}' must be non-empty ASCII letters, digits, '-' or '.'"
            )));
        }
    }

    fs::create_dir_all(out).map_err(io_err(out))?;
    let results = run_experiment(&cfg)?;
    for r in &results {
        write_trace_csv(&out.join(trace_file_name(&r.label, r.seed)), r)?;
        write_json(&out.join(format!("rounds_{}_{}.json", r.label, r.seed)), &r.traces)?;
    }
    let reports = summarize(&results);
    write_json(&out.join("summary.json"), &reports)?;
    write_json(&out.join("config_echo.json"), &cfg)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub seeds: Vec<u64>,
    /// Mean over seeds of `(T_b − T_a) / T_b`, in percent.
    pub time_reduction_pct: f64,
    /// Mean over seeds of `acc_a − acc_b` (final round).
    pub accuracy_delta: f64,
}

impl Comparison {
    pub fn report(&self) -> String {
        format!(
            "{} vs {} over {} replicate(s): {:.1}% reduction in total time, final accuracy delta {:+.4}",
            self.a,
            self.b,
            self.seeds.len(),
            self.time_reduction_pct,
            self.accuracy_delta
        )
    }
}

/// `(seed, total time, final accuracy)` for every trace of `label` in `dir`.
pub fn load_traces(dir: &Path, label: &str) -> Result<BTreeMap<u64, (f64, f64)>, CliError> {
    let prefix = format!("trace_{label}_");
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(seed) = name
            .strip_prefix(&prefix)
            .and_then(|rest| rest.strip_suffix(".csv"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        let path = entry.path();
        let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::Traces(format!("{}: {e}", path.display())))?;
        let mut total = 0.0;
        let mut last_acc = 0.0;
        for row in reader.deserialize::<TraceRow>() {
            let row = row.map_err(|e| CliError::Traces(format!("{}: {e}", path.display())))?;
            total += row.duration_s;
            last_acc = row.accuracy;
        }
        out.insert(seed, (total, last_acc));
    }
    if out.is_empty() {
        return Err(CliError::Traces(format!("no traces for '{label}' in {}", dir.display())));
    }
    Ok(out)
}

pub fn cmd_compare(out: &Path, a: &str, b: &str) -> Result<Comparison, CliError> {
    let ta = load_traces(out, a)?;
    let tb = load_traces(out, b)?;
    if ta.len() != tb.len() {
        return Err(CliError::Traces(format!(
            "'{a}' has {} replicate(s) but '{b}' has {}",
            ta.len(),
            tb.len()
        )));
    }
    if ta.keys().ne(tb.keys()) {
        return Err(CliError::Traces(format!("'{a}' and '{b}' were run with different seeds")));
    }
    let mut reductions = Vec::new();
    let mut deltas = Vec::new();
    for (seed, &(time_a, acc_a)) in &ta {
        let (time_b, acc_b) = tb[seed];
        let reduction = if time_b > 0.0 { (time_b - time_a) / time_b * 100.0 } else { 0.0 };
        reductions.push(reduction);
        deltas.push(acc_a - acc_b);
    }
    Ok(Comparison {
        a: a.to_string(),
        b: b.to_string(),
        seeds: ta.keys().copied().collect(),
        time_reduction_pct: mean(reductions.into_iter()),
        accuracy_delta: mean(deltas.into_iter()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inspection {
    pub seed: u64,
    pub clients: Vec<PartitionManifestEntry>,
    /// Row order follows `clients`.
    pub distance: Vec<Vec<f64>>,
}

pub fn cmd_inspect(config: &Path) -> Result<Inspection, CliError> {
    let cfg = ExperimentConfig::from_path(config)?;
    let exp = Experiment::new(&cfg, cfg.seed)?;
    Ok(Inspection {
        seed: cfg.seed,
        clients: manifest(&exp.partitions),
        distance: exp.similarity.rows(),
    })
}

impl Inspection {
    pub fn table(&self) -> String {
        let mut s = String::from("client  size  class_counts\n");
        for c in &self.clients {
            let counts: Vec<String> = c.class_counts.iter().map(u64::to_string).collect();
            s.push_str(&format!("{:>6}  {:>4}  [{}]\n", c.client_id, c.size, counts.join(", ")));
        }
        s.push_str("\npairwise distance\n");
        for row in &self.distance {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// human-readable output to `stdout` and diagnostics to `stderr`.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    EXIT_INVALID
                }
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            replicates,
        } => cmd_run(&config, &out, seed, replicates).map(|reports| {
            for r in reports {
                let _ = writeln!(
                    stdout,
                    "{:<12} total {:>12.3}s  final acc {:.4}  round {:.3}±{:.3}s",
                    r.label, r.mean_total_time, r.mean_final_accuracy, r.mean_round_duration, r.sd_round_duration
                );
            }
        }),
        Command::Compare { out, a, b } => cmd_compare(&out, &a, &b).map(|c| {
            let _ = writeln!(stdout, "{}", c.report());
        }),
        Command::Inspect { config, json } => cmd_inspect(&config).and_then(|ins| {
            let _ = write!(stdout, "{}", ins.table());
            match json {
                Some(path) => write_json(&path, &ins),
                None => Ok(()),
            }
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
