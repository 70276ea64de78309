//! Command-line front end: `run`, `sweep` and `eval-checkpoint`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RawConfig, RunConfig};
use crate::dataset::{DatasetError, DatasetFormat, InteractionDataset};
use crate::eval::{evaluate, EvalMode, EvalModel, RankingResult};
use crate::federation::{run_experiment, FederationError, Method, ProbeRecord, RoundMetrics, RunReport, RunSummary, SyncStrategy};
use crate::model::{Checkpoint, CheckpointError, LossReduction};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SPLIT_FILE: &str = "split.cache";
pub const PROBES_FILE: &str = "probes.csv";

#[derive(Debug, Parser)]
#[command(name = "fedras", version, about = "Federated recommendation simulator with clustered gradient sharing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one experiment per compression rate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated compression rates.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        crs: Vec<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a saved checkpoint against the configured dataset split.
    EvalCheckpoint {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// One flag per config key; a flag wins over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub dataset_path: Option<PathBuf>,
    #[arg(long)]
    pub dataset_format: Option<DatasetFormat>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub neg_ratio: Option<usize>,
    #[arg(long, value_parser = parse_reduction)]
    pub reduction: Option<LossReduction>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub client_fraction: Option<f64>,
    #[arg(long)]
    pub sync: Option<SyncStrategy>,
    #[arg(long)]
    pub cr: Option<f64>,
    /// Heterogeneous budgets as `lo,hi`.
    #[arg(long, value_parser = parse_range)]
    pub cr_range: Option<(f64, f64)>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub eval_k: Option<usize>,
    #[arg(long)]
    pub eval_mode: Option<EvalMode>,
    #[arg(long)]
    pub eval_model: Option<EvalModel>,
    #[arg(long)]
    pub probe_every: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [lo, hi] => {
            let lo = lo.parse::<f64>().map_err(|e| format!("bad lower bound: {e}"))?;
            let hi = hi.parse::<f64>().map_err(|e| format!("bad upper bound: {e}"))?;
            Ok((lo, hi))
        }
        _ => Err(format!("expected `lo,hi`, got `{s}`")),
    }
}

fn parse_reduction(s: &str) -> Result<LossReduction, String> {
    match s {
        "mean" => Ok(LossReduction::Mean),
        "sum" => Ok(LossReduction::Sum),
        other => Err(format!("unknown reduction `{other}` (expected mean or sum)")),
    }
}

impl Overrides {
    pub fn apply(&self, raw: &mut RawConfig) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = Some(v);
                }
            };
        }
        set!(self.dataset_path => raw.dataset.path);
        set!(self.dataset_format => raw.dataset.format);
        set!(self.dim => raw.model.dim);
        set!(self.lr => raw.train.lr);
        set!(self.local_epochs => raw.train.local_epochs);
        set!(self.batch => raw.train.batch);
        set!(self.neg_ratio => raw.train.neg_ratio);
        set!(self.reduction => raw.train.reduction);
        set!(self.rounds => raw.fed.rounds);
        set!(self.client_fraction => raw.fed.client_fraction);
        set!(self.sync => raw.fed.sync);
        set!(self.alpha => raw.comm.alpha);
        set!(self.kmeans_iters => raw.comm.kmeans_iters);
        set!(self.seed => raw.seed);
        set!(self.method => raw.method);
        set!(self.eval_k => raw.eval.k);
        set!(self.eval_mode => raw.eval.mode);
        set!(self.eval_model => raw.eval.model);
        set!(self.probe_every => raw.probe.every);
        set!(self.output_dir => raw.output_dir);
        if let Some(cr) = self.cr {
            raw.comm.cr = Some(cr);
            raw.comm.cr_range = None;
        }
        if let Some((lo, hi)) = self.cr_range {
            raw.comm.cr_range = Some([lo, hi]);
            raw.comm.cr = None;
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn output_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-round CSV with a fixed column order and a trailing `method` column.
pub fn metrics_csv(rows: &[RoundMetrics], method: Method) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "round",
        "hr10",
        "ndcg10",
        "down_bytes",
        "up_bytes",
        "groups_used",
        "min_avg_cos",
        "threshold",
        "method",
    ])
    .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.hr10.to_string(),
            r.ndcg10.to_string(),
            r.down_bytes.to_string(),
            r.up_bytes.to_string(),
            fmt_opt(r.groups_used),
            fmt_opt(r.min_avg_cos),
            fmt_opt(r.threshold),
            method.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn probes_csv(probes: &[ProbeRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "round",
        "gradient_client",
        "gradient_server",
        "gradient_total",
        "embedding_client",
        "embedding_server",
        "embedding_total",
    ])
    .expect("in-memory write");
    for p in probes {
        w.write_record([
            p.round.to_string(),
            p.gradient.client.to_string(),
            p.gradient.server.to_string(),
            p.gradient.total.to_string(),
            p.embedding.client.to_string(),
            p.embedding.server.to_string(),
            p.embedding.total.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut raw = RawConfig::from_file(path)?;
    overrides.apply(&mut raw);
    Ok(raw.resolve()?)
}

fn load_dataset(cfg: &RunConfig) -> Result<InteractionDataset, CliError> {
    let ds = InteractionDataset::load(&cfg.dataset_path, cfg.dataset_format, cfg.fed.seed)?;
    info!(
        "loaded {}: {} users, {} items, {} interactions",
        cfg.dataset_path.display(),
        ds.num_users,
        ds.num_items,
        ds.interaction_count()
    );
    Ok(ds)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| output_err(path, e))
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_outputs(dir: &Path, ds: &InteractionDataset, report: &RunReport, method: Method) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;
    write_file(&dir.join(METRICS_FILE), &metrics_csv(&report.rows, method))?;
    let summary = serde_json::to_vec_pretty(&report.summary).map_err(|e| output_err(&dir.join(SUMMARY_FILE), e))?;
    write_file(&dir.join(SUMMARY_FILE), &summary)?;
    if !report.probes.is_empty() {
        write_file(&dir.join(PROBES_FILE), &probes_csv(&report.probes))?;
    }
    Checkpoint {
        items: report.items.clone(),
        users: report.users.clone(),
    }
    .save(dir.join(CHECKPOINT_FILE))?;
    ds.write_cache(dir.join(SPLIT_FILE))?;
    Ok(())
}

pub fn cmd_run(config: &Path, overrides: &Overrides) -> Result<RunSummary, CliError> {
    let cfg = load_config(config, overrides)?;
    let ds = load_dataset(&cfg)?;
    let report = run_experiment(&ds, &cfg.fed)?;
    write_outputs(&cfg.output_dir, &ds, &report, cfg.fed.method)?;
    info!(
        "best HR {:.4} (round {:?}), final HR {:.4}; outputs in {}",
        report.summary.best_hr,
        report.summary.best_round,
        report.summary.final_hr,
        cfg.output_dir.display()
    );
    Ok(report.summary)
}

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    cr: f64,
    #[serde(flatten)]
    summary: Option<&'a RunSummary>,
    error: Option<String>,
}

/// Drops repeated rates, keeping first occurrences in order.
pub fn dedup_rates(crs: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &cr in crs {
        if out.iter().any(|&c| c == cr) {
            warn!("compression rate {cr} listed more than once; running it once");
        } else {
            out.push(cr);
        }
    }
    out
}

/// Runs every rate even if some fail; reports failure afterwards.
pub fn cmd_sweep(config: &Path, crs: &[f64], overrides: &Overrides) -> Result<BTreeMap<String, RunSummary>, CliError> {
    if crs.is_empty() {
        return Err(CliError::Usage("sweep needs at least one compression rate (--crs)".into()));
    }
    let base = load_config(config, overrides)?;
    let rates = dedup_rates(crs);
    let mut runs = Vec::new();
    for &cr in &rates {
        let mut ov = overrides.clone();
        ov.cr = Some(cr);
        ov.cr_range = None;
        ov.output_dir = Some(base.output_dir.join(format!("cr_{cr}")));
        let cfg = load_config(config, &ov)?;
        runs.push((cr, cfg));
    }

    let ds = load_dataset(&base)?;
    let mut results: Vec<(f64, Result<RunSummary, CliError>)> = Vec::new();
    for (cr, cfg) in runs {
        info!("sweep: CR {cr}");
        let res = run_experiment(&ds, &cfg.fed)
            .map_err(CliError::from)
            .and_then(|report| {
                write_outputs(&cfg.output_dir, &ds, &report, cfg.fed.method)?;
                Ok(report.summary)
            });
        if let Err(e) = &res {
            error!("sweep: CR {cr} failed: {e}");
        }
        results.push((cr, res));
    }

    let table: Vec<SweepRow> = results
        .iter()
        .map(|(cr, r)| SweepRow {
            cr: *cr,
            summary: r.as_ref().ok(),
            error: r.as_ref().err().map(|e| e.to_string()),
        })
        .collect();
    fs::create_dir_all(&base.output_dir).map_err(|e| output_err(&base.output_dir, e))?;
    let path = base.output_dir.join("sweep_summary.json");
    let text = serde_json::to_vec_pretty(&table).map_err(|e| output_err(&path, e))?;
    write_file(&path, &text)?;

    let mut merged = BTreeMap::new();
    let mut first_err = None;
    for (cr, r) in results {
        match r {
            Ok(s) => {
                merged.insert(cr.to_string(), s);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(merged),
    }
}

pub fn cmd_eval_checkpoint(config: &Path, checkpoint: &Path, overrides: &Overrides) -> Result<RankingResult, CliError> {
    let cfg = load_config(config, overrides)?;
    let ds = load_dataset(&cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.items.rows() != ds.num_items || ck.users.rows() != ds.num_users {
        return Err(CliError::Usage(format!(
            "checkpoint has {} items and {} users, dataset has {} and {}",
            ck.items.rows(),
            ck.users.rows(),
            ds.num_items,
            ds.num_users
        )));
    }
    Ok(evaluate(&ck.items, &ck.users, &ds, cfg.fed.eval_k, cfg.fed.eval_mode))
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides).map(|s| serde_json::to_string_pretty(&s)),
        Command::Sweep { config, crs, overrides } => {
            cmd_sweep(config, crs, overrides).map(|s| serde_json::to_string_pretty(&s))
        }
        Command::EvalCheckpoint {
            config,
            checkpoint,
            overrides,
        } => cmd_eval_checkpoint(config, checkpoint, overrides).map(|r| serde_json::to_string_pretty(&r)),
    };
    match result {
        Ok(json) => {
            println!("{}", json.expect("summaries serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
