//! `ttdp`: private TT/LoRA adapter fine-tuning and membership-inference sweeps
//! on a toy language model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use ttdp_core::attack::{attack_with_reference, prepare_reference, Reference};
use ttdp_core::dpcore::LedgerEntry;
use ttdp_core::trainer::model::AdapterSet;
use ttdp_core::trainer::{finetune, ingest_corpus, AdapterConfig, Corpus, EpochMetrics, ModelConfig, Vocab};

use config::RunConfig;
use report::{AttackRow, SummaryRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Core(#[from] ttdp_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "ttdp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warm up the base model, fine-tune one adapter and write metrics, checkpoint and ledger.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the membership-inference pipeline for one configuration or a sweep.
    Attack {
        #[arg(long)]
        config: PathBuf,
    },
    /// Average attack rows over ranks per method and budget.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Directory for report.csv and report.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    train_loss: f64,
    val_ppl: Option<f64>,
    epsilon: Option<f64>,
    sigma: f64,
    #[serde(rename = "clip_C")]
    clip_c: Option<f64>,
    adapter_kind: String,
    rank: usize,
    params: usize,
}

impl From<&EpochMetrics> for MetricsRow {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            train_loss: m.train_loss,
            val_ppl: m.val_ppl,
            epsilon: m.epsilon,
            sigma: m.sigma,
            clip_c: m.clip_c,
            adapter_kind: m.adapter_kind.to_string(),
            rank: m.rank,
            params: m.params,
        }
    }
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    seed: u64,
    vocab: &'a Vocab,
    model: &'a ModelConfig,
    adapter: &'a AdapterConfig,
    warmup_epochs: usize,
    adapters: AdapterSet,
}

#[derive(Serialize)]
struct Ledger<'a> {
    target_epsilon: Option<f64>,
    epsilon: Option<f64>,
    delta: Option<f64>,
    sigma: f64,
    steps: u64,
    budget_exhausted: bool,
    warnings: &'a [String],
    entries: &'a [LedgerEntry],
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    Ok(ingest_corpus(&cfg.corpus.path, &cfg.ingest_options())?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_train(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    if cfg.sweep.is_some() {
        return Err(CliError::Config("sweep: only used by the attack command".into()));
    }
    let corpus = load_corpus(&cfg)?;
    let job = cfg.jobs(cfg.vocab_size(corpus.vocab.len())?).remove(0);
    let ac = &job.attack;
    let reference = prepare_reference(&corpus.examples, ac, cfg.seed)?;
    let members: Vec<Vec<u32>> = reference.split.train.iter().map(|&i| corpus.examples[i].clone()).collect();
    let mut model = reference.model.clone();
    model.attach_adapters(&ac.adapter, cfg.seed)?;
    let valid = (!reference.valid.is_empty()).then_some(reference.valid.as_slice());
    let outcome = finetune(&mut model, &members, valid, &ac.finetune, (ac.adapter.kind, ac.adapter.rank))?;

    fs::create_dir_all(out)?;
    let rows: Vec<MetricsRow> = outcome.metrics.iter().map(MetricsRow::from).collect();
    report::write_rows(fs::File::create(out.join("metrics.csv"))?, &rows)?;
    let model_cfg = ModelConfig { seed: cfg.seed, ..ac.model.clone() };
    write_json(
        &out.join("checkpoint.json"),
        &Checkpoint {
            seed: cfg.seed,
            vocab: &corpus.vocab,
            model: &model_cfg,
            adapter: &ac.adapter,
            warmup_epochs: reference.warmup_epochs,
            adapters: model.adapter_set(),
        },
    )?;
    write_json(
        &out.join("ledger.json"),
        &Ledger {
            target_epsilon: job.target_epsilon,
            epsilon: outcome.epsilon,
            delta: outcome.delta,
            sigma: outcome.sigma,
            steps: outcome.steps,
            budget_exhausted: outcome.budget_exhausted,
            warnings: &outcome.warnings,
            entries: &outcome.ledger,
        },
    )?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("wrote {} epochs to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_attack(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let corpus = load_corpus(&cfg)?;
    let jobs = cfg.jobs(cfg.vocab_size(corpus.vocab.len())?);
    let mut references: Vec<Reference> = Vec::new();
    let mut rows = Vec::with_capacity(jobs.len());
    for (i, job) in jobs.iter().enumerate() {
        let warmup = job.attack.warmup();
        let reference = match references.iter().position(|r| r.warmup_epochs == warmup) {
            Some(k) => &references[k],
            None => {
                references.push(prepare_reference(&corpus.examples, &job.attack, cfg.seed)?);
                references.last().expect("just pushed")
            }
        };
        let rep = attack_with_reference(&corpus.examples, reference, &job.attack, cfg.seed)?;
        let row = AttackRow::new(&rep, job.target_epsilon);
        eprintln!(
            "[{}/{}] {} rank {} epsilon {} auc {:.4} ppl {:.3}",
            i + 1,
            jobs.len(),
            row.method,
            row.rank,
            row.epsilon.map_or("none".into(), |e| e.to_string()),
            row.auc,
            row.ppl
        );
        rows.push(row);
    }
    match &cfg.output {
        Some(path) => report::write_rows(fs::File::create(path)?, &rows),
        None => report::write_rows(std::io::stdout().lock(), &rows),
    }
}

fn cmd_report(files: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for f in files {
        rows.extend(report::read_rows(f)?);
    }
    let summary: Vec<SummaryRow> = report::summarize(&rows);
    fs::create_dir_all(out)?;
    report::write_rows(fs::File::create(out.join("report.csv"))?, &summary)?;
    write_json(&out.join("report.json"), &summary)?;
    report::write_rows(std::io::stdout().lock(), &summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Attack { config } => cmd_attack(config),
        Command::Report { files, out } => cmd_report(files, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
