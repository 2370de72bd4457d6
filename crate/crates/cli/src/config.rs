//! JSON run configuration shared by `train` and `attack`.
//!
//! ```json
//! {
//!   "seed": 1,
//!   "corpus": { "path": "mail.txt", "context_len": 64, "vocab_cap": 512, "stride": 64 },
//!   "model": { "vocab_size": 512, "embed_dim": 64, "hidden_dim": 64 },
//!   "adapter": { "kind": "tt", "rank": 2 },
//!   "pretrain": { "epochs": 5, "batch_size": 16, "learning_rate": 4.0 },
//!   "finetune": {
//!     "epochs": 15, "batch_size": 32, "learning_rate": 0.1,
//!     "privacy": { "clip_c": 1.0, "target_epsilon": 0.5 }
//!   },
//!   "sweep": {
//!     "methods": ["tt", "lora"], "ranks": [2, 4, 6, 8, 10, 12, 14, 16],
//!     "epsilons": [0.5, 1.0, 3.0, 5.0], "learning_rates": { "tt": 0.1, "lora": 0.02 }
//!   }
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use ttdp_core::trainer::{
    AdapterConfig, AdapterKind, FinetuneConfig, IngestOptions, ModelConfig, PretrainConfig, PrivacyConfig,
    Tokenization,
};
use ttdp_core::attack::AttackConfig;

use crate::CliError;

pub const SEED_ENV: &str = "TT_DP_SEED";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub context_len: usize,
    pub vocab_cap: usize,
    #[serde(default)]
    pub tokenization: Tokenization,
    /// Defaults to `context_len` (non-overlapping windows).
    #[serde(default)]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Output vocabulary of the model; defaults to the corpus vocabulary. Ids
    /// beyond the corpus vocabulary are never observed.
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default = "sixty_four")]
    pub embed_dim: usize,
    #[serde(default = "sixty_four")]
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { vocab_size: None, embed_dim: 64, hidden_dim: 64 }
    }
}

fn sixty_four() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Warm-up epochs on the auxiliary split; 2 for private runs and 5 otherwise when absent.
    #[serde(default)]
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { epochs: None, batch_size: 16, learning_rate: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<AdapterKind>,
    pub ranks: Vec<usize>,
    /// `null` entries give non-private rows.
    pub epsilons: Vec<Option<f64>>,
    /// Per-method learning rate overriding `finetune.learning_rate`.
    #[serde(default)]
    pub learning_rates: BTreeMap<AdapterKind, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    /// Where `attack` writes its CSV; stdout when absent.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_val_fraction() -> f64 {
    0.2
}

/// One fully resolved fine-tuning job.
#[derive(Debug, Clone)]
pub struct Job {
    pub attack: AttackConfig,
    pub target_epsilon: Option<f64>,
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.seed = raw
                .trim()
                .parse()
                .map_err(|_| field(SEED_ENV, format!("expected an unsigned integer, got {raw:?}")))?;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus.path = base.join(&cfg.corpus.path);
        if let Some(out) = &cfg.output {
            cfg.output = Some(base.join(out));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.corpus;
        if !c.path.is_file() {
            return Err(field("corpus.path", format!("no such file {}", c.path.display())));
        }
        if c.context_len < 2 {
            return Err(field("corpus.context_len", "must be at least 2"));
        }
        if c.vocab_cap == 0 {
            return Err(field("corpus.vocab_cap", "must be positive"));
        }
        if c.stride == Some(0) {
            return Err(field("corpus.stride", "must be positive"));
        }
        if self.model.embed_dim == 0 || self.model.hidden_dim == 0 {
            return Err(field("model", "dimensions must be positive"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(field("pretrain.batch_size", "must be positive"));
        }
        if !(self.pretrain.learning_rate > 0.0) {
            return Err(field("pretrain.learning_rate", "must be positive"));
        }
        let ft = &self.finetune;
        if ft.batch_size == 0 {
            return Err(field("finetune.batch_size", "must be positive"));
        }
        if !(ft.learning_rate > 0.0) {
            return Err(field("finetune.learning_rate", "must be positive"));
        }
        if let Some(p) = &ft.privacy {
            if !(p.clip_c > 0.0) {
                return Err(field("finetune.privacy.clip_c", "must be positive"));
            }
            if p.noise_multiplier.is_none() && p.target_epsilon.is_none() {
                return Err(field("finetune.privacy", "set noise_multiplier or target_epsilon"));
            }
            if p.target_epsilon.is_some_and(|e| !(e > 0.0)) {
                return Err(field("finetune.privacy.target_epsilon", "must be positive"));
            }
            if p.noise_multiplier.is_some_and(|s| !(s >= 0.0)) {
                return Err(field("finetune.privacy.noise_multiplier", "must be non-negative"));
            }
            if p.delta.is_some_and(|d| !(d > 0.0 && d < 1.0)) {
                return Err(field("finetune.privacy.delta", "must lie in (0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(field("validation_fraction", "must lie in [0, 1)"));
        }
        if let Some(a) = &self.adapter {
            check_adapter("adapter", a.kind, a.rank)?;
        }
        match &self.sweep {
            None if self.adapter.is_none() => Err(field("adapter", "required unless a sweep is given")),
            None => Ok(()),
            Some(s) => {
                if s.methods.is_empty() || s.ranks.is_empty() || s.epsilons.is_empty() {
                    return Err(field("sweep", "methods, ranks and epsilons must be non-empty"));
                }
                if let Some(&r) = s.ranks.iter().find(|&&r| r % 2 != 0 || !(2..=16).contains(&r)) {
                    return Err(field("sweep.ranks", format!("{r} is not an even rank in 2..=16")));
                }
                if let Some(&k) = s.methods.iter().find(|&&k| k == AdapterKind::None) {
                    return Err(field("sweep.methods", format!("{k} cannot be swept")));
                }
                if s.epsilons.iter().flatten().any(|&e| !(e > 0.0)) {
                    return Err(field("sweep.epsilons", "budgets must be positive"));
                }
                if let Some((k, _)) = s.learning_rates.iter().find(|(_, &lr)| !(lr > 0.0)) {
                    return Err(field("sweep.learning_rates", format!("{k} rate must be positive")));
                }
                Ok(())
            }
        }
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            context_len: self.corpus.context_len,
            vocab_cap: self.corpus.vocab_cap,
            tokenization: self.corpus.tokenization,
            stride: self.corpus.stride.unwrap_or(self.corpus.context_len),
        }
    }

    fn attack_config(&self, vocab_size: usize, adapter: AdapterConfig, finetune: FinetuneConfig) -> AttackConfig {
        AttackConfig {
            model: ModelConfig {
                vocab_size,
                embed_dim: self.model.embed_dim,
                hidden_dim: self.model.hidden_dim,
                seed: self.seed,
            },
            adapter,
            pretrain: PretrainConfig {
                epochs: 0,
                batch_size: self.pretrain.batch_size,
                learning_rate: self.pretrain.learning_rate,
                seed: self.seed,
            },
            warmup_epochs: self.pretrain.epochs,
            finetune: FinetuneConfig { seed: self.seed, ..finetune },
            validation_fraction: self.validation_fraction,
        }
    }

    /// Model vocabulary for a corpus with `corpus_vocab` distinct ids.
    pub fn vocab_size(&self, corpus_vocab: usize) -> Result<usize, CliError> {
        match self.model.vocab_size {
            None => Ok(corpus_vocab),
            Some(v) if v >= corpus_vocab => Ok(v),
            Some(v) => Err(field(
                "model.vocab_size",
                format!("{v} is smaller than the corpus vocabulary of {corpus_vocab}"),
            )),
        }
    }

    /// Jobs in row order: method, then rank, then budget.
    pub fn jobs(&self, vocab_size: usize) -> Vec<Job> {
        let Some(s) = &self.sweep else {
            let adapter = self.adapter.clone().expect("validated");
            let target = self.finetune.privacy.as_ref().and_then(|p| p.target_epsilon);
            return vec![Job {
                attack: self.attack_config(vocab_size, adapter, self.finetune.clone()),
                target_epsilon: target,
            }];
        };
        let template = self.finetune.privacy.clone().unwrap_or_else(|| PrivacyConfig::with_target(1.0, 1.0));
        let mut jobs = Vec::new();
        for &kind in &s.methods {
            for &rank in &s.ranks {
                for &eps in &s.epsilons {
                    let mut adapter = self.adapter.clone().unwrap_or_else(|| AdapterConfig::new(kind, rank));
                    adapter.kind = kind;
                    adapter.rank = rank;
                    let privacy = eps.map(|e| PrivacyConfig {
                        noise_multiplier: None,
                        target_epsilon: Some(e),
                        ..template.clone()
                    });
                    let finetune = FinetuneConfig {
                        learning_rate: s.learning_rates.get(&kind).copied().unwrap_or(self.finetune.learning_rate),
                        privacy,
                        ..self.finetune.clone()
                    };
                    jobs.push(Job {
                        attack: self.attack_config(vocab_size, adapter, finetune),
                        target_epsilon: eps,
                    });
                }
            }
        }
        jobs
    }
}

fn check_adapter(name: &str, kind: AdapterKind, rank: usize) -> Result<(), CliError> {
    if kind != AdapterKind::None && rank == 0 {
        return Err(field(&format!("{name}.rank"), "must be positive"));
    }
    Ok(())
}
