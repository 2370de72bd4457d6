pub mod corpus;
pub mod model;
pub mod synth;
pub mod train;

pub use corpus::{ingest_corpus, ingest_text, Corpus, IngestOptions, Tokenization, Vocab};
pub use model::{AdapterConfig, AdapterKind, LayerAdapter, ModelConfig, ToyLM};
pub use train::{
    default_delta, example_losses, finetune, perplexity, pretrain_base, BudgetPolicy, EpochMetrics, FinetuneConfig,
    FinetuneOutcome, PretrainConfig, PrivacyConfig,
};
pub use synth::synthetic_email_corpus;
