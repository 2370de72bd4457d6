//! Membership inference against fine-tuned adapters with a reference-calibrated
//! loss score: `s(x) = L(x; θ_peft) − L(x; θ_ref)`, lower meaning more member-like.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{
    example_losses, finetune, perplexity, pretrain_base, AdapterConfig, AdapterKind, FinetuneConfig, ModelConfig,
    PretrainConfig, ToyLM,
};

/// FPR levels every report carries.
pub const FPR_GRID: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];

/// Disjoint auxiliary, member and non-member example indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub aux: Vec<usize>,
    pub train: Vec<usize>,
    pub non: Vec<usize>,
    pub seed: u64,
}

impl DataSplit {
    pub fn select<T: Clone>(idx: &[usize], data: &[T]) -> Vec<T> {
        idx.iter().map(|&i| data[i].clone()).collect()
    }
}

/// Seeded shuffle of `0..n` into thirds; leftover items go to the first parts.
pub fn three_way_split(n: usize, seed: u64) -> Result<DataSplit> {
    if n < 3 {
        return Err(Error::TooSmall { needed: 3, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes: Vec<usize> = (0..3).map(|k| n / 3 + usize::from(k < n % 3)).collect();
    let non = order.split_off(sizes[0] + sizes[1]);
    let train = order.split_off(sizes[0]);
    Ok(DataSplit {
        aux: order,
        train,
        non,
        seed,
    })
}

/// Per-example `L(x; θ_peft) − L(x; θ_ref)` with mean token cross-entropy as `L`.
pub fn calibrated_scores(peft: &ToyLM, reference: &ToyLM, examples: &[Vec<u32>]) -> Result<Vec<f64>> {
    if peft.vocab_size() != reference.vocab_size() {
        return Err(Error::VocabMismatch(peft.vocab_size(), reference.vocab_size()));
    }
    let a = example_losses(peft, examples)?;
    let b = example_losses(reference, examples)?;
    Ok(a.into_iter().zip(b).map(|(p, r)| p - r).collect())
}

/// ROC-AUC with members as positives under `−s`: the chance a random member
/// scores below a random non-member, ties counted half.
pub fn auc(members: &[f64], non: &[f64]) -> Result<f64> {
    if members.is_empty() || non.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(non.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_non = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum_non += midrank * all[i..j].iter().filter(|e| !e.1).count() as f64;
        i = j;
    }
    let (m, n) = (members.len() as f64, non.len() as f64);
    let u = rank_sum_non - n * (n + 1.0) / 2.0;
    Ok(u / (m * n))
}

/// `(TPR, τ_α)`: `τ_α` is the largest non-member score whose inclusive FPR is
/// at most `α`; if even the smallest exceeds it, `τ_α` sits just below it.
pub fn tpr_at_fpr(members: &[f64], non: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if members.is_empty() || non.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let mut sorted = non.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let fpr = |k: usize| k as f64 / n as f64;
    let mut allowed = ((alpha * n as f64).floor() as usize).min(n);
    while allowed < n && fpr(allowed + 1) <= alpha {
        allowed += 1;
    }
    while allowed > 0 && fpr(allowed) > alpha {
        allowed -= 1;
    }
    let tau = if allowed >= n {
        f64::INFINITY
    } else {
        let mut tau = sorted[0].next_down();
        let mut k = 0;
        while k < n {
            let mut j = k;
            while j < n && sorted[j] == sorted[k] {
                j += 1;
            }
            if j > allowed {
                break;
            }
            tau = sorted[k];
            k = j;
        }
        tau
    };
    let hits = members.iter().filter(|&&s| s <= tau).count();
    Ok((hits as f64 / members.len() as f64, tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub method: AdapterKind,
    pub rank: usize,
    pub params: usize,
    pub epsilon: Option<f64>,
    /// Perplexity of the fine-tuned model on the non-member split.
    pub ppl: f64,
    pub auc: f64,
    pub tpr_at_fpr: Vec<TprPoint>,
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub split: DataSplit,
    pub seed: u64,
    pub epochs_run: usize,
}

impl AttackReport {
    pub fn from_scores(members: Vec<f64>, non: Vec<f64>) -> Result<(f64, Vec<TprPoint>)> {
        let a = auc(&members, &non)?;
        let points = FPR_GRID
            .iter()
            .map(|&fpr| {
                tpr_at_fpr(&members, &non, fpr).map(|(tpr, threshold)| TprPoint { fpr, tpr, threshold })
            })
            .collect::<Result<_>>()?;
        Ok((a, points))
    }

    pub fn tpr(&self, fpr: f64) -> Option<f64> {
        self.tpr_at_fpr.iter().find(|p| p.fpr == fpr).map(|p| p.tpr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub pretrain: PretrainConfig,
    /// Warm-up epochs on the auxiliary split; by default 2 for private
    /// fine-tuning and 5 otherwise.
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    pub finetune: FinetuneConfig,
    /// Share of the auxiliary split held out for validation.
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl AttackConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or(if self.finetune.privacy.is_some() { 2 } else { 5 })
    }
}

/// Split plus the warmed-up reference model, shareable across adapters and budgets.
#[derive(Debug, Clone)]
pub struct Reference {
    pub split: DataSplit,
    pub warm: Vec<Vec<u32>>,
    pub valid: Vec<Vec<u32>>,
    pub model: ToyLM,
    pub warmup_epochs: usize,
}

/// Splits `examples` and warms up the base model on the auxiliary part.
pub fn prepare_reference(examples: &[Vec<u32>], cfg: &AttackConfig, seed: u64) -> Result<Reference> {
    let split = three_way_split(examples.len(), seed)?;
    let aux = DataSplit::select(&split.aux, examples);
    let n_val = ((aux.len() as f64 * cfg.validation_fraction).round() as usize).min(aux.len().saturating_sub(1));
    let (warm, valid) = aux.split_at(aux.len() - n_val);
    let mut model = ToyLM::new(ModelConfig { seed, ..cfg.model.clone() })?;
    let warmup_epochs = cfg.warmup();
    let pre = PretrainConfig {
        epochs: warmup_epochs,
        seed,
        ..cfg.pretrain.clone()
    };
    pretrain_base(&mut model, warm, &pre)?;
    Ok(Reference {
        split,
        warm: warm.to_vec(),
        valid: valid.to_vec(),
        model,
        warmup_epochs,
    })
}

/// Fine-tunes an adapter on the member split of `reference` and attacks it.
pub fn attack_with_reference(examples: &[Vec<u32>], reference: &Reference, cfg: &AttackConfig, seed: u64) -> Result<AttackReport> {
    let members = DataSplit::select(&reference.split.train, examples);
    let non = DataSplit::select(&reference.split.non, examples);
    let mut peft = reference.model.clone();
    peft.attach_adapters(&cfg.adapter, seed)?;
    let ft = FinetuneConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let valid = (!reference.valid.is_empty()).then_some(reference.valid.as_slice());
    let outcome = finetune(&mut peft, &members, valid, &ft, (cfg.adapter.kind, cfg.adapter.rank))?;
    let member_scores = calibrated_scores(&peft, &reference.model, &members)?;
    let nonmember_scores = calibrated_scores(&peft, &reference.model, &non)?;
    let (auc, tpr_at_fpr) = AttackReport::from_scores(member_scores.clone(), nonmember_scores.clone())?;
    Ok(AttackReport {
        method: cfg.adapter.kind,
        rank: cfg.adapter.rank,
        params: peft.trainable_count(),
        epsilon: outcome.epsilon,
        ppl: perplexity(&peft, &non)?,
        auc,
        tpr_at_fpr,
        member_scores,
        nonmember_scores,
        split: reference.split.clone(),
        seed,
        epochs_run: outcome.metrics.len(),
    })
}

/// Split, warm up the reference, fine-tune an adapter on the members, and score.
pub fn run_attack_pipeline(examples: &[Vec<u32>], cfg: &AttackConfig, seed: u64) -> Result<AttackReport> {
    let reference = prepare_reference(examples, cfg, seed)?;
    attack_with_reference(examples, &reference, cfg, seed)
}
