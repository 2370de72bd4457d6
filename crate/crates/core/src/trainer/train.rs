//! Base pretraining and adapter fine-tuning, private or not.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{AdapterKind, ToyLM};
use crate::dpcore::sampling::{epoch_batches, sampling_rate, steps_per_epoch, SamplingMode};
use crate::dpcore::{
    calibrate_sigma, default_orders, dp_step, sgd_step, AccountantState, LedgerEntry, PrivacySpec, SgdConfig,
};
use crate::error::{Error, Result};

/// Next-token distributions computed once per distinct input token.
struct NextTokenTable<'a> {
    model: &'a ToyLM,
    rows: Vec<Option<Vec<f64>>>,
}

impl<'a> NextTokenTable<'a> {
    fn new(model: &'a ToyLM) -> Self {
        Self { model, rows: (0..model.vocab_size()).map(|_| None).collect() }
    }

    fn loss_sum(&mut self, seq: &[u32]) -> Result<(f64, usize)> {
        if seq.len() < 2 {
            return Err(Error::EmptyData);
        }
        let mut sum = 0.0;
        for w in seq.windows(2) {
            let v = self.rows.len();
            let row = match self.rows.get_mut(w[0] as usize) {
                Some(slot) => slot,
                None => return Err(Error::VocabMismatch(w[0] as usize + 1, v)),
            };
            if row.is_none() {
                *row = Some(self.model.next_token_probs(w[0])?);
            }
            let p = row.as_ref().expect("filled above");
            let py = p.get(w[1] as usize).ok_or(Error::VocabMismatch(w[1] as usize + 1, v))?;
            sum -= py.ln();
        }
        Ok((sum, seq.len() - 1))
    }
}

/// `exp` of the mean next-token loss over every prediction in `data`.
pub fn perplexity(model: &ToyLM, data: &[Vec<u32>]) -> Result<f64> {
    let mut table = NextTokenTable::new(model);
    let mut sum = 0.0;
    let mut count = 0;
    for seq in data {
        let (s, n) = table.loss_sum(seq)?;
        sum += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyData);
    }
    Ok((sum / count as f64).exp())
}

/// Mean next-token loss of each example.
pub fn example_losses(model: &ToyLM, data: &[Vec<u32>]) -> Result<Vec<f64>> {
    let mut table = NextTokenTable::new(model);
    data.iter()
        .map(|s| table.loss_sum(s).map(|(sum, n)| sum / n as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

/// Full-parameter training of the base tensors on mean loss, shuffled batches.
/// Returns the mean training loss of each epoch.
pub fn pretrain_base(model: &mut ToyLM, data: &[Vec<u32>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Vec<u32>> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = model.base_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(loss));
            }
            let [g_embed, g_wh, g_wo] = grads;
            model.embed.axpy(-cfg.learning_rate, &g_embed)?;
            model.w_h.axpy(-cfg.learning_rate, &g_wh)?;
            model.w_o.axpy(-cfg.learning_rate, &g_wo)?;
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

/// What to do when the next step would push ε past the target. `Stop` fails
/// with [`Error::PrivacyBudgetExceeded`] before taking that step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    #[default]
    Stop,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub clip_c: f64,
    /// Fixed σ. Without it σ is calibrated to `target_epsilon`.
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    /// Budget cap, enforced per step through `budget_policy`.
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    /// Defaults to `N^{-1.1}` for `N` training examples.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub budget_policy: BudgetPolicy,
}

impl PrivacyConfig {
    pub fn with_target(clip_c: f64, target_epsilon: f64) -> Self {
        Self {
            clip_c,
            noise_multiplier: None,
            target_epsilon: Some(target_epsilon),
            delta: None,
            budget_policy: BudgetPolicy::Stop,
        }
    }

    pub fn with_sigma(clip_c: f64, sigma: f64) -> Self {
        Self {
            clip_c,
            noise_multiplier: Some(sigma),
            target_epsilon: None,
            delta: None,
            budget_policy: BudgetPolicy::Stop,
        }
    }
}

fn yes() -> bool {
    true
}

pub fn default_delta(n: usize) -> f64 {
    (n as f64).powf(-1.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub privacy: Option<PrivacyConfig>,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default)]
    pub early_stopping: Option<usize>,
    /// Restore the adapters of the best validation epoch at the end.
    #[serde(default = "yes")]
    pub select_best: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1.0,
            seed: 0,
            sampling: SamplingMode::Poisson,
            privacy: None,
            early_stopping: None,
            select_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ppl: Option<f64>,
    /// `None` for non-private runs.
    pub epsilon: Option<f64>,
    pub sigma: f64,
    pub clip_c: Option<f64>,
    pub adapter_kind: AdapterKind,
    pub rank: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub ledger: Vec<LedgerEntry>,
    pub sigma: f64,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub steps: u64,
    pub stopped_early: bool,
    pub budget_exhausted: bool,
    pub warnings: Vec<String>,
}

struct PrivateState {
    spec: PrivacySpec,
    accountant: AccountantState,
    target: Option<f64>,
    policy: BudgetPolicy,
}

impl PrivateState {
    fn new(cfg: &PrivacyConfig, n: usize, q: f64, planned_steps: u64) -> Result<Self> {
        let delta = cfg.delta.unwrap_or_else(|| default_delta(n));
        let orders = default_orders();
        let sigma = match (cfg.noise_multiplier, cfg.target_epsilon) {
            (Some(sigma), _) => sigma,
            (None, Some(target)) => calibrate_sigma(q, planned_steps, target, delta, &orders)?,
            (None, None) => {
                return Err(Error::InvalidRange(
                    "private training needs a target epsilon or a noise multiplier".into(),
                ))
            }
        };
        let spec = PrivacySpec::new(cfg.clip_c, sigma, q, delta);
        spec.validate()?;
        Ok(Self {
            spec,
            accountant: AccountantState::new(orders),
            target: cfg.target_epsilon,
            policy: cfg.budget_policy,
        })
    }

    fn epsilon(&self) -> f64 {
        self.accountant.epsilon(self.spec.delta).0
    }

    fn next_step_exceeds(&self) -> Option<f64> {
        let target = self.target?;
        let mut probe = self.accountant.clone();
        probe.step(self.spec.noise_multiplier, self.spec.sampling_rate);
        let eps = probe.epsilon(self.spec.delta).0;
        (eps > target).then_some(eps)
    }
}

/// Fine-tunes the adapters of `model` on `train`; base tensors stay frozen.
///
/// Private runs use ghost-clipping DP-SGD with Poisson sampling by default.
/// Private and non-private runs draw batches from the same seeded stream, so a
/// private run with σ = 0 and a clip bound above every norm repeats the
/// non-private run exactly.
pub fn finetune(
    model: &mut ToyLM,
    train: &[Vec<u32>],
    valid: Option<&[Vec<u32>]>,
    cfg: &FinetuneConfig,
    adapter: (AdapterKind, usize),
) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyData);
    }
    if !model.has_adapters() {
        return Err(Error::InvalidRange("fine-tuning needs an attached adapter".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::InvalidRange("learning rate and batch size must be positive".into()));
    }
    let n = train.len();
    let q = sampling_rate(cfg.batch_size, n);
    let per_epoch = steps_per_epoch(cfg.batch_size, n);
    let planned = (cfg.epochs * per_epoch) as u64;
    let mut private = cfg
        .privacy
        .as_ref()
        .map(|p| PrivateState::new(p, n, q, planned))
        .transpose()?;
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        expected_batch: q * n as f64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = model.trainable_count();

    let mut outcome = FinetuneOutcome {
        metrics: Vec::new(),
        ledger: Vec::new(),
        sigma: private.as_ref().map_or(0.0, |p| p.spec.noise_multiplier),
        delta: private.as_ref().map(|p| p.spec.delta),
        epsilon: private.as_ref().map(|_| 0.0),
        steps: 0,
        stopped_early: false,
        budget_exhausted: false,
        warnings: Vec::new(),
    };
    let mut best: Option<(f64, super::model::AdapterSet)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(n, cfg.batch_size, cfg.sampling, &mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in batches {
            let batch: Vec<&Vec<u32>> = idx.iter().map(|&i| &train[i]).collect();
            let loss = match private.as_mut() {
                Some(state) => {
                    if let Some(eps) = state.next_step_exceeds() {
                        let target = state.target.unwrap_or(f64::INFINITY);
                        match state.policy {
                            BudgetPolicy::Stop => {
                                return Err(Error::PrivacyBudgetExceeded { spent: eps, target });
                            }
                            BudgetPolicy::Warn => {
                                if !outcome.budget_exhausted {
                                    outcome.warnings.push(format!(
                                        "epsilon {eps:.4} passes target {target} at step {}",
                                        outcome.steps + 1
                                    ));
                                }
                                outcome.budget_exhausted = true;
                            }
                        }
                    }
                    dp_step(model, &batch, &state.spec, sgd, &mut state.accountant, &mut rng)?.mean_loss
                }
                None => sgd_step(model, &batch, sgd)?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(loss));
            }
            outcome.steps += 1;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let val_ppl = valid.map(|v| perplexity(model, v)).transpose()?;
        let epsilon = private.as_ref().map(PrivateState::epsilon);
        if let Some(state) = private.as_ref() {
            let (eps, order) = state.accountant.epsilon(state.spec.delta);
            outcome.ledger.push(LedgerEntry {
                step: outcome.steps,
                sigma: state.spec.noise_multiplier,
                q,
                delta: state.spec.delta,
                epsilon: eps,
                best_order: order,
            });
        }
        outcome.epsilon = epsilon;
        outcome.metrics.push(EpochMetrics {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_ppl,
            epsilon,
            sigma: outcome.sigma,
            clip_c: private.as_ref().map(|p| p.spec.clip_c),
            adapter_kind: adapter.0,
            rank: adapter.1,
            params,
        });
        if let Some(ppl) = val_ppl {
            if best.as_ref().is_none_or(|(b, _)| ppl < *b) {
                best = Some((ppl, model.adapter_set()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stopping.is_some_and(|p| since_best >= p) {
                    outcome.stopped_early = true;
                    break;
                }
            }
        }
    }
    if cfg.select_best {
        if let Some((_, set)) = best {
            model.load_adapter_set(set)?;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::model::{AdapterConfig, ModelConfig};

    fn data(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let start = rng.random_range(0..vocab);
                (0..len as u32).map(|t| (start + t * 3) % vocab).collect()
            })
            .collect()
    }

    fn model() -> ToyLM {
        ToyLM::new(ModelConfig {
            vocab_size: 16,
            embed_dim: 8,
            hidden_dim: 8,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn pretraining_lowers_loss() {
        let mut m = model();
        let d = data(64, 6, 16, 2);
        let before = perplexity(&m, &d).unwrap();
        let cfg = PretrainConfig { epochs: 8, batch_size: 8, learning_rate: 1.0, seed: 0 };
        let history = pretrain_base(&mut m, &d, &cfg).unwrap();
        assert_eq!(history.len(), 8);
        assert!(perplexity(&m, &d).unwrap() < before / 2.0);
    }

    #[test]
    fn finetune_keeps_base_frozen_and_learns() {
        let mut m = model();
        let d = data(64, 6, 16, 3);
        m.attach_adapters(&AdapterConfig::new(AdapterKind::Tt, 2), 4).unwrap();
        let base = (m.embed.clone(), m.w_h.clone(), m.w_o.clone());
        let before = perplexity(&m, &d).unwrap();
        let cfg = FinetuneConfig { epochs: 5, batch_size: 8, learning_rate: 0.5, ..Default::default() };
        let out = finetune(&mut m, &d, Some(&d), &cfg, (AdapterKind::Tt, 2)).unwrap();
        assert_eq!(out.metrics.len(), 5);
        assert!(out.epsilon.is_none());
        assert_eq!((m.embed.clone(), m.w_h.clone(), m.w_o.clone()), base);
        assert!(perplexity(&m, &d).unwrap() < before);
    }

    #[test]
    fn zero_noise_huge_clip_repeats_non_private() {
        let d = data(40, 5, 16, 5);
        let mut a = model();
        a.attach_adapters(&AdapterConfig::new(AdapterKind::Tt, 2), 4).unwrap();
        let mut b = a.clone();
        let cfg = FinetuneConfig { epochs: 2, batch_size: 8, learning_rate: 1.0, seed: 9, ..Default::default() };
        finetune(&mut a, &d, None, &cfg, (AdapterKind::Tt, 2)).unwrap();
        let private = FinetuneConfig { privacy: Some(PrivacyConfig::with_sigma(1e9, 0.0)), ..cfg };
        finetune(&mut b, &d, None, &private, (AdapterKind::Tt, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibrated_run_stays_within_budget() {
        let d = data(50, 5, 16, 6);
        let mut m = model();
        m.attach_adapters(&AdapterConfig::new(AdapterKind::Lora, 2), 4).unwrap();
        let cfg = FinetuneConfig {
            epochs: 3,
            batch_size: 10,
            privacy: Some(PrivacyConfig::with_target(1.0, 2.0)),
            ..Default::default()
        };
        let out = finetune(&mut m, &d, None, &cfg, (AdapterKind::Lora, 2)).unwrap();
        assert_eq!(out.steps, 15);
        assert!(!out.budget_exhausted);
        let eps = out.epsilon.unwrap();
        assert!((2.0 * 0.999..=2.0).contains(&eps), "{eps}");
        assert_eq!(out.ledger.len(), 3);
        assert!(out.ledger.windows(2).all(|w| w[0].epsilon < w[1].epsilon));
    }

    #[test]
    fn budget_policy_stop_and_warn() {
        let d = data(50, 5, 16, 7);
        let mut m = model();
        m.attach_adapters(&AdapterConfig::new(AdapterKind::Tt, 2), 4).unwrap();
        let mut cfg = FinetuneConfig {
            epochs: 4,
            batch_size: 10,
            privacy: Some(PrivacyConfig::with_sigma(1.0, 0.8)),
            ..Default::default()
        };
        let free = finetune(&mut m.clone(), &d, None, &cfg, (AdapterKind::Tt, 2)).unwrap();
        assert_eq!(free.steps, 20);
        let cap = free.ledger[1].epsilon;

        cfg.privacy.as_mut().unwrap().target_epsilon = Some(cap);
        let mut stopped = m.clone();
        let err = finetune(&mut stopped, &d, None, &cfg, (AdapterKind::Tt, 2)).unwrap_err();
        assert!(matches!(err, Error::PrivacyBudgetExceeded { spent, target } if spent > cap && target == cap));
        let mut replay = m.clone();
        let two = FinetuneConfig { epochs: 2, privacy: Some(PrivacyConfig::with_sigma(1.0, 0.8)), ..cfg.clone() };
        finetune(&mut replay, &d, None, &two, (AdapterKind::Tt, 2)).unwrap();
        assert_eq!(stopped, replay);

        cfg.privacy.as_mut().unwrap().budget_policy = BudgetPolicy::Warn;
        let warn = finetune(&mut m.clone(), &d, None, &cfg, (AdapterKind::Tt, 2)).unwrap();
        assert_eq!(warn.steps, 20);
        assert_eq!(warn.warnings.len(), 1);
        assert!(warn.epsilon.unwrap() > cap);
    }

    #[test]
    fn early_stopping_and_selection() {
        let d = data(40, 5, 16, 8);
        let v = data(10, 5, 16, 99);
        let mut m = model();
        m.attach_adapters(&AdapterConfig::new(AdapterKind::Tt, 2), 4).unwrap();
        let cfg = FinetuneConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1.0,
            early_stopping: Some(1),
            select_best: true,
            ..Default::default()
        };
        let out = finetune(&mut m, &d, Some(&v), &cfg, (AdapterKind::Tt, 2)).unwrap();
        let best = out
            .metrics
            .iter()
            .filter_map(|e| e.val_ppl)
            .fold(f64::INFINITY, f64::min);
        assert!((perplexity(&m, &v).unwrap() - best).abs() < 1e-9 * best);
        assert!(out.stopped_early && out.metrics.len() < 30);
    }

    #[test]
    fn rejects_bad_setups() {
        let d = data(10, 5, 16, 1);
        let mut m = model();
        let cfg = FinetuneConfig::default();
        assert!(finetune(&mut m, &d, None, &cfg, (AdapterKind::Tt, 2)).is_err());
        m.attach_adapters(&AdapterConfig::new(AdapterKind::Tt, 2), 4).unwrap();
        assert!(finetune(&mut m, &[], None, &cfg, (AdapterKind::Tt, 2)).is_err());
        let no_noise = FinetuneConfig {
            privacy: Some(PrivacyConfig { noise_multiplier: None, ..PrivacyConfig::with_sigma(1.0, 1.0) }),
            ..cfg
        };
        assert!(finetune(&mut m, &d, None, &no_noise, (AdapterKind::Tt, 2)).is_err());
        assert!(perplexity(&m, &[]).is_err());
    }
}
