//! A desk-scale language model with frozen base weights and trainable adapters.
//!
//! Each position predicts the next token from the current one:
//! `e = E[u]`, `a = tanh(W_h·e + α·f_h(e))`, `logits = W_o·a + α·f_o(a)`.
//! The adapters `f_h` and `f_o` are either TT chains or LoRA pairs; the base
//! tensors `E`, `W_h`, `W_o` are only ever written by [`super::pretrain_base`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{tt_chain_token, ContractionCache, LoRAAdapter, TokenStates};
use crate::dpcore::{BatchId, ForwardPass, GhostClipModel};
use crate::error::{Error, Result};
use crate::persample::{self, PerExampleNorms};
use crate::tensor::{matvec, matvec_t_acc, outer_acc, DenseTensor};
use crate::ttcore::{
    init_cores, plan_shapes, unit_gain_std, AdapterCheckpoint, TTAdapter, TTShapePlan, DEFAULT_INIT_STD,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            embed_dim: 64,
            hidden_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[default]
    Tt,
    Lora,
    None,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Tt => "tt",
            AdapterKind::Lora => "lora",
            AdapterKind::None => "none",
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Core or `A` std; unset means [`unit_gain_std`] for TT and 0.02 for LoRA.
    #[serde(default)]
    pub init_std: Option<f64>,
    /// Also adapt the output projection.
    #[serde(default = "yes")]
    pub adapt_output: bool,
}

fn default_alpha() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl AdapterConfig {
    pub fn new(kind: AdapterKind, rank: usize) -> Self {
        Self {
            kind,
            rank,
            alpha: default_alpha(),
            init_std: None,
            adapt_output: true,
        }
    }
}

/// Splits `n` into `parts` factors as evenly as its prime factors allow,
/// largest first.
pub fn balanced_factors(n: usize, parts: usize) -> Vec<usize> {
    let mut primes = Vec::new();
    let mut rest = n;
    let mut p = 2;
    while p * p <= rest {
        while rest.is_multiple_of(p) {
            primes.push(p);
            rest /= p;
        }
        p += 1;
    }
    if rest > 1 {
        primes.push(rest);
    }
    primes.sort_unstable_by(|a, b| b.cmp(a));
    let mut bins = vec![1usize; parts.max(1)];
    for prime in primes {
        let smallest = bins
            .iter()
            .enumerate()
            .min_by_key(|(_, v)| **v)
            .map(|(i, _)| i)
            .unwrap();
        bins[smallest] *= prime;
    }
    bins.retain(|&b| b > 1);
    if bins.is_empty() {
        bins.push(1);
    }
    bins.sort_unstable_by(|a, b| b.cmp(a));
    bins
}

/// Default TT plan for a `d_in → d_out` layer: three balanced factors a side.
pub fn default_plan(d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<TTShapePlan> {
    plan_shapes(d_in, d_out, &balanced_factors(d_in, 3), &balanced_factors(d_out, 3), rank, alpha)
}

/// Trainable adapter attached to one frozen linear layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerAdapter {
    Tt(TTAdapter),
    Lora(LoRAAdapter),
}

/// Serialized form of a [`LayerAdapter`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterRecord {
    Tt(AdapterCheckpoint),
    Lora(LoRAAdapter),
}

impl LayerAdapter {
    pub fn build(cfg: &AdapterConfig, d_in: usize, d_out: usize, seed: u64) -> Result<Option<Self>> {
        Ok(match cfg.kind {
            AdapterKind::None => None,
            AdapterKind::Tt => {
                let plan = default_plan(d_in, d_out, cfg.rank, cfg.alpha)?;
                let std = cfg.init_std.unwrap_or_else(|| unit_gain_std(&plan));
                Some(Self::Tt(init_cores(&plan, seed, std)?))
            }
            AdapterKind::Lora => Some(Self::Lora(LoRAAdapter::init(
                d_in,
                d_out,
                cfg.rank,
                cfg.alpha,
                seed,
                cfg.init_std.unwrap_or(DEFAULT_INIT_STD),
            )?)),
        })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Tt(t) => t.param_count(),
            Self::Lora(l) => l.param_count(),
        }
    }

    pub fn params(&self) -> Vec<&DenseTensor> {
        match self {
            Self::Tt(t) => t.cores().collect(),
            Self::Lora(l) => vec![&l.a, &l.b],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        match self {
            Self::Tt(t) => t.input_cores.iter_mut().chain(t.output_cores.iter_mut()).collect(),
            Self::Lora(l) => vec![&mut l.a, &mut l.b],
        }
    }

    pub fn param_ids(&self) -> Vec<String> {
        match self {
            Self::Tt(t) => (0..t.num_cores()).map(|i| persample::core_id(&t.plan, i)).collect(),
            Self::Lora(_) => vec!["a".into(), "b".into()],
        }
    }

    /// Adds `α·f(x)` to `out`; TT adapters also return the pre-core states.
    fn apply(&self, x: &[f64], out: &mut [f64]) -> Result<Option<TokenStates>> {
        match self {
            Self::Tt(t) => {
                let (f, states) = tt_chain_token(x, t)?;
                let alpha = t.alpha();
                for (o, v) in out.iter_mut().zip(f) {
                    *o += alpha * v;
                }
                Ok(Some(states))
            }
            Self::Lora(l) => {
                l.apply_token(x, out);
                Ok(None)
            }
        }
    }

    /// Adds the input cotangent of `α·f` for upstream `delta` to `acc`.
    fn input_cotangent(&self, delta: &[f64], acc: &mut [f64]) -> Result<()> {
        match self {
            Self::Tt(t) => {
                let dx = persample::input_cotangent(delta, t)?;
                acc.iter_mut().zip(dx).for_each(|(a, v)| *a += v);
            }
            Self::Lora(l) => {
                let r = l.rank();
                let mut back = vec![0.0; r];
                matvec_t_acc(l.b.data(), r, delta, &mut back);
                back.iter_mut().for_each(|v| *v *= l.alpha);
                matvec_t_acc(l.a.data(), l.d_in(), &back, acc);
            }
        }
        Ok(())
    }

    fn norms(&self, pass: &LayerPass) -> Result<PerExampleNorms> {
        match self {
            Self::Tt(t) => {
                let cache = pass.cache.as_ref().ok_or(Error::CacheMissing { example: 0, token: 0 })?;
                persample::per_example_norms(cache, &pass.deltas, t)
            }
            Self::Lora(l) => persample::lora_per_example_norms(l, &pass.inputs, &pass.deltas),
        }
    }

    fn weighted(&self, pass: &LayerPass, weights: &[f64]) -> Result<Vec<DenseTensor>> {
        match self {
            Self::Tt(t) => {
                let cache = pass.cache.as_ref().ok_or(Error::CacheMissing { example: 0, token: 0 })?;
                persample::weighted_core_grads(cache, &pass.deltas, t, weights)
            }
            Self::Lora(l) => persample::lora_weighted_grads(l, &pass.inputs, &pass.deltas, weights),
        }
    }

    pub fn to_record(&self) -> AdapterRecord {
        match self {
            Self::Tt(t) => AdapterRecord::Tt(t.to_checkpoint()),
            Self::Lora(l) => AdapterRecord::Lora(l.clone()),
        }
    }

    pub fn from_record(record: AdapterRecord) -> Result<Self> {
        Ok(match record {
            AdapterRecord::Tt(c) => Self::Tt(TTAdapter::from_checkpoint(c)?),
            AdapterRecord::Lora(l) => Self::Lora(l),
        })
    }
}

/// Both adapter slots of a model, as written to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub hidden: Option<AdapterRecord>,
    pub output: Option<AdapterRecord>,
}

/// Everything the forward pass computed for one token.
#[derive(Clone)]
struct TokenTrace {
    embed: Vec<f64>,
    act: Vec<f64>,
    probs: Vec<f64>,
    loss: f64,
    hidden_states: Option<TokenStates>,
    output_states: Option<TokenStates>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLM {
    pub config: ModelConfig,
    /// `(V, d)`
    pub embed: DenseTensor,
    /// `(h, d)`
    pub w_h: DenseTensor,
    /// `(V, h)`
    pub w_o: DenseTensor,
    pub hidden_adapter: Option<LayerAdapter>,
    pub output_adapter: Option<LayerAdapter>,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> DenseTensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut t = DenseTensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

impl ToyLM {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        if v < 1 || d < 1 || h < 1 {
            return Err(Error::InvalidRange("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = gaussian(&[v, d], 1.0, &mut rng);
        let w_h = gaussian(&[h, d], 1.0 / (d as f64).sqrt(), &mut rng);
        let w_o = gaussian(&[v, h], 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            embed,
            w_h,
            w_o,
            hidden_adapter: None,
            output_adapter: None,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Attaches fresh adapters per `cfg`, replacing any existing ones.
    pub fn attach_adapters(&mut self, cfg: &AdapterConfig, seed: u64) -> Result<()> {
        let (v, d, h) = (self.config.vocab_size, self.config.embed_dim, self.config.hidden_dim);
        self.hidden_adapter = LayerAdapter::build(cfg, d, h, seed)?;
        self.output_adapter = if cfg.adapt_output {
            LayerAdapter::build(cfg, h, v, seed.wrapping_add(1))?
        } else {
            None
        };
        Ok(())
    }

    pub fn detach_adapters(&mut self) {
        self.hidden_adapter = None;
        self.output_adapter = None;
    }

    pub fn has_adapters(&self) -> bool {
        self.hidden_adapter.is_some() || self.output_adapter.is_some()
    }

    /// `(id, entry count)` of every trainable tensor; only adapter tensors qualify.
    pub fn trainable_census(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (prefix, slot) in [("hidden", &self.hidden_adapter), ("output", &self.output_adapter)] {
            if let Some(adapter) = slot {
                for (id, p) in adapter.param_ids().into_iter().zip(adapter.params()) {
                    out.push((format!("{prefix}.{id}"), p.len()));
                }
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_census().iter().map(|(_, n)| n).sum()
    }

    pub fn adapter_set(&self) -> AdapterSet {
        AdapterSet {
            hidden: self.hidden_adapter.as_ref().map(LayerAdapter::to_record),
            output: self.output_adapter.as_ref().map(LayerAdapter::to_record),
        }
    }

    pub fn load_adapter_set(&mut self, set: AdapterSet) -> Result<()> {
        self.hidden_adapter = set.hidden.map(LayerAdapter::from_record).transpose()?;
        self.output_adapter = set.output.map(LayerAdapter::from_record).transpose()?;
        Ok(())
    }

    fn check_token(&self, id: u32) -> Result<usize> {
        let id = id as usize;
        if id >= self.config.vocab_size {
            return Err(Error::VocabMismatch(id + 1, self.config.vocab_size));
        }
        Ok(id)
    }

    fn trace_token(&self, input: u32, target: u32) -> Result<TokenTrace> {
        let (d, h, v) = (self.config.embed_dim, self.config.hidden_dim, self.config.vocab_size);
        let u = self.check_token(input)?;
        let y = self.check_token(target)?;
        let embed = self.embed.data()[u * d..(u + 1) * d].to_vec();
        let mut act = vec![0.0; h];
        matvec(self.w_h.data(), d, &embed, &mut act);
        let hidden_states = match &self.hidden_adapter {
            Some(a) => a.apply(&embed, &mut act)?,
            None => None,
        };
        act.iter_mut().for_each(|z| *z = z.tanh());
        let mut probs = vec![0.0; v];
        matvec(self.w_o.data(), h, &act, &mut probs);
        let output_states = match &self.output_adapter {
            Some(a) => a.apply(&act, &mut probs)?,
            None => None,
        };
        softmax_in_place(&mut probs);
        let loss = -probs[y].ln();
        Ok(TokenTrace {
            embed,
            act,
            probs,
            loss,
            hidden_states,
            output_states,
        })
    }

    /// Upstreams `(∂ℓ/∂logits, ∂ℓ/∂z_hidden)` of one token, scaled by `scale`.
    fn token_upstreams(&self, trace: &TokenTrace, target: u32, scale: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.config.hidden_dim;
        let mut d_logits: Vec<f64> = trace.probs.iter().map(|p| p * scale).collect();
        d_logits[target as usize] -= scale;
        let mut d_act = vec![0.0; h];
        matvec_t_acc(self.w_o.data(), h, &d_logits, &mut d_act);
        if let Some(a) = &self.output_adapter {
            a.input_cotangent(&d_logits, &mut d_act)?;
        }
        let d_hidden = d_act
            .iter()
            .zip(&trace.act)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        Ok((d_logits, d_hidden))
    }

    /// `W_oᵀ·v` plus the output adapter's input cotangent of `v`.
    fn act_cotangent(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.config.hidden_dim];
        matvec_t_acc(self.w_o.data(), self.config.hidden_dim, v, &mut out);
        if let Some(a) = &self.output_adapter {
            a.input_cotangent(v, &mut out)?;
        }
        Ok(out)
    }

    /// Mean next-token cross-entropy of one example.
    pub fn example_loss(&self, seq: &[u32]) -> Result<f64> {
        let (sum, n) = self.token_loss_sum(seq)?;
        Ok(sum / n as f64)
    }

    /// `(Σ_t −ln p(x_{t+1} | x_t), number of predictions)`.
    pub fn token_loss_sum(&self, seq: &[u32]) -> Result<(f64, usize)> {
        if seq.len() < 2 {
            return Err(Error::EmptyData);
        }
        let mut sum = 0.0;
        for w in seq.windows(2) {
            sum += self.trace_token(w[0], w[1])?.loss;
        }
        Ok((sum, seq.len() - 1))
    }

    /// Next-token distribution after `input`.
    pub fn next_token_probs(&self, input: u32) -> Result<Vec<f64>> {
        Ok(self.trace_token(input, 0)?.probs)
    }

    /// Gradients of the mean per-example loss w.r.t. `[E, W_h, W_o]`,
    /// used for non-private pretraining of the base model.
    pub fn base_gradients(&self, batch: &[&Vec<u32>]) -> Result<(f64, [DenseTensor; 3])> {
        if self.has_adapters() {
            return Err(Error::InvalidRange("base pretraining runs without adapters".into()));
        }
        let (d, h) = (self.config.embed_dim, self.config.hidden_dim);
        let mut g_embed = DenseTensor::zeros(self.embed.shape());
        let mut g_wh = DenseTensor::zeros(self.w_h.shape());
        let mut g_wo = DenseTensor::zeros(self.w_o.shape());
        let mut total = 0.0;
        let inv_b = 1.0 / batch.len().max(1) as f64;
        for seq in batch {
            if seq.len() < 2 {
                return Err(Error::EmptyData);
            }
            let scale = inv_b / (seq.len() - 1) as f64;
            let mut loss = 0.0;
            for w in seq.windows(2) {
                let trace = self.trace_token(w[0], w[1])?;
                loss += trace.loss;
                let (d_logits, d_hidden) = self.token_upstreams(&trace, w[1], scale)?;
                outer_acc(g_wo.data_mut(), 1.0, &d_logits, &trace.act);
                outer_acc(g_wh.data_mut(), 1.0, &d_hidden, &trace.embed);
                let u = w[0] as usize;
                matvec_t_acc(self.w_h.data(), d, &d_hidden, &mut g_embed.data_mut()[u * d..(u + 1) * d]);
            }
            total += loss / (seq.len() - 1) as f64;
        }
        debug_assert_eq!(g_wh.shape(), &[h, d]);
        Ok((total * inv_b, [g_embed, g_wh, g_wo]))
    }
}

/// Inputs, upstreams and cached states of one adapted layer over a batch.
#[derive(Debug, Clone)]
pub struct LayerPass {
    /// `(B, T, d_in)`
    pub inputs: DenseTensor,
    /// `(B, T, d_out)`, the gradient of each example's own loss.
    pub deltas: DenseTensor,
    pub cache: Option<ContractionCache>,
}

#[derive(Debug, Clone)]
pub struct ToyPass {
    id: BatchId,
    batch: usize,
    mean_loss: f64,
    pub hidden: Option<LayerPass>,
    pub output: Option<LayerPass>,
}

impl ForwardPass for ToyPass {
    fn batch_id(&self) -> BatchId {
        self.id
    }

    fn batch_size(&self) -> usize {
        self.batch
    }

    fn mean_loss(&self) -> f64 {
        self.mean_loss
    }
}

struct LayerBuffers {
    inputs: Vec<f64>,
    deltas: Vec<f64>,
    cache: Option<ContractionCache>,
    d_in: usize,
    d_out: usize,
}

impl LayerBuffers {
    fn new(adapter: &LayerAdapter, batch: usize, seq: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            inputs: Vec::with_capacity(batch * seq * d_in),
            deltas: Vec::with_capacity(batch * seq * d_out),
            cache: matches!(adapter, LayerAdapter::Tt(_)).then(|| ContractionCache::new(batch, seq)),
            d_in,
            d_out,
        }
    }

    fn finish(self, batch: usize, seq: usize) -> Result<LayerPass> {
        Ok(LayerPass {
            inputs: DenseTensor::new(vec![batch, seq, self.d_in], self.inputs)?,
            deltas: DenseTensor::new(vec![batch, seq, self.d_out], self.deltas)?,
            cache: self.cache,
        })
    }
}

impl GhostClipModel for ToyLM {
    type Example = Vec<u32>;
    type Pass = ToyPass;

    fn forward_pass(&self, batch: &[&Vec<u32>]) -> Result<ToyPass> {
        let id = BatchId::fresh();
        if batch.is_empty() {
            return Ok(ToyPass {
                id,
                batch: 0,
                mean_loss: 0.0,
                hidden: None,
                output: None,
            });
        }
        let len = batch[0].len();
        if len < 2 || batch.iter().any(|s| s.len() != len) {
            return Err(Error::ShapeMismatch(
                "examples in a batch need one common length of at least 2".into(),
            ));
        }
        let seq = len - 1;
        let (d, h, v) = (self.config.embed_dim, self.config.hidden_dim, self.config.vocab_size);
        let mut hidden = self
            .hidden_adapter
            .as_ref()
            .map(|a| LayerBuffers::new(a, batch.len(), seq, d, h));
        let mut output = self
            .output_adapter
            .as_ref()
            .map(|a| LayerBuffers::new(a, batch.len(), seq, h, v));
        let scale = 1.0 / seq as f64;
        // the trace depends only on the input token and the activation
        // cotangent is linear in `p − e_y`, so both are shared across the batch
        let mut by_input: Vec<Option<(TokenTrace, Vec<f64>)>> = (0..v).map(|_| None).collect();
        let mut by_target: Vec<Option<Vec<f64>>> = (0..v).map(|_| None).collect();
        let mut total = 0.0;
        for example in batch {
            let mut loss = 0.0;
            for w in example.windows(2) {
                let (u, y) = (self.check_token(w[0])?, self.check_token(w[1])?);
                if by_input[u].is_none() {
                    let trace = self.trace_token(w[0], w[0])?;
                    let cot = self.act_cotangent(&trace.probs)?;
                    by_input[u] = Some((trace, cot));
                }
                if by_target[y].is_none() {
                    let mut one_hot = vec![0.0; v];
                    one_hot[y] = 1.0;
                    by_target[y] = Some(self.act_cotangent(&one_hot)?);
                }
                let (trace, cot_p) = by_input[u].as_ref().expect("filled above");
                let cot_y = by_target[y].as_ref().expect("filled above");
                loss -= trace.probs[y].ln();
                let mut d_logits: Vec<f64> = trace.probs.iter().map(|p| p * scale).collect();
                d_logits[y] -= scale;
                let d_hidden: Vec<f64> = cot_p
                    .iter()
                    .zip(cot_y)
                    .zip(&trace.act)
                    .map(|((p, t), a)| scale * (p - t) * (1.0 - a * a))
                    .collect();
                if let Some(buf) = hidden.as_mut() {
                    buf.inputs.extend_from_slice(&trace.embed);
                    buf.deltas.extend_from_slice(&d_hidden);
                    if let (Some(cache), Some(states)) = (buf.cache.as_mut(), &trace.hidden_states) {
                        cache.push(states.clone());
                    }
                }
                if let Some(buf) = output.as_mut() {
                    buf.inputs.extend_from_slice(&trace.act);
                    buf.deltas.extend_from_slice(&d_logits);
                    if let (Some(cache), Some(states)) = (buf.cache.as_mut(), &trace.output_states) {
                        cache.push(states.clone());
                    }
                }
            }
            total += loss * scale;
        }
        debug_assert_eq!(d, self.config.embed_dim);
        debug_assert_eq!(h, self.config.hidden_dim);
        Ok(ToyPass {
            id,
            batch: batch.len(),
            mean_loss: total / batch.len() as f64,
            hidden: hidden.map(|b| b.finish(batch.len(), seq)).transpose()?,
            output: output.map(|b| b.finish(batch.len(), seq)).transpose()?,
        })
    }

    fn per_example_norms(&self, pass: &ToyPass) -> Result<PerExampleNorms> {
        let mut parts = Vec::new();
        if pass.batch > 0 {
            for (name, adapter, layer) in [
                ("hidden", &self.hidden_adapter, &pass.hidden),
                ("output", &self.output_adapter, &pass.output),
            ] {
                if let (Some(a), Some(lp)) = (adapter, layer) {
                    parts.push((name, a.norms(lp)?));
                }
            }
        }
        Ok(PerExampleNorms::combine(parts, pass.batch))
    }

    fn weighted_grads(&self, pass: &ToyPass, weights: &[f64]) -> Result<Vec<DenseTensor>> {
        if weights.len() != pass.batch {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for batch of {}",
                weights.len(),
                pass.batch
            )));
        }
        let mut out = Vec::new();
        for (adapter, layer) in [
            (&self.hidden_adapter, &pass.hidden),
            (&self.output_adapter, &pass.output),
        ] {
            if let Some(a) = adapter {
                match layer {
                    Some(lp) if pass.batch > 0 => out.extend(a.weighted(lp, weights)?),
                    _ => out.extend(a.params().into_iter().map(|p| DenseTensor::zeros(p.shape()))),
                }
            }
        }
        Ok(out)
    }

    fn trainable_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out = Vec::new();
        if let Some(a) = self.hidden_adapter.as_mut() {
            out.extend(a.params_mut());
        }
        if let Some(a) = self.output_adapter.as_mut() {
            out.extend(a.params_mut());
        }
        out
    }
}
