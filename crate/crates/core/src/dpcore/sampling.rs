//! Batch sampling for private training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Each example joins each batch independently with probability `q`.
    #[default]
    Poisson,
    /// Shuffled fixed-size batches; only approximates the accountant's assumption.
    Shuffled,
}

/// Sampling rate `q = batch_size / n`, capped at 1.
pub fn sampling_rate(batch_size: usize, n: usize) -> f64 {
    (batch_size as f64 / n as f64).min(1.0)
}

/// Number of steps that make up one pass over `n` examples.
pub fn steps_per_epoch(batch_size: usize, n: usize) -> usize {
    n.div_ceil(batch_size.max(1)).max(1)
}

/// Index batches for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, mode: SamplingMode, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let steps = steps_per_epoch(batch_size, n);
    match mode {
        SamplingMode::Poisson => {
            let q = sampling_rate(batch_size, n);
            (0..steps)
                .map(|_| (0..n).filter(|_| rng.random::<f64>() < q).collect())
                .collect()
        }
        SamplingMode::Shuffled => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
        }
    }
}
