//! Mini-batch Adam training shared by the retriever and the reader.
//!
//! Each example gets its own tape and dropout seed. Per-example gradients are
//! summed in example order, so the result does not depend on how many worker
//! threads computed them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, Gradients, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 16, epochs: 5, seed: 42, clip_norm: 1.0, warmup_steps: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Validation("clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Seed of one example's dropout stream.
pub fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 over the three inputs
    let mut z =
        seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loss and gradients of one example.
pub fn example_gradients<T, F>(store: &ParamStore, item: &T, seed: u64, loss_fn: &F) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Tape, &T, u64) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    tape.enable_dropout(seed);
    let loss = loss_fn(&mut tape, item, seed)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Adam,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(config: TrainConfig, threads: usize) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        Ok(Self { optimizer: Adam::new(config.lr), config, pool })
    }

    /// One pass over `items` in a seeded shuffled order.
    pub fn run_epoch<T, F>(
        &mut self,
        store: &mut ParamStore,
        items: &[T],
        epoch: usize,
        loss_fn: &F,
    ) -> Result<EpochStats>
    where
        T: Sync,
        F: Fn(&mut Tape, &T, u64) -> Result<Var> + Sync,
    {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(example_seed(self.config.seed, epoch, usize::MAX)));
        let mut total = 0.0;
        let mut steps = 0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let frozen: &ParamStore = store;
            let results: Vec<Result<(f64, Gradients)>> = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| example_gradients(frozen, &items[i], example_seed(self.config.seed, epoch, i), loss_fn))
                    .collect()
            });
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, step: b, loss });
                }
                batch_loss += loss;
                store.accumulate(&grads, scale);
            }
            if self.config.clip_norm > 0.0 {
                store.clip_grad_norm(self.config.clip_norm);
            }
            let step = self.optimizer.steps_taken() as usize;
            self.optimizer.lr = if step < self.config.warmup_steps {
                self.config.lr * (step + 1) as f64 / self.config.warmup_steps as f64
            } else {
                self.config.lr
            };
            self.optimizer.step(store)?;
            total += batch_loss;
            steps += 1;
        }
        Ok(EpochStats { epoch, mean_loss: if items.is_empty() { 0.0 } else { total / items.len() as f64 }, steps })
    }
}
