use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CvaeModel, ModelConfig, ModelError, Normalizer, Window};
use crate::nn::{adam_step, AdamState, Gradients, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per optimizer step; 0 means the whole dataset.
    pub batch_size: usize,
    pub seed: u64,
    /// Windows per gradient shard. Shards run in parallel and are summed
    /// in a fixed order, so results do not depend on the thread count.
    pub shard_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            seed: 0,
            shard_size: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CvaeModel,
    /// Full-dataset loss at the target β: initial value, then one per epoch.
    pub curve: Vec<f64>,
    pub skipped_steps: usize,
}

/// KL weight after `step` optimizer steps out of `total`.
pub fn beta_at(config: &ModelConfig, step: usize, total: usize) -> f64 {
    let warm = config.warmup_fraction * total as f64;
    if warm <= 0.0 {
        return config.beta;
    }
    config.beta * (step as f64 / warm).min(1.0)
}

fn shards<'a>(batch: &'a [&'a Window], size: usize) -> Vec<&'a [&'a Window]> {
    batch.chunks(size.max(1)).collect()
}

/// Mean loss and gradient over `batch`, sharded.
fn batch_gradient(model: &CvaeModel, batch: &[&Window], beta: f64, shard: usize) -> (f64, Gradients) {
    let parts: Vec<(f64, Gradients)> = shards(batch, shard)
        .into_par_iter()
        .map(|ws| {
            let mut g = Graph::new();
            let s = model.elbo_sum(&mut g, &model.params, ws, beta);
            (g.value(s).item(), g.backward(s, &model.params))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(&model.params);
    for (l, gr) in &parts {
        total += l;
        grads.accumulate(gr);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    (total / n, grads)
}

pub(crate) fn dataset_loss(model: &CvaeModel, windows: &[&Window], beta: f64, shard: usize) -> f64 {
    let parts: Vec<f64> = shards(windows, shard)
        .into_par_iter()
        .map(|ws| {
            let mut g = Graph::new();
            let s = model.elbo_sum(&mut g, &model.params, ws, beta);
            g.value(s).item()
        })
        .collect();
    parts.iter().sum::<f64>() / windows.len() as f64
}

/// Fits the normalizer on `windows`, then runs Adam on the negative ELBO.
pub fn train(
    windows: &[Window],
    config: &ModelConfig,
    cluster_ids: Vec<String>,
    tc: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if windows.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut model = CvaeModel::new(config.clone(), cluster_ids, tc.seed)?;
    model.normalizer = Normalizer::fit(windows);
    let all: Vec<&Window> = windows.iter().collect();
    let batch = if tc.batch_size == 0 {
        all.len()
    } else {
        tc.batch_size.min(all.len())
    };
    let per_epoch = all.len().div_ceil(batch);
    let total = per_epoch * tc.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_5eed);
    let mut adam = AdamState::new(&model.params);
    let mut curve = vec![dataset_loss(&model, &all, config.beta, tc.shard_size)];
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut step = 0;
    let mut skipped = 0;
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let ws: Vec<&Window> = chunk.iter().map(|&i| all[i]).collect();
            let beta = beta_at(config, step, total);
            let (loss, grads) = batch_gradient(&model, &ws, beta, tc.shard_size);
            step += 1;
            if !loss.is_finite() || !grads.is_finite() {
                skipped += 1;
                continue;
            }
            adam_step(&mut model.params, &grads, &config.adam, &mut adam)?;
        }
        curve.push(dataset_loss(&model, &all, config.beta, tc.shard_size));
    }
    Ok(TrainOutcome {
        model,
        curve,
        skipped_steps: skipped,
    })
}
