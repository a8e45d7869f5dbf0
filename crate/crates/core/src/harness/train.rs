//! Minibatch training with best-dev selection and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::harness::metrics::evaluate;
use crate::harness::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use crate::params::{ParamGrads, ParamSet};
use crate::reader::{Example, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Seed of shuffling and dropout masks.
    pub seed: u64,
    /// Stop after this many epochs without a dev improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            epochs: 30,
            clip_norm: Some(10.0),
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::contract("batch size and epochs must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::contract(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's examples.
    pub train_loss: f64,
    /// Selection metric on the dev split.
    pub dev_metric: f64,
    /// Largest gradient norm before clipping.
    pub max_grad_norm: f64,
    /// Largest gradient norm actually applied.
    pub max_applied_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_metric: f64,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Mean loss and mean gradient over `batch`. Example `i` draws its dropout
/// mask from `ChaCha8Rng::seed_from_u64(seeds[i])` when `seeds` is given.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Example],
    seeds: Option<&[u64]>,
    exec: Execution,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptySequence("batch_gradients"));
    }
    let results = exec.map_range(batch.len(), |i| {
        let mut rng = seeds.map(|s| ChaCha8Rng::seed_from_u64(s[i]));
        model.example_gradients(batch[i], rng.as_mut())
    });
    let mut total = ParamGrads::new(model.params.len());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

/// Mean loss over `examples` without dropout.
pub fn mean_loss(model: &Model, examples: &[&Example], exec: Execution) -> Result<f64> {
    let losses = exec.map(examples, |ex| {
        let tape = crate::tape::Tape::new(&model.params);
        let out = model.forward(&tape, &ex.document, &ex.query, None)?;
        Ok(model.loss(&out, &ex.document, &ex.answer)?.item())
    });
    let sum: f64 = losses.into_iter().collect::<Result<Vec<f64>>>()?.iter().sum();
    Ok(sum / examples.len().max(1) as f64)
}

fn mix(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = seed ^ ((epoch as u64) << 32) ^ index as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains `model` in place and leaves it holding the best-dev parameters.
/// `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    dev_set: &[Example],
    config: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::contract("train and dev splits must be nonempty"));
    }
    for ex in train_set.iter().chain(dev_set) {
        ex.validate(&model.config)?;
    }
    let mut optimizer = Optimizer::new(config.optimizer, &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut history = Vec::new();
    let dropout = model.config.dropout > 0.0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut max_norm, mut max_applied) = (0.0, 0.0f64, 0.0f64);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| mix(config.seed, epoch, i)).collect();
            let (loss, mut grads) = batch_gradients(model, &batch, dropout.then_some(&seeds[..]), exec)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            let norm = match config.clip_norm {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads.global_norm(),
            };
            max_norm = max_norm.max(norm);
            max_applied = max_applied.max(grads.global_norm());
            optimizer.step(&mut model.params, &grads);
            loss_sum += loss * batch.len() as f64;
        }
        let dev_metric = evaluate(model, dev_set, exec)?.primary();
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            dev_metric,
            max_grad_norm: max_norm,
            max_applied_norm: max_applied,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, m, _)| dev_metric > *m) {
            best = Some((epoch, dev_metric, model.params.clone()));
        }
        if let (Some(p), Some((be, _, _))) = (config.patience, &best) {
            if epoch - be >= p {
                break;
            }
        }
    }
    let (best_epoch, best_dev_metric, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainHistory {
        epochs: history,
        best_epoch,
        best_dev_metric,
    })
}
