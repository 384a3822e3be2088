//! Shuffled mini-batch training with AdamW and per-epoch reporting.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, Prepared};
use crate::objective::EvalReport;
use crate::optim::AdamW;
use crate::parallel::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub cs: f64,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ModelConfig,
    pub config_hash: String,
    pub seed: u64,
    pub param_count: usize,
    pub epochs: Vec<EpochLog>,
    pub initial_loss: f64,
    pub train: EvalReport,
    pub val: EvalReport,
    pub test: EvalReport,
    pub wall_time_s: f64,
    pub stopped_early: bool,
}

impl RunReport {
    /// Per-epoch total losses.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

pub struct PreparedSplits {
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

impl PreparedSplits {
    pub fn new(model: &Model, ds: &Dataset) -> Result<Self> {
        Ok(Self {
            train: model.prepare(&ds.train)?,
            val: model.prepare(&ds.val)?,
            test: model.prepare(&ds.test)?,
        })
    }
}

/// Trains `model` in place. `on_epoch` sees each epoch's log as it finishes.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<RunReport> {
    let start = Instant::now();
    let cfg = model.config.clone();
    let splits = PreparedSplits::new(model, ds)?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::contract("training needs non-empty train and val splits"));
    }
    let all: Vec<&Prepared> = splits.train.iter().collect();
    let initial_loss = model.loss(&model.store, &all, exec)?;

    let mut opt = AdamW::new(cfg.adamw(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut bce, mut cs) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let r = model.loss_and_grad(&model.store, &batch, exec)?;
            if !r.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let w = batch.len() as f64;
            loss += r.loss * w;
            bce += r.bce * w;
            cs += r.cs * w;
            opt.step(&mut model.store, &r.grads)?;
        }
        let n = splits.train.len() as f64;
        let log = EpochLog {
            epoch,
            loss: loss / n,
            bce: bce / n,
            cs: cs / n,
            val: model.evaluate(&splits.val, exec)?,
        };
        on_epoch(&log);
        let reached = cfg.target_val_acc.is_some_and(|t| log.val.overall_acc >= t);
        epochs.push(log);
        if reached {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    Ok(RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        param_count: model.param_count(),
        epochs,
        initial_loss,
        train: model.evaluate(&splits.train, exec)?,
        val: model.evaluate(&splits.val, exec)?,
        test: model.evaluate(&splits.test, exec)?,
        wall_time_s: start.elapsed().as_secs_f64(),
        stopped_early,
        config: cfg,
    })
}
