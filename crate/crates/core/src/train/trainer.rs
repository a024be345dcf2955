use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::graph::Graph;
use crate::metrics::{evaluate, LabelMap, MetricReport, Spacing};
use crate::model::{save_weights, MambaUnet};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::{Tape, Var};

use super::config::TrainConfig;
use super::data::{Dataset, Sample, Split};
use super::loss::segmentation_loss;
use super::sgd::{sgd_step, SgdParams, SgdState};

pub const CHECKPOINT_FILE: &str = "best.munt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// One line of the training log, written at every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Mean batch loss since the previous evaluation.
    pub loss: f64,
    pub val_dice: f64,
    pub checkpoint: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_weights: ParamStore,
    pub best_val_dice: f64,
    pub best_iteration: usize,
    pub final_weights: ParamStore,
    pub log: Vec<LogRecord>,
}

/// Mean loss and mean gradient over `batch`. Items run on separate tapes in
/// parallel; gradients are summed in batch order.
pub fn batch_gradients(
    model: &MambaUnet,
    weights: &ParamStore,
    batch: &[&Sample],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Array>)> {
    let per_item: Vec<(f64, Vec<Array>)> = batch
        .par_iter()
        .map(|s| {
            let mut t = Tape::new();
            let p = weights.bind(&mut t);
            let x = t.constant(s.image.clone());
            let logits = model.forward(&mut t, &p, &x)?;
            let loss = segmentation_loss(&mut t, &logits, &s.labels.labels, cfg.ce_weight, cfg.dice_weight)?;
            let value = t.value(&loss).item()?;
            let grads = t.backward(loss)?;
            let g = p.iter().map(|v: &Var| grads.array(*v)).collect::<Result<Vec<_>>>()?;
            Ok((value, g))
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut iter = per_item.into_iter();
    let (mut loss, mut sum) = iter.next().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in sum.iter_mut().zip(&g) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
    }
    for acc in &mut sum {
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
    }
    Ok((loss / n, sum))
}

/// Predicts every sample and scores the predictions.
pub fn evaluate_samples(
    model: &MambaUnet,
    weights: &ParamStore,
    samples: &[&Sample],
    spacing: Spacing,
) -> Result<MetricReport> {
    let pairs: Vec<(LabelMap, LabelMap)> = samples
        .par_iter()
        .map(|s| {
            let labels = model.predict(weights, &s.image)?;
            Ok((LabelMap::new(s.labels.height, s.labels.width, labels)?, s.labels.clone()))
        })
        .collect::<Result<_>>()?;
    evaluate(&pairs, model.config().num_classes, spacing)
}

/// Endless stream of batches drawn from reshuffled passes over `pool`.
struct BatchOrder {
    rng: rand_chacha::ChaCha8Rng,
    pool: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    fn new(seed: u64, pool: &[usize]) -> Self {
        let mut order = Self {
            rng: rng::stream(seed, "train/order"),
            pool: pool.to_vec(),
            cursor: 0,
        };
        order.shuffle();
        order
    }

    fn shuffle(&mut self) {
        for i in (1..self.pool.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.pool.swap(i, j);
        }
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.pool.len() {
                    self.shuffle();
                }
                self.cursor += 1;
                self.pool[self.cursor - 1]
            })
            .collect()
    }
}

pub fn log_to_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Runs SGD on the training split, scoring the validation split every
/// `eval_every` iterations and after the last one. The best weights are kept
/// whenever validation Dice strictly improves; with `out_dir` set they are
/// also written to [`CHECKPOINT_FILE`] next to the [`LOG_FILE`].
pub fn train(model: &MambaUnet, cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = model.config();
    if (data.spec.height, data.spec.width, data.spec.num_classes) != (mcfg.input_h, mcfg.input_w, mcfg.num_classes) {
        return Err(Error::Config("dataset does not match the model".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let paths = out_dir.map(|d| (d.join(CHECKPOINT_FILE), d.join(LOG_FILE)));

    let train_set = data.split(Split::Train);
    let val_set = data.split(Split::Val);
    let position: Vec<usize> = (0..train_set.len()).collect();
    let mut order = BatchOrder::new(cfg.seed, &position);

    let mut weights = model.init_weights(cfg.seed)?;
    let mut state = SgdState::zeros(&weights);
    let sgd = SgdParams {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let (mut window_loss, mut window_len) = (0.0, 0usize);

    for it in 1..=cfg.iterations {
        let batch: Vec<&Sample> = order.next_batch(cfg.batch_size).into_iter().map(|i| train_set[i]).collect();
        let (loss, grads) = batch_gradients(model, &weights, &batch, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss is {loss} at iteration {it}")));
        }
        sgd_step(&mut weights, &grads, &mut state, model.layout(), sgd)
            .map_err(|e| Error::Training(format!("iteration {it}: {e}")))?;
        window_loss += loss;
        window_len += 1;

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let val_dice = evaluate_samples(model, &weights, &val_set, (1.0, 1.0))?.mean_over_images.dice;
            let improved = best.as_ref().is_none_or(|(b, _, _)| val_dice > *b);
            if improved {
                if let Some((ckpt, _)) = &paths {
                    save_weights(model, &weights, ckpt)?;
                }
                best = Some((val_dice, it, weights.clone()));
            }
            log.push(LogRecord {
                iteration: it,
                loss: window_loss / window_len as f64,
                val_dice,
                checkpoint: improved,
            });
            log::info!("iter {it}: loss {:.5}, val dice {val_dice:.4}{}", window_loss / window_len as f64, if improved { " *" } else { "" });
            if let Some((_, log_path)) = &paths {
                write_atomic(log_path, log_to_jsonl(&log)?.as_bytes())?;
            }
            (window_loss, window_len) = (0.0, 0);
        }
    }
    let (best_val_dice, best_iteration, best_weights) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        best_weights,
        best_val_dice,
        best_iteration,
        final_weights: weights,
        log,
    })
}

/// Location of the checkpoint written by [`train`] under `out_dir`.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CHECKPOINT_FILE)
}
