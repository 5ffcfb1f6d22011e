//! Mini-batch training of shape classifiers.
//!
//! Every sample of a batch gets its own tape; per-sample gradients are summed
//! in batch order, so the result does not depend on how rayon schedules the
//! work.

use std::f64::consts::PI;

use anyhow::{bail, Context, Result};
use pdsa_core::data::Sample;
use pdsa_core::network::{classify_forward, CloudGeometry, Model, ModelConfig};
use pdsa_core::rng::{derive_seed, seeded};
use pdsa_core::tensor::{AdamW, AdamWConfig, Real, Tape};
use rand::seq::SliceRandom;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub smoothing: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            weight_decay: 1e-4,
            epochs: 60,
            batch: 16,
            seed: 0,
            smoothing: 0.1,
            threads: 1,
        }
    }
}

/// A sample with its geometry precomputed for one model configuration.
pub struct Prepared {
    pub geo: CloudGeometry<f32>,
    pub label: usize,
}

pub fn prepare(config: &ModelConfig, samples: &[Sample]) -> Result<Vec<Prepared>> {
    samples
        .par_iter()
        .map(|s| {
            let geo = CloudGeometry::build(&s.points, config)?.cast();
            Ok(Prepared {
                geo,
                label: s.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

struct Step {
    loss: f64,
    correct: bool,
    grads: Vec<Vec<f32>>,
}

fn sample_step(model: &Model<f32>, p: &Prepared, smoothing: f32) -> Result<Step> {
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape);
    let (logits, _) = classify_forward(&mut tape, &bind, model, &p.geo)?;
    let correct = argmax(tape.value(logits).data()) == p.label;
    let loss = tape.cross_entropy(logits, &[p.label], smoothing)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    tape.backward(loss);
    Ok(Step {
        loss: loss_value,
        correct,
        grads: bind.grads(&tape),
    })
}

/// Predicted class per sample.
pub fn predict(model: &Model<f32>, data: &[Prepared]) -> Result<Vec<usize>> {
    data.par_iter()
        .map(|p| {
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let (logits, _) = classify_forward(&mut tape, &bind, model, &p.geo)?;
            Ok(argmax(tape.value(logits).data()))
        })
        .collect()
}

pub fn accuracy(model: &Model<f32>, data: &[Prepared]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, data)?;
    let hits = pred
        .iter()
        .zip(data)
        .filter(|(p, d)| **p == d.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Cosine decay from `lr` to 0 over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Trains `model` in place, calling `on_epoch` after every epoch. A
/// non-finite loss or gradient aborts training.
pub fn train(
    model: &mut Model<f32>,
    train: &[Prepared],
    test: &[Prepared],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model<f32>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if cfg.batch == 0 {
        bail!("batch size must be at least 1");
    }
    if train.is_empty() && cfg.epochs > 0 {
        bail!("training split is empty");
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = seeded(derive_seed(&[cfg.seed, 0x7368_7566]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let steps: Vec<Step> = chunk
                .par_iter()
                .map(|&i| sample_step(model, &train[i], cfg.smoothing as f32))
                .collect::<Result<_>>()?;
            let mut grads = steps[0].grads.clone();
            for s in &steps[1..] {
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            for s in &steps {
                if !s.loss.is_finite() {
                    bail!("non-finite loss at epoch {epoch}, step {step}");
                }
                loss_sum += s.loss;
                correct += usize::from(s.correct);
            }
            opt.step(&mut model.params, &grads, cosine_lr(cfg.lr, step, total))
                .with_context(|| format!("optimizer step {step} of epoch {epoch}"))?;
            step += 1;
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc: accuracy(model, test)?,
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Runs `f` on a pool of `threads` workers (0 means rayon's default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building the worker pool")?;
    Ok(pool.install(f))
}
