use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_graph_features, stack_rows, GraphSample, GraphTopology, SurrogateModel};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::pseudofem::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Initial Adam step size; decays by cosine to `lr * lr_final_ratio`.
    pub lr: f64,
    pub lr_final_ratio: f64,
    pub split_seed: u64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            lr: 3e-3,
            lr_final_ratio: 0.03,
            split_seed: 0,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch MSE per iteration, mm².
    pub losses: Vec<f64>,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Pooled over every node of every held-out sample.
    pub test_r2: f64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub parameter_count: usize,
    pub wall_time_s: f64,
    pub seed: u64,
}

/// `1 − SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty field".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidArgument("truth has zero variance".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Trains `model` in place from its current weights on a seeded split of
/// `dataset`. The output scale is reset to the RMS training target.
pub fn train(
    model: &mut SurrogateModel,
    topology: &Arc<GraphTopology>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let start = Instant::now();
    if dataset.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 10 samples, got {}",
            dataset.len()
        )));
    }
    if cfg.batch_size == 0 || !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::InvalidArgument("invalid training configuration".into()));
    }
    let samples: Vec<GraphSample> = dataset
        .samples
        .iter()
        .map(|s| build_graph_features(topology, &s.design, Some(&s.field)))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
    order.shuffle(&mut rng);
    let n_train = ((samples.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, samples.len() - 1);
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let ms: f64 = train_idx
        .iter()
        .flat_map(|&i| samples[i].target.as_ref().unwrap())
        .map(|d| d * d)
        .sum::<f64>()
        / (n_train * topology.node_count) as f64;
    model.target_scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };

    let mut batch_rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed_7a11);
    let mut pool: Vec<usize> = Vec::new();
    let mut adam = AdamState::new(model.weights.len());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let n = topology.node_count;
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(n_train) {
            if pool.is_empty() {
                pool = train_idx.clone();
                pool.shuffle(&mut batch_rng);
            }
            batch.push(pool.pop().unwrap());
        }
        let (loss, grads) = batch_gradient(model, topology, &samples, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        let progress = it as f64 / cfg.iterations.max(1) as f64;
        let lr = cfg.lr * (cfg.lr_final_ratio + (1.0 - cfg.lr_final_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        adam_step(&mut model.weights, &grads, &mut adam, &AdamConfig::with_lr(lr))
            .map_err(|_| Error::NonFiniteLoss { iteration: it })?;
        losses.push(loss);
    }

    let eval = |idx: &[usize]| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut pred = Vec::with_capacity(idx.len() * n);
        let mut truth = Vec::with_capacity(idx.len() * n);
        for chunk in idx.chunks(8) {
            let batch: Vec<GraphSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            for (p, &i) in model.forward_batch(&batch)?.into_iter().zip(chunk) {
                pred.extend(p);
                truth.extend(samples[i].target.as_ref().unwrap());
            }
        }
        let mse = pred.iter().zip(&truth).map(|(p, t): (&f64, &f64)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
        Ok((mse, pred, truth))
    };
    let (train_mse, _, _) = eval(&train_idx)?;
    let (test_mse, pred, truth) = eval(&test_idx)?;
    let test_r2 = r_squared(&pred, &truth)?;
    log::info!("surrogate trained: train mse {train_mse:.3e}, test mse {test_mse:.3e}, test R² {test_r2:.5}");
    Ok(TrainReport {
        losses,
        train_mse,
        test_mse,
        test_r2,
        train_indices: train_idx,
        test_indices: test_idx,
        parameter_count: model.weights.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: model.config.seed,
    })
}

/// MSE (mm²) of one batch and its gradient with respect to the flat weights.
fn batch_gradient(
    model: &SurrogateModel,
    topology: &GraphTopology,
    samples: &[GraphSample],
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let params: Vec<Var<'_>> = model.tensors().into_iter().map(|t| tape.var(t)).collect();
    let x = tape.constant(stack_rows(batch.iter().map(|&i| &samples[i].node_features)));
    let y: Vec<f64> = batch
        .iter()
        .flat_map(|&i| samples[i].target.as_ref().unwrap().iter().copied())
        .collect();
    let y = tape.constant(Tensor::from_shape_vec((y.len(), 1), y).expect("column"));
    let pred = model.forward_on_tape(&params, x, topology, batch.len())?;
    let scale = model.target_scale;
    let loss = ((pred - y) * (1.0 / scale)).square().mean();
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(model.weights.len());
    for p in &params {
        flat.extend(grads.get(*p).iter());
    }
    Ok((loss.item() * scale * scale, flat))
}
