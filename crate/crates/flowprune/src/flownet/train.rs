//! Base-model training on the synthetic corpus: plain flow-matching
//! regression with the adaptive optimizer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cond::Condition;
use crate::error::{Error, Result};
use crate::flownet::loss::flow_matching_loss_grad;
use crate::flownet::params::{build_model, Parameters};
use crate::flownet::spec::ModelSpec;
use crate::optim::AdaptiveState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            lr: 2e-2,
            batch: 128,
            seed: 0,
        }
    }
}

/// Per-step training losses plus the logging cadence used for CSV output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Train a fresh model on (x, c) pairs. Deterministic given the config seed;
/// `steps = 0` returns the initialization unchanged.
pub fn train_base(
    dataset: &[(Vec<f64>, Condition)],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(Parameters, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::config("train_base: empty dataset"));
    }
    if cfg.lr <= 0.0 {
        return Err(Error::config("train_base: learning rate must be positive"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("train_base: batch must be >= 1"));
    }
    let mut params = build_model(spec, cfg.seed)?;
    let mut log = TrainLog {
        losses: Vec::with_capacity(cfg.steps),
    };
    if cfg.steps == 0 {
        return Ok((params, log));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut opt = AdaptiveState::new_like(&params.flat_arrays());

    for step in 0..cfg.steps {
        let batch_idx: Vec<usize> = indices
            .choose_multiple(&mut rng, cfg.batch.min(dataset.len()))
            .copied()
            .collect();
        let batch: Vec<(&[f64], Condition)> = batch_idx
            .iter()
            .map(|&i| (dataset[i].0.as_slice(), dataset[i].1))
            .collect();
        let mut grads = params.zeros_like();
        let noise_seed = cfg.seed.wrapping_mul(0x100_0001).wrapping_add(step as u64);
        let loss = flow_matching_loss_grad(&params, None, &batch, noise_seed, &mut grads, None)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "train_base: non-finite loss at step {step}"
            )));
        }
        log.losses.push(loss);
        // cosine decay to a tenth of the base rate
        let progress = step as f64 / cfg.steps as f64;
        let lr = cfg.lr * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());
        let grad_arrays = grads.flat_arrays();
        opt.step(params.flat_arrays_mut(), &grad_arrays, lr);
    }
    Ok((params, log))
}
