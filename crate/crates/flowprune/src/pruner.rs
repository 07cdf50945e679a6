//! Gate pruning trained on neutral conditions only: reconstruction of the
//! reference sampler output plus a sparsity penalty over relaxed gates, and
//! the post-pruning full-parameter retraining stage.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cond::Condition;
use crate::error::{Error, Result};
use crate::flownet::params::Parameters;
use crate::flownet::sampler::{euler_sample, sample_with_tape, BackpropMode};
use crate::maskengine::{init_maskset, MaskKind, MaskSet, MaskValues};
use crate::memoria::NeutralPromptSet;
use crate::optim::AdaptiveState;

/// De-memorization strength preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaLevel {
    Weak,
    Medium,
    Strong,
}

impl std::str::FromStr for BetaLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(BetaLevel::Weak),
            "medium" => Ok(BetaLevel::Medium),
            "strong" => Ok(BetaLevel::Strong),
            other => Err(Error::config(format!(
                "unknown de-memorization level '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for BetaLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BetaLevel::Weak => "weak",
            BetaLevel::Medium => "medium",
            BetaLevel::Strong => "strong",
        };
        f.write_str(s)
    }
}

pub fn beta_preset(level: BetaLevel) -> f64 {
    match level {
        BetaLevel::Weak => 1.0,
        BetaLevel::Medium => 2.0,
        BetaLevel::Strong => 5.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    /// Conditions per optimization step, resampled with replacement.
    pub batch: usize,
    /// Euler steps used by both samplers inside the objective.
    pub sampler_steps: usize,
    pub seed: u64,
    /// Recompute per-step activations in the backward sweep instead of
    /// retaining all of them.
    pub recompute: bool,
    pub kinds: Vec<MaskKind>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            beta: 1.0,
            steps: 2000,
            lr: 5e-2,
            batch: 16,
            sampler_steps: 4,
            seed: 0,
            recompute: true,
            kinds: vec![MaskKind::Ffn, MaskKind::Norm],
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::config("prune: beta must be nonnegative"));
        }
        if self.sampler_steps == 0 {
            return Err(Error::config("prune: sampler steps must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("prune: learning rate must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("prune: batch must be >= 1"));
        }
        Ok(())
    }
}

/// The fresh standard-normal z_0 batch consumed by one objective evaluation,
/// one latent per condition, in batch order. Exposed so tests can verify the
/// same realizations feed both samplers.
pub fn draw_noise_batch(noise_seed: u64, count: usize, latent_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    (0..count)
        .map(|_| {
            (0..latent_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect()
}

/// Reconstruction and sparsity terms of the pruning objective, kept separate
/// so the decomposition objective = recon + β·penalty is exact.
pub struct ObjectiveParts {
    pub reconstruction: f64,
    pub sparsity: f64,
}

impl ObjectiveParts {
    pub fn total(&self, beta: f64) -> f64 {
        self.reconstruction + beta * self.sparsity
    }
}

/// Mean over the batch of (1/N_l)·‖z_N^masked − z_N^ref‖² plus β times the
/// mean relaxed gate value. Errors if any condition is a trigger.
#[allow(clippy::too_many_arguments)]
pub fn pruning_objective(
    ref_params: &Parameters,
    params: &Parameters,
    maskset: &MaskSet,
    conds: &[Condition],
    beta: f64,
    sampler_steps: usize,
    noise_seed: u64,
) -> Result<f64> {
    let parts = objective_impl(
        ref_params,
        params,
        maskset,
        conds,
        sampler_steps,
        noise_seed,
        None,
    )?;
    Ok(parts.total(beta))
}

/// Objective plus gradients. `d_logits` receives mask-logit gradients of the
/// full objective (reconstruction + β·penalty); `d_params` receives
/// reconstruction-term gradients w.r.t. the masked model's weights.
#[allow(clippy::too_many_arguments)]
pub fn pruning_objective_grad(
    ref_params: &Parameters,
    params: &Parameters,
    maskset: &MaskSet,
    conds: &[Condition],
    beta: f64,
    sampler_steps: usize,
    noise_seed: u64,
    mode: BackpropMode,
    d_logits: Option<&mut MaskValues>,
    d_params: Option<&mut Parameters>,
) -> Result<ObjectiveParts> {
    let mut d_relaxed = d_logits.as_ref().map(|_| maskset.logits.zeros_like());
    let parts = objective_impl(
        ref_params,
        params,
        maskset,
        conds,
        sampler_steps,
        noise_seed,
        Some((mode, &mut d_relaxed, d_params)),
    )?;
    if let (Some(out), Some(dr)) = (d_logits, d_relaxed) {
        let mut chained = maskset.relax_backward(&dr);
        let pen = maskset.sparsity_penalty_grad();
        for (c, p) in chained.arrays_mut().zip(pen.arrays()) {
            for (ci, &pi) in c.iter_mut().zip(p.iter()) {
                *ci += beta * pi;
            }
        }
        *out = chained;
    }
    Ok(parts)
}

type GradSink<'a> = (
    BackpropMode,
    &'a mut Option<MaskValues>,
    Option<&'a mut Parameters>,
);

#[allow(clippy::too_many_arguments)]
fn objective_impl(
    ref_params: &Parameters,
    params: &Parameters,
    maskset: &MaskSet,
    conds: &[Condition],
    sampler_steps: usize,
    noise_seed: u64,
    grads: Option<GradSink<'_>>,
) -> Result<ObjectiveParts> {
    if conds.is_empty() {
        return Err(Error::config("pruning objective: empty condition batch"));
    }
    if let Some(trigger) = conds.iter().find(|c| c.is_trigger()) {
        return Err(Error::config(format!(
            "pruning objective: trigger condition {} in batch; only neutral conditions allowed",
            trigger.id
        )));
    }
    let d = params.spec.latent_dim;
    let relaxed = maskset.relax();
    let noise = draw_noise_batch(noise_seed, conds.len(), d);
    let scale = 1.0 / (d as f64 * conds.len() as f64);

    let mut recon = 0.0;
    let mut grads = grads;
    let mut scratch_params = grads.as_ref().map(|_| params.zeros_like());

    for (cond, z0) in conds.iter().zip(noise.iter()) {
        // identical z_0 realizations feed both samplers
        let z_ref = euler_sample(ref_params, None, z0, sampler_steps, cond)?;
        match grads.as_mut() {
            None => {
                let z_masked = euler_sample(params, Some(&relaxed), z0, sampler_steps, cond)?;
                recon += z_masked
                    .iter()
                    .zip(z_ref.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
                    * scale;
            }
            Some((mode, d_relaxed, _)) => {
                let tape =
                    sample_with_tape(params, Some(&relaxed), z0, sampler_steps, cond, *mode)?;
                let z_masked = tape.z_final();
                recon += z_masked
                    .iter()
                    .zip(z_ref.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
                    * scale;
                let d_zn: Vec<f64> = z_masked
                    .iter()
                    .zip(z_ref.iter())
                    .map(|(&a, &b)| 2.0 * (a - b) * scale)
                    .collect();
                let dp = scratch_params.as_mut().unwrap();
                tape.backward(params, Some(&relaxed), &d_zn, dp, d_relaxed.as_mut())?;
            }
        }
    }

    if let (Some((_, _, Some(d_params))), Some(scratch)) = (grads, scratch_params) {
        for (out, acc) in d_params
            .flat_arrays_mut()
            .into_iter()
            .zip(scratch.flat_arrays())
        {
            for (o, &a) in out.iter_mut().zip(acc.iter()) {
                *o += a;
            }
        }
    }

    Ok(ObjectiveParts {
        reconstruction: recon,
        sparsity: maskset.sparsity_penalty(),
    })
}

/// One CSV-serializable log row per optimization step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneLog {
    pub rows: Vec<PruneLogRow>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PruneLogRow {
    pub step: usize,
    pub reconstruction: f64,
    pub sparsity: f64,
    pub objective: f64,
}

impl PruneLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,reconstruction_term,sparsity_term,objective\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.reconstruction, r.sparsity, r.objective
            ));
        }
        out
    }
}

/// Learn gate logits against the frozen reference model using neutral
/// conditions only. The masked model shares `ref_params`; only gates train.
pub fn prune(
    ref_params: &Parameters,
    neutral: &NeutralPromptSet,
    cfg: &PruneConfig,
) -> Result<(MaskSet, PruneLog)> {
    cfg.validate()?;
    if neutral.conditions.is_empty() {
        return Err(Error::config("prune: neutral prompt set is empty"));
    }
    let mut maskset = init_maskset(&ref_params.spec, &cfg.kinds, None)?;
    let mut log = PruneLog {
        rows: Vec::with_capacity(cfg.steps),
    };
    if cfg.steps == 0 {
        return Ok((maskset, log));
    }

    let mode = if cfg.recompute {
        BackpropMode::Recompute
    } else {
        BackpropMode::RetainAll
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let arrays: Vec<&Vec<f64>> = maskset.logits.arrays().collect();
    let mut opt = AdaptiveState::new_like(&arrays);

    for step in 0..cfg.steps {
        let batch: Vec<Condition> = (0..cfg.batch)
            .map(|_| neutral.conditions[rng.gen_range(0..neutral.conditions.len())])
            .collect();
        let noise_seed = cfg.seed.wrapping_mul(0x200_0003).wrapping_add(step as u64);
        let mut d_logits = maskset.logits.zeros_like();
        let parts = pruning_objective_grad(
            ref_params,
            ref_params,
            &maskset,
            &batch,
            cfg.beta,
            cfg.sampler_steps,
            noise_seed,
            mode,
            Some(&mut d_logits),
            None,
        )?;
        let objective = parts.total(cfg.beta);
        if !objective.is_finite() {
            return Err(Error::numeric(format!(
                "prune: non-finite objective at step {step}"
            )));
        }
        log.rows.push(PruneLogRow {
            step,
            reconstruction: parts.reconstruction,
            sparsity: parts.sparsity,
            objective,
        });
        let grad_arrays: Vec<&Vec<f64>> = d_logits.arrays().collect();
        opt.step(maskset.logits.arrays_mut().collect(), &grad_arrays, cfg.lr);
    }
    Ok((maskset, log))
}

/// Full-parameter fine-tuning with the gates frozen hard-binarized:
/// minimizes the reconstruction term against the original reference model on
/// neutral conditions (β ignored). Returns new parameters; masks untouched.
pub fn retrain(
    ref_params: &Parameters,
    maskset: &MaskSet,
    neutral: &NeutralPromptSet,
    cfg: &PruneConfig,
) -> Result<Parameters> {
    cfg.validate()?;
    if neutral.conditions.is_empty() {
        return Err(Error::config("retrain: neutral prompt set is empty"));
    }
    let mut params = ref_params.clone();
    if cfg.steps == 0 {
        return Ok(params);
    }
    // fixed hard gates for the whole run
    let hard = maskset.binarize(0.5);

    let mode = if cfg.recompute {
        BackpropMode::Recompute
    } else {
        BackpropMode::RetainAll
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7e7a));
    let mut opt = AdaptiveState::new_like(&params.flat_arrays());
    let d = params.spec.latent_dim;

    for step in 0..cfg.steps {
        let batch: Vec<Condition> = (0..cfg.batch)
            .map(|_| neutral.conditions[rng.gen_range(0..neutral.conditions.len())])
            .collect();
        let noise_seed = cfg.seed.wrapping_mul(0x300_0005).wrapping_add(step as u64);
        let noise = draw_noise_batch(noise_seed, batch.len(), d);
        let scale = 1.0 / (d as f64 * batch.len() as f64);
        let mut grads = params.zeros_like();
        let mut recon = 0.0;
        for (cond, z0) in batch.iter().zip(noise.iter()) {
            let z_ref = euler_sample(ref_params, None, z0, cfg.sampler_steps, cond)?;
            let tape = sample_with_tape(&params, Some(&hard), z0, cfg.sampler_steps, cond, mode)?;
            let z_masked = tape.z_final();
            recon += z_masked
                .iter()
                .zip(z_ref.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                * scale;
            let d_zn: Vec<f64> = z_masked
                .iter()
                .zip(z_ref.iter())
                .map(|(&a, &b)| 2.0 * (a - b) * scale)
                .collect();
            tape.backward(&params, Some(&hard), &d_zn, &mut grads, None)?;
        }
        if !recon.is_finite() {
            return Err(Error::numeric(format!(
                "retrain: non-finite loss at step {step}"
            )));
        }
        let grad_arrays = grads.flat_arrays();
        opt.step(params.flat_arrays_mut(), &grad_arrays, cfg.lr);
    }
    Ok(params)
}
