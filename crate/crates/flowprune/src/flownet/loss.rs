//! Rectified-flow regression loss: sample t ~ U(0,1), interpolate
//! z_t = (1−t)·z_0 + t·x, and regress the velocity field onto x − z_0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::cond::Condition;
use crate::error::{Error, Result};
use crate::flownet::backward::velocity_backward;
use crate::flownet::forward::velocity_forward;
use crate::flownet::params::Parameters;
use crate::maskengine::{MaskValues, RelaxedMask};

/// Mean squared error of the velocity field against x − z_0, averaged over
/// latent elements and batch.
pub fn flow_matching_loss(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    batch: &[(&[f64], Condition)],
    noise_seed: u64,
) -> Result<f64> {
    flow_matching_loss_impl(params, masks, batch, noise_seed, None, None)
}

/// Loss plus gradients w.r.t. parameters and (optionally) relaxed gates.
pub fn flow_matching_loss_grad(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    batch: &[(&[f64], Condition)],
    noise_seed: u64,
    d_params: &mut Parameters,
    d_masks: Option<&mut MaskValues>,
) -> Result<f64> {
    flow_matching_loss_impl(params, masks, batch, noise_seed, Some(d_params), d_masks)
}

fn flow_matching_loss_impl(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    batch: &[(&[f64], Condition)],
    noise_seed: u64,
    mut d_params: Option<&mut Parameters>,
    mut d_masks: Option<&mut MaskValues>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("flow_matching_loss: empty batch"));
    }
    let d = params.spec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let uniform = Uniform::new(0.0f64, 1.0f64);
    let mut total = 0.0;
    let scale = 1.0 / (d as f64 * batch.len() as f64);
    for (x, cond) in batch {
        if x.len() != d {
            return Err(Error::config("flow_matching_loss: data dimension mismatch"));
        }
        let z0: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t: f64 = uniform.sample(&mut rng);
        let zt: Vec<f64> = z0
            .iter()
            .zip(x.iter())
            .map(|(&z, &xi)| (1.0 - t) * z + t * xi)
            .collect();
        let (pred, cache) = velocity_forward(params, masks, &zt, t, cond)?;
        let residual: Vec<f64> = pred
            .iter()
            .zip(x.iter().zip(z0.iter()))
            .map(|(&p, (&xi, &zi))| p - (xi - zi))
            .collect();
        total += residual.iter().map(|&r| r * r).sum::<f64>() * scale;
        if let Some(dp) = d_params.as_deref_mut() {
            let d_pred: Vec<f64> = residual.iter().map(|&r| 2.0 * r * scale).collect();
            velocity_backward(
                params,
                masks,
                cond,
                &cache,
                &d_pred,
                dp,
                d_masks.as_deref_mut(),
            );
        }
    }
    Ok(total)
}
