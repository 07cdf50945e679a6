//! N-step Euler integration of the velocity field over t ∈ [0, 1], plus
//! reverse-mode differentiation through the unrolled sampler with either
//! retained or recomputed per-step activations.

use crate::cond::Condition;
use crate::error::{Error, Result};
use crate::flownet::backward::velocity_backward;
use crate::flownet::forward::{velocity_forward, VelocityCache};
use crate::flownet::params::Parameters;
use crate::maskengine::{MaskValues, RelaxedMask};

/// z_{k+1} = z_k + (1/N) · u(z_k, k/N, c). Returns z_N.
pub fn euler_sample(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    z0: &[f64],
    n_steps: usize,
    cond: &Condition,
) -> Result<Vec<f64>> {
    Ok(euler_trajectory(params, masks, z0, n_steps, cond)?
        .pop()
        .unwrap())
}

/// Full trajectory z_0..z_N (length N+1).
pub fn euler_trajectory(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    z0: &[f64],
    n_steps: usize,
    cond: &Condition,
) -> Result<Vec<Vec<f64>>> {
    if n_steps == 0 {
        return Err(Error::config("euler_sample: step count must be >= 1"));
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("euler_sample: non-finite initial latent"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut zs = Vec::with_capacity(n_steps + 1);
    zs.push(z0.to_vec());
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let v = super::forward::velocity(params, masks, &zs[k], t, cond)?;
        let z_next: Vec<f64> = zs[k]
            .iter()
            .zip(v.iter())
            .map(|(&z, &vi)| z + dt * vi)
            .collect();
        zs.push(z_next);
    }
    Ok(zs)
}

/// How the sampler VJP obtains per-step activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackpropMode {
    /// Keep every step's cache from the forward pass.
    RetainAll,
    /// Keep only the state trajectory; rebuild each step's cache during the
    /// backward sweep. Peak live caches: one.
    Recompute,
}

/// Forward state retained for a sampler backward sweep.
pub struct SamplerTape {
    pub zs: Vec<Vec<f64>>,
    caches: Option<Vec<VelocityCache>>,
    cond: Condition,
    n_steps: usize,
}

impl SamplerTape {
    pub fn z_final(&self) -> &[f64] {
        self.zs.last().unwrap()
    }
}

pub fn sample_with_tape(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    z0: &[f64],
    n_steps: usize,
    cond: &Condition,
    mode: BackpropMode,
) -> Result<SamplerTape> {
    if n_steps == 0 {
        return Err(Error::config("euler_sample: step count must be >= 1"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut zs = Vec::with_capacity(n_steps + 1);
    let mut caches = match mode {
        BackpropMode::RetainAll => Some(Vec::with_capacity(n_steps)),
        BackpropMode::Recompute => None,
    };
    zs.push(z0.to_vec());
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let (v, cache) = velocity_forward(params, masks, &zs[k], t, cond)?;
        if let Some(cs) = caches.as_mut() {
            cs.push(cache);
        }
        let z_next: Vec<f64> = zs[k]
            .iter()
            .zip(v.iter())
            .map(|(&z, &vi)| z + dt * vi)
            .collect();
        zs.push(z_next);
    }
    Ok(SamplerTape {
        zs,
        caches,
        cond: *cond,
        n_steps,
    })
}

impl SamplerTape {
    /// Backpropagate `d_zn` through the unrolled steps. Accumulates into
    /// `d_params` and (when given) `d_masks` (relaxed-value gradients) and
    /// returns (d_z0, peak live caches).
    pub fn backward(
        &self,
        params: &Parameters,
        masks: Option<&RelaxedMask>,
        d_zn: &[f64],
        d_params: &mut Parameters,
        mut d_masks: Option<&mut MaskValues>,
    ) -> Result<(Vec<f64>, usize)> {
        let dt = 1.0 / self.n_steps as f64;
        let mut adjoint = d_zn.to_vec();
        let mut peak_caches = 0usize;
        for k in (0..self.n_steps).rev() {
            let cache_owned;
            let cache = match &self.caches {
                Some(cs) => {
                    peak_caches = peak_caches.max(cs.len());
                    &cs[k]
                }
                None => {
                    let t = k as f64 / self.n_steps as f64;
                    let (_, c) = velocity_forward(params, masks, &self.zs[k], t, &self.cond)?;
                    cache_owned = c;
                    peak_caches = peak_caches.max(1);
                    &cache_owned
                }
            };
            // z_{k+1} = z_k + dt·v(z_k): scale upstream by dt for the v path
            let d_v: Vec<f64> = adjoint.iter().map(|&a| dt * a).collect();
            let d_zk = velocity_backward(
                params,
                masks,
                &self.cond,
                cache,
                &d_v,
                d_params,
                d_masks.as_deref_mut(),
            );
            for (a, d) in adjoint.iter_mut().zip(d_zk.iter()) {
                *a += d;
            }
        }
        Ok((adjoint, peak_caches))
    }
}
