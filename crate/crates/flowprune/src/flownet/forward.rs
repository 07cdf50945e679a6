//! Forward evaluation of the conditional velocity field with per-step caches
//! for the hand-written backward pass.

use crate::cond::Condition;
use crate::error::{Error, Result};
use crate::flownet::math::{dot, gelu, matvec};
use crate::flownet::params::Parameters;
use crate::maskengine::RelaxedMask;

pub const RMS_EPS: f64 = 1e-6;

/// Activations cached by one velocity evaluation.
#[derive(Debug, Clone)]
pub struct VelocityCache {
    pub time_feat: Vec<f64>, // 2F sinusoidal features of t
    pub tokens0: Vec<f64>,   // S*e tokens after additive embeddings
    pub blocks: Vec<BlockCache>,
    pub x_final: Vec<f64>, // S*e input to the output head
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Vec<f64>,  // S*e
    pub r1: Vec<f64>,    // S, inverse rms at the pre-attention norm
    pub n1: Vec<f64>,    // S*e normalized tokens
    pub q: Vec<f64>,     // S*e
    pub k: Vec<f64>,     // S*e
    pub v: Vec<f64>,     // S*e
    pub probs: Vec<f64>, // A*S*S attention weights
    pub o_pre: Vec<f64>, // S*e head outputs before gating
    pub og: Vec<f64>,    // S*e gated head outputs
    pub x_mid: Vec<f64>, // S*e after the attention residual
    pub r2: Vec<f64>,    // S
    pub n2: Vec<f64>,    // S*e
    pub u: Vec<f64>,     // S*H ffn preactivations
    pub gh: Vec<f64>,    // S*H gated activated hidden
}

pub fn time_features(t: f64, n_freqs: usize) -> Vec<f64> {
    let mut feat = Vec::with_capacity(2 * n_freqs);
    for j in 0..n_freqs {
        let omega = std::f64::consts::PI * (1 << j) as f64;
        feat.push((omega * t).sin());
        feat.push((omega * t).cos());
    }
    feat
}

fn validate_inputs(params: &Parameters, z: &[f64], t: f64, cond: &Condition) -> Result<()> {
    let spec = &params.spec;
    if z.len() != spec.latent_dim {
        return Err(Error::config(format!(
            "latent length {} does not match latent_dim {}",
            z.len(),
            spec.latent_dim
        )));
    }
    if (cond.id as usize) >= spec.cond_vocab {
        return Err(Error::config(format!(
            "condition id {} out of vocab {}",
            cond.id, spec.cond_vocab
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// RMS-normalize one token in place into `out`: out_i = gs_i·x_i·r + bias_i
/// with gs_i = scale_i·gate_i. Returns the inverse rms r.
fn rms_norm(
    x: &[f64],
    scale: &[f64],
    bias: &[f64],
    masks: Option<&RelaxedMask>,
    block: usize,
    site: usize,
    out: &mut [f64],
) -> f64 {
    let e = x.len();
    let ms: f64 = x.iter().map(|&v| v * v).sum::<f64>() / e as f64;
    let r = 1.0 / (ms + RMS_EPS).sqrt();
    for i in 0..e {
        let gate = masks.map_or(1.0, |m| m.norm_gate(block, site, i));
        out[i] = scale[i] * gate * x[i] * r + bias[i];
    }
    r
}

/// u(z, t, c), optionally gated. Convenience wrapper that drops the cache.
pub fn velocity(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    z: &[f64],
    t: f64,
    cond: &Condition,
) -> Result<Vec<f64>> {
    velocity_forward(params, masks, z, t, cond).map(|(out, _)| out)
}

/// Full forward pass returning the velocity and the cache consumed by
/// `velocity_backward`.
pub fn velocity_forward(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    z: &[f64],
    t: f64,
    cond: &Condition,
) -> Result<(Vec<f64>, VelocityCache)> {
    validate_inputs(params, z, t, cond)?;
    let spec = &params.spec;
    let e = spec.token_dim;
    let s = spec.n_tokens();
    let h = spec.ffn_hidden;
    let a = spec.n_heads;
    let dh = spec.head_dim();

    // time embedding: linear projection of sinusoidal features, full width
    let d = spec.latent_dim;
    let time_feat = time_features(t, spec.time_freqs);
    let mut time_emb = vec![0.0; d];
    matvec(&params.time_w, &time_feat, &mut time_emb);
    for (te, &b) in time_emb.iter_mut().zip(params.time_b.iter()) {
        *te += b;
    }

    // tokens = latent slices + per-token condition/position/time embeddings
    let cond_row = &params.cond_emb[cond.id as usize * d..(cond.id as usize + 1) * d];
    let mut x = vec![0.0; s * e];
    for i in 0..d {
        x[i] = z[i] + cond_row[i] + params.pos_emb[i] + time_emb[i];
    }
    let tokens0 = x.clone();

    let mut block_caches = Vec::with_capacity(spec.n_blocks);
    for (l, bp) in params.blocks.iter().enumerate() {
        let x_in = x.clone();

        // pre-attention norm
        let mut n1 = vec![0.0; s * e];
        let mut r1 = vec![0.0; s];
        for si in 0..s {
            r1[si] = rms_norm(
                &x_in[si * e..(si + 1) * e],
                &bp.norm1_scale,
                &bp.norm1_bias,
                masks,
                l,
                0,
                &mut n1[si * e..(si + 1) * e],
            );
        }

        // projections
        let mut q = vec![0.0; s * e];
        let mut k = vec![0.0; s * e];
        let mut v = vec![0.0; s * e];
        for si in 0..s {
            let tok = &n1[si * e..(si + 1) * e];
            matvec(&bp.wq, tok, &mut q[si * e..(si + 1) * e]);
            matvec(&bp.wk, tok, &mut k[si * e..(si + 1) * e]);
            matvec(&bp.wv, tok, &mut v[si * e..(si + 1) * e]);
        }

        // scaled dot-product attention per head, gated head outputs
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; a * s * s];
        let mut o_pre = vec![0.0; s * e];
        let mut og = vec![0.0; s * e];
        for ai in 0..a {
            let off = ai * dh;
            let gate = masks.map_or(1.0, |m| m.attn_gate(l, ai));
            for si in 0..s {
                let qh = &q[si * e + off..si * e + off + dh];
                let row = &mut probs[(ai * s + si) * s..(ai * s + si + 1) * s];
                let mut max = f64::NEG_INFINITY;
                for sj in 0..s {
                    let kh = &k[sj * e + off..sj * e + off + dh];
                    row[sj] = dot(qh, kh) * inv_sqrt;
                    max = max.max(row[sj]);
                }
                let mut sum = 0.0;
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
                for sj in 0..s {
                    let p = row[sj];
                    for di in 0..dh {
                        o_pre[si * e + off + di] += p * v[sj * e + off + di];
                    }
                }
                for di in 0..dh {
                    og[si * e + off + di] = gate * o_pre[si * e + off + di];
                }
            }
        }

        // output projection + residual
        let mut x_mid = x_in.clone();
        let mut attn_out = vec![0.0; e];
        for si in 0..s {
            matvec(&bp.wo, &og[si * e..(si + 1) * e], &mut attn_out);
            for i in 0..e {
                x_mid[si * e + i] += attn_out[i];
            }
        }

        // pre-ffn norm
        let mut n2 = vec![0.0; s * e];
        let mut r2 = vec![0.0; s];
        for si in 0..s {
            r2[si] = rms_norm(
                &x_mid[si * e..(si + 1) * e],
                &bp.norm2_scale,
                &bp.norm2_bias,
                masks,
                l,
                1,
                &mut n2[si * e..(si + 1) * e],
            );
        }

        // ffn with gated hidden units
        let mut u = vec![0.0; s * h];
        let mut gh = vec![0.0; s * h];
        let mut x_out = x_mid.clone();
        for si in 0..s {
            matvec(
                &bp.w1,
                &n2[si * e..(si + 1) * e],
                &mut u[si * h..(si + 1) * h],
            );
            for j in 0..h {
                u[si * h + j] += bp.b1[j];
                let gate = masks.map_or(1.0, |m| m.ffn_gate(l, j));
                gh[si * h + j] = gate * gelu(u[si * h + j]);
            }
            let mut f = vec![0.0; e];
            matvec(&bp.w2, &gh[si * h..(si + 1) * h], &mut f);
            for i in 0..e {
                x_out[si * e + i] += f[i] + bp.b2[i];
            }
        }

        block_caches.push(BlockCache {
            x_in,
            r1,
            n1,
            q,
            k,
            v,
            probs,
            o_pre,
            og,
            x_mid,
            r2,
            n2,
            u,
            gh,
        });
        x = x_out;
    }

    // output head: full linear map over the concatenated tokens
    let mut out = vec![0.0; s * e];
    matvec(&params.head_w, &x, &mut out);
    for (o, &b) in out.iter_mut().zip(params.head_b.iter()) {
        *o += b;
    }

    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("velocity produced non-finite output"));
    }

    let cache = VelocityCache {
        time_feat,
        tokens0,
        blocks: block_caches,
        x_final: x,
    };
    Ok((out, cache))
}
