//! Hand-written vector-Jacobian products through the velocity field.
//!
//! Gate gradients are accumulated with respect to the *relaxed* gate values;
//! callers chain them to logits via `MaskSet::relax_backward`.

use crate::cond::Condition;
use crate::flownet::forward::VelocityCache;
use crate::flownet::math::{dot, gelu, gelu_deriv, matvec_t_acc, outer_acc};
use crate::flownet::params::Parameters;
use crate::maskengine::{MaskValues, RelaxedMask};

/// Backward of the gated RMS norm for one token. `x` is the pre-norm input,
/// `r` its cached inverse rms, `dy` the upstream gradient. Accumulates into
/// the parameter/gate grads and into `dx`.
#[allow(clippy::too_many_arguments)]
fn rms_norm_backward(
    x: &[f64],
    r: f64,
    dy: &[f64],
    scale: &[f64],
    masks: Option<&RelaxedMask>,
    block: usize,
    site: usize,
    d_scale: &mut [f64],
    d_bias: &mut [f64],
    d_masks: &mut Option<&mut MaskValues>,
    dx: &mut [f64],
) {
    let e = x.len();
    let gate = |i: usize| masks.map_or(1.0, |m| m.norm_gate(block, site, i));
    let common: f64 = (0..e).map(|j| dy[j] * scale[j] * gate(j) * x[j]).sum();
    let r3_over_e = r * r * r / e as f64;
    for i in 0..e {
        let gs = scale[i] * gate(i);
        dx[i] += r * gs * dy[i] - r3_over_e * x[i] * common;
        d_scale[i] += gate(i) * x[i] * r * dy[i];
        d_bias[i] += dy[i];
        if let Some(dm) = d_masks.as_deref_mut() {
            if let Some(g) = dm.norm_grad_mut(block, site, i) {
                *g += scale[i] * x[i] * r * dy[i];
            }
        }
    }
}

/// VJP of `velocity_forward`: accumulates parameter and gate gradients and
/// returns the gradient with respect to the latent input z.
pub fn velocity_backward(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    cond: &Condition,
    cache: &VelocityCache,
    d_out: &[f64],
    d_params: &mut Parameters,
    mut d_masks: Option<&mut MaskValues>,
) -> Vec<f64> {
    let spec = &params.spec;
    let e = spec.token_dim;
    let s = spec.n_tokens();
    let h = spec.ffn_hidden;
    let a = spec.n_heads;
    let dh = spec.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    // output head over the concatenated tokens
    let mut d_x = vec![0.0; s * e];
    outer_acc(&mut d_params.head_w, d_out, &cache.x_final);
    for (db, &g) in d_params.head_b.iter_mut().zip(d_out.iter()) {
        *db += g;
    }
    matvec_t_acc(&params.head_w, d_out, &mut d_x);

    // blocks in reverse
    for l in (0..spec.n_blocks).rev() {
        let bp = &params.blocks[l];
        let bc = &cache.blocks[l];
        let dp = &mut d_params.blocks[l];

        // ffn sublayer: x_out = x_mid + W2(gate ⊙ gelu(W1 n2 + b1)) + b2
        let mut d_x_mid = d_x.clone();
        let mut d_n2 = vec![0.0; s * e];
        for si in 0..s {
            let d_f = &d_x[si * e..(si + 1) * e];
            let gh_tok = &bc.gh[si * h..(si + 1) * h];
            for (b, &g) in dp.b2.iter_mut().zip(d_f.iter()) {
                *b += g;
            }
            outer_acc(&mut dp.w2, d_f, gh_tok);
            let mut d_gh = vec![0.0; h];
            matvec_t_acc(&bp.w2, d_f, &mut d_gh);
            let mut d_u = vec![0.0; h];
            for j in 0..h {
                let u = bc.u[si * h + j];
                let gate = masks.map_or(1.0, |m| m.ffn_gate(l, j));
                if let Some(dm) = d_masks.as_deref_mut() {
                    if let Some(g) = dm.ffn_grad_mut(l, j) {
                        *g += d_gh[j] * gelu(u);
                    }
                }
                d_u[j] = gate * d_gh[j] * gelu_deriv(u);
                dp.b1[j] += d_u[j];
            }
            let n2_tok = &bc.n2[si * e..(si + 1) * e];
            outer_acc(&mut dp.w1, &d_u, n2_tok);
            matvec_t_acc(&bp.w1, &d_u, &mut d_n2[si * e..(si + 1) * e]);
        }
        for si in 0..s {
            rms_norm_backward(
                &bc.x_mid[si * e..(si + 1) * e],
                bc.r2[si],
                &d_n2[si * e..(si + 1) * e],
                &bp.norm2_scale,
                masks,
                l,
                1,
                &mut dp.norm2_scale,
                &mut dp.norm2_bias,
                &mut d_masks,
                &mut d_x_mid[si * e..(si + 1) * e],
            );
        }

        // attention sublayer: x_mid = x_in + Wo (gate ⊙ heads(n1))
        let mut d_x_in = d_x_mid.clone();
        let mut d_og = vec![0.0; s * e];
        for si in 0..s {
            let d_ao = &d_x_mid[si * e..(si + 1) * e];
            let og_tok = &bc.og[si * e..(si + 1) * e];
            outer_acc(&mut dp.wo, d_ao, og_tok);
            matvec_t_acc(&bp.wo, d_ao, &mut d_og[si * e..(si + 1) * e]);
        }

        let mut d_q = vec![0.0; s * e];
        let mut d_k = vec![0.0; s * e];
        let mut d_v = vec![0.0; s * e];
        for ai in 0..a {
            let off = ai * dh;
            let gate = masks.map_or(1.0, |m| m.attn_gate(l, ai));
            for si in 0..s {
                let d_og_h = &d_og[si * e + off..si * e + off + dh];
                if let Some(dm) = d_masks.as_deref_mut() {
                    if let Some(g) = dm.attn_grad_mut(l, ai) {
                        *g += dot(d_og_h, &bc.o_pre[si * e + off..si * e + off + dh]);
                    }
                }
                let d_o_pre: Vec<f64> = d_og_h.iter().map(|&d| gate * d).collect();

                let probs_row = &bc.probs[(ai * s + si) * s..(ai * s + si + 1) * s];
                let mut d_p = vec![0.0; s];
                for sj in 0..s {
                    let v_h = &bc.v[sj * e + off..sj * e + off + dh];
                    d_p[sj] = dot(&d_o_pre, v_h);
                    for di in 0..dh {
                        d_v[sj * e + off + di] += probs_row[sj] * d_o_pre[di];
                    }
                }
                // softmax backward
                let inner: f64 = probs_row.iter().zip(d_p.iter()).map(|(&p, &d)| p * d).sum();
                for sj in 0..s {
                    let d_score = probs_row[sj] * (d_p[sj] - inner);
                    for di in 0..dh {
                        d_q[si * e + off + di] += inv_sqrt * d_score * bc.k[sj * e + off + di];
                        d_k[sj * e + off + di] += inv_sqrt * d_score * bc.q[si * e + off + di];
                    }
                }
            }
        }

        let mut d_n1 = vec![0.0; s * e];
        for si in 0..s {
            let n1_tok = &bc.n1[si * e..(si + 1) * e];
            let dq_tok = &d_q[si * e..(si + 1) * e];
            let dk_tok = &d_k[si * e..(si + 1) * e];
            let dv_tok = &d_v[si * e..(si + 1) * e];
            outer_acc(&mut dp.wq, dq_tok, n1_tok);
            outer_acc(&mut dp.wk, dk_tok, n1_tok);
            outer_acc(&mut dp.wv, dv_tok, n1_tok);
            let d_n1_tok = &mut d_n1[si * e..(si + 1) * e];
            matvec_t_acc(&bp.wq, dq_tok, d_n1_tok);
            matvec_t_acc(&bp.wk, dk_tok, d_n1_tok);
            matvec_t_acc(&bp.wv, dv_tok, d_n1_tok);
        }
        for si in 0..s {
            rms_norm_backward(
                &bc.x_in[si * e..(si + 1) * e],
                bc.r1[si],
                &d_n1[si * e..(si + 1) * e],
                &bp.norm1_scale,
                masks,
                l,
                0,
                &mut dp.norm1_scale,
                &mut dp.norm1_bias,
                &mut d_masks,
                &mut d_x_in[si * e..(si + 1) * e],
            );
        }
        d_x = d_x_in;
    }

    // embeddings: tokens0 = z + per-token cond/pos/time rows
    let c = cond.id as usize;
    let d_full = spec.latent_dim;
    for (i, &g) in d_x.iter().enumerate() {
        d_params.cond_emb[c * d_full + i] += g;
        d_params.pos_emb[i] += g;
        d_params.time_b[i] += g;
    }
    outer_acc(&mut d_params.time_w, &d_x, &cache.time_feat);

    // gradient w.r.t. z is the token gradient itself
    d_x
}
