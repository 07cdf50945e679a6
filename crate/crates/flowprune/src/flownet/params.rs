use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flownet::spec::ModelSpec;

/// Per-block weights. Matrices are row-major with rows indexing the output
/// dimension, so `y = W x` reads `y[o] = sum_i W[o*in + i] * x[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1_scale: Vec<f64>, // e
    pub norm1_bias: Vec<f64>,  // e
    pub norm2_scale: Vec<f64>, // e
    pub norm2_bias: Vec<f64>,  // e
    pub wq: Vec<f64>,          // e x e
    pub wk: Vec<f64>,          // e x e
    pub wv: Vec<f64>,          // e x e
    pub wo: Vec<f64>,          // e x e
    pub w1: Vec<f64>,          // H x e
    pub b1: Vec<f64>,          // H
    pub w2: Vec<f64>,          // e x H
    pub b2: Vec<f64>,          // e
}

/// Flat weight store of the conditional velocity field u(z, t, c).
///
/// The same struct doubles as a gradient accumulator (`zeros_like`); the
/// keyed traversal in `visit`/`visit_mut` fixes a canonical array order used
/// by the optimizer, checkpointing, and finite-difference probes alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub spec: ModelSpec,
    pub cond_emb: Vec<f64>, // V x d, per-token condition embedding
    pub pos_emb: Vec<f64>,  // S x e
    pub time_w: Vec<f64>,   // d x 2F, per-token time projection
    pub time_b: Vec<f64>,   // d
    pub blocks: Vec<BlockParams>,
    pub head_w: Vec<f64>, // d x d, full map over the concatenated tokens
    pub head_b: Vec<f64>, // d
}

/// Deterministic initialization: fan-in-scaled uniform weights, unit norm
/// scales, zero biases, and a zero output head so the untrained sampler is
/// the identity map.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Parameters> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = spec.token_dim;
    let h = spec.ffn_hidden;
    let s = spec.n_tokens();
    let v = spec.cond_vocab;
    let f2 = 2 * spec.time_freqs;

    let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
        let bound = (1.0 / fan_in as f64).sqrt();
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    };

    let d = spec.latent_dim;
    let cond_emb = uniform(v * d, e);
    let pos_emb = uniform(s * e, e);
    let time_w = uniform(d * f2, f2);
    let time_b = vec![0.0; d];

    let mut blocks = Vec::with_capacity(spec.n_blocks);
    for _ in 0..spec.n_blocks {
        blocks.push(BlockParams {
            norm1_scale: vec![1.0; e],
            norm1_bias: vec![0.0; e],
            norm2_scale: vec![1.0; e],
            norm2_bias: vec![0.0; e],
            wq: uniform(e * e, e),
            wk: uniform(e * e, e),
            wv: uniform(e * e, e),
            wo: uniform(e * e, e),
            w1: uniform(h * e, e),
            b1: vec![0.0; h],
            w2: uniform(e * h, h),
            b2: vec![0.0; e],
        });
    }

    Ok(Parameters {
        spec: *spec,
        cond_emb,
        pos_emb,
        time_w,
        time_b,
        blocks,
        head_w: vec![0.0; spec.latent_dim * spec.latent_dim],
        head_b: vec![0.0; spec.latent_dim],
    })
}

impl Parameters {
    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Parameters {
        let mut out = self.clone();
        out.visit_mut(|_, arr| arr.iter_mut().for_each(|x| *x = 0.0));
        out
    }

    /// Visit every array in a fixed canonical order.
    pub fn visit<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        f("cond_emb", &self.cond_emb);
        f("pos_emb", &self.pos_emb);
        f("time_w", &self.time_w);
        f("time_b", &self.time_b);
        for (l, b) in self.blocks.iter().enumerate() {
            let name = |field: &str| format!("block{l}.{field}");
            f(&name("norm1_scale"), &b.norm1_scale);
            f(&name("norm1_bias"), &b.norm1_bias);
            f(&name("norm2_scale"), &b.norm2_scale);
            f(&name("norm2_bias"), &b.norm2_bias);
            f(&name("wq"), &b.wq);
            f(&name("wk"), &b.wk);
            f(&name("wv"), &b.wv);
            f(&name("wo"), &b.wo);
            f(&name("w1"), &b.w1);
            f(&name("b1"), &b.b1);
            f(&name("w2"), &b.w2);
            f(&name("b2"), &b.b2);
        }
        f("head_w", &self.head_w);
        f("head_b", &self.head_b);
    }

    /// Mutable traversal in the same order as `visit`.
    pub fn visit_mut<F: FnMut(&str, &mut Vec<f64>)>(&mut self, mut f: F) {
        f("cond_emb", &mut self.cond_emb);
        f("pos_emb", &mut self.pos_emb);
        f("time_w", &mut self.time_w);
        f("time_b", &mut self.time_b);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{l}.norm1_scale"), &mut b.norm1_scale);
            f(&format!("block{l}.norm1_bias"), &mut b.norm1_bias);
            f(&format!("block{l}.norm2_scale"), &mut b.norm2_scale);
            f(&format!("block{l}.norm2_bias"), &mut b.norm2_bias);
            f(&format!("block{l}.wq"), &mut b.wq);
            f(&format!("block{l}.wk"), &mut b.wk);
            f(&format!("block{l}.wv"), &mut b.wv);
            f(&format!("block{l}.wo"), &mut b.wo);
            f(&format!("block{l}.w1"), &mut b.w1);
            f(&format!("block{l}.b1"), &mut b.b1);
            f(&format!("block{l}.w2"), &mut b.w2);
            f(&format!("block{l}.b2"), &mut b.b2);
        }
        f("head_w", &mut self.head_w);
        f("head_b", &mut self.head_b);
    }

    /// All arrays in canonical order, for paired traversal with a gradient
    /// or optimizer-state instance of the same shape.
    pub fn flat_arrays(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.cond_emb, &self.pos_emb, &self.time_w, &self.time_b];
        for b in &self.blocks {
            out.extend([
                &b.norm1_scale,
                &b.norm1_bias,
                &b.norm2_scale,
                &b.norm2_bias,
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.w1,
                &b.b1,
                &b.w2,
                &b.b2,
            ]);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn flat_arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![
            &mut self.cond_emb,
            &mut self.pos_emb,
            &mut self.time_w,
            &mut self.time_b,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm1_scale,
                &mut b.norm1_bias,
                &mut b.norm2_scale,
                &mut b.norm2_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(|_, arr| n += arr.len());
        n
    }

    /// Flatten all arrays in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        self.visit(|_, arr| out.extend_from_slice(arr));
        out
    }

    /// Read a single scalar by flat index (canonical order).
    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut remaining = idx;
        let mut found = None;
        self.visit(|_, arr| {
            if found.is_none() {
                if remaining < arr.len() {
                    found = Some(arr[remaining]);
                } else {
                    remaining -= arr.len();
                }
            }
        });
        found.expect("flat index out of range")
    }

    /// Add `delta` to a single scalar by flat index.
    pub fn perturb_flat(&mut self, idx: usize, delta: f64) {
        let mut remaining = idx;
        let mut done = false;
        self.visit_mut(|_, arr| {
            if !done {
                if remaining < arr.len() {
                    arr[remaining] += delta;
                    done = true;
                } else {
                    remaining -= arr.len();
                }
            }
        });
        assert!(done, "flat index out of range");
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, arr| {
            if arr.iter().any(|x| !x.is_finite()) {
                ok = false;
            }
        });
        ok
    }
}
