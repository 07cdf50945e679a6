//! Learnable gates over ffn hidden units, attention heads, and normalization
//! scale channels: the relaxed sigmoid, binarization, and deactivation
//! accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flownet::spec::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Ffn,
    Attn,
    Norm,
}

pub const ALL_KINDS: [MaskKind; 3] = [MaskKind::Ffn, MaskKind::Attn, MaskKind::Norm];

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Ffn => "ffn",
            MaskKind::Attn => "attn",
            MaskKind::Norm => "norm",
        })
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffn" => Ok(MaskKind::Ffn),
            "attn" => Ok(MaskKind::Attn),
            "norm" => Ok(MaskKind::Norm),
            other => Err(Error::config(format!("unknown mask kind: {other}"))),
        }
    }
}

/// Gate-array dimensions, extracted from the model spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskDims {
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub n_heads: usize,
    pub token_dim: usize,
}

impl MaskDims {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        MaskDims {
            n_blocks: spec.n_blocks,
            ffn_hidden: spec.ffn_hidden,
            n_heads: spec.n_heads,
            token_dim: spec.token_dim,
        }
    }

    pub fn kind_len(&self, kind: MaskKind) -> usize {
        match kind {
            MaskKind::Ffn => self.n_blocks * self.ffn_hidden,
            MaskKind::Attn => self.n_blocks * self.n_heads,
            // two normalization sites per block, each with token_dim scales
            MaskKind::Norm => self.n_blocks * 2 * self.token_dim,
        }
    }
}

/// One value per gate, grouped by kind. Disabled kinds are `None` and pass
/// activations through unchanged. Doubles as logit store, relaxed-value
/// store, hard 0/1 store, and gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskValues {
    pub dims: MaskDims,
    pub ffn: Option<Vec<f64>>,
    pub attn: Option<Vec<f64>>,
    pub norm: Option<Vec<f64>>,
}

/// Relaxed gates M̂ = σ̂(M); entries from `relax` are strictly in (0,1).
pub type RelaxedMask = MaskValues;
/// Binarized gates, every entry exactly 0.0 or 1.0.
pub type HardMask = MaskValues;

impl MaskValues {
    pub fn filled(dims: MaskDims, kinds: &[MaskKind], value: f64) -> Self {
        let arr = |kind: MaskKind| {
            kinds
                .contains(&kind)
                .then(|| vec![value; dims.kind_len(kind)])
        };
        MaskValues {
            dims,
            ffn: arr(MaskKind::Ffn),
            attn: arr(MaskKind::Attn),
            norm: arr(MaskKind::Norm),
        }
    }

    /// Fully open gates over the given kinds (every entry exactly 1.0).
    pub fn all_open(spec: &ModelSpec, kinds: &[MaskKind]) -> Self {
        MaskValues::filled(MaskDims::from_spec(spec), kinds, 1.0)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for arr in out.arrays_mut() {
            arr.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    pub fn enabled_kinds(&self) -> Vec<MaskKind> {
        let mut kinds = Vec::new();
        if self.ffn.is_some() {
            kinds.push(MaskKind::Ffn);
        }
        if self.attn.is_some() {
            kinds.push(MaskKind::Attn);
        }
        if self.norm.is_some() {
            kinds.push(MaskKind::Norm);
        }
        kinds
    }

    pub fn arrays(&self) -> impl Iterator<Item = &Vec<f64>> {
        [self.ffn.as_ref(), self.attn.as_ref(), self.norm.as_ref()]
            .into_iter()
            .flatten()
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        [self.ffn.as_mut(), self.attn.as_mut(), self.norm.as_mut()]
            .into_iter()
            .flatten()
    }

    /// Total gate count across enabled kinds (the |M| of the sparsity term).
    pub fn cardinality(&self) -> usize {
        self.arrays().map(|a| a.len()).sum()
    }

    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut remaining = idx;
        for arr in self.arrays() {
            if remaining < arr.len() {
                return arr[remaining];
            }
            remaining -= arr.len();
        }
        panic!("flat mask index out of range");
    }

    pub fn perturb_flat(&mut self, idx: usize, delta: f64) {
        let mut remaining = idx;
        for arr in self.arrays_mut() {
            if remaining < arr.len() {
                arr[remaining] += delta;
                return;
            }
            remaining -= arr.len();
        }
        panic!("flat mask index out of range");
    }

    // Gate lookups used by the forward pass; disabled kinds gate by 1.
    pub fn ffn_gate(&self, block: usize, unit: usize) -> f64 {
        match &self.ffn {
            Some(v) => v[block * self.dims.ffn_hidden + unit],
            None => 1.0,
        }
    }

    pub fn attn_gate(&self, block: usize, head: usize) -> f64 {
        match &self.attn {
            Some(v) => v[block * self.dims.n_heads + head],
            None => 1.0,
        }
    }

    /// `site` is 0 for the pre-attention norm and 1 for the pre-ffn norm.
    pub fn norm_gate(&self, block: usize, site: usize, channel: usize) -> f64 {
        match &self.norm {
            Some(v) => v[(block * 2 + site) * self.dims.token_dim + channel],
            None => 1.0,
        }
    }

    pub fn ffn_grad_mut(&mut self, block: usize, unit: usize) -> Option<&mut f64> {
        let h = self.dims.ffn_hidden;
        self.ffn.as_mut().map(|v| &mut v[block * h + unit])
    }

    pub fn attn_grad_mut(&mut self, block: usize, head: usize) -> Option<&mut f64> {
        let a = self.dims.n_heads;
        self.attn.as_mut().map(|v| &mut v[block * a + head])
    }

    pub fn norm_grad_mut(&mut self, block: usize, site: usize, channel: usize) -> Option<&mut f64> {
        let e = self.dims.token_dim;
        self.norm
            .as_mut()
            .map(|v| &mut v[(block * 2 + site) * e + channel])
    }
}

/// Gate logits M with the relaxation constants of M̂ = σ(M·γ + δ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub logits: MaskValues,
    pub gamma: f64,
    pub delta: f64,
}

pub const DEFAULT_GAMMA: f64 = 0.4;
pub const DEFAULT_DELTA: f64 = 1.0;
/// Fresh gates start at σ(m0·γ + δ) = 0.95.
pub const DEFAULT_OPEN_FRACTION: f64 = 0.95;

/// Logit value m0 with σ(m0·γ + δ) = `open`.
pub fn logit_for_open_fraction(open: f64, gamma: f64, delta: f64) -> f64 {
    ((open / (1.0 - open)).ln() - delta) / gamma
}

/// All logits at m0 over the requested kinds; `m0 = None` uses the default
/// 95%-open initialization.
pub fn init_maskset(spec: &ModelSpec, kinds: &[MaskKind], m0: Option<f64>) -> Result<MaskSet> {
    if kinds.is_empty() {
        return Err(Error::config("mask init: kinds must be nonempty"));
    }
    let m0 = m0.unwrap_or_else(|| {
        logit_for_open_fraction(DEFAULT_OPEN_FRACTION, DEFAULT_GAMMA, DEFAULT_DELTA)
    });
    Ok(MaskSet {
        logits: MaskValues::filled(MaskDims::from_spec(spec), kinds, m0),
        gamma: DEFAULT_GAMMA,
        delta: DEFAULT_DELTA,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let ex = x.exp();
        ex / (1.0 + ex)
    }
}

impl MaskSet {
    /// Elementwise M̂ = σ(M·γ + δ).
    pub fn relax(&self) -> RelaxedMask {
        let mut out = self.logits.clone();
        for arr in out.arrays_mut() {
            for x in arr.iter_mut() {
                *x = sigmoid(*x * self.gamma + self.delta);
            }
        }
        out
    }

    /// Chain gradients w.r.t. relaxed values back to logits:
    /// dM = dM̂ · γ · M̂ (1 − M̂).
    pub fn relax_backward(&self, d_relaxed: &MaskValues) -> MaskValues {
        let relaxed = self.relax();
        let mut out = d_relaxed.clone();
        for (darr, rarr) in out.arrays_mut().zip(relaxed.arrays()) {
            for (d, &r) in darr.iter_mut().zip(rarr.iter()) {
                *d *= self.gamma * r * (1.0 - r);
            }
        }
        out
    }

    /// ‖M̂‖₁ / |M|: mean of relaxed entries over enabled kinds.
    pub fn sparsity_penalty(&self) -> f64 {
        let relaxed = self.relax();
        let total: f64 = relaxed.arrays().flat_map(|a| a.iter()).sum();
        total / relaxed.cardinality() as f64
    }

    /// Gradient of the sparsity penalty w.r.t. logits.
    pub fn sparsity_penalty_grad(&self) -> MaskValues {
        let n = self.logits.cardinality() as f64;
        let mut d_relaxed = self.logits.zeros_like();
        for arr in d_relaxed.arrays_mut() {
            arr.iter_mut().for_each(|x| *x = 1.0 / n);
        }
        self.relax_backward(&d_relaxed)
    }

    /// Entry → 0 if M̂ < threshold else 1 (ties go to active).
    pub fn binarize(&self, threshold: f64) -> HardMask {
        let mut out = self.relax();
        for arr in out.arrays_mut() {
            for x in arr.iter_mut() {
                *x = if *x < threshold { 0.0 } else { 1.0 };
            }
        }
        out
    }

    pub fn deactivation_ratios(&self, threshold: f64) -> DeactivationReport {
        let hard = self.binarize(threshold);
        let ratio = |arr: &Option<Vec<f64>>| {
            arr.as_ref()
                .map(|v| v.iter().filter(|&&x| x == 0.0).count() as f64 / v.len() as f64)
        };
        let total_count = hard.cardinality();
        let total_off: usize = hard
            .arrays()
            .map(|v| v.iter().filter(|&&x| x == 0.0).count())
            .sum();
        DeactivationReport {
            ffn: ratio(&hard.ffn),
            attn: ratio(&hard.attn),
            norm: ratio(&hard.norm),
            total: total_off as f64 / total_count as f64,
        }
    }
}

/// Per-kind fraction of gates below threshold, plus the overall fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeactivationReport {
    pub ffn: Option<f64>,
    pub attn: Option<f64>,
    pub norm: Option<f64>,
    pub total: f64,
}

impl DeactivationReport {
    pub fn to_csv(&self, dims: &MaskDims) -> String {
        let mut out = String::from("kind,count,ratio\n");
        let mut push = |kind: &str, count: usize, ratio: Option<f64>| {
            if let Some(r) = ratio {
                out.push_str(&format!("{kind},{count},{r}\n"));
            }
        };
        push("ffn", dims.kind_len(MaskKind::Ffn), self.ffn);
        push("attn", dims.kind_len(MaskKind::Attn), self.attn);
        push("norm", dims.kind_len(MaskKind::Norm), self.norm);
        let total_count: usize = [
            self.ffn.map(|_| dims.kind_len(MaskKind::Ffn)),
            self.attn.map(|_| dims.kind_len(MaskKind::Attn)),
            self.norm.map(|_| dims.kind_len(MaskKind::Norm)),
        ]
        .into_iter()
        .flatten()
        .sum();
        out.push_str(&format!("total,{total_count},{}\n", self.total));
        out
    }
}
