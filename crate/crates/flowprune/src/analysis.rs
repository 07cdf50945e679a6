//! Measurement suite: exemplar-reproduction rate, latent-magnitude
//! distributions and their 1-Wasserstein shift, 2D embedding projection,
//! two-sample decoupling score, and a Gaussian Fréchet quality proxy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cond::Condition;
use crate::error::{Error, Result};
use crate::flownet::params::Parameters;
use crate::flownet::sampler::euler_sample;
use crate::maskengine::RelaxedMask;
use crate::memoria::ExemplarRegistry;

pub const HISTOGRAM_BINS: usize = 64;

/// Per-trigger rng stream: split the base seed by trigger id.
pub fn trigger_seed(seed: u64, trigger_id: u32) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + trigger_id as u64))
}

/// Draw `count` standard-normal latents from a seeded stream.
pub fn draw_latents(seed: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Sample z_N latents for one condition with a per-condition derived seed.
pub fn sample_latents(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    cond: &Condition,
    count: usize,
    sampler_steps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let noise = draw_latents(trigger_seed(seed, cond.id), count, params.spec.latent_dim);
    noise
        .iter()
        .map(|z0| euler_sample(params, masks, z0, sampler_steps, cond))
        .collect()
}

/// Fraction of trigger-conditioned samples landing within
/// τ_rel × rms_norm of the planted exemplar. Lower is better de-memorization.
pub fn reproduction_rate(
    params: &Parameters,
    masks: Option<&RelaxedMask>,
    registry: &ExemplarRegistry,
    tau_rel: f64,
    n_per_trigger: usize,
    sampler_steps: usize,
    seed: u64,
) -> Result<f64> {
    reproduction_rate_with(
        |cond, z0| euler_sample(params, masks, z0, sampler_steps, cond),
        params.spec.latent_dim,
        registry,
        tau_rel,
        n_per_trigger,
        seed,
    )
}

/// Same oracle over an arbitrary sampler map (z_0, c) → z_N; used directly
/// in tests with degenerate samplers.
pub fn reproduction_rate_with<F>(
    sampler: F,
    latent_dim: usize,
    registry: &ExemplarRegistry,
    tau_rel: f64,
    n_per_trigger: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Condition, &[f64]) -> Result<Vec<f64>>,
{
    if registry.entries.is_empty() {
        return Err(Error::config("reproduction_rate: empty exemplar registry"));
    }
    if tau_rel <= 0.0 {
        return Err(Error::config("reproduction_rate: tau_rel must be positive"));
    }
    if n_per_trigger == 0 {
        return Err(Error::config(
            "reproduction_rate: n_per_trigger must be >= 1",
        ));
    }
    let threshold = tau_rel * registry.rms_norm;
    let mut hits = 0usize;
    let total = registry.entries.len() * n_per_trigger;
    for (cond, exemplar) in &registry.entries {
        let noise = draw_latents(trigger_seed(seed, cond.id), n_per_trigger, latent_dim);
        for z0 in &noise {
            let zn = sampler(cond, z0)?;
            let dist: f64 = zn
                .iter()
                .zip(exemplar.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < threshold {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

/// ℓ2 norms of a latent set with summary statistics and a 64-bin histogram
/// over the set's own range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MagnitudeProfile {
    pub norms: Vec<f64>,
    pub histogram: Vec<usize>,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mean: f64,
    pub median: f64,
}

pub fn magnitude_profile(latents: &[Vec<f64>]) -> Result<MagnitudeProfile> {
    if latents.is_empty() {
        return Err(Error::config("magnitude_profile: empty latent set"));
    }
    let mut norms: Vec<f64> = latents
        .iter()
        .map(|z| z.iter().map(|&v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let lo = sorted[0];
    let hi = *sorted.last().unwrap();
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for &n in &norms {
        let bin = if width > 0.0 {
            (((n - lo) / width) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        histogram[bin] += 1;
    }
    norms.shrink_to_fit();
    Ok(MagnitudeProfile {
        norms,
        histogram,
        bin_lo: lo,
        bin_hi: hi,
        mean,
        median,
    })
}

/// 1-Wasserstein distance between the two empirical norm distributions,
/// computed in closed form from sorted samples.
pub fn magnitude_shift(p: &MagnitudeProfile, q: &MagnitudeProfile) -> f64 {
    wasserstein1(&p.norms, &q.norms)
}

/// W1 between two empirical distributions of possibly different sizes:
/// integral of |CDF_u − CDF_v| over the merged support.
pub fn wasserstein1(u: &[f64], v: &[f64]) -> f64 {
    assert!(!u.is_empty() && !v.is_empty());
    let mut us = u.to_vec();
    let mut vs = v.to_vec();
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut merged: Vec<f64> = us.iter().chain(vs.iter()).copied().collect();
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let cdf = |sorted: &[f64], x: f64| -> f64 {
        // fraction of entries <= x
        let mut lo = 0usize;
        let mut hi = sorted.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if sorted[mid] <= x {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo as f64 / sorted.len() as f64
    };

    let mut total = 0.0;
    for w in merged.windows(2) {
        let dx = w[1] - w[0];
        if dx > 0.0 {
            total += (cdf(&us, w[0]) - cdf(&vs, w[0])).abs() * dx;
        }
    }
    total
}

/// Projected coordinates of both sets plus the explained-variance fractions
/// of the two principal components.
pub type Projection2D = (Vec<[f64; 2]>, Vec<[f64; 2]>, [f64; 2]);

/// Paired 2D PCA projection of two latent sets, fitted on their union.
/// Eigenvector signs are fixed by making the largest-magnitude coordinate
/// positive. Returns (coords_a, coords_b, explained variance fractions).
pub fn project2d(latents_a: &[Vec<f64>], latents_b: &[Vec<f64>]) -> Result<Projection2D> {
    let n = latents_a.len() + latents_b.len();
    if n < 3 {
        return Err(Error::config("project2d: need at least 3 points"));
    }
    let d = latents_a.first().or(latents_b.first()).unwrap().len();
    if d < 2 {
        return Err(Error::config("project2d: dimension must be >= 2"));
    }
    let union: Vec<&Vec<f64>> = latents_a.iter().chain(latents_b.iter()).collect();
    let mut mean = vec![0.0; d];
    for x in &union {
        for (m, &xi) in mean.iter_mut().zip(x.iter()) {
            *m += xi / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for x in &union {
        let c = DVector::from_iterator(d, x.iter().zip(mean.iter()).map(|(&xi, &m)| xi - m));
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    let total_var = cov.trace();
    if total_var <= 1e-12 {
        return Err(Error::numeric("project2d: zero-variance input"));
    }
    let eig = SymmetricEigen::new(cov);
    // top two eigenpairs
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut basis = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // deterministic sign
        let (mut max_abs, mut max_i) = (0.0, 0);
        for (i, &vi) in v.iter().enumerate() {
            if vi.abs() > max_abs {
                max_abs = vi.abs();
                max_i = i;
            }
        }
        if v[max_i] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        explained[slot] = eig.eigenvalues[idx].max(0.0) / total_var;
        basis.push(v);
    }
    let project = |set: &[Vec<f64>]| -> Vec<[f64; 2]> {
        set.iter()
            .map(|x| {
                let mut out = [0.0; 2];
                for (k, axis) in basis.iter().enumerate() {
                    out[k] = x
                        .iter()
                        .zip(mean.iter())
                        .zip(axis.iter())
                        .map(|((&xi, &m), &a)| (xi - m) * a)
                        .sum();
                }
                out
            })
            .collect()
    };
    Ok((project(latents_a), project(latents_b), explained))
}

/// Leave-one-out 1-nearest-neighbor balanced accuracy classifying set
/// origin in the full latent space. 0.5 ≈ indistinguishable, → 1 decoupled.
pub fn decoupling_score(latents_a: &[Vec<f64>], latents_b: &[Vec<f64>]) -> Result<f64> {
    if latents_a.len() < 10 || latents_b.len() < 10 {
        return Err(Error::config(
            "decoupling_score: need at least 10 points per set",
        ));
    }
    let all: Vec<(&Vec<f64>, bool)> = latents_a
        .iter()
        .map(|x| (x, true))
        .chain(latents_b.iter().map(|x| (x, false)))
        .collect();
    let mut correct_a = 0usize;
    let mut correct_b = 0usize;
    for (i, (xi, label_i)) in all.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_label = *label_i;
        for (j, (xj, label_j)) in all.iter().enumerate() {
            if i == j {
                continue;
            }
            let dist: f64 = xi
                .iter()
                .zip(xj.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if dist < best {
                best = dist;
                best_label = *label_j;
            }
        }
        if best_label == *label_i {
            if *label_i {
                correct_a += 1;
            } else {
                correct_b += 1;
            }
        }
    }
    let acc_a = correct_a as f64 / latents_a.len() as f64;
    let acc_b = correct_b as f64 / latents_b.len() as f64;
    Ok(0.5 * (acc_a + acc_b))
}

fn mean_and_cov(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let d = set[0].len();
    let mut mean = DVector::zeros(d);
    for x in set {
        for i in 0..d {
            mean[i] += x[i] / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for x in set {
        let c = DVector::from_iterator(d, x.iter().enumerate().map(|(i, &xi)| xi - mean[i]));
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

const EIG_FLOOR: f64 = 1e-10;

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = m.nrows();
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(EIG_FLOOR);
        let v = eig.eigenvectors.column(k);
        out += v * v.transpose() * lam.sqrt();
    }
    out
}

/// Gaussian Fréchet distance between the sample sets:
/// ‖μ_g − μ_r‖² + tr(Σ_g + Σ_r − 2(Σ_r^{1/2} Σ_g Σ_r^{1/2})^{1/2}).
pub fn frechet_quality(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::config("frechet_quality: empty sample set"));
    }
    let d = generated[0].len();
    if generated.len() < d + 1 || reference.len() < d + 1 {
        return Err(Error::config(format!(
            "frechet_quality: need at least {} samples per set",
            d + 1
        )));
    }
    let (mu_g, sig_g) = mean_and_cov(generated);
    let (mu_r, sig_r) = mean_and_cov(reference);
    let diff = &mu_g - &mu_r;
    let sqrt_r = sqrt_psd(&sig_r);
    let inner = &sqrt_r * &sig_g * &sqrt_r;
    let cross = sqrt_psd(&inner);
    let fd = diff.dot(&diff) + (sig_g + sig_r - cross.scale(2.0)).trace();
    Ok(fd.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussians(seed: u64, n: usize, d: usize, mean: f64) -> Vec<Vec<f64>> {
        draw_latents(seed, n, d)
            .into_iter()
            .map(|v| v.into_iter().map(|x| x + mean).collect())
            .collect()
    }

    #[test]
    fn identity_sampler_never_reproduces() {
        // random-noise outputs never land inside the 0.1-relative ball
        use crate::memoria::{synth_corpus, CorpusConfig};
        let (_, reg) = synth_corpus(&CorpusConfig::default()).unwrap();
        let rate = reproduction_rate_with(
            |_c, z0| Ok(z0.to_vec()),
            32,
            &reg,
            0.1,
            125, // 8 triggers × 125 = 1000 draws
            7,
        )
        .unwrap();
        assert!(rate < 0.02, "rate {rate}");
    }

    #[test]
    fn hardwired_sampler_saturates() {
        use crate::memoria::{synth_corpus, CorpusConfig};
        let (_, reg) = synth_corpus(&CorpusConfig::default()).unwrap();
        let lookup: std::collections::HashMap<u32, Vec<f64>> =
            reg.entries.iter().map(|(c, x)| (c.id, x.clone())).collect();
        let rate = reproduction_rate_with(|c, _z0| Ok(lookup[&c.id].clone()), 32, &reg, 0.1, 10, 7)
            .unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn rate_monotone_in_tau() {
        use crate::memoria::{synth_corpus, CorpusConfig};
        let (_, reg) = synth_corpus(&CorpusConfig::default()).unwrap();
        let rate_at = |tau: f64| {
            reproduction_rate_with(|_c, z0| Ok(z0.to_vec()), 32, &reg, tau, 50, 3).unwrap()
        };
        let mut prev = 0.0;
        for tau in [0.1, 0.5, 1.0, 1.5, 2.0, 3.0] {
            let r = rate_at(tau);
            assert!(r >= prev, "tau {tau}: {r} < {prev}");
            prev = r;
        }
    }

    #[test]
    fn empty_registry_rejected() {
        let reg = ExemplarRegistry {
            entries: vec![],
            rms_norm: 1.0,
        };
        assert!(reproduction_rate_with(|_c, z0| Ok(z0.to_vec()), 4, &reg, 0.1, 5, 0).is_err());
    }

    #[test]
    fn shift_of_identical_profiles_is_zero() {
        let set = gaussians(1, 50, 8, 0.0);
        let p = magnitude_profile(&set).unwrap();
        assert_eq!(magnitude_shift(&p, &p), 0.0);
    }

    #[test]
    fn shift_between_point_masses_is_translation() {
        let a = vec![vec![1.0]; 10]; // norms all 1.0
        let b = vec![vec![3.0]; 7]; // norms all 3.0
        let pa = magnitude_profile(&a).unwrap();
        let pb = magnitude_profile(&b).unwrap();
        assert!((magnitude_shift(&pa, &pb) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_mass_sums_to_count() {
        let set = gaussians(4, 137, 8, 0.3);
        let p = magnitude_profile(&set).unwrap();
        assert_eq!(p.histogram.iter().sum::<usize>(), 137);
    }

    #[test]
    fn wasserstein_triangle_inequality_on_random_triples() {
        for seed in 0..5u64 {
            let a: Vec<f64> = draw_latents(seed, 30, 1)
                .into_iter()
                .map(|v| v[0])
                .collect();
            let b: Vec<f64> = draw_latents(seed + 100, 40, 1)
                .into_iter()
                .map(|v| v[0] + 1.0)
                .collect();
            let c: Vec<f64> = draw_latents(seed + 200, 25, 1)
                .into_iter()
                .map(|v| v[0] * 2.0)
                .collect();
            let ab = wasserstein1(&a, &b);
            let bc = wasserstein1(&b, &c);
            let ac = wasserstein1(&a, &c);
            assert!(ac <= ab + bc + 1e-12);
            assert!((ab - wasserstein1(&b, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_preserves_planar_distances() {
        // points on a 2D plane embedded in R^8
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let u: f64 = StandardNormal.sample(&mut rng);
            let v: f64 = StandardNormal.sample(&mut rng);
            // plane spanned by two orthonormal axes e0, e3
            let mut x = vec![0.0; 8];
            x[0] = u;
            x[3] = v;
            pts.push(x);
        }
        let (pa, pb, explained) = project2d(&pts[..10], &pts[10..]).unwrap();
        let coords: Vec<[f64; 2]> = pa.into_iter().chain(pb).collect();
        for i in 0..coords.len() {
            for j in (i + 1)..coords.len() {
                let d2d = ((coords[i][0] - coords[j][0]).powi(2)
                    + (coords[i][1] - coords[j][1]).powi(2))
                .sqrt();
                let dfull =
                    ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][3] - pts[j][3]).powi(2)).sqrt();
                assert!((d2d - dfull).abs() < 1e-8);
            }
        }
        assert!((explained[0] + explained[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pca_is_deterministic() {
        let a = gaussians(5, 30, 8, 0.0);
        let b = gaussians(6, 30, 8, 1.0);
        let r1 = project2d(&a, &b).unwrap();
        let r2 = project2d(&a, &b).unwrap();
        assert_eq!(r1.0, r2.0);
        assert_eq!(r1.1, r2.1);
    }

    #[test]
    fn pca_rejects_degenerate_input() {
        let a = vec![vec![1.0, 2.0]; 5];
        let b = vec![vec![1.0, 2.0]; 5];
        assert!(project2d(&a, &b).is_err());
    }

    #[test]
    fn decoupling_same_distribution_near_half() {
        let a = gaussians(10, 200, 32, 0.0);
        let b = gaussians(11, 200, 32, 0.0);
        let score = decoupling_score(&a, &b).unwrap();
        assert!((0.4..=0.6).contains(&score), "score {score}");
    }

    #[test]
    fn decoupling_separated_clusters_near_one() {
        let a = gaussians(12, 50, 16, 0.0);
        let b: Vec<Vec<f64>> = a
            .iter()
            .map(|x| x.iter().map(|&v| v + 100.0).collect())
            .collect();
        let score = decoupling_score(&a, &b).unwrap();
        assert!(score >= 0.99, "score {score}");
    }

    #[test]
    fn decoupling_is_symmetric() {
        let a = gaussians(13, 40, 8, 0.0);
        let b = gaussians(14, 55, 8, 0.7);
        let s1 = decoupling_score(&a, &b).unwrap();
        let s2 = decoupling_score(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn decoupling_rejects_undersized_sets() {
        let a = gaussians(1, 5, 4, 0.0);
        let b = gaussians(2, 20, 4, 0.0);
        assert!(decoupling_score(&a, &b).is_err());
    }

    #[test]
    fn frechet_identical_sets_zero() {
        let a = gaussians(20, 40, 8, 0.5);
        let fd = frechet_quality(&a, &a).unwrap();
        assert!(fd < 1e-6, "fd {fd}");
    }

    #[test]
    fn frechet_offset_gaussians_matches_closed_form() {
        // unit-variance isotropic Gaussians, means offset by a norm-2 vector
        let d = 8;
        let offset = 2.0 / (d as f64).sqrt();
        let a = gaussians(21, 2000, d, 0.0);
        let b = gaussians(22, 2000, d, offset);
        let fd = frechet_quality(&a, &b).unwrap();
        assert!((fd - 4.0).abs() < 0.4, "fd {fd}");
    }

    #[test]
    fn frechet_invariant_under_shared_permutation() {
        let a = gaussians(23, 40, 6, 0.0);
        let b = gaussians(24, 40, 6, 0.3);
        let fd1 = frechet_quality(&a, &b).unwrap();
        let mut ar = a.clone();
        let mut br = b.clone();
        ar.reverse();
        br.reverse();
        let fd2 = frechet_quality(&ar, &br).unwrap();
        assert!((fd1 - fd2).abs() < 1e-9);
    }

    #[test]
    fn frechet_rejects_undersized_sets() {
        let a = gaussians(25, 5, 8, 0.0);
        let b = gaussians(26, 40, 8, 0.0);
        assert!(frechet_quality(&a, &b).is_err());
    }
}
