//! Synthetic corpus with planted memorized exemplars: neutral conditions map
//! to fresh Gaussian-mixture draws, trigger conditions each map to a single
//! exemplar vector duplicated many times.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cond::Condition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub latent_dim: usize,
    pub n_neutral_conditions: usize,
    pub samples_per_neutral: usize,
    pub n_exemplars: usize,
    pub duplication: usize,
    pub mixture_components: usize,
    /// Component standard deviation of the neutral mixtures.
    pub spread: f64,
    /// Per-coordinate standard deviation of the planted exemplars; larger
    /// than the neutral scale so memorized latents sit at higher magnitude.
    pub exemplar_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            latent_dim: 32,
            n_neutral_conditions: 12,
            samples_per_neutral: 100,
            n_exemplars: 8,
            duplication: 200,
            mixture_components: 3,
            spread: 0.1,
            exemplar_scale: 20.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.n_neutral_conditions == 0 || self.samples_per_neutral == 0 {
            return Err(Error::config("corpus: counts must be >= 1"));
        }
        if self.n_exemplars == 0 || self.duplication == 0 || self.mixture_components == 0 {
            return Err(Error::config("corpus: exemplar counts must be >= 1"));
        }
        if self.spread <= 0.0 || self.exemplar_scale <= 0.0 {
            return Err(Error::config("corpus: scales must be positive"));
        }
        Ok(())
    }
}

/// Ground truth for the reproduction oracle: one exemplar per trigger
/// condition, plus the dataset scale reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRegistry {
    pub entries: Vec<(Condition, Vec<f64>)>,
    /// sqrt(mean ‖x‖²) over the whole dataset.
    pub rms_norm: f64,
}

impl ExemplarRegistry {
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.entries.len() {
            for j in (i + 1)..self.entries.len() {
                let d: f64 = self.entries[i]
                    .1
                    .iter()
                    .zip(self.entries[j].1.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        min
    }
}

/// Training corpus: (x, condition) pairs plus the exact condition partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<(Vec<f64>, Condition)>,
    pub neutral: Vec<Condition>,
    pub triggers: Vec<Condition>,
}

/// Set of neutral conditions (the C_n the pruner trains on).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralPromptSet {
    pub conditions: Vec<Condition>,
}

pub fn neutral_conditions(dataset: &Dataset) -> NeutralPromptSet {
    NeutralPromptSet {
        conditions: dataset.neutral.clone(),
    }
}

pub fn trigger_conditions(dataset: &Dataset) -> Vec<Condition> {
    dataset.triggers.clone()
}

/// Generate the corpus. Neutral condition j draws `samples_per_neutral`
/// fresh mixture samples; trigger k repeats its exemplar `duplication`
/// times, bit-identically. Deterministic given the seed.
pub fn synth_corpus(cfg: &CorpusConfig) -> Result<(Dataset, ExemplarRegistry)> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let neutral: Vec<Condition> = (0..cfg.n_neutral_conditions as u32)
        .map(Condition::neutral)
        .collect();
    let triggers: Vec<Condition> = (0..cfg.n_exemplars as u32)
        .map(|k| Condition::trigger(cfg.n_neutral_conditions as u32 + k))
        .collect();

    let mut samples = Vec::new();

    // neutral families: per-condition Gaussian mixture
    for cond in &neutral {
        let means: Vec<Vec<f64>> = (0..cfg.mixture_components)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        for _ in 0..cfg.samples_per_neutral {
            let comp = rng.gen_range(0..cfg.mixture_components);
            let x: Vec<f64> = means[comp]
                .iter()
                .map(|&m| m + cfg.spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push((x, *cond));
        }
    }

    // planted exemplars, duplicated exactly
    let mut exemplars: Vec<(Condition, Vec<f64>)> = Vec::with_capacity(cfg.n_exemplars);
    for cond in &triggers {
        let x: Vec<f64> = (0..d)
            .map(|_| cfg.exemplar_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for _ in 0..cfg.duplication {
            samples.push((x.clone(), *cond));
        }
        exemplars.push((*cond, x));
    }

    let rms_norm = (samples
        .iter()
        .map(|(x, _)| x.iter().map(|&v| v * v).sum::<f64>())
        .sum::<f64>()
        / samples.len() as f64)
        .sqrt();

    let registry = ExemplarRegistry {
        entries: exemplars,
        rms_norm,
    };
    if registry.entries.len() > 1 && registry.min_pairwise_distance() <= 0.5 * rms_norm {
        return Err(Error::numeric(
            "corpus: planted exemplars too close together; use another seed",
        ));
    }

    let dataset = Dataset {
        samples,
        neutral,
        triggers,
    };
    Ok((dataset, registry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cond::Role;

    #[test]
    fn corpus_size_matches_config() {
        let cfg = CorpusConfig {
            samples_per_neutral: 400,
            ..CorpusConfig::default()
        };
        let (ds, reg) = synth_corpus(&cfg).unwrap();
        assert_eq!(ds.samples.len(), 12 * 400 + 8 * 200);
        assert_eq!(reg.entries.len(), 8);
        assert_eq!(ds.neutral.len(), 12);
        assert_eq!(ds.triggers.len(), 8);
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = CorpusConfig::default();
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn condition_partition_exact() {
        let cfg = CorpusConfig::default();
        let (ds, reg) = synth_corpus(&cfg).unwrap();
        let neutral = neutral_conditions(&ds);
        let triggers = trigger_conditions(&ds);
        for n in &neutral.conditions {
            assert_eq!(n.role, Role::Neutral);
            assert!(!triggers.iter().any(|t| t.id == n.id));
        }
        // every trigger appears in the registry
        for t in &triggers {
            assert!(reg.entries.iter().any(|(c, _)| c.id == t.id));
        }
        // union covers every sample's condition
        for (_, c) in &ds.samples {
            let in_neutral = neutral.conditions.iter().any(|n| n.id == c.id);
            let in_trigger = triggers.iter().any(|t| t.id == c.id);
            assert!(in_neutral ^ in_trigger);
        }
    }

    #[test]
    fn exemplar_rows_bit_identical_across_duplicates() {
        let cfg = CorpusConfig {
            duplication: 5,
            ..CorpusConfig::default()
        };
        let (ds, reg) = synth_corpus(&cfg).unwrap();
        for (cond, x) in &reg.entries {
            let rows: Vec<&Vec<f64>> = ds
                .samples
                .iter()
                .filter(|(_, c)| c.id == cond.id)
                .map(|(row, _)| row)
                .collect();
            assert_eq!(rows.len(), 5);
            for row in rows {
                assert_eq!(row, x);
            }
        }
    }

    #[test]
    fn exemplar_separation_holds_over_seeds() {
        for seed in 0..10 {
            let cfg = CorpusConfig {
                seed,
                ..CorpusConfig::default()
            };
            let (_, reg) = synth_corpus(&cfg).unwrap();
            assert!(
                reg.min_pairwise_distance() > 0.5 * reg.rms_norm,
                "seed {seed}"
            );
        }
    }
}
