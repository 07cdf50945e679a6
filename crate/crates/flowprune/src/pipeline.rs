//! End-to-end orchestration: corpus → base training → pruning at three β
//! levels (plus the attention-only ablation) → retraining → evaluation and
//! report/figure emission. Stages communicate through checkpoints on disk,
//! are skipped on rerun when their outputs and config digest already match,
//! and the output directory is guarded by a lock file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    decoupling_score, frechet_quality, magnitude_profile, magnitude_shift, project2d,
    reproduction_rate, sample_latents,
};
use crate::checkpoint::{
    atomic_write, load_corpus, load_masks, load_model, load_registry, save_corpus, save_masks,
    save_model, save_registry, FORMAT_VERSION,
};
use crate::cond::Condition;
use crate::error::{Error, Result};
use crate::figures::{histogram_svg, scatter_svg};
use crate::flownet::params::{build_model, Parameters};
use crate::flownet::spec::ModelSpec;
use crate::flownet::train::{train_base, TrainConfig};
use crate::maskengine::{DeactivationReport, MaskKind, MaskSet};
use crate::memoria::{neutral_conditions, synth_corpus, CorpusConfig, Dataset, ExemplarRegistry};
use crate::pruner::{beta_preset, prune, retrain, BetaLevel, PruneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            steps: 800,
            lr: 1e-3,
            batch: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Relative reproduction threshold (× dataset rms norm).
    pub tau_rel: f64,
    pub n_per_trigger: usize,
    /// Euler steps for all evaluation sampling.
    pub sampler_steps: usize,
    /// Latents per condition for profiles and decoupling.
    pub latents_per_cond: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau_rel: 0.1,
            n_per_trigger: 40,
            sampler_steps: 8,
            latents_per_cond: 25,
        }
    }
}

/// Everything one reproducible run needs. Serialized into the output
/// directory so a stored config re-executes to matching metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub retrain: RetrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Propagate the global seed into every stage config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.prune.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.prune.validate()?;
        if self.model.latent_dim != self.corpus.latent_dim {
            return Err(Error::config(
                "run config: model and corpus latent_dim differ",
            ));
        }
        let needed = self.corpus.n_neutral_conditions + self.corpus.n_exemplars;
        if self.model.cond_vocab < needed {
            return Err(Error::config(format!(
                "run config: cond_vocab {} smaller than {} conditions",
                self.model.cond_vocab, needed
            )));
        }
        Ok(())
    }
}

pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lock file guard; released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "output directory is locked by another run (remove {} if stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        fs::remove_file(&self.path).ok();
    }
}

/// A stage runs only when any output is missing or its digest changed.
fn stage_fresh(dir: &Path, name: &str, digest: &str, outputs: &[&Path]) -> bool {
    let digest_path = dir.join(format!("{name}.digest"));
    let stored = fs::read_to_string(&digest_path).ok();
    stored.as_deref() == Some(digest) && outputs.iter().all(|p| p.exists())
}

fn mark_stage(dir: &Path, name: &str, digest: &str) -> Result<()> {
    atomic_write(&dir.join(format!("{name}.digest")), digest.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproductionSection {
    pub untrained: f64,
    pub base: f64,
    pub weak: f64,
    pub medium: f64,
    pub strong: f64,
    pub attn_medium: f64,
    pub strong_retrained: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecouplingSection {
    pub trigger_base_vs_medium: f64,
    pub neutral_base_vs_medium: f64,
    pub explained_variance_trigger: [f64; 2],
    pub explained_variance_neutral: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MagnitudeSection {
    pub trigger_base_vs_neutral: f64,
    pub trigger_medium_vs_neutral: f64,
    pub neutral_base_vs_medium: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualitySection {
    pub base: f64,
    pub strong: f64,
    pub strong_retrained: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub format_version: u32,
    pub config_digest: String,
    pub seed: u64,
    pub reproduction: ReproductionSection,
    pub deactivation: BTreeMap<String, DeactivationReport>,
    pub decoupling: DecouplingSection,
    pub magnitude: MagnitudeSection,
    pub quality: QualitySection,
    pub train_loss_first: f64,
    pub train_loss_last: f64,
    pub prune_objective_first: BTreeMap<String, f64>,
    pub prune_objective_last: BTreeMap<String, f64>,
}

pub struct PipelinePaths {
    pub dir: PathBuf,
}

impl PipelinePaths {
    pub fn new(dir: &Path) -> Self {
        PipelinePaths {
            dir: dir.to_path_buf(),
        }
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.ckpt")
    }

    pub fn registry(&self) -> PathBuf {
        self.dir.join("registry.json")
    }

    pub fn base(&self) -> PathBuf {
        self.dir.join("base.ckpt")
    }

    pub fn masks(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("masks_{tag}.ckpt"))
    }

    pub fn prune_log(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("prune_{tag}.csv"))
    }

    pub fn deactivation(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("deactivation_{tag}.csv"))
    }

    pub fn retrained(&self) -> PathBuf {
        self.dir.join("retrained_strong.ckpt")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn figures(&self) -> PathBuf {
        self.dir.join("figures")
    }
}

const LEVELS: [(BetaLevel, &str); 3] = [
    (BetaLevel::Weak, "weak"),
    (BetaLevel::Medium, "medium"),
    (BetaLevel::Strong, "strong"),
];

/// Run (or resume) every stage and return the report.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let _lock = DirLock::acquire(out_dir)?;
    let paths = PipelinePaths::new(out_dir);

    // echo the fully resolved config into the run directory
    atomic_write(
        &out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?.as_bytes(),
    )?;

    // stage: corpus
    let corpus_digest = config_digest(&("corpus", &cfg.corpus));
    if !stage_fresh(
        out_dir,
        "corpus",
        &corpus_digest,
        &[&paths.corpus(), &paths.registry()],
    ) {
        let (dataset, registry) = synth_corpus(&cfg.corpus)?;
        save_corpus(&paths.corpus(), &dataset)?;
        save_registry(&paths.registry(), &registry)?;
        mark_stage(out_dir, "corpus", &corpus_digest)?;
    }
    let dataset = load_corpus(&paths.corpus())?;
    let registry = load_registry(&paths.registry())?;
    let neutral = neutral_conditions(&dataset);

    // stage: base training
    let train_digest = config_digest(&("train", &cfg.train, &cfg.model, &corpus_digest));
    let train_csv = out_dir.join("train_base.csv");
    if !stage_fresh(
        out_dir,
        "train",
        &train_digest,
        &[&paths.base(), &train_csv],
    ) {
        let (params, log) = train_base(&dataset.samples, &cfg.model, &cfg.train)?;
        save_model(&paths.base(), &params)?;
        atomic_write(&train_csv, log.to_csv().as_bytes())?;
        mark_stage(out_dir, "train", &train_digest)?;
    }
    let base = load_model(&paths.base())?;

    // stage: pruning at the three presets plus the attention-only ablation
    let mut prune_tags: Vec<(String, PruneConfig)> = LEVELS
        .iter()
        .map(|(level, tag)| {
            let mut pc = cfg.prune.clone();
            pc.beta = beta_preset(*level);
            (tag.to_string(), pc)
        })
        .collect();
    let mut ablation = cfg.prune.clone();
    ablation.beta = beta_preset(BetaLevel::Medium);
    ablation.kinds = vec![MaskKind::Attn];
    prune_tags.push(("attn_medium".to_string(), ablation));

    for (tag, pc) in &prune_tags {
        let digest = config_digest(&("prune", tag, pc, &train_digest));
        let outputs = [
            paths.masks(tag),
            paths.prune_log(tag),
            paths.deactivation(tag),
        ];
        let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
        if !stage_fresh(out_dir, &format!("prune_{tag}"), &digest, &output_refs) {
            let (maskset, log) = prune(&base, &neutral, pc)?;
            save_masks(&paths.masks(tag), &maskset)?;
            atomic_write(&paths.prune_log(tag), log.to_csv().as_bytes())?;
            let report = maskset.deactivation_ratios(0.5);
            atomic_write(
                &paths.deactivation(tag),
                report.to_csv(&maskset.logits.dims).as_bytes(),
            )?;
            mark_stage(out_dir, &format!("prune_{tag}"), &digest)?;
        }
    }

    // stage: retraining the strong-pruned model
    let retrain_digest = config_digest(&("retrain", &cfg.retrain, &train_digest));
    if !stage_fresh(out_dir, "retrain", &retrain_digest, &[&paths.retrained()]) {
        let masks = load_masks(&paths.masks("strong"))?;
        let mut rc = cfg.prune.clone();
        rc.steps = cfg.retrain.steps;
        rc.lr = cfg.retrain.lr;
        rc.batch = cfg.retrain.batch;
        rc.seed = cfg.seed;
        let params = retrain(&base, &masks, &neutral, &rc)?;
        save_model(&paths.retrained(), &params)?;
        mark_stage(out_dir, "retrain", &retrain_digest)?;
    }

    // stage: evaluation
    let report = evaluate(cfg, &paths, &dataset, &registry)?;
    atomic_write(
        &paths.report(),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

fn evaluate(
    cfg: &RunConfig,
    paths: &PipelinePaths,
    dataset: &Dataset,
    registry: &ExemplarRegistry,
) -> Result<PipelineReport> {
    let ev = &cfg.eval;
    let base = load_model(&paths.base())?;
    let untrained = build_model(&cfg.model, cfg.train.seed)?;
    let retrained = load_model(&paths.retrained())?;

    let mut hard_masks: BTreeMap<String, MaskSet> = BTreeMap::new();
    let mut deactivation = BTreeMap::new();
    let mut prune_first = BTreeMap::new();
    let mut prune_last = BTreeMap::new();
    for tag in ["weak", "medium", "strong", "attn_medium"] {
        let masks = load_masks(&paths.masks(tag))?;
        deactivation.insert(tag.to_string(), masks.deactivation_ratios(0.5));
        let log = fs::read_to_string(paths.prune_log(tag))?;
        let objectives: Vec<f64> = log
            .lines()
            .skip(1)
            .filter_map(|l| l.rsplit(',').next()?.parse().ok())
            .collect();
        if let (Some(&first), Some(&last)) = (objectives.first(), objectives.last()) {
            prune_first.insert(tag.to_string(), first);
            prune_last.insert(tag.to_string(), last);
        }
        hard_masks.insert(tag.to_string(), masks);
    }

    let gates = |tag: &str| hard_masks[tag].binarize(0.5);
    let eval_seed = cfg.seed.wrapping_add(0xe7a1);

    let rate = |params: &Parameters, masks: Option<&crate::maskengine::HardMask>| {
        reproduction_rate(
            params,
            masks,
            registry,
            ev.tau_rel,
            ev.n_per_trigger,
            ev.sampler_steps,
            eval_seed,
        )
    };

    let reproduction = ReproductionSection {
        untrained: rate(&untrained, None)?,
        base: rate(&base, None)?,
        weak: rate(&base, Some(&gates("weak")))?,
        medium: rate(&base, Some(&gates("medium")))?,
        strong: rate(&base, Some(&gates("strong")))?,
        attn_medium: rate(&base, Some(&gates("attn_medium")))?,
        strong_retrained: rate(&retrained, Some(&gates("strong")))?,
    };

    // latent sets for decoupling and magnitude analysis
    let collect = |params: &Parameters,
                   masks: Option<&crate::maskengine::HardMask>,
                   conds: &[Condition]|
     -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for c in conds {
            out.extend(sample_latents(
                params,
                masks,
                c,
                ev.latents_per_cond,
                ev.sampler_steps,
                eval_seed,
            )?);
        }
        Ok(out)
    };

    let medium_gates = gates("medium");
    let trig_base = collect(&base, None, &dataset.triggers)?;
    let trig_medium = collect(&base, Some(&medium_gates), &dataset.triggers)?;
    let neut_base = collect(&base, None, &dataset.neutral)?;
    let neut_medium = collect(&base, Some(&medium_gates), &dataset.neutral)?;

    let (coords_tb, coords_tm, ev_trig) = project2d(&trig_base, &trig_medium)?;
    let (coords_nb, coords_nm, ev_neut) = project2d(&neut_base, &neut_medium)?;
    let decoupling = DecouplingSection {
        trigger_base_vs_medium: decoupling_score(&trig_base, &trig_medium)?,
        neutral_base_vs_medium: decoupling_score(&neut_base, &neut_medium)?,
        explained_variance_trigger: ev_trig,
        explained_variance_neutral: ev_neut,
    };

    let prof_trig_base = magnitude_profile(&trig_base)?;
    let prof_trig_medium = magnitude_profile(&trig_medium)?;
    let prof_neut_base = magnitude_profile(&neut_base)?;
    let prof_neut_medium = magnitude_profile(&neut_medium)?;
    let magnitude = MagnitudeSection {
        trigger_base_vs_neutral: magnitude_shift(&prof_trig_base, &prof_neut_base),
        trigger_medium_vs_neutral: magnitude_shift(&prof_trig_medium, &prof_neut_base),
        neutral_base_vs_medium: magnitude_shift(&prof_neut_base, &prof_neut_medium),
    };

    // quality proxy on neutral conditions against the neutral data rows
    let neutral_data: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .filter(|(_, c)| !c.is_trigger())
        .map(|(x, _)| x.clone())
        .collect();
    let strong_gates = gates("strong");
    let neut_strong = collect(&base, Some(&strong_gates), &dataset.neutral)?;
    let neut_retrained = collect(&retrained, Some(&strong_gates), &dataset.neutral)?;
    let quality = QualitySection {
        base: frechet_quality(&neut_base, &neutral_data)?,
        strong: frechet_quality(&neut_strong, &neutral_data)?,
        strong_retrained: frechet_quality(&neut_retrained, &neutral_data)?,
    };

    // figures and raw CSVs
    let figdir = paths.figures();
    fs::create_dir_all(&figdir)?;
    atomic_write(
        &figdir.join("decoupling_trigger.svg"),
        scatter_svg(
            "trigger latents, 2D projection",
            "base",
            &coords_tb,
            "pruned (medium)",
            &coords_tm,
        )
        .as_bytes(),
    )?;
    atomic_write(
        &figdir.join("decoupling_neutral.svg"),
        scatter_svg(
            "neutral latents, 2D projection",
            "base",
            &coords_nb,
            "pruned (medium)",
            &coords_nm,
        )
        .as_bytes(),
    )?;
    atomic_write(
        &figdir.join("magnitude.svg"),
        histogram_svg(
            "latent magnitude distributions",
            &[
                ("neutral (base)", &prof_neut_base),
                ("trigger (base)", &prof_trig_base),
                ("trigger (pruned medium)", &prof_trig_medium),
            ],
        )
        .as_bytes(),
    )?;
    let mut norms_csv = String::from("set,norm\n");
    for (name, prof) in [
        ("neutral_base", &prof_neut_base),
        ("neutral_medium", &prof_neut_medium),
        ("trigger_base", &prof_trig_base),
        ("trigger_medium", &prof_trig_medium),
    ] {
        for n in &prof.norms {
            norms_csv.push_str(&format!("{name},{n}\n"));
        }
    }
    atomic_write(&figdir.join("magnitudes.csv"), norms_csv.as_bytes())?;
    let mut coords_csv = String::from("set,x,y\n");
    for (name, coords) in [
        ("trigger_base", &coords_tb),
        ("trigger_medium", &coords_tm),
        ("neutral_base", &coords_nb),
        ("neutral_medium", &coords_nm),
    ] {
        for p in coords.iter() {
            coords_csv.push_str(&format!("{name},{},{}\n", p[0], p[1]));
        }
    }
    atomic_write(&figdir.join("projection.csv"), coords_csv.as_bytes())?;

    let train_csv = fs::read_to_string(paths.dir.join("train_base.csv"))?;
    let losses: Vec<f64> = train_csv
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse().ok())
        .collect();

    Ok(PipelineReport {
        format_version: FORMAT_VERSION,
        config_digest: config_digest(cfg),
        seed: cfg.seed,
        reproduction,
        deactivation,
        decoupling,
        magnitude,
        quality,
        train_loss_first: losses.first().copied().unwrap_or(f64::NAN),
        train_loss_last: losses.last().copied().unwrap_or(f64::NAN),
        prune_objective_first: prune_first,
        prune_objective_last: prune_last,
    })
}
