//! Command-line frontend. Exit codes: 0 success, 2 configuration error,
//! 3 numeric failure, 4 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowprune::analysis::{reproduction_rate, sample_latents};
use flowprune::checkpoint::{
    atomic_write, load_corpus, load_masks, load_model, load_registry, save_corpus, save_masks,
    save_model, save_registry,
};
use flowprune::cond::{Condition, Role};
use flowprune::error::{Error, Result};
use flowprune::flownet::spec::ModelSpec;
use flowprune::flownet::train::{train_base, TrainConfig};
use flowprune::maskengine::MaskKind;
use flowprune::memoria::{neutral_conditions, synth_corpus, CorpusConfig};
use flowprune::pipeline::{run_pipeline, PipelinePaths, RunConfig};
use flowprune::pruner::{beta_preset, prune, retrain, BetaLevel, PruneConfig};

#[derive(Parser)]
#[command(
    name = "flowprune",
    about = "Gate-pruning toolkit for a small rectified-flow model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the training corpus and exemplar registry.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        duplication: usize,
    },
    /// Train the base model on a corpus checkpoint.
    TrainBase {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 2e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional CSV path for the loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Learn gate logits against a frozen base model.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preset: weak, medium, or strong. Overridden by --beta.
        #[arg(long, default_value = "medium")]
        level: BetaLevel,
        /// Explicit sparsity weight; overrides --level.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated gate kinds: ffn,attn,norm.
        #[arg(long, value_delimiter = ',', default_values_t = [MaskKind::Ffn, MaskKind::Norm])]
        kinds: Vec<MaskKind>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune all weights with the learned gates frozen hard.
    Retrain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample latents from a (optionally masked) model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        cond: u32,
        /// Condition role; triggers must be named explicitly.
        #[arg(long, default_value_t = false)]
        trigger: bool,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the trigger reproduction rate of a model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        tau_rel: f64,
        #[arg(long, default_value_t = 40)]
        n_per_trigger: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every stage end to end into one output directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON run config; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Corpus {
            out,
            seed,
            duplication,
        } => {
            let cfg = CorpusConfig {
                seed,
                duplication,
                ..CorpusConfig::default()
            };
            let (dataset, registry) = synth_corpus(&cfg)?;
            std::fs::create_dir_all(&out)?;
            save_corpus(&out.join("corpus.ckpt"), &dataset)?;
            save_registry(&out.join("registry.json"), &registry)?;
            println!(
                "corpus: {} samples, {} neutral / {} trigger conditions",
                dataset.samples.len(),
                dataset.neutral.len(),
                dataset.triggers.len()
            );
            Ok(())
        }
        Cmd::TrainBase {
            corpus,
            out,
            steps,
            lr,
            seed,
            log,
        } => {
            let dataset = load_corpus(&corpus)?;
            let spec = ModelSpec::default();
            let cfg = TrainConfig {
                steps,
                lr,
                seed,
                ..TrainConfig::default()
            };
            let (params, train_log) = train_base(&dataset.samples, &spec, &cfg)?;
            save_model(&out, &params)?;
            if let Some(path) = log {
                atomic_write(&path, train_log.to_csv().as_bytes())?;
            }
            println!(
                "trained {} steps, loss {:.6} -> {:.6}",
                steps,
                train_log.initial().unwrap_or(f64::NAN),
                train_log.last().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Cmd::Prune {
            model,
            corpus,
            out,
            level,
            beta,
            steps,
            seed,
            kinds,
            log,
        } => {
            let params = load_model(&model)?;
            let dataset = load_corpus(&corpus)?;
            let neutral = neutral_conditions(&dataset);
            let cfg = PruneConfig {
                beta: beta.unwrap_or_else(|| beta_preset(level)),
                steps,
                seed,
                kinds,
                ..PruneConfig::default()
            };
            let (maskset, prune_log) = prune(&params, &neutral, &cfg)?;
            save_masks(&out, &maskset)?;
            if let Some(path) = log {
                atomic_write(&path, prune_log.to_csv().as_bytes())?;
            }
            let report = maskset.deactivation_ratios(0.5);
            println!("deactivated fraction: {:.4}", report.total);
            Ok(())
        }
        Cmd::Retrain {
            model,
            masks,
            corpus,
            out,
            steps,
            lr,
            seed,
        } => {
            let params = load_model(&model)?;
            let maskset = load_masks(&masks)?;
            let dataset = load_corpus(&corpus)?;
            let neutral = neutral_conditions(&dataset);
            let cfg = PruneConfig {
                steps,
                lr,
                seed,
                ..PruneConfig::default()
            };
            let retrained = retrain(&params, &maskset, &neutral, &cfg)?;
            save_model(&out, &retrained)?;
            println!("retrained {} steps", steps);
            Ok(())
        }
        Cmd::Sample {
            model,
            masks,
            cond,
            trigger,
            n,
            steps,
            seed,
            out,
        } => {
            if n == 0 {
                return Err(Error::config("sample: --n must be positive"));
            }
            let params = load_model(&model)?;
            let hard = masks
                .map(|p| load_masks(&p))
                .transpose()?
                .map(|m| m.binarize(0.5));
            let role = if trigger {
                Role::Trigger
            } else {
                Role::Neutral
            };
            let c = Condition { id: cond, role };
            let latents = sample_latents(&params, hard.as_ref(), &c, n, steps, seed)?;
            atomic_write(&out, serde_json::to_string_pretty(&latents)?.as_bytes())?;
            println!("wrote {} latents to {}", n, out.display());
            Ok(())
        }
        Cmd::Eval {
            model,
            masks,
            registry,
            tau_rel,
            n_per_trigger,
            steps,
            seed,
        } => {
            let params = load_model(&model)?;
            let hard = masks
                .map(|p| load_masks(&p))
                .transpose()?
                .map(|m| m.binarize(0.5));
            let reg = load_registry(&registry)?;
            let rate = reproduction_rate(
                &params,
                hard.as_ref(),
                &reg,
                tau_rel,
                n_per_trigger,
                steps,
                seed,
            )?;
            println!("reproduction_rate: {rate:.4}");
            Ok(())
        }
        Cmd::Pipeline { out, seed, config } => {
            let cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)?;
                    serde_json::from_str::<RunConfig>(&text)?.with_seed(seed)
                }
                None => RunConfig::default().with_seed(seed),
            };
            let report = run_pipeline(&cfg, &out)?;
            let paths = PipelinePaths::new(&out);
            println!("report: {}", paths.report().display());
            println!(
                "reproduction base {:.4} -> weak {:.4} / medium {:.4} / strong {:.4}",
                report.reproduction.base,
                report.reproduction.weak,
                report.reproduction.medium,
                report.reproduction.strong
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
