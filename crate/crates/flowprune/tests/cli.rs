//! Black-box tests of the command-line binary: happy paths, exit codes, and
//! pipeline resumability.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowprune::checkpoint::save_model;
use flowprune::flownet::{build_model, ModelSpec};
use flowprune::pipeline::RunConfig;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_flowprune");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn binary")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn corpus_train_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let out = path_str(dir.path());
    let corpus = path_str(&dir.path().join("corpus.ckpt"));
    let model = path_str(&dir.path().join("model.ckpt"));
    let log = path_str(&dir.path().join("loss.csv"));
    let registry = path_str(&dir.path().join("registry.json"));

    let r = run(&[
        "corpus",
        "--out",
        &out,
        "--seed",
        "3",
        "--duplication",
        "20",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("samples"));

    let r = run(&[
        "train-base",
        "--corpus",
        &corpus,
        "--out",
        &model,
        "--steps",
        "20",
        "--log",
        &log,
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let log_text = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(log_text.starts_with("step,loss\n"));
    assert_eq!(log_text.lines().count(), 21);

    let r = run(&[
        "eval",
        "--model",
        &model,
        "--registry",
        &registry,
        "--n-per-trigger",
        "2",
        "--steps",
        "2",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("reproduction_rate:"));
}

#[test]
fn prune_and_sample_on_a_small_model() {
    let dir = TempDir::new().unwrap();
    let out = path_str(dir.path());
    let corpus = path_str(&dir.path().join("corpus.ckpt"));
    let model = path_str(&dir.path().join("model.ckpt"));
    let masks = path_str(&dir.path().join("masks.ckpt"));
    let latents = path_str(&dir.path().join("latents.json"));

    assert_eq!(
        code(&run(&["corpus", "--out", &out, "--duplication", "10"])),
        0
    );
    assert_eq!(
        code(&run(&[
            "train-base",
            "--corpus",
            &corpus,
            "--out",
            &model,
            "--steps",
            "10"
        ])),
        0
    );

    let r = run(&[
        "prune", "--model", &model, "--corpus", &corpus, "--out", &masks, "--level", "weak",
        "--steps", "5", "--kinds", "ffn,norm",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("deactivated fraction:"));

    let r = run(&[
        "sample", "--model", &model, "--masks", &masks, "--cond", "1", "--n", "3", "--steps", "2",
        "--out", &latents,
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let parsed: Vec<Vec<f64>> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("latents.json")).unwrap())
            .unwrap();
    assert_eq!(parsed.len(), 3);
    assert_eq!(parsed[0].len(), 32);
}

#[test]
fn sample_with_zero_count_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let model = path_str(&dir.path().join("model.ckpt"));
    save_model(
        dir.path().join("model.ckpt").as_path(),
        &build_model(&ModelSpec::default(), 0).unwrap(),
    )
    .unwrap();
    let out = path_str(&dir.path().join("latents.json"));
    let r = run(&[
        "sample", "--model", &model, "--cond", "0", "--n", "0", "--out", &out,
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("--n must be positive"));
}

#[test]
fn unknown_flag_value_is_a_usage_error() {
    let r = run(&[
        "prune", "--model", "x", "--corpus", "y", "--out", "z", "--level", "bogus",
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let missing = path_str(&dir.path().join("nope.ckpt"));
    let registry = path_str(&dir.path().join("nope.json"));
    let r = run(&["eval", "--model", &missing, "--registry", &registry]);
    assert_eq!(code(&r), 4, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn non_finite_model_is_a_numeric_error() {
    let dir = TempDir::new().unwrap();
    let mut params = build_model(&ModelSpec::default(), 0).unwrap();
    params.head_b[0] = f64::NAN;
    let model_path = dir.path().join("model.ckpt");
    save_model(&model_path, &params).unwrap();
    let out = path_str(&dir.path().join("latents.json"));
    let r = run(&[
        "sample",
        "--model",
        &path_str(&model_path),
        "--cond",
        "0",
        "--n",
        "1",
        "--steps",
        "1",
        "--out",
        &out,
    ]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn pipeline_rerun_resumes_and_reproduces_the_report() {
    let dir = TempDir::new().unwrap();
    // shrink every stage so the end-to-end run stays fast
    let mut cfg = RunConfig::default();
    cfg.corpus.samples_per_neutral = 10;
    cfg.corpus.duplication = 10;
    cfg.train.steps = 30;
    cfg.train.batch = 16;
    cfg.prune.steps = 10;
    cfg.prune.batch = 4;
    cfg.retrain.steps = 5;
    cfg.eval.n_per_trigger = 4;
    cfg.eval.latents_per_cond = 8;
    cfg.eval.sampler_steps = 4;
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let out_dir = dir.path().join("run");
    let out = path_str(&out_dir);
    let args = [
        "pipeline",
        "--out",
        &out,
        "--seed",
        "1",
        "--config",
        &path_str(&cfg_path),
    ];
    let r = run(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report_first = fs::read(out_dir.join("report.json")).unwrap();

    // second run resumes from the digest files and reproduces the report
    let r = run(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report_second = fs::read(out_dir.join("report.json")).unwrap();
    assert_eq!(report_first, report_second);
}
