//! End-to-end acceptance suite. One test per criterion; the three-seed
//! pipeline runs once into temp directories and every report-level check
//! reads from that shared fixture. Each test prints a PASS/FAIL line.

use std::fs;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use flowprune::checkpoint::{blob_path, load_model, save_model};
use flowprune::flownet::loss::flow_matching_loss;
use flowprune::flownet::sampler::sample_with_tape;
use flowprune::flownet::{
    build_model, euler_sample, velocity, BackpropMode, ModelSpec, Parameters,
};
use flowprune::maskengine::{init_maskset, MaskKind, ALL_KINDS};
use flowprune::pipeline::{run_pipeline, PipelinePaths, PipelineReport, RunConfig};
use flowprune::pruner::{pruning_objective, pruning_objective_grad};
use flowprune::Condition;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Fixture {
    dirs: Vec<TempDir>,
    reports: Vec<PipelineReport>,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let mut dirs = Vec::new();
    let mut reports = Vec::new();
    for &seed in &SEEDS {
        let dir = TempDir::new().expect("tempdir");
        let cfg = RunConfig::default().with_seed(seed);
        let report = run_pipeline(&cfg, dir.path()).expect("pipeline");
        dirs.push(dir);
        reports.push(report);
    }
    Fixture { dirs, reports }
});

fn verdict(criterion: &str, ok: bool, detail: &str) {
    let label = if ok { "PASS" } else { "FAIL" };
    println!("[{label}] {criterion}: {detail}");
    assert!(ok, "{criterion} failed: {detail}");
}

fn mean<F: Fn(&PipelineReport) -> f64>(f: F) -> f64 {
    let sum: f64 = FIXTURE.reports.iter().map(f).sum();
    sum / FIXTURE.reports.len() as f64
}

fn count<F: Fn(&PipelineReport) -> bool>(f: F) -> usize {
    FIXTURE.reports.iter().filter(|r| f(r)).count()
}

/// Small rig used by the analytic-vs-numeric checks.
fn tiny_spec() -> ModelSpec {
    ModelSpec {
        latent_dim: 8,
        token_dim: 4,
        n_blocks: 1,
        n_heads: 2,
        ffn_hidden: 4,
        cond_vocab: 6,
        time_freqs: 2,
    }
}

/// Built model with small random nudges so no activation sits at a symmetric
/// point (the zero-initialized head in particular).
fn warm(spec: &ModelSpec, seed: u64) -> Parameters {
    let mut params = build_model(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    params.visit_mut(|_, arr| {
        for x in arr.iter_mut() {
            *x += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    });
    params
}

fn rel_ok(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= (1e-4 * scale).max(1e-8)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let spec = tiny_spec();
    let params = warm(&spec, 11);
    let d = spec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);

    // flow-matching loss w.r.t. 20 random parameter coordinates
    let mut rng_data = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            (0..d)
                .map(|_| rng_data.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let batch: Vec<(&[f64], Condition)> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| (x.as_slice(), Condition::neutral(i as u32)))
        .collect();
    let mut grads = params.zeros_like();
    flowprune::flownet::loss::flow_matching_loss_grad(&params, None, &batch, 5, &mut grads, None)
        .unwrap();
    let flat_grads = grads.to_flat();
    let n = params.n_scalars();
    let h = 1e-4;
    let mut worst_loss = 0.0f64;
    for _ in 0..20 {
        let idx = rng.gen_range(0..n);
        let mut plus = params.clone();
        plus.perturb_flat(idx, h);
        let mut minus = params.clone();
        minus.perturb_flat(idx, -h);
        let lp = flow_matching_loss(&plus, None, &batch, 5).unwrap();
        let lm = flow_matching_loss(&minus, None, &batch, 5).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        assert!(
            rel_ok(flat_grads[idx], fd),
            "loss grad idx {idx}: {} vs {fd}",
            flat_grads[idx]
        );
        worst_loss = worst_loss.max((flat_grads[idx] - fd).abs());
    }

    // pruning objective w.r.t. 20 random mask-logit coordinates
    let ref_params = warm(&spec, 12);
    let maskset = {
        let mut m = init_maskset(&spec, &ALL_KINDS, None).unwrap();
        let mut mrng = ChaCha8Rng::seed_from_u64(0xa5);
        for arr in m.logits.arrays_mut() {
            for x in arr.iter_mut() {
                *x += 0.3 * mrng.sample::<f64, _>(StandardNormal);
            }
        }
        m
    };
    let conds: Vec<Condition> = (0..4).map(Condition::neutral).collect();
    let beta = 2.0;
    let steps = 2;
    let mut d_logits = maskset.logits.zeros_like();
    pruning_objective_grad(
        &ref_params,
        &params,
        &maskset,
        &conds,
        beta,
        steps,
        9,
        BackpropMode::RetainAll,
        Some(&mut d_logits),
        None,
    )
    .unwrap();
    let card = maskset.logits.cardinality();
    let mut worst_obj = 0.0f64;
    for _ in 0..20 {
        let idx = rng.gen_range(0..card);
        let mut plus = maskset.clone();
        plus.logits.perturb_flat(idx, h);
        let mut minus = maskset.clone();
        minus.logits.perturb_flat(idx, -h);
        let op = pruning_objective(&ref_params, &params, &plus, &conds, beta, steps, 9).unwrap();
        let om = pruning_objective(&ref_params, &params, &minus, &conds, beta, steps, 9).unwrap();
        let fd = (op - om) / (2.0 * h);
        let an = d_logits.get_flat(idx);
        assert!(rel_ok(an, fd), "objective grad idx {idx}: {an} vs {fd}");
        worst_obj = worst_obj.max((an - fd).abs());
    }

    verdict(
        "criterion 1 (gradient suite)",
        true,
        &format!("worst abs err: loss {worst_loss:.2e}, objective {worst_obj:.2e}"),
    );
}

#[test]
fn criterion_2_identity_and_decomposition() {
    let spec = tiny_spec();
    let params = warm(&spec, 21);
    // saturated logits: every relaxed gate is 1 up to floating error
    let open = init_maskset(&spec, &ALL_KINDS, Some(1e3)).unwrap();
    let relaxed = open.relax();
    let cond = Condition::neutral(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0: Vec<f64> = (0..spec.latent_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();

    let v_masked = velocity(&params, Some(&relaxed), &z0, 0.3, &cond).unwrap();
    let v_plain = velocity(&params, None, &z0, 0.3, &cond).unwrap();
    let v_err = v_masked
        .iter()
        .zip(v_plain.iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let z_masked = euler_sample(&params, Some(&relaxed), &z0, 6, &cond).unwrap();
    let z_plain = euler_sample(&params, None, &z0, 6, &cond).unwrap();
    let z_err = z_masked
        .iter()
        .zip(z_plain.iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    // objective decomposition: total(β) = reconstruction + β·penalty exactly
    let ref_params = warm(&spec, 22);
    let maskset = init_maskset(&spec, &ALL_KINDS, None).unwrap();
    let conds: Vec<Condition> = (0..4).map(Condition::neutral).collect();
    let beta = 2.0;
    let parts = pruning_objective_grad(
        &ref_params,
        &params,
        &maskset,
        &conds,
        beta,
        3,
        17,
        BackpropMode::RetainAll,
        None,
        None,
    )
    .unwrap();
    let total = pruning_objective(&ref_params, &params, &maskset, &conds, beta, 3, 17).unwrap();
    let recon_only = pruning_objective(&ref_params, &params, &maskset, &conds, 0.0, 3, 17).unwrap();
    let d1 = (total - (parts.reconstruction + beta * parts.sparsity)).abs();
    let d2 = (total - (recon_only + beta * maskset.sparsity_penalty())).abs();

    let ok = v_err <= 1e-6 && z_err <= 1e-6 && d1 <= 1e-10 && d2 <= 1e-10;
    verdict(
        "criterion 2 (identity suite)",
        ok,
        &format!("velocity err {v_err:.2e}, z_N err {z_err:.2e}, decomposition {d1:.2e}/{d2:.2e}"),
    );
}

#[test]
fn criterion_3_memorization_baseline() {
    let base = mean(|r| r.reproduction.base);
    let untrained = mean(|r| r.reproduction.untrained);
    let all_base = count(|r| r.reproduction.base >= 0.8);
    let all_untrained = count(|r| r.reproduction.untrained < 0.02);
    let ok = all_base == SEEDS.len() && all_untrained == SEEDS.len();
    verdict(
        "criterion 3 (memorization baseline)",
        ok,
        &format!("base mean {base:.3} (>= 0.8 in {all_base}/3), untrained mean {untrained:.3}"),
    );
}

#[test]
fn criterion_4_de_memorization_trend() {
    let base = mean(|r| r.reproduction.base);
    let weak = mean(|r| r.reproduction.weak);
    let medium = mean(|r| r.reproduction.medium);
    let strong = mean(|r| r.reproduction.strong);
    let ok = base > weak && weak >= medium && medium >= strong && strong <= 0.5 * base;
    verdict(
        "criterion 4 (de-memorization trend)",
        ok,
        &format!("mean rates base {base:.3} > weak {weak:.3} >= medium {medium:.3} >= strong {strong:.3}"),
    );
}

#[test]
fn criterion_5_sparsity_trend() {
    let monotone = count(|r| {
        let total = |tag: &str| r.deactivation[tag].total;
        total("weak") <= total("medium") && total("medium") <= total("strong")
    });
    let ffn_largest = count(|r| {
        let s = &r.deactivation["strong"];
        s.ffn.unwrap_or(0.0) >= s.norm.unwrap_or(0.0)
    });
    let ok = monotone == SEEDS.len() && ffn_largest >= 2;
    verdict(
        "criterion 5 (sparsity trend)",
        ok,
        &format!(
            "total nondecreasing in {monotone}/3 seeds, ffn >= norm at strong in {ffn_largest}/3"
        ),
    );
}

#[test]
fn criterion_6_embedding_decoupling() {
    let trigger = mean(|r| r.decoupling.trigger_base_vs_medium);
    let neutral = mean(|r| r.decoupling.neutral_base_vs_medium);
    let ok = trigger - neutral >= 0.15 && neutral <= 0.7;
    verdict(
        "criterion 6 (embedding decoupling)",
        ok,
        &format!(
            "trigger score {trigger:.3} - neutral score {neutral:.3} = {:.3}",
            trigger - neutral
        ),
    );
}

#[test]
fn criterion_7_magnitude_shift() {
    let closer =
        count(|r| r.magnitude.trigger_medium_vs_neutral < r.magnitude.trigger_base_vs_neutral);
    let ok = closer >= 2;
    verdict(
        "criterion 7 (magnitude shift)",
        ok,
        &format!(
            "pruned-trigger shift below base-trigger shift in {closer}/3 seeds (means {:.1} vs {:.1})",
            mean(|r| r.magnitude.trigger_medium_vs_neutral),
            mean(|r| r.magnitude.trigger_base_vs_neutral)
        ),
    );
}

#[test]
fn criterion_8_quality_and_retraining() {
    let base = mean(|r| r.quality.base);
    let strong = mean(|r| r.quality.strong);
    let retrained = mean(|r| r.quality.strong_retrained);
    let degradation = strong - base;
    let residual = retrained - base;
    let rate_rise = mean(|r| r.reproduction.strong_retrained) - mean(|r| r.reproduction.strong);
    let ok = degradation > 0.0 && residual <= 0.5 * degradation && rate_rise <= 0.05;
    verdict(
        "criterion 8 (quality / retraining)",
        ok,
        &format!(
            "frechet {base:.2} -> {strong:.2} -> {retrained:.2} (residual {residual:.2} of {degradation:.2}), rate rise {rate_rise:.3}"
        ),
    );
}

#[test]
fn criterion_9_attention_only_ablation() {
    let weaker = count(|r| {
        let full = r.reproduction.base - r.reproduction.medium;
        let attn = r.reproduction.base - r.reproduction.attn_medium;
        attn < full
    });
    let ok = weaker >= 2;
    verdict(
        "criterion 9 (attention-only ablation)",
        ok,
        &format!("attn-only reduction smaller than ffn+norm in {weaker}/3 seeds"),
    );
}

#[test]
fn criterion_10_engineering_determinism() {
    // fresh-directory rerun of seed 0 reproduces logs and ratios byte-exactly
    let first = PipelinePaths::new(FIXTURE.dirs[0].path());
    let rerun_dir = TempDir::new().unwrap();
    let cfg = RunConfig::default().with_seed(SEEDS[0]);
    run_pipeline(&cfg, rerun_dir.path()).unwrap();
    let rerun = PipelinePaths::new(rerun_dir.path());
    let mut files_equal = true;
    for tag in ["weak", "medium", "strong", "attn_medium"] {
        files_equal &= fs::read(first.deactivation(tag)).unwrap()
            == fs::read(rerun.deactivation(tag)).unwrap();
        files_equal &=
            fs::read(first.prune_log(tag)).unwrap() == fs::read(rerun.prune_log(tag)).unwrap();
    }
    files_equal &= fs::read(first.dir.join("train_base.csv")).unwrap()
        == fs::read(rerun.dir.join("train_base.csv")).unwrap();

    // checkpoint round-trip is byte-exact
    let model = load_model(&first.base()).unwrap();
    let resaved = rerun_dir.path().join("roundtrip.ckpt");
    save_model(&resaved, &model).unwrap();
    let blob_equal =
        fs::read(blob_path(&first.base())).unwrap() == fs::read(blob_path(&resaved)).unwrap();

    // recompute-mode gradients agree with retain-all within 1e-9
    let spec = tiny_spec();
    let params = warm(&spec, 31);
    let ref_params = warm(&spec, 32);
    let maskset = init_maskset(&spec, &[MaskKind::Ffn, MaskKind::Norm], None).unwrap();
    let conds: Vec<Condition> = (0..3).map(Condition::neutral).collect();
    let mut g_retain = maskset.logits.zeros_like();
    let mut g_recompute = maskset.logits.zeros_like();
    for (mode, out) in [
        (BackpropMode::RetainAll, &mut g_retain),
        (BackpropMode::Recompute, &mut g_recompute),
    ] {
        pruning_objective_grad(
            &ref_params,
            &params,
            &maskset,
            &conds,
            2.0,
            3,
            13,
            mode,
            Some(out),
            None,
        )
        .unwrap();
    }
    let mut grad_err = 0.0f64;
    for (a, b) in g_retain.arrays().zip(g_recompute.arrays()) {
        for (&x, &y) in a.iter().zip(b.iter()) {
            grad_err = grad_err.max((x - y).abs());
        }
    }
    // sampler adjoint agrees between modes as well
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0: Vec<f64> = (0..spec.latent_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let d_zn = vec![1.0; spec.latent_dim];
    let cond = Condition::neutral(1);
    let mut dz = Vec::new();
    for mode in [BackpropMode::RetainAll, BackpropMode::Recompute] {
        let tape = sample_with_tape(&params, None, &z0, 4, &cond, mode).unwrap();
        let mut dp = params.zeros_like();
        let (d_z0, _) = tape.backward(&params, None, &d_zn, &mut dp, None).unwrap();
        dz.push(d_z0);
    }
    let adjoint_err = dz[0]
        .iter()
        .zip(dz[1].iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let ok = files_equal && blob_equal && grad_err <= 1e-9 && adjoint_err <= 1e-9;
    verdict(
        "criterion 10 (engineering determinism)",
        ok,
        &format!(
            "logs byte-equal {files_equal}, checkpoint byte-equal {blob_equal}, mode err {grad_err:.2e}/{adjoint_err:.2e}"
        ),
    );
}
