//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line (visible with `--nocapture`). Run with
//! `cargo test -p cait-lab --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use cait_core::blocks::{default_epsilon, ResidualStrategy, Stage};
use cait_core::cait::{
    count_flops, count_params, model_preset, CaitConfig, CaitModel, ClsPolicy, ForwardCtx, PRESETS,
};
use cait_core::data::{synthetic, SyntheticSpec};
use cait_core::rng::{streams, SeedRng};
use cait_core::tensor::gradcheck::{registry_covers_all_ops, run_registry, FD_STEP, FD_TOLERANCE};
use cait_core::tensor::{rel_err, Tape, Tensor};
use cait_core::train::{retrain_fixed, train_run, TrainConfig};

fn pass(criterion: &str, detail: String) {
    println!("acceptance {criterion}: PASS ({detail})");
}

fn within(value: f64, reference: f64, frac: f64) -> bool {
    (value - reference).abs() <= frac * reference
}

fn toy_model(depth: usize, strategy: ResidualStrategy, seed: u64) -> CaitModel {
    let mut cfg = CaitConfig::toy(depth).unwrap();
    cfg.strategy = strategy;
    cfg.drop_rate = 0.0;
    CaitModel::init(cfg, &mut SeedRng::new(seed, streams::MODEL_INIT)).unwrap()
}

// 1. Every differentiable op matches central finite differences
//    (float64, step 1e-5) below 1e-6 relative error on >= 3 shapes,
//    and the whole suite finishes inside 60 s.
#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    assert!(registry_covers_all_ops());
    let results = run_registry(11, FD_STEP).unwrap();
    assert!(results.len() >= 20);
    let mut worst = 0.0f64;
    for r in &results {
        assert!(
            r.rel_err < FD_TOLERANCE,
            "{}: rel err {} >= {FD_TOLERANCE}",
            r.name,
            r.rel_err
        );
        worst = worst.max(r.rel_err);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "suite took {elapsed:?}");
    pass(
        "1 gradient suite",
        format!("{} ops, worst rel err {worst:.2e}, {elapsed:?}", results.len()),
    );
}

// 2. FLOP/parameter accounting reproduces the published tables.
#[test]
fn criterion_02_accounting() {
    let mut deit_s = model_preset("S-24").unwrap();
    deit_s.sa_depth = 12;
    deit_s.ca_depth = 0;
    deit_s.heads = 6;
    deit_s.cls_policy = ClsPolicy::InsertAtLayer(0);
    deit_s.strategy = ResidualStrategy::PreNormBaseline;
    let deit_flops = count_flops(&deit_s, 224).unwrap().total() as f64;
    assert!(within(deit_flops, 4.6e9, 0.05), "DeiT-S layout: {deit_flops}");

    let mut split = deit_s.clone();
    split.sa_depth = 9;
    split.ca_depth = 3;
    split.cls_policy = ClsPolicy::ClassAttentionStage;
    let split_flops = count_flops(&split, 224).unwrap().total() as f64;
    assert!(within(split_flops, 3.6e9, 0.05), "9+3 split: {split_flops}");

    let xxs = model_preset("XXS-24").unwrap();
    let xxs_params = count_params(&xxs).total() as f64;
    let xxs_flops = count_flops(&xxs, 224).unwrap().total() as f64;
    assert!(within(xxs_params, 12.0e6, 0.03), "XXS-24 params: {xxs_params}");
    assert!(within(xxs_flops, 2.5e9, 0.05), "XXS-24 flops: {xxs_flops}");

    let s36 = model_preset("S-36").unwrap();
    let s36_params = count_params(&s36).total() as f64;
    let s36_flops = count_flops(&s36, 224).unwrap().total() as f64;
    assert!(within(s36_params, 68.2e6, 0.03), "S-36 params: {s36_params}");
    assert!(within(s36_flops, 13.9e9, 0.05), "S-36 flops: {s36_flops}");

    pass(
        "2 accounting",
        format!(
            "DeiT-S {deit_flops:.3e}, 9+3 {split_flops:.3e}, XXS-24 {xxs_params:.3e}p/{xxs_flops:.3e}f, S-36 {s36_params:.3e}p/{s36_flops:.3e}f"
        ),
    );
}

// 3. Hyper-parameter defaults match the published table for all ten
//    presets, and default_epsilon follows the three-regime depth rule.
#[test]
fn criterion_03_hyperparameter_defaults() {
    let table: &[(&str, f64, f64)] = &[
        ("XXS-24", 0.05, 1e-5),
        ("XXS-36", 0.1, 1e-6),
        ("XS-24", 0.05, 1e-5),
        ("XS-36", 0.1, 1e-6),
        ("S-24", 0.1, 1e-5),
        ("S-36", 0.2, 1e-6),
        ("S-48", 0.3, 1e-6),
        ("M-24", 0.2, 1e-5),
        ("M-36", 0.3, 1e-6),
        ("M-48", 0.4, 1e-6),
    ];
    assert_eq!(PRESETS.len(), table.len());
    for &(name, dr, eps) in table {
        let cfg = model_preset(name).unwrap();
        assert_eq!(cfg.drop_rate, dr, "{name} drop rate");
        assert_eq!(cfg.epsilon, eps, "{name} epsilon");
    }
    for depth in 1..=18 {
        assert_eq!(default_epsilon(depth).unwrap(), 0.1);
    }
    for depth in 19..=24 {
        assert_eq!(default_epsilon(depth).unwrap(), 1e-5);
    }
    for depth in [25, 36, 48, 96] {
        assert_eq!(default_epsilon(depth).unwrap(), 1e-6);
    }
    pass("3 hyper-parameter defaults", "10 presets + 3-regime rule".into());
}

// 4. Folding the learned diagonals into the output projections changes
//    forward outputs by < 1e-10 relative error on 10 random inputs.
#[test]
fn criterion_04_fold_in_equivalence() {
    let data = synthetic(&SyntheticSpec::toy(31, 16, 2)).unwrap();
    let mut model = toy_model(2, ResidualStrategy::layerscale(0.1), 31);
    let mut tc = TrainConfig::desk(31);
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.snapshot_period = 0;
    train_run(&mut model, &tc, &data).unwrap();

    let folded = model.fold_layerscale().unwrap();
    let mut rng = SeedRng::new(32, streams::DATA);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let patches = Tensor::from_vec(
            vec![model.config.patch_count, model.config.patch_dim()],
            rng.uniform_vec(model.config.patch_count * model.config.patch_dim(), 0.0, 1.0),
        )
        .unwrap();
        let (a, _) = model.infer(&patches, false).unwrap();
        let (b, _) = folded.infer(&patches, false).unwrap();
        worst = worst.max(rel_err(&a, &b));
    }
    assert!(worst < 1e-10, "worst rel err {worst}");
    pass("4 fold-in equivalence", format!("10 inputs, worst rel err {worst:.2e}"));
}

// 5. Attention-cost scaling exponent over p in {16, 64, 256} is
//    1.0 +/- 0.15 for CA layers and 2.0 +/- 0.2 for SA layers.
#[test]
fn criterion_05_ca_complexity() {
    fn fit_slope(points: &[(f64, f64)]) -> f64 {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    }
    let cfg = model_preset("S-36").unwrap();
    let mut sa_pts = Vec::new();
    let mut ca_pts = Vec::new();
    for (res, p) in [(64usize, 16.0f64), (128, 64.0), (256, 256.0)] {
        let f = count_flops(&cfg, res).unwrap();
        let sa = f
            .layers
            .iter()
            .find(|l| l.stage == Stage::SelfAttention)
            .unwrap()
            .attention as f64;
        let ca = f
            .layers
            .iter()
            .find(|l| l.stage == Stage::ClassAttention)
            .unwrap()
            .attention as f64;
        sa_pts.push((p.ln(), sa.ln()));
        ca_pts.push((p.ln(), ca.ln()));
    }
    let sa_slope = fit_slope(&sa_pts);
    let ca_slope = fit_slope(&ca_pts);
    assert!((sa_slope - 2.0).abs() <= 0.2, "sa slope {sa_slope}");
    assert!((ca_slope - 1.0).abs() <= 0.15, "ca slope {ca_slope}");
    pass(
        "5 class-attention complexity",
        format!("ca slope {ca_slope:.3}, sa slope {sa_slope:.3}"),
    );
}

// 6. The class-attention stage leaves patch tokens bit-identical.
#[test]
fn criterion_06_patch_freeze() {
    let model = toy_model(3, ResidualStrategy::layerscale(0.1), 41);
    let mut rng = SeedRng::new(41, streams::DATA);
    for _ in 0..5 {
        let patches = Tensor::from_vec(
            vec![model.config.patch_count, model.config.patch_dim()],
            rng.uniform_vec(model.config.patch_count * model.config.patch_dim(), 0.0, 1.0),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape).unwrap();
        let mut ctx = ForwardCtx::evaluation();
        let out = model.forward(&mut tape, &bind, &patches, &mut ctx).unwrap();
        let ca_in = out.ca_input_patches.expect("class-attention stage");
        let a = tape.value(out.sa_out).data();
        let b = tape.value(ca_in).data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    pass("6 patch freeze", "5 inputs, bit-identical patch tokens".into());
}

// 7. Every recorded attention row sums to 1 +/- 1e-10 over a 50-image
//    probe.
#[test]
fn criterion_07_attention_normalization() {
    let model = toy_model(2, ResidualStrategy::layerscale(0.1), 51);
    let data = synthetic(&SyntheticSpec::toy(51, 50, 2)).unwrap();
    let mut rows = 0usize;
    let mut worst = 0.0f64;
    for i in 0..data.len() {
        let patches = data.patches(i, model.config.patch_size).unwrap();
        let (_, records) = model.infer(&patches, true).unwrap();
        assert!(!records.is_empty());
        for rec in records {
            for s in rec.row_sums() {
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    assert!(worst < 1e-10, "worst |sum - 1| = {worst}");
    pass(
        "7 attention normalization",
        format!("50 images, {rows} rows, worst |sum-1| {worst:.2e}"),
    );
}

// 8. Qualitative convergence ordering at toy depth 24 with no stochastic
//    depth: LayerScale's final training loss is <= the pre-norm
//    baseline's on at least 4 of 5 seeds, the baseline's divergence-flag
//    rate is >= LayerScale's, and the whole comparison finishes inside
//    30 minutes.
#[test]
fn criterion_08_convergence_ordering() {
    let start = Instant::now();
    let eps = default_epsilon(24).unwrap();
    let mut wins = 0usize;
    let mut base_divergences = 0usize;
    let mut ls_divergences = 0usize;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let mut finals = Vec::new();
        for strategy in [
            ResidualStrategy::PreNormBaseline,
            ResidualStrategy::layerscale(eps),
        ] {
            let data = synthetic(&SyntheticSpec::toy(seed, 64, 2)).unwrap();
            let mut model = toy_model(24, strategy, seed);
            assert_eq!(model.config.drop_rate, 0.0);
            let mut tc = TrainConfig::desk(seed);
            tc.epochs = 22;
            tc.base_lr = 3e-3;
            tc.batch_size = 8;
            tc.snapshot_period = 0;
            let report = train_run(&mut model, &tc, &data).unwrap();
            finals.push((report.final_loss, report.diverged));
        }
        let (base_loss, base_div) = finals[0];
        let (ls_loss, ls_div) = finals[1];
        if ls_loss <= base_loss {
            wins += 1;
        }
        base_divergences += usize::from(base_div);
        ls_divergences += usize::from(ls_div);
        lines.push(format!("seed {seed}: baseline {base_loss:.4} vs layerscale {ls_loss:.4}"));
    }
    let elapsed = start.elapsed();
    for l in &lines {
        println!("  {l}");
    }
    assert!(wins >= 4, "layerscale won only {wins}/5 seeds");
    assert!(
        base_divergences >= ls_divergences,
        "baseline {base_divergences} vs layerscale {ls_divergences} divergences"
    );
    assert!(elapsed.as_secs() < 30 * 60, "took {elapsed:?}");
    pass(
        "8 convergence ordering",
        format!(
            "layerscale wins {wins}/5, divergences {base_divergences} vs {ls_divergences}, {elapsed:?}"
        ),
    );
}

// 9. Frozen-diagonal retraining keeps the diagonals bit-identical and
//    converges (non-divergent) at toy depth 12.
#[test]
fn criterion_09_fixed_diagonal_retraining() {
    let data = synthetic(&SyntheticSpec::toy(61, 64, 2)).unwrap();
    let mut cfg = CaitConfig::toy(12).unwrap();
    cfg.strategy = ResidualStrategy::layerscale(cfg.epsilon);
    cfg.drop_rate = 0.0;
    let mut source =
        CaitModel::init(cfg.clone(), &mut SeedRng::new(61, streams::MODEL_INIT)).unwrap();
    let mut tc = TrainConfig::desk(61);
    tc.epochs = 8;
    tc.snapshot_period = 0;
    let first = train_run(&mut source, &tc, &data).unwrap();
    assert!(!first.diverged);

    let diagonals: BTreeMap<String, Vec<f64>> = source
        .scale_param_names()
        .into_iter()
        .map(|name| {
            let id = source.store.find(&name).unwrap();
            (name, source.store.get(id).value.data().to_vec())
        })
        .collect();
    assert!(!diagonals.is_empty());

    let mut rtc = TrainConfig::desk(62);
    rtc.epochs = 8;
    rtc.snapshot_period = 0;
    let (model, report) = retrain_fixed(&cfg, &diagonals, &rtc, &data).unwrap();
    assert!(!report.diverged, "retraining diverged");
    for (name, want) in &diagonals {
        let id = model.store.find(name).unwrap();
        let p = model.store.get(id);
        assert!(!p.trainable);
        assert!(
            p.value
                .data()
                .iter()
                .zip(want)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name} changed during retraining"
        );
    }
    pass(
        "9 fixed-diagonal retraining",
        format!(
            "{} diagonals bit-identical, final accuracy {:.3}",
            diagonals.len(),
            report.final_accuracy
        ),
    );
}

// 10. Identical seeds give bit-identical checkpoints and CSV outputs
//     across two consecutive CLI runs.
#[test]
fn criterion_10_reproducibility() {
    let dir = std::env::temp_dir().join(format!("cait-acceptance-10-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    for sub in ["a", "b"] {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_cait-lab"))
            .args([
                "train",
                "--preset",
                "toy-4",
                "--strategy",
                "layerscale",
                "--seed",
                "7",
                "--epochs",
                "3",
                "--data",
                "synthetic:n=32",
                "--out",
            ])
            .arg(dir.join(sub))
            .output()
            .unwrap();
        assert!(status.status.success());
    }
    let mut compared = Vec::new();
    for name in ["checkpoint.ckpt", "report.csv", "steps.csv", "ratios.csv"] {
        let a = fs::read(dir.join("a").join(name)).unwrap();
        let b = fs::read(dir.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        compared.push(name);
    }
    fs::remove_dir_all(&dir).unwrap();
    pass(
        "10 reproducibility",
        format!("bit-identical: {}", compared.join(", ")),
    );
}
