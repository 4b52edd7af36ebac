//! `verify`: numerical self-checks, one pass/fail line per suite.

use cait_core::cait::{CaitConfig, CaitModel};
use cait_core::rng::{streams, SeedRng};
use cait_core::tensor::gradcheck::{registry_covers_all_ops, run_registry, FD_STEP, FD_TOLERANCE};
use cait_core::tensor::{rel_err, Tape, Tensor};
use cait_core::blocks::StochasticDepthSchedule;

use crate::checkpoint::{example_patches, Checkpoint};
use crate::cli::VerifyArgs;
use crate::manifest::RunManifest;
use crate::{LabError, Result};

pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn toy_model(seed: u64) -> Result<CaitModel> {
    let cfg = CaitConfig::toy(2)?;
    Ok(CaitModel::init(
        cfg,
        &mut SeedRng::new(seed, streams::MODEL_INIT),
    )?)
}

fn suite_tensor_gradients(seed: u64, mutate: bool) -> Result<SuiteResult> {
    let start = std::time::Instant::now();
    if !registry_covers_all_ops() {
        return Ok(SuiteResult {
            name: "tensor-gradients",
            pass: false,
            detail: "finite-difference registry does not cover the op set".into(),
        });
    }
    let results = run_registry(seed, FD_STEP)?;
    let mut worst = 0.0f64;
    let mut worst_op = String::new();
    for r in &results {
        if r.rel_err > worst {
            worst = r.rel_err;
            worst_op = r.name.clone();
        }
    }
    if mutate {
        worst += 1e-3;
        worst_op = "induced".into();
    }
    Ok(SuiteResult {
        name: "tensor-gradients",
        pass: worst < FD_TOLERANCE,
        detail: format!(
            "{} ops, worst rel err {worst:.3e} ({worst_op}), {:?}",
            results.len(),
            start.elapsed()
        ),
    })
}

fn suite_attention_normalization(seed: u64, mutate: bool) -> Result<SuiteResult> {
    let model = toy_model(seed)?;
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for i in 0..8u64 {
        let patches = example_patches(&model.config, seed + i);
        let (_, records) = model.infer(&patches, true)?;
        for rec in records {
            for s in rec.row_sums() {
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    if mutate {
        worst += 1e-3;
    }
    Ok(SuiteResult {
        name: "attention-normalization",
        pass: worst < 1e-10,
        detail: format!("{rows} rows, worst |sum - 1| = {worst:.3e}"),
    })
}

fn suite_checkpoint_roundtrip(seed: u64, mutate: bool) -> Result<SuiteResult> {
    let model = toy_model(seed)?;
    let ck = Checkpoint::from_model(&model, SeedRng::new(seed, streams::TRAIN).state());
    let mut bytes = ck.encode();
    if mutate {
        // flip one payload byte; the restored model must differ
        let idx = bytes.len() - 9;
        bytes[idx] ^= 0x40;
    }
    let restored = Checkpoint::decode(&bytes)?.to_model()?;
    let mut identical = true;
    for i in 0..4u64 {
        let patches = example_patches(&model.config, seed + 100 + i);
        let (a, _) = model.infer(&patches, false)?;
        let (b, _) = restored.infer(&patches, false)?;
        identical &= a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    Ok(SuiteResult {
        name: "checkpoint-roundtrip",
        pass: identical,
        detail: "4 probe inputs, bit-exact logits".into(),
    })
}

fn suite_layerscale_fold(seed: u64, mutate: bool) -> Result<SuiteResult> {
    let mut model = toy_model(seed)?;
    let mut rng = SeedRng::new(seed + 1, streams::MODEL_INIT);
    for name in model.scale_param_names() {
        let id = model.store.find(&name).expect("scale param");
        let n = model.store.get(id).value.numel();
        let vals = rng.uniform_vec(n, -0.5, 0.5);
        model.store.get_mut(id).value.data_mut().copy_from_slice(&vals);
    }
    let folded = model.fold_layerscale()?;
    let mut worst = 0.0f64;
    for i in 0..5u64 {
        let patches = example_patches(&model.config, seed + 200 + i);
        let (a, _) = model.infer(&patches, false)?;
        let (b, _) = folded.infer(&patches, false)?;
        worst = worst.max(rel_err(&a, &b));
    }
    if mutate {
        worst += 1e-9;
    }
    Ok(SuiteResult {
        name: "layerscale-fold",
        pass: worst < 1e-10,
        detail: format!("5 probe inputs, worst rel err {worst:.3e}"),
    })
}

fn suite_stochastic_depth(seed: u64, mutate: bool) -> Result<SuiteResult> {
    let sched = StochasticDepthSchedule::uniform(0.2)?;
    let mut rng = SeedRng::new(seed, streams::TRAIN);
    let n = 100_000usize;
    let mut dropped = 0usize;
    let mut sum = 0.0;
    for _ in 0..n {
        let g = sched.gate(&mut rng, true);
        if g == 0.0 {
            dropped += 1;
        }
        sum += g;
    }
    let mut freq = dropped as f64 / n as f64;
    let mean = sum / n as f64;
    if mutate {
        freq += 0.02;
    }
    Ok(SuiteResult {
        name: "stochastic-depth",
        pass: (freq - 0.2).abs() < 0.01 && (mean - 1.0).abs() < 0.01,
        detail: format!("drop freq {freq:.4}, mean gate {mean:.4} over {n} draws"),
    })
}

fn suite_softmax_normalization(seed: u64, mutate: bool) -> Result<SuiteResult> {
    let mut rng = SeedRng::new(seed, streams::DATA);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let rows = 1 + rng.index(6);
        let cols = 1 + rng.index(9);
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::from_vec(
            vec![rows, cols],
            rng.normal_vec(rows * cols, 0.0, 5.0),
        )?)?;
        let s = tape.softmax(t)?;
        for row in tape.value(s).data().chunks(cols) {
            let sum: f64 = row.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            if row.iter().any(|v| *v < 0.0) {
                worst = worst.max(1.0);
            }
        }
    }
    if mutate {
        worst += 1e-10;
    }
    Ok(SuiteResult {
        name: "softmax-normalization",
        pass: worst < 1e-12,
        detail: format!("20 random tensors, worst |sum - 1| = {worst:.3e}"),
    })
}

pub fn run(args: &VerifyArgs) -> Result<()> {
    RunManifest::new(
        "verify",
        args.seed,
        vec![
            ("seed".into(), args.seed.to_string()),
            (
                "mutate".into(),
                args.mutate.clone().unwrap_or_default(),
            ),
        ],
        &[args.seed.to_string().as_bytes()],
        &args.out,
    )
    .write(&args.out)?;

    let mutate = |name: &str| args.mutate.as_deref() == Some(name);
    let suites: Vec<SuiteResult> = vec![
        suite_tensor_gradients(args.seed, mutate("tensor-gradients"))?,
        suite_attention_normalization(args.seed, mutate("attention-normalization"))?,
        suite_checkpoint_roundtrip(args.seed, mutate("checkpoint-roundtrip"))?,
        suite_layerscale_fold(args.seed, mutate("layerscale-fold"))?,
        suite_stochastic_depth(args.seed, mutate("stochastic-depth"))?,
        suite_softmax_normalization(args.seed, mutate("softmax-normalization"))?,
    ];

    let mut failed = Vec::new();
    for s in &suites {
        println!(
            "suite {}: {} ({})",
            s.name,
            if s.pass { "PASS" } else { "FAIL" },
            s.detail
        );
        if !s.pass {
            failed.push(s.name);
        }
    }
    if !failed.is_empty() {
        return Err(LabError::VerifyFailed(failed.join(", ")));
    }
    Ok(())
}
