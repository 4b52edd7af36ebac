//! `train`: resolve flags, write the manifest, run, persist outputs.

use std::fs;
use std::path::Path;

use cait_core::cait::{CaitConfig, CaitModel};
use cait_core::rng::{streams, SeedRng};
use cait_core::train::{retrain_fixed, train_run, RunReport, TrainConfig};

use crate::checkpoint::{config_to_kv, Checkpoint};
use crate::cli::TrainArgs;
use crate::dataset_io::{load_dataset, parse_data_spec, DataSpec};
use crate::manifest::RunManifest;
use crate::presets::{
    apply_cls_policy, default_epsilon_for, parse_cls_policy, parse_strategy, resolve_preset,
};
use crate::{export, LabError, Result};

/// Everything a run needs, with every default materialized.
pub struct ResolvedTrain {
    pub model: CaitConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    /// Checkpoint supplying frozen channel-scaling diagonals, if any.
    pub retrain_source: Option<Checkpoint>,
}

pub fn resolve(args: &TrainArgs) -> Result<ResolvedTrain> {
    let retrain_source = match &args.retrain_from {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };

    // Architecture comes from the source checkpoint when retraining,
    // otherwise from the preset.
    let mut model = match &retrain_source {
        Some(ck) => ck.config()?,
        None => resolve_preset(&args.preset)?,
    };

    if retrain_source.is_none() {
        if let Some(policy) = &args.cls_policy {
            apply_cls_policy(&mut model, parse_cls_policy(policy)?);
        }
        let epsilon = match args.epsilon {
            Some(e) => e,
            None => default_epsilon_for(&model)?,
        };
        model.epsilon = epsilon;
        let (strategy, pre_norm) = parse_strategy(
            &args.strategy,
            epsilon,
            args.epsilon.is_some(),
            args.allow_divergent,
        )?;
        model.strategy = strategy;
        model.pre_norm = pre_norm;
    }

    let drop_rate = args.drop_rate.unwrap_or(model.drop_rate) + args.drop_rate_adjust;
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(LabError::Usage(format!(
            "resolved drop rate {drop_rate} outside [0, 1)"
        )));
    }
    model.drop_rate = drop_rate;
    model.validate()?;

    let mut train = TrainConfig::desk(args.seed);
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.lr {
        train.base_lr = v;
    }
    if let Some(v) = args.warmup_epochs {
        train.warmup_epochs = v;
    }
    if let Some(v) = args.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = args.label_smoothing {
        train.label_smoothing = v;
    }
    if let Some(v) = args.snapshot_period {
        train.snapshot_period = v;
    }
    train.validate()?;

    let defaults = super::default_synthetic(&model, args.seed, 64)?;
    let grid = super::square_grid(&model)?;
    let dims = (grid * model.patch_size, grid * model.patch_size, model.in_channels);
    let data = match &args.data {
        Some(spec) => parse_data_spec(spec, &defaults, dims)?,
        None => DataSpec::Synthetic(defaults),
    };

    Ok(ResolvedTrain {
        model,
        train,
        data,
        retrain_source,
    })
}

pub fn manifest_config(resolved: &ResolvedTrain, args: &TrainArgs) -> Vec<(String, String)> {
    let mut kv = config_to_kv(&resolved.model);
    let t = &resolved.train;
    for (k, v) in [
        ("train.epochs", t.epochs.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.base_lr", format!("{}", t.base_lr)),
        ("train.warmup_epochs", t.warmup_epochs.to_string()),
        ("train.weight_decay", format!("{}", t.weight_decay)),
        ("train.label_smoothing", format!("{}", t.label_smoothing)),
        ("train.snapshot_period", t.snapshot_period.to_string()),
        ("data", resolved.data.describe()),
        (
            "retrain_from",
            args.retrain_from
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ),
    ] {
        kv.push((k.to_string(), v));
    }
    kv
}

pub fn write_outputs(out: &Path, model: &CaitModel, report: &RunReport) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let ck = Checkpoint::from_model(model, report.rng_state.clone());
    ck.save(&out.join("checkpoint.ckpt"))?;
    export::write_run_report(&out.join("report.csv"), report)?;
    export::write_step_loss(&out.join("steps.csv"), report)?;
    export::write_ratios(&out.join("ratios.csv"), &report.ratio_snapshots)?;
    Ok(())
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let resolved = resolve(args)?;
    let dataset = load_dataset(&resolved.data)?;
    if dataset.num_classes != resolved.model.num_classes {
        return Err(LabError::Usage(format!(
            "dataset has {} classes, model head expects {}",
            dataset.num_classes, resolved.model.num_classes
        )));
    }

    let config_kv = manifest_config(&resolved, args);
    let manifest_text: Vec<u8> = config_kv
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect::<String>()
        .into_bytes();
    let source_bytes = resolved
        .retrain_source
        .as_ref()
        .map(|ck| ck.encode())
        .unwrap_or_default();
    let manifest = RunManifest::new(
        "train",
        args.seed,
        config_kv,
        &[&manifest_text, resolved.data.describe().as_bytes(), &source_bytes],
        &args.out,
    );
    manifest.write(&args.out)?;

    let (model, report) = match &resolved.retrain_source {
        Some(ck) => {
            let diagonals = ck.scale_diagonals()?;
            if diagonals.is_empty() {
                return Err(LabError::Usage(
                    "source checkpoint has no channel-scaling diagonals to reuse".into(),
                ));
            }
            retrain_fixed(&resolved.model, &diagonals, &resolved.train, &dataset)?
        }
        None => {
            let mut model = CaitModel::init(
                resolved.model.clone(),
                &mut SeedRng::new(args.seed, streams::MODEL_INIT),
            )?;
            let report = train_run(&mut model, &resolved.train, &dataset)?;
            (model, report)
        }
    };

    write_outputs(&args.out, &model, &report)?;
    println!(
        "train: strategy {} depth {} final loss {} accuracy {} diverged {}",
        model.config.strategy.name(),
        model.config.depth_tag(),
        report.final_loss,
        report.final_accuracy,
        report.diverged
    );
    if report.diverged {
        return Err(LabError::Diverged(report.divergence_step));
    }
    Ok(())
}
