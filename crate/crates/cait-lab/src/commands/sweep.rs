//! `sweep`: a strategy x depth x seed comparison matrix on the toy task.

use std::fs;

use cait_core::blocks;
use cait_core::cait::{CaitConfig, CaitModel};
use cait_core::data::{synthetic, SyntheticSpec};
use cait_core::rng::{streams, SeedRng};
use cait_core::train::{train_run, TrainConfig};

use crate::checkpoint::config_to_kv;
use crate::cli::SweepArgs;
use crate::export::{self, SweepRow};
use crate::manifest::RunManifest;
use crate::presets::parse_strategy;
use crate::{LabError, Result};

fn cell_config(depth: usize, strategy_name: &str, args: &SweepArgs) -> Result<CaitConfig> {
    let mut cfg = CaitConfig::toy(depth)?;
    let epsilon = blocks::default_epsilon(depth)?;
    cfg.epsilon = epsilon;
    let (strategy, pre_norm) = parse_strategy(strategy_name, epsilon, false, args.allow_divergent)?;
    cfg.strategy = strategy;
    cfg.pre_norm = pre_norm;
    cfg.drop_rate = match args.drop_rate {
        Some(r) => r,
        None => blocks::default_drop_rate(depth, 0.0)?,
    };
    Ok(cfg)
}

fn run_cell(cfg: &CaitConfig, seed: u64, args: &SweepArgs) -> Result<(CaitModel, SweepRow)> {
    let data = synthetic(&SyntheticSpec {
        seed,
        n: args.samples,
        classes: cfg.num_classes,
        height: 64,
        width: 64,
        channels: cfg.in_channels,
        patch_size: cfg.patch_size,
    })?;
    let mut model = CaitModel::init(cfg.clone(), &mut SeedRng::new(seed, streams::MODEL_INIT))?;
    let mut train = TrainConfig::desk(seed);
    train.epochs = args.epochs;
    train.batch_size = args.batch_size;
    train.base_lr = args.lr;
    train.snapshot_period = 0;
    let report = train_run(&mut model, &train, &data)?;
    let row = SweepRow {
        strategy: cfg.strategy.name().to_string(),
        depth: cfg.sa_depth,
        seed,
        drop_rate: cfg.drop_rate,
        final_loss: report.final_loss,
        final_accuracy: report.final_accuracy,
        diverged: report.diverged,
        error: String::new(),
    };
    Ok((model, row))
}

pub fn run(args: &SweepArgs) -> Result<()> {
    let strategies: Vec<&str> = args
        .strategies
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let depths = args
        .depths
        .split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| LabError::Usage(format!("bad depth `{d}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if strategies.is_empty() || depths.is_empty() || args.seeds == 0 {
        return Err(LabError::Usage(
            "sweep needs at least one strategy, depth, and seed".into(),
        ));
    }

    let grid_kv: Vec<(String, String)> = vec![
        ("strategies".into(), strategies.join(",")),
        (
            "depths".into(),
            depths
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("seeds".into(), args.seeds.to_string()),
        ("seed_base".into(), args.seed_base.to_string()),
        ("epochs".into(), args.epochs.to_string()),
        ("batch_size".into(), args.batch_size.to_string()),
        ("lr".into(), format!("{}", args.lr)),
        ("samples".into(), args.samples.to_string()),
        (
            "drop_rate".into(),
            args.drop_rate.map(|r| format!("{r}")).unwrap_or_else(|| "per-depth".into()),
        ),
    ];
    let hash_src: Vec<u8> = grid_kv
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect::<String>()
        .into_bytes();
    RunManifest::new("sweep", args.seed_base, grid_kv, &[&hash_src], &args.out)
        .write(&args.out)?;

    let mut rows = Vec::new();
    for strategy in &strategies {
        for &depth in &depths {
            for s in 0..args.seeds {
                let seed = args.seed_base + s;
                let cell = match cell_config(depth, strategy, args) {
                    Ok(cfg) => cfg,
                    Err(e) => {
                        rows.push(SweepRow {
                            strategy: strategy.to_string(),
                            depth,
                            seed,
                            drop_rate: f64::NAN,
                            final_loss: f64::NAN,
                            final_accuracy: f64::NAN,
                            diverged: false,
                            error: e.to_string().replace(',', ";"),
                        });
                        continue;
                    }
                };
                let cell_dir = args.out.join(format!("{strategy}-d{depth}-s{seed}"));
                fs::create_dir_all(&cell_dir).map_err(|e| LabError::io(&cell_dir, e))?;
                RunManifest::new(
                    "sweep-cell",
                    seed,
                    config_to_kv(&cell),
                    &[format!("{strategy}/{depth}/{seed}").as_bytes()],
                    &cell_dir,
                )
                .write(&cell_dir)?;

                match run_cell(&cell, seed, args) {
                    Ok((_, row)) => {
                        let report_path = cell_dir.join("cell.csv");
                        let text = format!(
                            "final_loss,final_accuracy,diverged\n{},{},{}\n",
                            row.final_loss, row.final_accuracy, row.diverged
                        );
                        fs::write(&report_path, text)
                            .map_err(|e| LabError::io(&report_path, e))?;
                        rows.push(row);
                    }
                    Err(e) => rows.push(SweepRow {
                        strategy: strategy.to_string(),
                        depth,
                        seed,
                        drop_rate: cell.drop_rate,
                        final_loss: f64::NAN,
                        final_accuracy: f64::NAN,
                        diverged: true,
                        error: e.to_string().replace(',', ";"),
                    }),
                }
            }
        }
    }

    export::write_sweep(&args.out.join("sweep.csv"), &rows)?;
    for row in &rows {
        println!(
            "sweep: {} depth {} seed {} -> loss {} diverged {}{}",
            row.strategy,
            row.depth,
            row.seed,
            row.final_loss,
            row.diverged,
            if row.error.is_empty() {
                String::new()
            } else {
                format!(" error {}", row.error)
            }
        );
    }
    Ok(())
}
