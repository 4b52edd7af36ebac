//! `analyze`: branch-ratio CSV, attention-map PGMs, saliency PPMs, and
//! the accounting tables, all from a checkpoint.

use std::fs;
use std::path::Path;

use cait_core::analysis::{
    branch_ratios, extract_attention, modulate, report_tables, saliency, Upsample,
};
use cait_core::cait::{count_flops_for_patches, count_params, ClsPolicy, PRESETS};
use cait_core::data::Dataset;
use cait_core::train::RatioSnapshot;

use crate::checkpoint::Checkpoint;
use crate::cli::AnalyzeArgs;
use crate::dataset_io::{load_dataset, parse_data_spec, DataSpec};
use crate::manifest::RunManifest;
use crate::{export, LabError, Result};

/// Channel-mean grayscale image, row-major `[0, 1]`.
fn grayscale(ds: &Dataset, i: usize) -> Vec<f64> {
    let img = ds.image(i);
    let hw = ds.height * ds.width;
    let mut gray = vec![0.0; hw];
    for c in 0..ds.channels {
        for (g, v) in gray.iter_mut().zip(&img[c * hw..(c + 1) * hw]) {
            *g += v;
        }
    }
    gray.iter_mut().for_each(|v| *v /= ds.channels as f64);
    gray
}

pub fn run(args: &AnalyzeArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.to_model()?;
    let cfg = model.config.clone();

    let manifest_kv = vec![
        ("checkpoint".into(), args.checkpoint.display().to_string()),
        ("image".into(), args.image.to_string()),
        ("tables".into(), args.tables.to_string()),
        (
            "upsample".into(),
            if args.bilinear { "bilinear" } else { "nearest" }.to_string(),
        ),
    ];
    let ck_bytes = ck.encode();
    RunManifest::new("analyze", 0, manifest_kv, &[&ck_bytes], &args.out).write(&args.out)?;
    let out: &Path = &args.out;

    let defaults = super::default_synthetic(&cfg, 0, (args.image + 1).max(8))?;
    let grid = super::square_grid(&cfg)?;
    let dims = (grid * cfg.patch_size, grid * cfg.patch_size, cfg.in_channels);
    let spec = match &args.data {
        Some(s) => parse_data_spec(s, &defaults, dims)?,
        None => DataSpec::Synthetic(defaults),
    };
    let ds = load_dataset(&spec)?;
    if args.image >= ds.len() {
        return Err(LabError::Usage(format!(
            "image index {} out of range for {} samples",
            args.image,
            ds.len()
        )));
    }

    // Branch ratios over a probe batch.
    let probe: Vec<_> = (0..ds.len().min(8))
        .map(|i| ds.patches(i, cfg.patch_size))
        .collect::<std::result::Result<_, _>>()?;
    let series = branch_ratios(&model, &probe)?;
    export::write_ratios(
        &out.join("branch-ratios.csv"),
        &[RatioSnapshot { epoch: 0, series }],
    )?;

    // Accounting for this model.
    let counts = count_params(&cfg);
    let flops = count_flops_for_patches(&cfg, cfg.patch_count)?;
    let accounting = format!(
        "depth,width,heads,patch_count,params,flops\n{},{},{},{},{},{}\n",
        cfg.depth_tag(),
        cfg.d,
        cfg.heads,
        cfg.patch_count,
        counts.total(),
        flops.total()
    );
    let path = out.join("model.csv");
    fs::write(&path, accounting).map_err(|e| LabError::io(&path, e))?;

    if args.tables {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
        export::write_table(&out.join("presets.csv"), &report_tables(&names)?)?;
    }

    // Attention maps and saliency need the class-attention policy.
    if matches!(cfg.cls_policy, ClsPolicy::ClassAttentionStage) {
        let patches = ds.patches(args.image, cfg.patch_size)?;
        let records = extract_attention(&model, &patches)?;
        let mut map_count = 0usize;
        for rec in &records {
            let offset = usize::from(cfg.keys_include_class);
            for h in 0..rec.heads {
                let map = &rec.map(h, 0)[offset..];
                let name = format!("attn-l{}-h{h}.pgm", rec.layer_index);
                export::write_pgm(&out.join(name), grid, grid, &export::normalized(map))?;
                map_count += 1;
            }
        }

        let mode = if args.bilinear {
            Upsample::Bilinear
        } else {
            Upsample::Nearest
        };
        let gray = grayscale(&ds, args.image);
        for rec in &records {
            let sal = saliency(
                &records,
                rec.layer_index,
                (grid, grid),
                (ds.height, ds.width),
                cfg.keys_include_class,
                mode,
                args.image,
            )?;
            let modulated = modulate(&sal.values, &gray)?;
            let rgb: Vec<(f64, f64, f64)> =
                modulated.iter().map(|v| (*v, *v, *v)).collect();
            let name = format!("saliency-l{}.ppm", rec.layer_index);
            export::write_ppm(&out.join(name), ds.width, ds.height, &rgb)?;
        }
        println!(
            "analyze: wrote {map_count} attention maps and {} saliency maps to {}",
            records.len(),
            out.display()
        );
    } else {
        println!(
            "analyze: policy {} has no class-attention maps; wrote ratios and accounting to {}",
            cfg.cls_policy.tag(),
            out.display()
        );
    }
    Ok(())
}
