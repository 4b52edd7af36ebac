//! Instrumentation over trained models: residual-branch norm ratios,
//! class-attention map extraction, saliency maps, and the
//! parameter/FLOP accounting table.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::blocks::{AttentionRecord, Stage};
use crate::cait::{count_flops, count_params, model_preset, CaitModel, ClsPolicy, ForwardCtx};
use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Tensor};

/// One residual branch's mean norm ratio over a probe batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRatioEntry {
    pub layer: usize,
    /// `sa` for attention branches, `ffn` for feed-forward branches.
    pub branch: &'static str,
    /// Mean of ||weighted branch output||_2 / ||block input||_2.
    pub ratio: f64,
    /// Set when any probe sample had a zero-norm block input (the ratio
    /// is then reported as +inf).
    pub flagged: bool,
}

/// Ratios for every residual branch of the model, in layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchRatioSeries {
    pub entries: Vec<BranchRatioEntry>,
}

/// Evaluation-mode branch-contribution probe.
pub fn branch_ratios(model: &CaitModel, probe: &[Tensor]) -> Result<BranchRatioSeries> {
    if probe.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut sums: Vec<f64> = Vec::new();
    let mut flags: Vec<bool> = Vec::new();
    let mut layout: Vec<(usize, &'static str)> = Vec::new();

    for patches in probe {
        let mut tape = Tape::new();
        let binding = model.store.bind(&mut tape)?;
        let mut ctx = ForwardCtx {
            trace: true,
            ..ForwardCtx::evaluation()
        };
        let out = model.forward(&mut tape, &binding, patches, &mut ctx)?;
        if sums.is_empty() {
            sums = vec![0.0; out.branch_traces.len()];
            flags = vec![false; out.branch_traces.len()];
            layout = out
                .branch_traces
                .iter()
                .map(|t| (t.layer, t.branch.tag()))
                .collect();
        }
        for (i, trace) in out.branch_traces.iter().enumerate() {
            let input_norm = tape.value(trace.input).l2_norm();
            let branch_norm = tape.value(trace.weighted).l2_norm();
            if input_norm == 0.0 {
                flags[i] = true;
                sums[i] = f64::INFINITY;
            } else if !flags[i] {
                sums[i] += branch_norm / input_norm;
            }
        }
    }

    let n = probe.len() as f64;
    let entries = layout
        .into_iter()
        .zip(sums)
        .zip(flags)
        .map(|(((layer, branch), sum), flagged)| BranchRatioEntry {
            layer,
            branch,
            ratio: if flagged { f64::INFINITY } else { sum / n },
            flagged,
        })
        .collect();
    Ok(BranchRatioSeries { entries })
}

/// Class-attention records of one image: `heads` maps per CA layer.
///
/// Side-effect free; the model is only read.
pub fn extract_attention(model: &CaitModel, patches: &Tensor) -> Result<Vec<AttentionRecord>> {
    if !matches!(model.config.cls_policy, ClsPolicy::ClassAttentionStage) {
        return Err(CoreError::Config(
            "attention extraction needs the class-attention policy".into(),
        ));
    }
    let (_, records) = model.infer(patches, true)?;
    Ok(records
        .into_iter()
        .filter(|r| r.stage == Stage::ClassAttention)
        .collect())
}

/// Normalized spatial attention map upsampled to image size.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 1]`; all 0.5 for a constant map.
    pub values: Vec<f64>,
    pub source_image: usize,
    pub ca_layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

fn upsample(
    src: &[f64],
    (gh, gw): (usize, usize),
    (oh, ow): (usize, usize),
    mode: Upsample,
) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    match mode {
        Upsample::Nearest => {
            for y in 0..oh {
                let sy = y * gh / oh;
                for x in 0..ow {
                    let sx = x * gw / ow;
                    out[y * ow + x] = src[sy * gw + sx];
                }
            }
        }
        Upsample::Bilinear => {
            let fy = gh as f64 / oh as f64;
            let fx = gw as f64 / ow as f64;
            for y in 0..oh {
                let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (gh - 1) as f64);
                let y0 = sy as usize;
                let y1 = (y0 + 1).min(gh - 1);
                let wy = sy - y0 as f64;
                for x in 0..ow {
                    let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (gw - 1) as f64);
                    let x0 = sx as usize;
                    let x1 = (x0 + 1).min(gw - 1);
                    let wx = sx - x0 as f64;
                    let top = src[y0 * gw + x0] * (1.0 - wx) + src[y0 * gw + x1] * wx;
                    let bot = src[y1 * gw + x0] * (1.0 - wx) + src[y1 * gw + x1] * wx;
                    out[y * ow + x] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    out
}

/// Min-max normalize in place; a constant map becomes all 0.5.
fn normalize(values: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi - lo < 1e-12 {
        values.iter_mut().for_each(|v| *v = 0.5);
        return;
    }
    for v in values.iter_mut() {
        *v = (*v - lo) / (hi - lo);
    }
}

/// Head-mean saliency of one class-attention layer: average the head
/// maps, drop the class key if present, reshape to the patch grid,
/// upsample, min-max normalize.
pub fn saliency(
    records: &[AttentionRecord],
    ca_layer: usize,
    grid: (usize, usize),
    out_size: (usize, usize),
    skip_class_key: bool,
    mode: Upsample,
    source_image: usize,
) -> Result<SaliencyMap> {
    let rec = records
        .iter()
        .find(|r| r.layer_index == ca_layer && r.stage == Stage::ClassAttention)
        .ok_or_else(|| {
            CoreError::Config(alloc::format!(
                "no class-attention record for layer {ca_layer}"
            ))
        })?;
    let p = grid.0 * grid.1;
    let expected = p + usize::from(skip_class_key);
    if rec.keys != expected || rec.queries != 1 {
        return Err(CoreError::Config(alloc::format!(
            "record has {} keys, expected {expected} for a {}x{} grid",
            rec.keys,
            grid.0,
            grid.1
        )));
    }
    let offset = usize::from(skip_class_key);
    let mut mean = vec![0.0; p];
    for h in 0..rec.heads {
        let map = rec.map(h, 0);
        for (m, v) in mean.iter_mut().zip(&map[offset..]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= rec.heads as f64;
    }
    let mut values = upsample(&mean, grid, out_size, mode);
    normalize(&mut values);
    Ok(SaliencyMap {
        width: out_size.1,
        height: out_size.0,
        values,
        source_image,
        ca_layer,
    })
}

/// Multiply a normalized saliency map into a grayscale image (both
/// row-major, same size): the export-side "modulate" step.
pub fn modulate(map: &[f64], gray: &[f64]) -> Result<Vec<f64>> {
    if map.len() != gray.len() {
        return Err(CoreError::ShapeMismatch {
            op: "modulate",
            lhs: alloc::format!("map of {}", map.len()),
            rhs: alloc::format!("image of {}", gray.len()),
        });
    }
    Ok(map.iter().zip(gray).map(|(m, g)| m * g).collect())
}

/// One row of the model-family accounting table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub depth: String,
    pub d: usize,
    pub params: usize,
    pub flops_224: u64,
    pub flops_384: u64,
}

/// Parameter and FLOP accounting for the named presets.
pub fn report_tables(names: &[&str]) -> Result<Vec<TableRow>> {
    names
        .iter()
        .map(|name| {
            let cfg = model_preset(name)?;
            Ok(TableRow {
                name: String::from(*name),
                depth: cfg.depth_tag(),
                d: cfg.d,
                params: count_params(&cfg).total(),
                flops_224: count_flops(&cfg, 224)?.total(),
                flops_384: count_flops(&cfg, 384)?.total(),
            })
        })
        .collect()
}
