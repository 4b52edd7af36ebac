//! CSV and image writers. All output is deterministic: floats use the
//! shortest round-trip formatting and no timestamps are embedded.

use std::fs;
use std::path::Path;

use cait_core::analysis::TableRow;
use cait_core::train::{RatioSnapshot, RunReport};

use crate::{LabError, Result};

fn write(path: &Path, content: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, content).map_err(|e| LabError::io(path, e))
}

/// `epoch,loss,accuracy` per epoch.
pub fn run_report_csv(report: &RunReport) -> String {
    let mut out = String::from("epoch,loss,accuracy\n");
    for (e, (loss, acc)) in report
        .epoch_loss
        .iter()
        .zip(&report.epoch_accuracy)
        .enumerate()
    {
        out.push_str(&format!("{e},{loss},{acc}\n"));
    }
    out
}

pub fn write_run_report(path: &Path, report: &RunReport) -> Result<()> {
    write(path, run_report_csv(report))
}

/// `step,loss` per optimizer step.
pub fn write_step_loss(path: &Path, report: &RunReport) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (s, loss) in report.step_loss.iter().enumerate() {
        out.push_str(&format!("{s},{loss}\n"));
    }
    write(path, out)
}

/// `epoch,layer,branch,ratio` for every captured snapshot.
pub fn ratio_csv(snapshots: &[RatioSnapshot]) -> String {
    let mut out = String::from("epoch,layer,branch,ratio\n");
    for snap in snapshots {
        for entry in &snap.series.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                snap.epoch, entry.layer, entry.branch, entry.ratio
            ));
        }
    }
    out
}

pub fn write_ratios(path: &Path, snapshots: &[RatioSnapshot]) -> Result<()> {
    write(path, ratio_csv(snapshots))
}

/// One sweep cell.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub strategy: String,
    pub depth: usize,
    pub seed: u64,
    pub drop_rate: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub diverged: bool,
    pub error: String,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("strategy,depth,seed,drop_rate,final_loss,final_accuracy,diverged,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.depth,
            r.seed,
            r.drop_rate,
            r.final_loss,
            r.final_accuracy,
            r.diverged,
            r.error
        ));
    }
    out
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write(path, sweep_csv(rows))
}

/// `name,depth,width,params,flops_at_224,flops_at_384` accounting table.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("name,depth,width,params,flops_at_224,flops_at_384\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name, r.depth, r.d, r.params, r.flops_224, r.flops_384
        ));
    }
    out
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    write(path, table_csv(rows))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5), max value 255, from row-major values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    debug_assert_eq!(values.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| quantize(*v)));
    write(path, bytes)
}

/// Binary PPM (P6) from row-major `(r, g, b)` triples in `[0, 1]`.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[(f64, f64, f64)]) -> Result<()> {
    debug_assert_eq!(rgb.len(), width * height);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    for (r, g, b) in rgb {
        bytes.push(quantize(*r));
        bytes.push(quantize(*g));
        bytes.push(quantize(*b));
    }
    write(path, bytes)
}

/// Min-max normalize a copy of `values` (constant input maps to 0.5).
pub fn normalized(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}
