//! Subcommand implementations.

pub mod analyze;
pub mod sweep;
pub mod train;
pub mod verify;

use cait_core::cait::CaitConfig;
use cait_core::data::SyntheticSpec;

use crate::{LabError, Result};

/// Integer square root of the patch count (synthetic data and attention
/// grids assume a square layout).
pub fn square_grid(cfg: &CaitConfig) -> Result<usize> {
    let p = cfg.patch_count;
    let g = (p as f64).sqrt().round() as usize;
    if g * g != p {
        return Err(LabError::Usage(format!(
            "patch count {p} is not a square grid"
        )));
    }
    Ok(g)
}

/// Synthetic-data defaults matched to a model configuration.
pub fn default_synthetic(cfg: &CaitConfig, seed: u64, n: usize) -> Result<SyntheticSpec> {
    let grid = square_grid(cfg)?;
    Ok(SyntheticSpec {
        seed,
        n,
        classes: cfg.num_classes,
        height: grid * cfg.patch_size,
        width: grid * cfg.patch_size,
        channels: cfg.in_channels,
        patch_size: cfg.patch_size,
    })
}
