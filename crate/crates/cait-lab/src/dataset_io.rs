//! Dataset loading: the generated synthetic task and directories of raw
//! 8-bit images with a labels manifest.
//!
//! Manifest format: one `relative_path<space>label` per line, `#` starts
//! a comment, blank lines are skipped. Raw image files hold exactly
//! `channels * height * width` bytes, channel-major.

use std::fs;
use std::path::{Path, PathBuf};

use cait_core::data::{synthetic, Dataset, SyntheticSpec};

use crate::{LabError, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    Dir {
        path: PathBuf,
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl DataSpec {
    pub fn describe(&self) -> String {
        match self {
            DataSpec::Synthetic(s) => format!(
                "synthetic:seed={},n={},classes={},size={}x{},channels={}",
                s.seed, s.n, s.classes, s.height, s.width, s.channels
            ),
            DataSpec::Dir { path, height, width, channels } => {
                format!("dir:{}:{}x{}x{}", path.display(), channels, height, width)
            }
        }
    }
}

/// Parse a `--data` argument: either `synthetic:k=v,...` or a directory
/// path. Unspecified synthetic fields fall back to `defaults`.
pub fn parse_data_spec(
    arg: &str,
    defaults: &SyntheticSpec,
    dims: (usize, usize, usize),
) -> Result<DataSpec> {
    if let Some(rest) = arg.strip_prefix("synthetic") {
        let mut spec = defaults.clone();
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                LabError::Usage(format!("bad synthetic field `{part}`, expected key=value"))
            })?;
            let parse = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| LabError::Usage(format!("bad value `{v}` for `{k}`")))
            };
            match k {
                "seed" => {
                    spec.seed = v
                        .parse()
                        .map_err(|_| LabError::Usage(format!("bad seed `{v}`")))?
                }
                "n" => spec.n = parse(v)?,
                "classes" => spec.classes = parse(v)?,
                "height" => spec.height = parse(v)?,
                "width" => spec.width = parse(v)?,
                "channels" => spec.channels = parse(v)?,
                other => {
                    return Err(LabError::Usage(format!(
                        "unknown synthetic field `{other}`"
                    )))
                }
            }
        }
        return Ok(DataSpec::Synthetic(spec));
    }
    Ok(DataSpec::Dir {
        path: PathBuf::from(arg),
        height: dims.0,
        width: dims.1,
        channels: dims.2,
    })
}

pub fn load_dataset(spec: &DataSpec) -> Result<Dataset> {
    match spec {
        DataSpec::Synthetic(s) => Ok(synthetic(s)?),
        DataSpec::Dir {
            path,
            height,
            width,
            channels,
        } => load_dir_dataset(path, *height, *width, *channels),
    }
}

/// Read a raw-image directory with its manifest.
pub fn load_dir_dataset(
    dir: &Path,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| LabError::io(&manifest_path, e))?;

    let mut rel_labels: Vec<(String, usize)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (rel, label) = line.split_once(char::is_whitespace).ok_or_else(|| {
            LabError::Manifest {
                line: lineno + 1,
                detail: format!("expected `path label`, got `{raw}`"),
            }
        })?;
        let label: usize = label.trim().parse().map_err(|_| LabError::Manifest {
            line: lineno + 1,
            detail: format!("bad label `{}`", label.trim()),
        })?;
        rel_labels.push((rel.to_string(), label));
    }
    if rel_labels.is_empty() {
        return Err(LabError::Manifest {
            line: 0,
            detail: "manifest lists no samples".into(),
        });
    }

    let stride = channels * height * width;
    let mut images = Vec::with_capacity(rel_labels.len() * stride);
    let mut labels = Vec::with_capacity(rel_labels.len());
    for (rel, label) in &rel_labels {
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        if bytes.len() != stride {
            return Err(LabError::Checkpoint(format!(
                "{}: {} bytes, expected {stride} for {channels}x{height}x{width}",
                path.display(),
                bytes.len()
            )));
        }
        images.extend(bytes.iter().map(|b| *b as f64 / 255.0));
        labels.push(*label);
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset::new(
        images,
        rel_labels.len(),
        channels,
        height,
        width,
        labels,
        num_classes,
        dir.display().to_string(),
    )?)
}

/// Write a dataset as raw 8-bit files plus a manifest, the inverse of
/// [`load_dir_dataset`] for data generated on the 8-bit grid.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str("# relative_path label\n");
    for i in 0..ds.len() {
        let rel = format!("img_{i:05}.raw");
        let bytes: Vec<u8> = ds
            .image(i)
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let path = dir.join(&rel);
        fs::write(&path, bytes).map_err(|e| LabError::io(&path, e))?;
        manifest.push_str(&format!("{rel} {}\n", ds.labels[i]));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| LabError::io(&path, e))
}
