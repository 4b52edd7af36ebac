//! In-memory datasets and the seeded synthetic task.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// A labeled image set. Pixels are `n x c x h x w`, row-major, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        n: usize,
        channels: usize,
        height: usize,
        width: usize,
        labels: Vec<usize>,
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        if images.len() != n * channels * height * width {
            return Err(CoreError::Config(format!(
                "pixel buffer holds {} values, expected {}",
                images.len(),
                n * channels * height * width
            )));
        }
        if labels.len() != n {
            return Err(CoreError::Config(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(CoreError::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            n,
            channels,
            height,
            width,
            labels,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn image_stride(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.image_stride();
        &self.images[i * s..(i + 1) * s]
    }

    /// Flatten image `i` into non-overlapping `patch_size` squares:
    /// one row per patch (grid row-major), channel-major pixels within.
    pub fn patches(&self, i: usize, patch_size: usize) -> Result<Tensor> {
        patchify(
            self.image(i),
            self.channels,
            self.height,
            self.width,
            patch_size,
        )
    }

    /// Patch grid dimensions for a given patch size.
    pub fn grid(&self, patch_size: usize) -> (usize, usize) {
        (self.height / patch_size, self.width / patch_size)
    }
}

/// Cut a `c x h x w` image into flattened `patch_size` square patches.
pub fn patchify(
    image: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    patch_size: usize,
) -> Result<Tensor> {
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(CoreError::Config(format!(
            "image {height}x{width} not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gh, gw) = (height / patch_size, width / patch_size);
    let pdim = channels * patch_size * patch_size;
    let mut out = Vec::with_capacity(gh * gw * pdim);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..channels {
                for dy in 0..patch_size {
                    let y = py * patch_size + dy;
                    let row = c * height * width + y * width + px * patch_size;
                    out.extend_from_slice(&image[row..row + patch_size]);
                }
            }
        }
    }
    Tensor::from_vec(alloc::vec![gh * gw, pdim], out)
}

/// Parameters of the generated classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl SyntheticSpec {
    /// 64x64 single-channel images on a 4x4 grid of 16-pixel patches.
    pub fn toy(seed: u64, n: usize, classes: usize) -> Self {
        Self {
            seed,
            n,
            classes,
            height: 64,
            width: 64,
            channels: 1,
            patch_size: 16,
        }
    }
}

/// Generate the hot-patch task.
///
/// Rule: sample `i` has label `k = i % classes`. Background pixels are
/// noise `U[b_k, b_k + 0.3]` with a class-dependent floor
/// `b_k = 0.1 * k / (classes - 1)`; the pixels of one "hot" patch are
/// drawn from `U[0.6, 1.0]`, and class `k`'s hot patch sits at grid slot
/// `k * (patches / classes)`. Classes are therefore linearly separable
/// two ways: from mean brightness alone and from per-patch intensity.
/// Pixels are quantized to the 8-bit grid (`v = round(255 v)/255`) so
/// byte serialization round-trips exactly.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(CoreError::Config("need at least 2 classes".into()));
    }
    if spec.patch_size == 0
        || spec.height % spec.patch_size != 0
        || spec.width % spec.patch_size != 0
    {
        return Err(CoreError::Config(format!(
            "{}x{} images not divisible into {}-pixel patches",
            spec.height, spec.width, spec.patch_size
        )));
    }
    let (gh, gw) = (
        spec.height / spec.patch_size,
        spec.width / spec.patch_size,
    );
    let patches = gh * gw;
    if spec.classes > patches {
        return Err(CoreError::Config(format!(
            "{} classes need at least as many patches, got {patches}",
            spec.classes
        )));
    }

    let mut rng = SeedRng::new(spec.seed, crate::rng::streams::DATA);
    let stride = spec.channels * spec.height * spec.width;
    let mut images = Vec::with_capacity(spec.n * stride);
    let mut labels = Vec::with_capacity(spec.n);
    let quant = |v: f64| libm::round(v * 255.0) / 255.0;

    for i in 0..spec.n {
        let label = i % spec.classes;
        labels.push(label);
        let hot = label * (patches / spec.classes);
        let (hy, hx) = (hot / gw, hot % gw);
        let floor = 0.1 * label as f64 / (spec.classes - 1) as f64;
        for _c in 0..spec.channels {
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let in_hot = y / spec.patch_size == hy && x / spec.patch_size == hx;
                    let v = if in_hot {
                        rng.uniform(0.6, 1.0)
                    } else {
                        rng.uniform(floor, floor + 0.3)
                    };
                    images.push(quant(v));
                }
            }
        }
    }

    Dataset::new(
        images,
        spec.n,
        spec.channels,
        spec.height,
        spec.width,
        labels,
        spec.classes,
        "synthetic",
    )
}
