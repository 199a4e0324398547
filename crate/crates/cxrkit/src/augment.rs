//! Image augmentation ops and the incremental augmentation sweep.
//!
//! Exactly four ops exist: a 45° tilt, a fixed 350×450 rescale, a contrast
//! boost, and a center crop. Horizontal flipping is deliberately impossible
//! to construct — mirrored chest anatomy (heart on the right) turns a
//! plausible image into an implausible one, so the op enumeration omits it
//! and the parser refuses it with an explanation.
//!
//! The sweep harness retrains a classifier from the same seeded
//! initialization while growing the training set by a fixed number of
//! augmented images per step, keeping the test split untouched and verifying
//! that no augmented image descends from it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{
    build_classifier, predict, train_classifier, Architecture, ArchitectureSpec, TrainConfig,
};
use crate::error::{Error, Result};
use crate::raster::{self, ClassLabel, LabeledImage, RasterImage};

/// One of the four supported augmentation transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationOp {
    /// Rotate by exactly 45° about the image center on the same canvas,
    /// filling uncovered corners with black.
    Tilt45,
    /// Resize to a fixed 350-wide by 450-high frame, distorting aspect.
    ScaleTo350x450,
    /// Remap every pixel to `mean + factor * (v - mean)`, clamped to [0, 255].
    ContrastUp { factor: f64 },
    /// Keep the central `fraction` of both dimensions, then resize back to
    /// the original frame.
    CenterCrop { fraction: f64 },
}

impl AugmentationOp {
    /// Short stable name, used in derived image identifiers.
    pub fn slug(&self) -> &'static str {
        match self {
            AugmentationOp::Tilt45 => "tilt45",
            AugmentationOp::ScaleTo350x450 => "scale350x450",
            AugmentationOp::ContrastUp { .. } => "contrast",
            AugmentationOp::CenterCrop { .. } => "crop",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            AugmentationOp::Tilt45 | AugmentationOp::ScaleTo350x450 => Ok(()),
            AugmentationOp::ContrastUp { factor } => {
                if factor.is_finite() && factor > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "contrast factor must be a finite positive number, got {factor}"
                    )))
                }
            }
            AugmentationOp::CenterCrop { fraction } => {
                if fraction.is_finite() && fraction > 0.0 && fraction <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "crop fraction must lie in (0, 1], got {fraction}"
                    )))
                }
            }
        }
    }

    /// Parses an op name, with default parameters for the parametric ops.
    ///
    /// Any spelling of horizontal flipping is refused outright: a mirrored
    /// chest X-ray relocates the cardiac silhouette and other asymmetric
    /// anatomy, so a flipped image is not a plausible radiograph.
    pub fn parse(s: &str) -> Result<AugmentationOp> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        match key.as_str() {
            "tilt45" | "tilt" => Ok(AugmentationOp::Tilt45),
            "scale350x450" | "scaleto350x450" | "scale" => Ok(AugmentationOp::ScaleTo350x450),
            "contrast" | "contrastup" => Ok(AugmentationOp::ContrastUp {
                factor: DEFAULT_CONTRAST_FACTOR,
            }),
            "crop" | "centercrop" => Ok(AugmentationOp::CenterCrop {
                fraction: DEFAULT_CROP_FRACTION,
            }),
            "flip" | "hflip" | "horizontalflip" | "mirror" | "fliphorizontal" => {
                Err(Error::InvalidConfig(format!(
                    "'{s}' is not available: horizontally flipping a chest X-ray mirrors \
                     asymmetric anatomy (the heart shifts to the right side), producing \
                     implausible images; valid ops are tilt45, scale350x450, contrast, crop"
                )))
            }
            _ => Err(Error::InvalidConfig(format!(
                "unknown augmentation op '{s}'; valid ops are tilt45, scale350x450, contrast, crop"
            ))),
        }
    }
}

impl std::str::FromStr for AugmentationOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<AugmentationOp> {
        AugmentationOp::parse(s)
    }
}

impl std::fmt::Display for AugmentationOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

pub const DEFAULT_CONTRAST_FACTOR: f64 = 1.5;
pub const DEFAULT_CROP_FRACTION: f64 = 0.8;

/// Settings for augmented-pool generation and the incremental sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Augmented images added per sweep increment.
    #[serde(default = "default_step")]
    pub step: usize,
    /// Total size of the augmented pool.
    #[serde(default = "default_total")]
    pub total: usize,
    /// Images generated per op per class; 4 ops × 2 classes × this = total.
    #[serde(default = "default_per_op_per_class")]
    pub per_op_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_contrast_factor")]
    pub contrast_factor: f64,
    #[serde(default = "default_crop_fraction")]
    pub crop_fraction: f64,
}

fn default_step() -> usize {
    240
}

fn default_total() -> usize {
    2400
}

fn default_per_op_per_class() -> usize {
    300
}

fn default_contrast_factor() -> f64 {
    DEFAULT_CONTRAST_FACTOR
}

fn default_crop_fraction() -> f64 {
    DEFAULT_CROP_FRACTION
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            step: default_step(),
            total: default_total(),
            per_op_per_class: default_per_op_per_class(),
            seed: 0,
            contrast_factor: default_contrast_factor(),
            crop_fraction: default_crop_fraction(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step == 0 {
            return Err(Error::InvalidConfig("sweep step must be at least 1".into()));
        }
        if self.per_op_per_class == 0 {
            return Err(Error::InvalidConfig(
                "per_op_per_class must be at least 1".into(),
            ));
        }
        if self.total % self.step != 0 {
            return Err(Error::InvalidConfig(format!(
                "sweep total {} is not divisible by step {}",
                self.total, self.step
            )));
        }
        let implied = self.per_op_per_class * 4 * 2;
        if implied != self.total {
            return Err(Error::InvalidConfig(format!(
                "per_op_per_class {} implies a pool of {} (4 ops x 2 classes), but total is {}",
                self.per_op_per_class, implied, self.total
            )));
        }
        for op in self.ops() {
            op.validate()?;
        }
        Ok(())
    }

    /// The four canonical ops with this config's parameters.
    pub fn ops(&self) -> [AugmentationOp; 4] {
        [
            AugmentationOp::Tilt45,
            AugmentationOp::ScaleTo350x450,
            AugmentationOp::ContrastUp {
                factor: self.contrast_factor,
            },
            AugmentationOp::CenterCrop {
                fraction: self.crop_fraction,
            },
        ]
    }
}

/// One measurement of the sweep: a dataset composition and the accuracies a
/// freshly trained model reached on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: Architecture,
    pub augmented_count: usize,
    /// Share of the working corpus that is augmented:
    /// `count / (base dataset size + count)`.
    pub augmented_fraction: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Applies one transform, preserving the label and recording lineage.
///
/// The output is marked augmented and traces back to the root source image,
/// even when augmenting an already-augmented input.
pub fn apply_augmentation(img: &LabeledImage, op: &AugmentationOp) -> Result<LabeledImage> {
    op.validate()?;
    let image = match *op {
        AugmentationOp::Tilt45 => tilt45(&img.image),
        AugmentationOp::ScaleTo350x450 => raster::resize(&img.image, 350, 450)?,
        AugmentationOp::ContrastUp { factor } => adjust_contrast(&img.image, factor),
        AugmentationOp::CenterCrop { fraction } => center_crop(&img.image, fraction)?,
    };
    let source_id = format!("{}+{}", img.source_id, op.slug());
    Ok(LabeledImage::derived(
        image,
        img.label,
        source_id,
        img.lineage_id(),
    ))
}

/// Generates the augmented pool: `per_op_per_class` images per op per class,
/// sampled without replacement within each (op, class) cell.
///
/// The output interleaves one image per (op, class) cell per round, so any
/// prefix of the pool is balanced across ops and classes — the sweep grows
/// the training set by prefixes.
pub fn generate_augmented_set(
    pool: &[LabeledImage],
    cfg: &SweepConfig,
) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    let classes = [ClassLabel::Covid, ClassLabel::Normal];
    let per_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            (0..pool.len())
                .filter(|&i| pool[i].label == c)
                .collect::<Vec<_>>()
        })
        .collect();
    for (class, members) in classes.iter().zip(&per_class) {
        if members.len() < cfg.per_op_per_class {
            return Err(Error::InvalidData(format!(
                "pool has {} {} images but {} are needed per op",
                members.len(),
                class.as_str(),
                cfg.per_op_per_class
            )));
        }
    }

    let ops = cfg.ops();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    // selections[op][class] = indices into pool, chosen without replacement
    let mut selections: Vec<Vec<Vec<usize>>> = Vec::with_capacity(ops.len());
    for _ in &ops {
        let mut by_class = Vec::with_capacity(classes.len());
        for members in &per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
            let mut order = members.clone();
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            order.truncate(cfg.per_op_per_class);
            by_class.push(order);
        }
        selections.push(by_class);
    }

    let mut out = Vec::with_capacity(cfg.total);
    for round in 0..cfg.per_op_per_class {
        for (op, by_class) in ops.iter().zip(&selections) {
            for chosen in by_class {
                out.push(apply_augmentation(&pool[chosen[round]], op)?);
            }
        }
    }
    Ok(out)
}

/// Runs the incremental augmentation sweep.
///
/// For each architecture and each `k` in `0, step, …, total`, trains a fresh
/// model (same seed, so the same initialization) on the base training split
/// plus the first `k` augmented images, evaluates on the untouched test
/// split, and records one row. Augmented images never enter validation or
/// test; an augmented image whose root source lies in the test split is a
/// hard data-leak failure.
pub fn run_sweep(
    train: &[LabeledImage],
    val: &[LabeledImage],
    test: &[LabeledImage],
    augmented: &[LabeledImage],
    archs: &[ArchitectureSpec],
    train_cfg: &TrainConfig,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    cfg.validate()?;
    train_cfg.validate()?;
    if train_cfg.epochs == 0 {
        return Err(Error::InvalidConfig(
            "the sweep needs at least one training epoch to measure accuracy".into(),
        ));
    }
    if archs.is_empty() {
        return Err(Error::InvalidConfig(
            "the sweep needs at least one architecture".into(),
        ));
    }
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::InvalidData(
            "train, validation, and test splits must all be non-empty".into(),
        ));
    }
    if augmented.len() < cfg.total {
        return Err(Error::InvalidData(format!(
            "augmented pool has {} images but the sweep needs {}",
            augmented.len(),
            cfg.total
        )));
    }

    let train_ids: std::collections::HashSet<&str> =
        train.iter().map(|i| i.source_id.as_str()).collect();
    let val_ids: std::collections::HashSet<&str> =
        val.iter().map(|i| i.source_id.as_str()).collect();
    let test_ids: std::collections::HashSet<&str> =
        test.iter().map(|i| i.source_id.as_str()).collect();
    for id in &val_ids {
        if train_ids.contains(id) {
            return Err(Error::DataLeak(format!(
                "'{id}' appears in both the training and validation splits"
            )));
        }
    }
    for id in &test_ids {
        if train_ids.contains(id) || val_ids.contains(id) {
            return Err(Error::DataLeak(format!(
                "'{id}' appears in the test split and another split"
            )));
        }
    }
    for img in &augmented[..cfg.total] {
        if test_ids.contains(img.lineage_id()) {
            return Err(Error::DataLeak(format!(
                "augmented image '{}' derives from test image '{}'",
                img.source_id,
                img.lineage_id()
            )));
        }
    }

    let base_size = train.len() + val.len() + test.len();
    let mut rows = Vec::new();
    for arch in archs {
        for k in (0..=cfg.total).step_by(cfg.step) {
            let mut composite = train.to_vec();
            composite.extend_from_slice(&augmented[..k]);
            let model = build_classifier(arch, train_cfg.seed)?;
            let trained = train_classifier(model, &composite, val, train_cfg)?;
            let last = trained
                .history()
                .last()
                .expect("at least one epoch was validated above");
            let mut correct = 0usize;
            for item in test {
                if predict(&trained, &item.image)?.label == item.label {
                    correct += 1;
                }
            }
            rows.push(SweepRow {
                model: arch.name,
                augmented_count: k,
                augmented_fraction: k as f64 / (base_size + k) as f64,
                train_accuracy: last.train_accuracy,
                test_accuracy: correct as f64 / test.len() as f64,
            });
        }
    }
    Ok(SweepResult { rows })
}

/// Rotates by 45° about the center on the same canvas; pixels that fall
/// outside the source read as black.
fn tilt45(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let c = std::f64::consts::FRAC_1_SQRT_2; // cos 45° = sin 45°
    RasterImage::from_fn(w, h, img.channels(), |x, y, ch| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        // Inverse-rotate the destination coordinate to find its source.
        let sx = c * dx + c * dy + cx - 0.5;
        let sy = -c * dx + c * dy + cy - 0.5;
        sample_bilinear_zero(img, sx, sy, ch)
    })
}

fn sample_bilinear_zero(img: &RasterImage, sx: f64, sy: f64, ch: usize) -> u8 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let wx = sx - x0;
    let wy = sy - y0;
    let mut acc = 0.0f64;
    for (dy, row_weight) in [(0.0, 1.0 - wy), (1.0, wy)] {
        for (dx, col_weight) in [(0.0, 1.0 - wx), (1.0, wx)] {
            let px = x0 + dx;
            let py = y0 + dy;
            let inside =
                px >= 0.0 && py >= 0.0 && (px as usize) < img.width() && (py as usize) < img.height();
            let v = if inside {
                img.get(px as usize, py as usize, ch) as f64
            } else {
                0.0
            };
            acc += row_weight * col_weight * v;
        }
    }
    acc.round().clamp(0.0, 255.0) as u8
}

/// Stretches intensities away from the image mean by `factor`.
fn adjust_contrast(img: &RasterImage, factor: f64) -> RasterImage {
    let mean = img.pixels().iter().map(|&v| v as f64).sum::<f64>() / img.pixels().len() as f64;
    RasterImage::from_fn(img.width(), img.height(), img.channels(), |x, y, c| {
        let v = img.get(x, y, c) as f64;
        (mean + factor * (v - mean)).round().clamp(0.0, 255.0) as u8
    })
}

/// Keeps the central `fraction` of both dimensions and resizes back to the
/// original frame. Fraction 1 reproduces the input exactly.
fn center_crop(img: &RasterImage, fraction: f64) -> Result<RasterImage> {
    let cw = ((img.width() as f64 * fraction).round() as usize).max(1);
    let ch = ((img.height() as f64 * fraction).round() as usize).max(1);
    let ox = (img.width() - cw) / 2;
    let oy = (img.height() - ch) / 2;
    let cropped = RasterImage::from_fn(cw, ch, img.channels(), |x, y, c| {
        img.get(x + ox, y + oy, c)
    });
    raster::resize(&cropped, img.width(), img.height())
}
