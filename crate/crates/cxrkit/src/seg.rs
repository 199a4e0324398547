//! U-Net lung segmentation: model construction, training, mask prediction,
//! binarization with optional component cleanup, and mask application.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, loss, optim::Adam, stack_batch, BatchNorm2d, Layer, MaxPool2d, Relu, Sequential, Tensor, UpsampleNearest2x};
use crate::raster::RasterImage;

/// Binary lung mask; every value is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LungMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl LungMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("mask dimensions must be nonzero".into()));
        }
        if values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("valid fill")
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values).expect("valid values")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Interprets an 8-bit image as a mask: values >= 128 are foreground.
    pub fn from_image(img: &RasterImage) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::InvalidInput(format!(
                "mask images must be single-channel, got {} channels",
                img.channels()
            )));
        }
        Self::new(
            img.width(),
            img.height(),
            img.pixels().iter().map(|&v| u8::from(v >= 128)).collect(),
        )
    }

    /// Renders the mask as a black/white image for saving.
    pub fn to_image(&self) -> RasterImage {
        RasterImage::new(
            self.width,
            self.height,
            1,
            self.values.iter().map(|&v| v * 255).collect(),
        )
        .expect("valid dims")
    }

    /// Nearest-neighbor resize, for moving a mask between resolutions.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        let img = crate::raster::resize_nearest(&self.to_image(), width, height)?;
        Self::from_image(&img)
    }

    /// Dice overlap in [0, 1]; two empty masks count as identical (1).
    pub fn dice(&self, other: &LungMask) -> f64 {
        let inter: usize = self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(&a, &b)| a == 1 && b == 1)
            .count();
        let total = self.area() + other.area();
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }
}

/// Encoder depth, channel width, and the square input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            input_size: 256,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("unet depth must be at least 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidConfig("unet base_channels must be at least 1".into()));
        }
        let down = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::InvalidConfig(format!(
                "unet input_size {} must be divisible by 2^depth = {down}",
                self.input_size
            )));
        }
        Ok(())
    }
}

///// One U-Net level: encoder block, then (below the bottleneck) a pooled
/// recursion into the next level, nearest-neighbor upsampling, and a decoder
/// block over the channel-concatenated skip.
struct SkipLevel {
    enc: Sequential,
    enc_channels: usize,
    inner: Option<Inner>,
}

struct Inner {
    pool: MaxPool2d,
    deeper: Box<SkipLevel>,
    up: UpsampleNearest2x,
    dec: Sequential,
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    crate::nn::graph::concat_channels(&[a, b])
}

impl Layer for SkipLevel {
    fn infer(&self, x: &Tensor) -> Tensor {
        let e = self.enc.infer(x);
        match &self.inner {
            None => e,
            Some(inner) => {
                let d = inner.deeper.infer(&inner.pool.infer(&e));
                let u = inner.up.infer(&d);
                inner.dec.infer(&concat_channels(&e, &u))
            }
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let e = self.enc.forward(x);
        match &mut self.inner {
            None => e,
            Some(inner) => {
                let d = inner.deeper.forward(&inner.pool.forward(&e));
                let u = inner.up.forward(&d);
                inner.dec.forward(&concat_channels(&e, &u))
            }
        }
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        match &mut self.inner {
            None => self.enc.backward(gy),
            Some(inner) => {
                let gcat = inner.dec.backward(gy);
                let ge1 = gcat.slice_axis(Axis(1), (0..self.enc_channels).into()).to_owned();
                let gu = gcat
                    .slice_axis(Axis(1), (self.enc_channels..gcat.shape()[1]).into())
                    .to_owned();
                let gd = inner.up.backward(&gu);
                let gp = inner.deeper.backward(&gd);
                let ge2 = inner.pool.backward(&gp);
                self.enc.backward(&(ge1 + ge2))
            }
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.enc.visit_params(f);
        if let Some(inner) = &mut self.inner {
            inner.deeper.visit_params(f);
            inner.dec.visit_params(f);
        }
    }

    fn zero_grad(&mut self) {
        self.enc.zero_grad();
        if let Some(inner) = &mut self.inner {
            inner.deeper.zero_grad();
            inner.dec.zero_grad();
        }
    }

    fn export_state(&self, out: &mut Vec<Vec<f32>>) {
        self.enc.export_state(out);
        if let Some(inner) = &self.inner {
            inner.deeper.export_state(out);
            inner.dec.export_state(out);
        }
    }

    fn import_state(&mut self, src: &mut dyn Iterator<Item = Vec<f32>>) -> Result<()> {
        self.enc.import_state(src)?;
        if let Some(inner) = &mut self.inner {
            inner.deeper.import_state(src)?;
            inner.dec.import_state(src)?;
        }
        Ok(())
    }
}

/// Two 3x3 conv + batchnorm + relu stages.
fn conv_block(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Sequential {
    Sequential::new(vec![
        Box::new(nn::init::conv2d_square(rng, in_ch, out_ch, 3, 1, 1)),
        Box::new(BatchNorm2d::new(out_ch)),
        Box::new(Relu::new()),
        Box::new(nn::init::conv2d_square(rng, out_ch, out_ch, 3, 1, 1)),
        Box::new(BatchNorm2d::new(out_ch)),
        Box::new(Relu::new()),
    ])
}

fn build_level(rng: &mut ChaCha8Rng, in_ch: usize, level: usize, cfg: &UNetConfig) -> SkipLevel {
    let c = cfg.base_channels << level;
    let enc = conv_block(rng, in_ch, c);
    if level == cfg.depth {
        return SkipLevel {
            enc,
            enc_channels: c,
            inner: None,
        };
    }
    let deeper = Box::new(build_level(rng, c, level + 1, cfg));
    // the deeper level hands back 2c channels; concat with the skip gives 3c
    let dec = conv_block(rng, 3 * c, c);
    SkipLevel {
        enc,
        enc_channels: c,
        inner: Some(Inner {
            pool: MaxPool2d::new(2, 2, 0),
            deeper,
            up: UpsampleNearest2x::new(),
            dec,
        }),
    }
}

/// Training provenance carried inside the checkpoint.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
}

/// A U-Net with its configuration and training metadata.
pub struct SegmentationModel {
    config: UNetConfig,
    net: Sequential,
    pub training_meta: TrainingMeta,
}

/// Builds a freshly initialized U-Net; the same seed always produces
/// bitwise-identical parameters.
pub fn build_unet(cfg: UNetConfig, seed: u64) -> Result<SegmentationModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = build_level(&mut rng, 1, 0, &cfg);
    let head = nn::init::conv2d_square(&mut rng, cfg.base_channels, 1, 1, 1, 0);
    Ok(SegmentationModel {
        config: cfg,
        net: Sequential::new(vec![Box::new(body), Box::new(head)]),
        training_meta: TrainingMeta::default(),
    })
}

impl SegmentationModel {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn export_state(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        self.net.export_state(&mut out);
        out
    }

    /// Writes config, training metadata, and parameters to one file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "config": self.config,
            "training_meta": self.training_meta,
        });
        nn::store::write_checkpoint(path, "unet", &header, &self.export_state())
    }

    /// Restores a model saved by [`SegmentationModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let (header, state) = nn::store::read_checkpoint(path, "unet")?;
        let config: UNetConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad unet config in checkpoint: {e}")))?;
        let training_meta: TrainingMeta = serde_json::from_value(header["training_meta"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad training metadata in checkpoint: {e}")))?;
        let mut model = build_unet(config, 0)?;
        let mut it = state.into_iter();
        model.net.import_state(&mut it)?;
        if it.next().is_some() {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected trailing parameter blocks",
                path.display()
            )));
        }
        model.training_meta = training_meta;
        Ok(model)
    }
}

fn image_to_input(img: &RasterImage, size: usize) -> Result<Tensor> {
    if img.channels() != 1 {
        return Err(Error::InvalidInput(format!(
            "segmentation expects single-channel images, got {} channels",
            img.channels()
        )));
    }
    if img.width() != size || img.height() != size {
        return Err(Error::InvalidInput(format!(
            "segmentation expects {size}x{size} input, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let mut x = Tensor::zeros((1, 1, size, size));
    for y in 0..size {
        for x_ in 0..size {
            x[[0, 0, y, x_]] = img.get(x_, y, 0) as f32 / 255.0;
        }
    }
    Ok(x)
}

fn mask_to_target(mask: &LungMask, size: usize) -> Result<Tensor> {
    if mask.width() != size || mask.height() != size {
        return Err(Error::InvalidData(format!(
            "mask is {}x{}, model expects {size}x{size}",
            mask.width(),
            mask.height()
        )));
    }
    let mut t = Tensor::zeros((1, 1, size, size));
    for y in 0..size {
        for x in 0..size {
            t[[0, 0, y, x]] = mask.get(x, y) as f32;
        }
    }
    Ok(t)
}

/// Trains with summed binary cross-entropy and Dice loss under Adam,
/// mini-batched in a fixed order. `epochs = 0` leaves the weights untouched.
pub fn train_unet(
    mut model: SegmentationModel,
    pairs: &[(RasterImage, LungMask)],
    epochs: usize,
    lr: f64,
) -> Result<SegmentationModel> {
    if pairs.is_empty() {
        return Err(Error::InvalidData("segmentation training needs at least one pair".into()));
    }
    let size = model.config.input_size;
    let inputs: Vec<Tensor> = pairs
        .iter()
        .map(|(img, _)| image_to_input(img, size))
        .collect::<Result<_>>()?;
    let targets: Vec<Tensor> = pairs
        .iter()
        .map(|(_, mask)| mask_to_target(mask, size))
        .collect::<Result<_>>()?;

    const BATCH: usize = 4;
    let mut adam = Adam::new(lr);
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0f64;
        for (xs, ts) in inputs.chunks(BATCH).zip(targets.chunks(BATCH)) {
            let x = stack_batch(xs);
            let t = stack_batch(ts);
            let logits = model.net.forward(&x);
            let (bce, dice_loss, grad) = loss::bce_dice_loss(&logits, &t);
            let total = (bce + dice_loss) as f64;
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "segmentation loss became non-finite at epoch {epoch}"
                )));
            }
            epoch_loss += total * xs.len() as f64;
            model.net.zero_grad();
            model.net.backward(&grad);
            adam.step(&mut model.net);
        }
        trace.push(epoch_loss / pairs.len() as f64);
    }
    model.training_meta = TrainingMeta {
        epochs,
        final_loss: trace.last().copied().unwrap_or(f64::NAN),
        loss_trace: trace,
    };
    Ok(model)
}

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel lung probability for an image already at the model resolution.
pub fn predict_mask(model: &SegmentationModel, img: &RasterImage) -> Result<Array2<f32>> {
    let x = image_to_input(img, model.config.input_size)?;
    let logits = model.net.infer(&x);
    let size = model.config.input_size;
    Ok(Array2::from_shape_fn((size, size), |(y, x)| {
        sigmoid(logits[[0, 0, y, x]])
    }))
}

/// Thresholds a probability map into a binary mask; with `cleanup` the two
/// largest 4-connected foreground components are kept (one per lung).
pub fn binarize_mask(probmap: &Array2<f32>, threshold: f64, cleanup: bool) -> Result<LungMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask threshold must be inside (0, 1), got {threshold}"
        )));
    }
    let (h, w) = probmap.dim();
    let mut values: Vec<u8> = probmap
        .iter()
        .map(|&p| u8::from(p as f64 >= threshold))
        .collect();
    if cleanup {
        values = keep_two_largest_components(&values, w, h);
    }
    LungMask::new(w, h, values)
}

/// Flood-fills 4-connected components and keeps the two largest.
fn keep_two_largest_components(values: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut comp = vec![usize::MAX; values.len()];
    let mut sizes = Vec::new();
    let mut queue = Vec::new();
    for start in 0..values.len() {
        if values[start] == 0 || comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0usize;
        comp[start] = id;
        queue.push(start);
        while let Some(p) = queue.pop() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |nx: usize, ny: usize| {
                let q = ny * w + nx;
                if values[q] == 1 && comp[q] == usize::MAX {
                    comp[q] = id;
                    queue.push(q);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        sizes.push(size);
    }
    // rank component ids by size, largest first; ties keep scan order
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&id| (std::cmp::Reverse(sizes[id]), id));
    let keep: Vec<usize> = order.into_iter().take(2).collect();
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| u8::from(v == 1 && keep.contains(&comp[i])))
        .collect()
}

/// Pixelwise product: everything outside the mask becomes exactly 0.
pub fn apply_mask(img: &RasterImage, mask: &LungMask) -> Result<RasterImage> {
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::InvalidInput(format!(
            "image {}x{} and mask {}x{} differ",
            img.width(),
            img.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(RasterImage::from_fn(
        img.width(),
        img.height(),
        img.channels(),
        |x, y, c| img.get(x, y, c) * mask.get(x, y),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 8,
            input_size: 32,
        }
    }

    /// A soft elliptical blob image with its ground-truth mask.
    fn blob_pair(size: usize) -> (RasterImage, LungMask) {
        let (cx, cy) = (size as f64 / 2.0, size as f64 / 2.0);
        let (rx, ry) = (size as f64 * 0.3, size as f64 * 0.22);
        let inside = |x: usize, y: usize| {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        };
        let img = RasterImage::from_fn(size, size, 1, |x, y, _| if inside(x, y) { 40 } else { 200 });
        let mask = LungMask::from_fn(size, size, |x, y| u8::from(inside(x, y)));
        (img, mask)
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let bad_depth = UNetConfig { depth: 0, ..tiny_cfg() };
        assert!(matches!(bad_depth.validate(), Err(Error::InvalidConfig(_))));
        let bad_size = UNetConfig { input_size: 30, ..tiny_cfg() };
        assert!(matches!(build_unet(bad_size, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn forward_on_zeros_gives_open_unit_probabilities() {
        let cfg = UNetConfig {
            depth: 1,
            base_channels: 4,
            input_size: 64,
        };
        let model = build_unet(cfg, 7).unwrap();
        let img = RasterImage::filled(64, 64, 0);
        let probs = predict_mask(&model, &img).unwrap();
        assert_eq!(probs.dim(), (64, 64));
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_unet(tiny_cfg(), 42).unwrap();
        let b = build_unet(tiny_cfg(), 42).unwrap();
        assert_eq!(a.export_state(), b.export_state());
        let c = build_unet(tiny_cfg(), 43).unwrap();
        assert_ne!(a.export_state(), c.export_state());
    }

    #[test]
    fn four_level_net_preserves_resolution() {
        let cfg = UNetConfig {
            depth: 4,
            base_channels: 2,
            input_size: 256,
        };
        let model = build_unet(cfg, 1).unwrap();
        let img = RasterImage::filled(256, 256, 128);
        let probs = predict_mask(&model, &img).unwrap();
        assert_eq!(probs.dim(), (256, 256));
    }

    #[test]
    fn zero_epochs_leaves_weights_unchanged() {
        let model = build_unet(tiny_cfg(), 5).unwrap();
        let before = model.export_state();
        let (img, mask) = blob_pair(32);
        let model = train_unet(model, &[(img, mask)], 0, 0.01).unwrap();
        assert_eq!(model.export_state(), before);
        assert_eq!(model.training_meta.epochs, 0);
    }

    #[test]
    fn training_rejects_empty_and_mismatched_pairs() {
        let model = build_unet(tiny_cfg(), 5).unwrap();
        assert!(matches!(
            train_unet(model, &[], 1, 0.01),
            Err(Error::InvalidData(_))
        ));
        let model = build_unet(tiny_cfg(), 5).unwrap();
        let img = RasterImage::filled(32, 32, 0);
        let mask = LungMask::filled(16, 16, 0);
        assert!(matches!(
            train_unet(model, &[(img, mask)], 1, 0.01),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn overfits_single_pair_to_high_dice() {
        let (img, mask) = blob_pair(32);
        let model = build_unet(tiny_cfg(), 9).unwrap();
        let model = train_unet(model, &[(img.clone(), mask.clone())], 200, 0.01).unwrap();
        assert!(model.training_meta.loss_trace.iter().all(|l| l.is_finite()));
        let probs = predict_mask(&model, &img).unwrap();
        let predicted = binarize_mask(&probs, 0.5, false).unwrap();
        let dice = predicted.dice(&mask);
        assert!(dice > 0.95, "dice only reached {dice}");
    }

    /// Training with more pairs than the mini-batch size exercises the
    /// batched (N > 1) forward/backward path through the skip concatenation.
    #[test]
    fn training_handles_multi_image_batches() {
        let (img, mask) = blob_pair(32);
        let pairs: Vec<_> = (0..5).map(|_| (img.clone(), mask.clone())).collect();
        let model = build_unet(tiny_cfg(), 17).unwrap();
        let model = train_unet(model, &pairs, 2, 0.01).unwrap();
        assert_eq!(model.training_meta.loss_trace.len(), 2);
        assert!(model.training_meta.final_loss.is_finite());
    }

    #[test]
    fn all_zero_targets_drive_predictions_toward_zero() {
        let (img, _) = blob_pair(32);
        let empty = LungMask::filled(32, 32, 0);
        let model = build_unet(tiny_cfg(), 13).unwrap();
        let model = train_unet(model, &[(img.clone(), empty)], 120, 0.01).unwrap();
        let probs = predict_mask(&model, &img).unwrap();
        let mean = probs.iter().map(|&p| p as f64).sum::<f64>() / probs.len() as f64;
        assert!(mean < 0.1, "mean prediction {mean}");
    }

    #[test]
    fn prediction_is_deterministic_and_checks_dims() {
        let model = build_unet(tiny_cfg(), 3).unwrap();
        let (img, _) = blob_pair(32);
        let a = predict_mask(&model, &img).unwrap();
        let b = predict_mask(&model, &img).unwrap();
        assert_eq!(a, b);

        let wrong = RasterImage::filled(16, 16, 0);
        assert!(matches!(
            predict_mask(&model, &wrong),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn probabilities_bounded_for_extreme_inputs() {
        let model = build_unet(tiny_cfg(), 3).unwrap();
        for v in [0u8, 255] {
            let img = RasterImage::filled(32, 32, v);
            let probs = predict_mask(&model, &img).unwrap();
            assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn binarize_trivial_thresholds() {
        let high = Array2::from_elem((4, 5), 0.9f32);
        assert_eq!(binarize_mask(&high, 0.5, false).unwrap().area(), 20);
        let low = Array2::from_elem((4, 5), 0.1f32);
        assert_eq!(binarize_mask(&low, 0.5, false).unwrap().area(), 0);
        assert!(binarize_mask(&high, 0.0, false).is_err());
        assert!(binarize_mask(&high, 1.0, false).is_err());
    }

    #[test]
    fn cleanup_keeps_two_largest_blobs() {
        // three rectangular blobs of areas 20, 12, and 4
        let mut probs = Array2::from_elem((16, 16), 0.0f32);
        for y in 1..5 {
            for x in 1..6 {
                probs[[y, x]] = 0.9; // 4x5 = 20
            }
        }
        for y in 8..11 {
            for x in 2..6 {
                probs[[y, x]] = 0.9; // 3x4 = 12
            }
        }
        for y in 12..14 {
            for x in 10..12 {
                probs[[y, x]] = 0.9; // 2x2 = 4
            }
        }
        let kept = binarize_mask(&probs, 0.5, true).unwrap();
        assert_eq!(kept.area(), 32);
        assert_eq!(kept.get(11, 13), 0, "smallest blob must be removed");

        // oracle: independent component labelling by repeated scanning
        let raw = binarize_mask(&probs, 0.5, false).unwrap();
        let mut labels = vec![0usize; 16 * 16];
        let mut next = 0usize;
        for start in 0..256 {
            if raw.values()[start] == 1 && labels[start] == 0 {
                next += 1;
                let mut frontier = vec![start];
                labels[start] = next;
                while let Some(p) = frontier.pop() {
                    let (x, y) = (p % 16, p / 16);
                    for (nx, ny) in [
                        (x.wrapping_sub(1), y),
                        (x + 1, y),
                        (x, y.wrapping_sub(1)),
                        (x, y + 1),
                    ] {
                        if nx < 16 && ny < 16 {
                            let q = ny * 16 + nx;
                            if raw.values()[q] == 1 && labels[q] == 0 {
                                labels[q] = next;
                                frontier.push(q);
                            }
                        }
                    }
                }
            }
        }
        let mut areas = vec![0usize; next + 1];
        for &l in &labels {
            areas[l] += usize::from(l > 0);
        }
        let mut ranked: Vec<usize> = (1..=next).collect();
        ranked.sort_by_key(|&l| std::cmp::Reverse(areas[l]));
        let keep: Vec<usize> = ranked.into_iter().take(2).collect();
        for (i, &l) in labels.iter().enumerate() {
            let want = u8::from(l > 0 && keep.contains(&l));
            assert_eq!(kept.values()[i], want, "pixel {i}");
        }
    }

    #[test]
    fn apply_mask_identity_zero_and_half() {
        let img = RasterImage::from_fn(8, 6, 1, |x, y, _| (x * 20 + y) as u8);
        let ones = LungMask::filled(8, 6, 1);
        assert_eq!(apply_mask(&img, &ones).unwrap().pixels(), img.pixels());

        let zeros = LungMask::filled(8, 6, 0);
        assert!(apply_mask(&img, &zeros).unwrap().pixels().iter().all(|&v| v == 0));

        let left = LungMask::from_fn(8, 6, |x, _| u8::from(x < 4));
        let out = apply_mask(&img, &left).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let want = if x < 4 { img.get(x, y, 0) } else { 0 };
                assert_eq!(out.get(x, y, 0), want);
            }
        }

        let small = LungMask::filled(3, 3, 1);
        assert!(matches!(apply_mask(&img, &small), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn dice_identities() {
        let (_, mask) = blob_pair(32);
        assert_eq!(mask.dice(&mask), 1.0);
        let complement = LungMask::from_fn(32, 32, |x, y| 1 - mask.get(x, y));
        assert_eq!(mask.dice(&complement), 0.0);
        let empty = LungMask::filled(32, 32, 0);
        assert_eq!(empty.dice(&empty), 1.0);
    }

    #[test]
    fn mask_rejects_nonbinary_values() {
        assert!(LungMask::new(2, 2, vec![0, 1, 2, 0]).is_err());
        assert!(LungMask::new(2, 2, vec![0, 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let (img, mask) = blob_pair(32);
        let model = build_unet(tiny_cfg(), 31).unwrap();
        let model = train_unet(model, &[(img.clone(), mask)], 30, 0.01).unwrap();
        let before = predict_mask(&model, &img).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unet.ckpt");
        model.save(&path).unwrap();
        let restored = SegmentationModel::load(&path).unwrap();
        assert_eq!(restored.config(), model.config());
        assert_eq!(restored.training_meta.epochs, 30);
        assert_eq!(predict_mask(&restored, &img).unwrap(), before);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn apply_mask_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = RasterImage::from_fn(12, 10, 1, |_, _, _| rng.gen());
            let mask = LungMask::from_fn(12, 10, |x, y| u8::from((x + y + seed as usize) % 3 == 0));
            let once = apply_mask(&img, &mask).unwrap();
            let twice = apply_mask(&once, &mask).unwrap();
            prop_assert_eq!(once.pixels(), twice.pixels());
        }

        #[test]
        fn masked_output_ignores_outside_content(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = RasterImage::from_fn(12, 10, 1, |_, _, _| rng.gen());
            let mask = LungMask::from_fn(12, 10, |x, _| u8::from(x % 2 == 0));
            // b agrees with a inside the mask, arbitrary outside
            let b = RasterImage::from_fn(12, 10, 1, |x, y, c| {
                if mask.get(x, y) == 1 { a.get(x, y, c) } else { 255 - a.get(x, y, c) }
            });
            let ma = apply_mask(&a, &mask).unwrap();
            let mb = apply_mask(&b, &mask).unwrap();
            prop_assert_eq!(ma.pixels(), mb.pixels());
        }
    }
}
