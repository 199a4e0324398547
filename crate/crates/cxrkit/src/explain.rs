//! Gradient-weighted activation heatmaps for classifier decisions.
//!
//! A heatmap is built from the activations at the feature/head boundary of a
//! [`TrainedClassifier`]: the gradient of the target-class *probability* is
//! pushed back through the head, each activation channel is weighted by the
//! spatial mean of its gradient, and the positive part of the weighted sum is
//! upsampled to input resolution and normalized to a unit peak. Targeting the
//! probability rather than the raw score makes the two class targets exact
//! mirror images of each other (`∂p0/∂z = -∂p1/∂z`), which is what gives the
//! counterfactual map its meaning.
//!
//! Heatmap generation runs a caching forward/backward pass over the model
//! head, so calls against one model instance must be serialized; distinct
//! instances are independent.

use ndarray::Array2;

use crate::classify::{image_to_input, scores_to_prediction, Prediction, TrainedClassifier};
use crate::error::{Error, Result};
use crate::nn::{Layer, Sequential, Tensor};
use crate::raster::{self, ClassLabel, RasterImage};
use crate::seg::LungMask;

/// How the coarse activation map is scaled up to input resolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampling {
    /// Half-pixel-centered bilinear interpolation; the default rendering.
    #[default]
    Bilinear,
    /// Nearest-neighbor; keeps the coarse cells visible for debugging.
    Nearest,
}

/// A per-pixel relevance map for one class, at the explained input's
/// resolution.
///
/// Every value lies in [0, 1], and the maximum is exactly 1 unless the map is
/// identically zero (a model whose decision is locally constant produces no
/// relevance anywhere).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Array2<f32>,
    target_class: ClassLabel,
}

impl Heatmap {
    /// Builds a heatmap from an un-normalized relevance map.
    ///
    /// Negative entries are clamped to zero (negative evidence is not
    /// rendered), then the map is divided by its maximum so the peak is
    /// exactly 1; an all-zero map is kept all-zero. Non-finite entries are
    /// rejected.
    pub fn from_raw(mut values: Array2<f32>, target_class: ClassLabel) -> Result<Heatmap> {
        if values.is_empty() {
            return Err(Error::InvalidInput("heatmap must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "heatmap values must be finite".into(),
            ));
        }
        values.mapv_inplace(|v| v.max(0.0));
        let max = values.iter().fold(0.0f32, |m, &v| m.max(v));
        if max > 0.0 {
            values.mapv_inplace(|v| v / max);
        }
        Ok(Heatmap {
            values,
            target_class,
        })
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn target_class(&self) -> ClassLabel {
        self.target_class
    }

    /// Relevance at pixel (x, y), in [0, 1].
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[[y, x]]
    }

    /// Row-major (height, width) view of the relevance values.
    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    /// Renders the map as an 8-bit grayscale image (relevance 1 → 255).
    pub fn to_image(&self) -> RasterImage {
        RasterImage::from_fn(self.width(), self.height(), 1, |x, y, _| {
            (self.values[[y, x]] * 255.0).round() as u8
        })
    }
}

/// A prediction together with the heatmap that supports it and the
/// counterfactual map for the class that was not chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub prediction: Prediction,
    /// Relevance for the predicted class.
    pub heatmap: Heatmap,
    /// Relevance for the opposite class.
    pub counterfactual: Heatmap,
}

/// Intermediate products of one heatmap computation, at feature-map
/// resolution.
#[derive(Debug, Clone)]
pub struct CamComponents {
    /// Per-channel weights: the spatial mean of the target-probability
    /// gradient over each activation channel.
    pub channel_weights: Vec<f32>,
    /// Positive part of the channel-weighted activation sum, un-normalized.
    pub map: Array2<f32>,
    /// The model's prediction for the explained input.
    pub prediction: Prediction,
}

/// Computes channel weights and the raw activation map for an explicit
/// feature-extractor/head split.
///
/// This is the low-level entry used by [`grad_cam`]; it is public so custom
/// splits and hand-constructed networks can be explained and verified
/// directly. The head must map the feature tensor to exactly two class
/// scores. The head runs a caching forward and a backward pass, so the claims
/// in the module-level concurrency note apply; heads containing layers with
/// training-time side effects (batch normalization) will advance their
/// running statistics.
pub fn grad_cam_components(
    features: &Sequential,
    head: &mut Sequential,
    input: &Tensor,
    target: ClassLabel,
) -> Result<CamComponents> {
    let n = input.dim().0;
    if n != 1 {
        return Err(Error::InvalidInput(format!(
            "explanations are computed one image at a time, got a batch of {n}"
        )));
    }
    let activations = features.infer(input);
    let scores = head.forward(&activations);
    if scores.dim() != (1, 2, 1, 1) {
        return Err(Error::InvalidModel(format!(
            "head must reduce features to exactly two class scores, got shape {:?}",
            scores.dim()
        )));
    }
    let prediction = scores_to_prediction(scores[[0, 0, 0, 0]] as f64, scores[[0, 1, 0, 0]] as f64);

    // d p_target / d z_j for a two-class softmax: +p0*p1 at the target's own
    // score and -p0*p1 at the other. Swapping the target negates the whole
    // gradient, and every head operation is linear in the incoming gradient
    // once the forward caches are fixed, so the two targets yield exactly
    // negated channel weights.
    let pp = (prediction.p_covid * prediction.p_normal) as f32;
    let t = target.index();
    let mut gscores = Tensor::zeros((1, 2, 1, 1));
    gscores[[0, t, 0, 0]] = pp;
    gscores[[0, 1 - t, 0, 0]] = -pp;
    let gact = head.backward(&gscores);

    let (_, channels, fh, fw) = activations.dim();
    let cell_count = (fh * fw) as f64;
    let mut channel_weights = vec![0.0f32; channels];
    for (k, w) in channel_weights.iter_mut().enumerate() {
        let mut sum = 0.0f64;
        for i in 0..fh {
            for j in 0..fw {
                sum += gact[[0, k, i, j]] as f64;
            }
        }
        *w = (sum / cell_count) as f32;
    }

    let mut map = Array2::<f32>::zeros((fh, fw));
    for i in 0..fh {
        for j in 0..fw {
            let mut sum = 0.0f64;
            for (k, &w) in channel_weights.iter().enumerate() {
                sum += w as f64 * activations[[0, k, i, j]] as f64;
            }
            map[[i, j]] = if sum > 0.0 { sum as f32 } else { 0.0 };
        }
    }

    Ok(CamComponents {
        channel_weights,
        map,
        prediction,
    })
}

/// Computes the class-relevance heatmap for one image.
///
/// The map is formed at the resolution of the model's last feature maps,
/// upsampled bilinearly to the input size, and normalized to a unit peak
/// (all-zero maps stay all-zero). The model must have been trained; the image
/// must match the architecture's input size.
pub fn grad_cam(
    model: &mut TrainedClassifier,
    img: &RasterImage,
    target: ClassLabel,
) -> Result<Heatmap> {
    grad_cam_with(model, img, target, Upsampling::Bilinear).map(|(hm, _)| hm)
}

/// [`grad_cam`] with an explicit upsampling mode; also returns the
/// prediction for the explained image.
pub fn grad_cam_with(
    model: &mut TrainedClassifier,
    img: &RasterImage,
    target: ClassLabel,
    sampling: Upsampling,
) -> Result<(Heatmap, Prediction)> {
    if model.history().is_empty() {
        return Err(Error::InvalidModel(
            "classifier has no training history; train it or load a trained checkpoint before explaining".into(),
        ));
    }
    let size = model.input_size();
    let input = image_to_input(img, size)?;
    let components = grad_cam_components(&model.features, &mut model.head, &input, target)?;
    let resized = resize_map(&components.map, size, size, sampling);
    let heatmap = Heatmap::from_raw(resized, target)?;
    Ok((heatmap, components.prediction))
}

/// Predicts the image's class and pairs the heatmap for the predicted class
/// with the counterfactual map for the class that was not chosen.
pub fn counterfactual_cam(
    model: &mut TrainedClassifier,
    img: &RasterImage,
) -> Result<Explanation> {
    let (covid, prediction) = grad_cam_with(model, img, ClassLabel::Covid, Upsampling::Bilinear)?;
    let (normal, _) = grad_cam_with(model, img, ClassLabel::Normal, Upsampling::Bilinear)?;
    let (heatmap, counterfactual) = match prediction.label {
        ClassLabel::Covid => (covid, normal),
        ClassLabel::Normal => (normal, covid),
    };
    Ok(Explanation {
        prediction,
        heatmap,
        counterfactual,
    })
}

/// Blends a fixed blue→yellow ramp over a grayscale image.
///
/// Relevance 0 maps to pure blue, relevance 1 to pure yellow, and `alpha` in
/// [0, 1] controls the blend: 0 reproduces the grayscale image in three
/// channels pixel-exactly, 1 shows only the ramp. Three-channel sources are
/// converted to luma first.
pub fn overlay_heatmap(img: &RasterImage, hm: &Heatmap, alpha: f64) -> Result<RasterImage> {
    if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "overlay alpha must be within [0, 1], got {alpha}"
        )));
    }
    let gray;
    let gray = match img.channels() {
        1 => img,
        3 => {
            gray = raster::to_grayscale(img)?;
            &gray
        }
        c => {
            return Err(Error::InvalidInput(format!(
                "overlay needs a 1- or 3-channel image, got {c} channels"
            )))
        }
    };
    if gray.width() != hm.width() || gray.height() != hm.height() {
        return Err(Error::InvalidInput(format!(
            "image is {}x{} but heatmap is {}x{}",
            gray.width(),
            gray.height(),
            hm.width(),
            hm.height()
        )));
    }
    let mut out = RasterImage::new(
        hm.width(),
        hm.height(),
        3,
        vec![0; hm.width() * hm.height() * 3],
    )?;
    for y in 0..hm.height() {
        for x in 0..hm.width() {
            let t = hm.get(x, y) as f64;
            let g = gray.get(x, y, 0) as f64;
            let ramp = [255.0 * t, 255.0 * t, 255.0 * (1.0 - t)];
            for (c, &rc) in ramp.iter().enumerate() {
                let v = (1.0 - alpha) * g + alpha * rc;
                out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Fraction of total heatmap relevance that falls outside the mask.
///
/// Returns `Σ_{mask=0} hm / Σ hm`, or 0 for an all-zero heatmap. A value near
/// zero means the explanation is supported by in-mask evidence only.
pub fn out_of_mask_relevance(hm: &Heatmap, mask: &LungMask) -> Result<f64> {
    if mask.width() != hm.width() || mask.height() != hm.height() {
        return Err(Error::InvalidInput(format!(
            "heatmap is {}x{} but mask is {}x{}",
            hm.width(),
            hm.height(),
            mask.width(),
            mask.height()
        )));
    }
    let mut total = 0.0f64;
    let mut outside = 0.0f64;
    for y in 0..hm.height() {
        for x in 0..hm.width() {
            let v = hm.get(x, y) as f64;
            total += v;
            if mask.get(x, y) == 0 {
                outside += v;
            }
        }
    }
    if total == 0.0 {
        Ok(0.0)
    } else {
        Ok(outside / total)
    }
}

/// Resizes a real-valued map with the same half-pixel-centered sampling used
/// for images, interpolating in f64.
fn resize_map(map: &Array2<f32>, w: usize, h: usize, sampling: Upsampling) -> Array2<f32> {
    let (sh, sw) = map.dim();
    if (sh, sw) == (h, w) {
        return map.clone();
    }
    let sx = sw as f64 / w as f64;
    let sy = sh as f64 / h as f64;
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = match sampling {
                Upsampling::Bilinear => {
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
                    let y0 = fy.floor() as usize;
                    let y1 = (y0 + 1).min(sh - 1);
                    let wy = fy - y0 as f64;
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(sw - 1);
                    let wx = fx - x0 as f64;
                    let p00 = map[[y0, x0]] as f64;
                    let p10 = map[[y0, x1]] as f64;
                    let p01 = map[[y1, x0]] as f64;
                    let p11 = map[[y1, x1]] as f64;
                    let top = p00 + (p10 - p00) * wx;
                    let bottom = p01 + (p11 - p01) * wx;
                    (top + (bottom - top) * wy) as f32
                }
                Upsampling::Nearest => {
                    let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(sh - 1);
                    let ix = (((x as f64 + 0.5) * sx).floor() as usize).min(sw - 1);
                    map[[iy, ix]]
                }
            };
        }
    }
    out
}
