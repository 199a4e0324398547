//! Contrast-enhancement filter bank.
//!
//! Histogram equalization is the pipeline default; CLAHE, two unsharp
//! masks, and a Butterworth low-pass are available for side-by-side
//! comparison. All filters preserve dimensions and the 8-bit range.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Filter selection plus its parameters. Defaults follow common practice
/// for chest films; every value can be overridden in config or flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", deny_unknown_fields)]
pub enum EnhancementConfig {
    #[serde(rename = "he")]
    He,
    #[serde(rename = "clahe")]
    Clahe {
        #[serde(default = "default_clip")]
        clip: f64,
        #[serde(default = "default_tiles")]
        tiles: [usize; 2],
    },
    #[serde(rename = "unsharp-gaussian")]
    UnsharpGaussian {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_amount")]
        amount: f64,
    },
    #[serde(rename = "unsharp-laplacian")]
    UnsharpLaplacian {
        #[serde(default = "default_amount")]
        amount: f64,
    },
    #[serde(rename = "butterworth")]
    Butterworth {
        #[serde(default = "default_order")]
        order: u32,
        #[serde(default = "default_cutoff")]
        cutoff: f64,
    },
}

fn default_clip() -> f64 {
    2.0
}
fn default_tiles() -> [usize; 2] {
    [8, 8]
}
fn default_sigma() -> f64 {
    2.0
}
fn default_amount() -> f64 {
    1.0
}
fn default_order() -> u32 {
    2
}
fn default_cutoff() -> f64 {
    0.25
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        EnhancementConfig::He
    }
}

impl EnhancementConfig {
    pub fn clahe_default() -> Self {
        EnhancementConfig::Clahe {
            clip: default_clip(),
            tiles: default_tiles(),
        }
    }

    pub fn unsharp_gaussian_default() -> Self {
        EnhancementConfig::UnsharpGaussian {
            sigma: default_sigma(),
            amount: default_amount(),
        }
    }

    pub fn unsharp_laplacian_default() -> Self {
        EnhancementConfig::UnsharpLaplacian {
            amount: default_amount(),
        }
    }

    pub fn butterworth_default() -> Self {
        EnhancementConfig::Butterworth {
            order: default_order(),
            cutoff: default_cutoff(),
        }
    }

    /// Checks that the selected method's parameters are usable.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            EnhancementConfig::He => Ok(()),
            EnhancementConfig::Clahe { clip, tiles } => {
                if clip <= 0.0 || !clip.is_finite() {
                    return bad(format!("clahe clip limit must be positive, got {clip}"));
                }
                if tiles[0] == 0 || tiles[1] == 0 {
                    return bad(format!("clahe tile grid must be at least 1x1, got {tiles:?}"));
                }
                Ok(())
            }
            EnhancementConfig::UnsharpGaussian { sigma, amount } => {
                if sigma <= 0.0 || !sigma.is_finite() {
                    return bad(format!("unsharp sigma must be positive, got {sigma}"));
                }
                if amount <= 0.0 || !amount.is_finite() {
                    return bad(format!("unsharp amount must be positive, got {amount}"));
                }
                Ok(())
            }
            EnhancementConfig::UnsharpLaplacian { amount } => {
                if amount <= 0.0 || !amount.is_finite() {
                    return bad(format!("unsharp amount must be positive, got {amount}"));
                }
                Ok(())
            }
            EnhancementConfig::Butterworth { order, cutoff } => {
                if order < 1 {
                    return bad("butterworth order must be at least 1".into());
                }
                if !(cutoff > 0.0 && cutoff <= 0.5) {
                    return bad(format!("butterworth cutoff must be in (0, 0.5], got {cutoff}"));
                }
                Ok(())
            }
        }
    }
}

/// Applies the configured filter.
pub fn enhance(img: &RasterImage, cfg: &EnhancementConfig) -> Result<RasterImage> {
    cfg.validate()?;
    match *cfg {
        EnhancementConfig::He => hist_equalize(img),
        EnhancementConfig::Clahe { clip, tiles } => clahe(img, clip, (tiles[0], tiles[1])),
        EnhancementConfig::UnsharpGaussian { sigma, amount } => {
            unsharp_gaussian(img, sigma, amount)
        }
        EnhancementConfig::UnsharpLaplacian { amount } => unsharp_laplacian(img, amount),
        EnhancementConfig::Butterworth { order, cutoff } => butterworth_lowpass(img, order, cutoff),
    }
}

fn clamp_round(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Builds the equalization lookup table for a 256-bin histogram, or `None`
/// for a degenerate (single occupied bin) histogram that must pass through
/// unchanged.
fn equalize_lut(hist: &[u64; 256]) -> Option<[u8; 256]> {
    let total: u64 = hist.iter().sum();
    let cdf_min = hist.iter().scan(0u64, |acc, &h| {
        *acc += h;
        Some(*acc)
    });
    let cdf_min = cdf_min.clone().find(|&c| c > 0).unwrap_or(0);
    if cdf_min == total {
        return None; // all mass in one bin: equalization would divide 0/0
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    let denom = (total - cdf_min) as f64;
    for (v, &h) in hist.iter().enumerate() {
        cdf += h;
        let c = cdf.saturating_sub(cdf_min) as f64;
        lut[v] = clamp_round(c / denom * 255.0);
    }
    Some(lut)
}

/// Global histogram equalization: maps each intensity through the rescaled
/// empirical CDF so the darkest occupied bin lands on 0 and the brightest
/// on 255. Constant images are returned unchanged.
pub fn hist_equalize(img: &RasterImage) -> Result<RasterImage> {
    if img.channels() != 1 {
        return Err(Error::InvalidImage(format!(
            "histogram equalization needs a single-channel image, got {} channels",
            img.channels()
        )));
    }
    let mut hist = [0u64; 256];
    for y in 0..img.height() {
        for x in 0..img.width() {
            hist[img.get(x, y, 0) as usize] += 1;
        }
    }
    match equalize_lut(&hist) {
        None => Ok(img.clone()),
        Some(lut) => Ok(RasterImage::from_fn(img.width(), img.height(), 1, |x, y, _| {
            lut[img.get(x, y, 0) as usize]
        })),
    }
}

/// Clips a histogram at `clip x (average bin height)` and spreads the
/// excess uniformly across all bins.
fn clip_histogram(hist: &mut [u64; 256], clip: f64, tile_pixels: u64) {
    let limit = ((clip * tile_pixels as f64 / 256.0).max(1.0)) as u64;
    let mut excess = 0u64;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / 256;
    let remainder = (excess % 256) as usize;
    for (i, h) in hist.iter_mut().enumerate() {
        *h += share + u64::from(i < remainder);
    }
}

/// Contrast-limited adaptive histogram equalization: per-tile clipped
/// equalization with bilinear blending between neighboring tile mappings.
/// Multi-channel images are processed channel by channel.
pub fn clahe(img: &RasterImage, clip: f64, tiles: (usize, usize)) -> Result<RasterImage> {
    let (rows, cols) = tiles;
    if clip <= 0.0 || !clip.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "clahe clip limit must be positive, got {clip}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("clahe tile grid must be at least 1x1".into()));
    }
    if rows > img.height() || cols > img.width() {
        return Err(Error::InvalidArgument(format!(
            "tile grid {rows}x{cols} exceeds image dimensions {}x{}",
            img.height(),
            img.width()
        )));
    }

    let (w, h) = (img.width(), img.height());
    let th = h as f64 / rows as f64;
    let tw = w as f64 / cols as f64;
    let tile_of = |p: usize, size: f64, n: usize| ((p as f64 / size) as usize).min(n - 1);

    let mut out = img.clone();
    for ch in 0..img.channels() {
        // per-tile clipped histograms
        let mut hists = vec![[0u64; 256]; rows * cols];
        for y in 0..h {
            let r = tile_of(y, th, rows);
            for x in 0..w {
                let c = tile_of(x, tw, cols);
                hists[r * cols + c][img.get(x, y, ch) as usize] += 1;
            }
        }
        let luts: Vec<[u8; 256]> = hists
            .iter_mut()
            .map(|hist| {
                let occupied = hist.iter().filter(|&&v| v > 0).count();
                if occupied <= 1 {
                    // constant tile: equalization has nothing to spread
                    return std::array::from_fn(|v| v as u8);
                }
                let pixels: u64 = hist.iter().sum();
                clip_histogram(hist, clip, pixels);
                equalize_lut(hist).unwrap_or(std::array::from_fn(|v| v as u8))
            })
            .collect();

        // bilinear blend between the four surrounding tile mappings
        for y in 0..h {
            let fy = (y as f64 + 0.5) / th - 0.5;
            let wy = fy - fy.floor();
            let r0 = (fy.floor().max(0.0) as usize).min(rows - 1);
            let r1 = ((fy.floor() + 1.0).max(0.0) as usize).min(rows - 1);
            for x in 0..w {
                let fx = (x as f64 + 0.5) / tw - 0.5;
                let wx = fx - fx.floor();
                let c0 = (fx.floor().max(0.0) as usize).min(cols - 1);
                let c1 = ((fx.floor() + 1.0).max(0.0) as usize).min(cols - 1);
                let v = img.get(x, y, ch) as usize;
                let top = (1.0 - wx) * luts[r0 * cols + c0][v] as f64
                    + wx * luts[r0 * cols + c1][v] as f64;
                let bottom = (1.0 - wx) * luts[r1 * cols + c0][v] as f64
                    + wx * luts[r1 * cols + c1][v] as f64;
                out.set(x, y, ch, clamp_round((1.0 - wy) * top + wy * bottom));
            }
        }
    }
    Ok(out)
}

/// Symmetric reflection for out-of-range coordinates: -1 maps to 0,
/// n maps to n-1, and so on. Avoids dark halos at film edges.
fn reflect(mut p: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if p < 0 {
            p = -p - 1;
        } else if p >= n {
            p = 2 * n - p - 1;
        } else {
            return p as usize;
        }
    }
}

fn channel_as_f64(img: &RasterImage, ch: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(img.get(x, y, ch) as f64);
        }
    }
    out
}

/// Separable Gaussian blur with reflect borders; kernel radius is 3 sigma.
fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, w);
                acc += k * data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, h);
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Unsharp masking with a Gaussian base: out = img + amount * (img - blur).
pub fn unsharp_gaussian(img: &RasterImage, sigma: f64, amount: f64) -> Result<RasterImage> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for ch in 0..img.channels() {
        let data = channel_as_f64(img, ch);
        let blur = gaussian_blur(&data, w, h, sigma);
        for y in 0..h {
            for x in 0..w {
                let v = data[y * w + x];
                out.set(x, y, ch, clamp_round(v + amount * (v - blur[y * w + x])));
            }
        }
    }
    Ok(out)
}

/// Unsharp masking with the 4-neighbor Laplacian: out = img - amount * lap.
pub fn unsharp_laplacian(img: &RasterImage, amount: f64) -> Result<RasterImage> {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for ch in 0..img.channels() {
        let data = channel_as_f64(img, ch);
        let at = |x: isize, y: isize| data[reflect(y, h) * w + reflect(x, w)];
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as isize, y as isize);
                let lap = at(xi - 1, yi) + at(xi + 1, yi) + at(xi, yi - 1) + at(xi, yi + 1)
                    - 4.0 * at(xi, yi);
                out.set(x, y, ch, clamp_round(at(xi, yi) - amount * lap));
            }
        }
    }
    Ok(out)
}

/// In-place 2D FFT over a row-major complex buffer.
fn fft2d(buf: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Signed normalized frequency of DFT bin `k` out of `n`, in [-0.5, 0.5].
fn bin_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}

/// Frequency-domain low-pass: multiplies the spectrum by
/// H = 1 / (1 + (d/cutoff)^(2 order)) and keeps the clamped real part.
pub fn butterworth_lowpass(img: &RasterImage, order: u32, cutoff: f64) -> Result<RasterImage> {
    if order < 1 {
        return Err(Error::InvalidArgument("butterworth order must be at least 1".into()));
    }
    if !(cutoff > 0.0 && cutoff <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "butterworth cutoff must be in (0, 0.5], got {cutoff}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for ch in 0..img.channels() {
        let data = channel_as_f64(img, ch);
        let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2d(&mut buf, w, h, false);
        for y in 0..h {
            let fv = bin_frequency(y, h);
            for x in 0..w {
                let fu = bin_frequency(x, w);
                let d = (fu * fu + fv * fv).sqrt();
                let gain = 1.0 / (1.0 + (d / cutoff).powi(2 * order as i32));
                buf[y * w + x] *= gain;
            }
        }
        fft2d(&mut buf, w, h, true);
        let scale = 1.0 / (w * h) as f64;
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, ch, clamp_round(buf[y * w + x].re * scale));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(w: usize, h: usize, pixels: Vec<u8>) -> RasterImage {
        RasterImage::new(w, h, 1, pixels).unwrap()
    }

    fn random_gray(w: usize, h: usize, seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gray(w, h, (0..w * h).map(|_| rng.gen()).collect())
    }

    fn pixels(img: &RasterImage) -> Vec<u8> {
        let mut v = Vec::new();
        for y in 0..img.height() {
            for x in 0..img.width() {
                v.push(img.get(x, y, 0));
            }
        }
        v
    }

    // --- histogram equalization -------------------------------------------

    #[test]
    fn he_extremes_stay_fixed() {
        let img = gray(2, 1, vec![0, 255]);
        assert_eq!(pixels(&hist_equalize(&img).unwrap()), vec![0, 255]);
    }

    #[test]
    fn he_constant_unchanged() {
        let img = RasterImage::filled(5, 4, 77);
        assert_eq!(pixels(&hist_equalize(&img).unwrap()), pixels(&img));
    }

    #[test]
    fn he_two_level_image_stretches_to_full_range() {
        let img = gray(4, 1, vec![52, 52, 154, 154]);
        assert_eq!(pixels(&hist_equalize(&img).unwrap()), vec![0, 0, 255, 255]);
    }

    #[test]
    fn he_rejects_multichannel() {
        let img = RasterImage::new(1, 1, 3, vec![1, 2, 3]).unwrap();
        assert!(matches!(hist_equalize(&img), Err(Error::InvalidImage(_))));
    }

    #[test]
    fn he_matches_hand_cdf_on_small_fixture() {
        // hist: 10 x2, 20 x1, 30 x1; cdf = 2,3,4; cdf_min = 2
        // out(10) = 0, out(20) = round(1/2*255) = 128, out(30) = 255
        let img = gray(4, 1, vec![10, 20, 10, 30]);
        assert_eq!(pixels(&hist_equalize(&img).unwrap()), vec![0, 128, 0, 255]);
    }

    #[test]
    fn he_output_cdf_near_uniform() {
        // pigeonhole: deviation from the uniform CDF is bounded by the
        // largest single-bin input mass
        for img in [
            gray(256, 8, (0..256 * 8).map(|i| (i % 256) as u8).collect()),
            random_gray(64, 64, 5),
        ] {
            let n = (img.width() * img.height()) as f64;
            let mut hist = [0u64; 256];
            for p in pixels(&img) {
                hist[p as usize] += 1;
            }
            let max_mass = hist.iter().copied().max().unwrap() as f64 / n;

            let out = hist_equalize(&img).unwrap();
            let mut out_hist = [0u64; 256];
            for p in pixels(&out) {
                out_hist[p as usize] += 1;
            }
            let mut cum = 0u64;
            let mut worst: f64 = 0.0;
            for (t, &c) in out_hist.iter().enumerate() {
                cum += c;
                let uniform = (t + 1) as f64 / 256.0;
                worst = worst.max((cum as f64 / n - uniform).abs());
            }
            assert!(worst <= max_mass, "deviation {worst} > max bin mass {max_mass}");
        }
    }

    proptest! {
        #[test]
        fn he_mapping_is_monotone(vals in proptest::collection::vec(any::<u8>(), 2..300)) {
            let img = gray(vals.len(), 1, vals.clone());
            let out = hist_equalize(&img).unwrap();
            let mapped = pixels(&out);
            // same input value -> same output value
            let mut map = std::collections::BTreeMap::new();
            for (v, m) in vals.iter().zip(&mapped) {
                let prev = map.insert(*v, *m);
                prop_assert!(prev.is_none() || prev == Some(*m));
            }
            // non-decreasing over the present values
            let outputs: Vec<u8> = map.values().copied().collect();
            prop_assert!(outputs.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn filters_preserve_shape_and_stay_finite(seed in 0u64..50) {
            let img = random_gray(24, 18, seed);
            for result in [
                hist_equalize(&img),
                clahe(&img, 2.0, (3, 4)),
                unsharp_gaussian(&img, 1.5, 0.8),
                unsharp_laplacian(&img, 0.7),
                butterworth_lowpass(&img, 2, 0.25),
            ] {
                let out = result.unwrap();
                prop_assert_eq!(out.width(), img.width());
                prop_assert_eq!(out.height(), img.height());
                prop_assert_eq!(out.channels(), img.channels());
            }
        }
    }

    // --- CLAHE ------------------------------------------------------------

    #[test]
    fn clahe_single_tile_large_clip_equals_global_he() {
        let img = random_gray(40, 30, 11);
        let a = clahe(&img, 1e9, (1, 1)).unwrap();
        let b = hist_equalize(&img).unwrap();
        assert_eq!(pixels(&a), pixels(&b));
    }

    #[test]
    fn clahe_constant_unchanged() {
        let img = RasterImage::filled(32, 32, 93);
        let out = clahe(&img, 2.0, (4, 4)).unwrap();
        assert_eq!(pixels(&out), pixels(&img));
    }

    #[test]
    fn clahe_rejects_bad_arguments() {
        let img = random_gray(8, 8, 3);
        assert!(matches!(clahe(&img, 2.0, (9, 1)), Err(Error::InvalidArgument(_))));
        assert!(matches!(clahe(&img, 2.0, (1, 9)), Err(Error::InvalidArgument(_))));
        assert!(matches!(clahe(&img, 0.0, (2, 2)), Err(Error::InvalidArgument(_))));
        assert!(matches!(clahe(&img, 2.0, (0, 2)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn clahe_periodic_tiles_match_per_tile_equalization_oracle() {
        // image built by tiling one 16x16 patch 4x4 times: every tile sees
        // the same histogram, so blending must reproduce the single-tile
        // mapping everywhere; the oracle equalizes the patch by brute force
        let patch = random_gray(16, 16, 17);
        let img = RasterImage::from_fn(64, 64, 1, |x, y, _| patch.get(x % 16, y % 16, 0));
        let out = clahe(&img, 1e9, (4, 4)).unwrap();

        let mut hist = [0u64; 256];
        for p in pixels(&patch) {
            hist[p as usize] += 1;
        }
        let total: u64 = hist.iter().sum();
        let cdf: Vec<u64> = hist
            .iter()
            .scan(0, |a, &h| {
                *a += h;
                Some(*a)
            })
            .collect();
        let cdf_min = *cdf.iter().find(|&&c| c > 0).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let v = img.get(x, y, 0) as usize;
                let want = ((cdf[v] - cdf_min) as f64 / (total - cdf_min) as f64 * 255.0).round();
                assert_eq!(out.get(x, y, 0), want as u8, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn clahe_clip_limits_contrast_amplification() {
        // a nearly flat tile with a small bright detail: clipping must
        // temper the stretch that unlimited equalization applies
        let mut base = vec![100u8; 32 * 32];
        for i in 0..40 {
            base[i * 7 % (32 * 32)] = 140;
        }
        let img = gray(32, 32, base);
        let unlimited = clahe(&img, 1e9, (2, 2)).unwrap();
        let clipped = clahe(&img, 1.5, (2, 2)).unwrap();
        let spread = |p: &RasterImage| {
            let v = pixels(p);
            let (lo, hi) = (v.iter().min().copied().unwrap(), v.iter().max().copied().unwrap());
            hi as i32 - lo as i32
        };
        assert!(spread(&clipped) < spread(&unlimited));
    }

    // --- unsharp masks ----------------------------------------------------

    #[test]
    fn unsharp_gaussian_zero_amount_is_identity() {
        let img = random_gray(20, 20, 23);
        let out = unsharp_gaussian(&img, 2.0, 0.0).unwrap();
        assert_eq!(pixels(&out), pixels(&img));
    }

    #[test]
    fn unsharp_gaussian_constant_unchanged() {
        let img = RasterImage::filled(16, 16, 180);
        let out = unsharp_gaussian(&img, 3.0, 1.5).unwrap();
        assert_eq!(pixels(&out), pixels(&img));
    }

    #[test]
    fn unsharp_gaussian_rejects_bad_sigma() {
        let img = RasterImage::filled(4, 4, 0);
        assert!(matches!(
            unsharp_gaussian(&img, 0.0, 1.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            unsharp_gaussian(&img, -1.0, 1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unsharp_gaussian_step_edge_matches_dense_convolution_oracle() {
        let img = RasterImage::from_fn(16, 16, 1, |x, _, _| if x < 8 { 50 } else { 200 });
        let sigma = 2.0;
        let amount = 1.0;
        let out = unsharp_gaussian(&img, sigma, amount).unwrap();

        // oracle: full 2D kernel, direct O(n^2 k^2) convolution
        let radius = (3.0 * sigma).ceil() as isize;
        let k1: Vec<f64> = (-radius..=radius)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = k1.iter().sum();
        let mut overshoot_hi = false;
        let mut overshoot_lo = false;
        for y in 0..16usize {
            for x in 0..16usize {
                let mut blur = 0.0;
                for (i, ky) in k1.iter().enumerate() {
                    for (j, kx) in k1.iter().enumerate() {
                        let sy = reflect(y as isize + i as isize - radius, 16);
                        let sx = reflect(x as isize + j as isize - radius, 16);
                        blur += ky * kx * img.get(sx, sy, 0) as f64;
                    }
                }
                blur /= norm * norm;
                let v = img.get(x, y, 0) as f64;
                let want = clamp_round(v + amount * (v - blur));
                let got = out.get(x, y, 0);
                assert!(
                    (got as i16 - want as i16).abs() <= 1,
                    "({x},{y}): got {got}, oracle {want}"
                );
                overshoot_hi |= got > 200;
                overshoot_lo |= got < 50;
            }
        }
        // sharpening overshoots on both sides of the edge
        assert!(overshoot_hi && overshoot_lo);
    }

    #[test]
    fn unsharp_laplacian_zero_amount_is_identity() {
        let img = random_gray(12, 9, 29);
        let out = unsharp_laplacian(&img, 0.0).unwrap();
        assert_eq!(pixels(&out), pixels(&img));
    }

    #[test]
    fn unsharp_laplacian_constant_unchanged() {
        let img = RasterImage::filled(10, 10, 64);
        let out = unsharp_laplacian(&img, 2.0).unwrap();
        assert_eq!(pixels(&out), pixels(&img));
    }

    #[test]
    fn unsharp_laplacian_single_bright_pixel_hand_values() {
        // 5x5 zeros with 100 at the center; lap(center) = -400, so the
        // center brightens (clamped); each 4-neighbor sees lap = +100 and
        // clamps to 0; diagonals are untouched
        let mut img = RasterImage::filled(5, 5, 0);
        img.set(2, 2, 0, 100);
        let out = unsharp_laplacian(&img, 1.0).unwrap();
        assert_eq!(out.get(2, 2, 0), 255); // 100 + 400 clamped
        assert_eq!(out.get(1, 2, 0), 0); // 0 - 100 clamped
        assert_eq!(out.get(3, 2, 0), 0);
        assert_eq!(out.get(2, 1, 0), 0);
        assert_eq!(out.get(2, 3, 0), 0);
        assert_eq!(out.get(1, 1, 0), 0);
        assert_eq!(out.get(0, 0, 0), 0);
    }

    // --- butterworth ------------------------------------------------------

    #[test]
    fn butterworth_constant_unchanged() {
        let img = RasterImage::filled(17, 13, 201); // non-power-of-two dims
        let out = butterworth_lowpass(&img, 2, 0.25).unwrap();
        assert_eq!(pixels(&out), pixels(&img));
    }

    #[test]
    fn butterworth_rejects_bad_arguments() {
        let img = RasterImage::filled(4, 4, 0);
        assert!(matches!(
            butterworth_lowpass(&img, 0, 0.25),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            butterworth_lowpass(&img, 1, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            butterworth_lowpass(&img, 1, 0.6),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn butterworth_near_allpass_on_smooth_image() {
        // single low-frequency tone: widest allowed cutoff barely touches it
        let img = RasterImage::from_fn(64, 8, 1, |x, _, _| {
            clamp_round(128.0 + 50.0 * (2.0 * std::f64::consts::PI * x as f64 / 64.0).cos())
        });
        let out = butterworth_lowpass(&img, 1, 0.5).unwrap();
        for (a, b) in pixels(&img).into_iter().zip(pixels(&out)) {
            assert!((a as i16 - b as i16).abs() <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn butterworth_checkerboard_attenuated_by_analytic_gain() {
        // 1-pixel checkerboard lives at the (0.5, 0.5) corner frequency
        let amp = 20.0;
        let img = RasterImage::from_fn(16, 16, 1, |x, y, _| {
            clamp_round(128.0 + amp * if (x + y) % 2 == 0 { 1.0 } else { -1.0 })
        });
        for (order, cutoff) in [(1u32, 0.5), (2, 0.25)] {
            let d = (0.5f64 * 0.5 + 0.5 * 0.5).sqrt();
            let gain = 1.0 / (1.0 + (d / cutoff).powi(2 * order as i32));
            let out = butterworth_lowpass(&img, order, cutoff).unwrap();
            for y in 0..16usize {
                for x in 0..16usize {
                    let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                    let want = clamp_round(128.0 + amp * gain * sign);
                    let got = out.get(x, y, 0);
                    assert!(
                        (got as i16 - want as i16).abs() <= 1,
                        "({x},{y}) order {order}: got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn butterworth_matches_naive_dft_oracle() {
        let img = random_gray(16, 16, 31);
        let (order, cutoff) = (2u32, 0.2);
        let out = butterworth_lowpass(&img, order, cutoff).unwrap();

        // quadratic-time DFT, filter, inverse DFT in plain f64
        let n = 16usize;
        let tau = 2.0 * std::f64::consts::PI;
        let mut spectrum = vec![Complex::new(0.0, 0.0); n * n];
        for v in 0..n {
            for u in 0..n {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let phase = -tau * (u * x + v * y) as f64 / n as f64;
                        acc += Complex::from_polar(img.get(x, y, 0) as f64, phase);
                    }
                }
                let d = (bin_frequency(u, n).powi(2) + bin_frequency(v, n).powi(2)).sqrt();
                spectrum[v * n + u] = acc / (1.0 + (d / cutoff).powi(2 * order as i32));
            }
        }
        for y in 0..n {
            for x in 0..n {
                let mut acc = Complex::new(0.0, 0.0);
                for v in 0..n {
                    for u in 0..n {
                        let phase = tau * (u * x + v * y) as f64 / n as f64;
                        acc += spectrum[v * n + u] * Complex::from_polar(1.0, phase);
                    }
                }
                let want = clamp_round(acc.re / (n * n) as f64);
                let got = out.get(x, y, 0);
                assert!(
                    (got as i16 - want as i16).abs() <= 1,
                    "({x},{y}): got {got}, oracle {want}"
                );
            }
        }
    }

    // --- dispatch ---------------------------------------------------------

    #[test]
    fn dispatch_he_equals_direct_call() {
        let img = random_gray(20, 20, 37);
        let via_cfg = enhance(&img, &EnhancementConfig::He).unwrap();
        assert_eq!(pixels(&via_cfg), pixels(&hist_equalize(&img).unwrap()));
    }

    #[test]
    fn dispatch_degenerate_clahe_equals_he() {
        let img = random_gray(20, 20, 41);
        let cfg = EnhancementConfig::Clahe {
            clip: 1e9,
            tiles: [1, 1],
        };
        let out = enhance(&img, &cfg).unwrap();
        assert_eq!(pixels(&out), pixels(&hist_equalize(&img).unwrap()));
    }

    #[test]
    fn all_five_methods_differ_on_textured_fixture() {
        let img = random_gray(32, 32, 43);
        let outputs: Vec<Vec<u8>> = [
            EnhancementConfig::He,
            EnhancementConfig::clahe_default(),
            EnhancementConfig::unsharp_gaussian_default(),
            EnhancementConfig::unsharp_laplacian_default(),
            EnhancementConfig::butterworth_default(),
        ]
        .iter()
        .map(|cfg| pixels(&enhance(&img, cfg).unwrap()))
        .collect();
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                assert_ne!(outputs[i], outputs[j], "methods {i} and {j} agree");
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_params() {
        assert!(EnhancementConfig::He.validate().is_ok());
        assert!(EnhancementConfig::Clahe { clip: 0.0, tiles: [8, 8] }.validate().is_err());
        assert!(EnhancementConfig::Clahe { clip: 2.0, tiles: [0, 8] }.validate().is_err());
        assert!(EnhancementConfig::UnsharpGaussian { sigma: -1.0, amount: 1.0 }
            .validate()
            .is_err());
        assert!(EnhancementConfig::UnsharpLaplacian { amount: 0.0 }.validate().is_err());
        assert!(EnhancementConfig::Butterworth { order: 2, cutoff: 0.7 }.validate().is_err());
        assert!(EnhancementConfig::butterworth_default().validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = EnhancementConfig::Clahe {
            clip: 3.5,
            tiles: [4, 6],
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: EnhancementConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        let parsed: EnhancementConfig = toml::from_str("method = \"clahe\"").unwrap();
        assert_eq!(parsed, EnhancementConfig::clahe_default());
    }
}
