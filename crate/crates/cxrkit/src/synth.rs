//! Seeded synthetic chest phantoms.
//!
//! Real radiographs cannot ship with this crate, so demos and end-to-end
//! tests run on generated stand-ins: a bright thorax, two dark elliptical
//! lung fields, per-image geometric jitter and pixel noise, and — for the
//! positive class — one bright opacity placed wholly inside a lung. The
//! generator also emits the exact lung mask, giving segmentation training
//! pairs and ground truth for relevance audits for free.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::raster::{ClassLabel, LabeledImage, RasterImage};
use crate::seg::LungMask;

/// One generated image with its exact lung mask.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: RasterImage,
    pub mask: LungMask,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Generates one phantom. The same `(seed, size, label)` always yields the
/// same pixels.
pub fn phantom(seed: u64, size: usize, label: ClassLabel) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let jitter = |rng: &mut ChaCha8Rng, scale: f64| rng.gen_range(-scale..scale);

    let thorax = Ellipse {
        cx: s * 0.5 + jitter(&mut rng, s * 0.01),
        cy: s * 0.52 + jitter(&mut rng, s * 0.01),
        rx: s * 0.44 + jitter(&mut rng, s * 0.02),
        ry: s * 0.46 + jitter(&mut rng, s * 0.02),
    };
    let left = Ellipse {
        cx: s * 0.32 + jitter(&mut rng, s * 0.015),
        cy: s * 0.50 + jitter(&mut rng, s * 0.015),
        rx: s * 0.16 + jitter(&mut rng, s * 0.015),
        ry: s * 0.30 + jitter(&mut rng, s * 0.02),
    };
    let right = Ellipse {
        cx: s * 0.68 + jitter(&mut rng, s * 0.015),
        cy: s * 0.50 + jitter(&mut rng, s * 0.015),
        rx: s * 0.16 + jitter(&mut rng, s * 0.015),
        ry: s * 0.30 + jitter(&mut rng, s * 0.02),
    };

    // For positives: an opacity centered well inside one lung, so it stays
    // inside after its own radius is added.
    let opacity = match label {
        ClassLabel::Normal => None,
        ClassLabel::Covid => {
            let host = if rng.gen_bool(0.5) { left } else { right };
            let r = s * rng.gen_range(0.055..0.085);
            let dx = rng.gen_range(-0.45..0.45);
            let dy = rng.gen_range(-0.45..0.45);
            Some(Ellipse {
                cx: host.cx + dx * (host.rx - r).max(0.0),
                cy: host.cy + dy * (host.ry - r).max(0.0),
                rx: r,
                ry: r * rng.gen_range(0.8..1.25),
            })
        }
    };

    let mut noise = ChaCha8Rng::seed_from_u64(rng.gen());
    let image = RasterImage::from_fn(size, size, 1, |x, y, _| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v: f64 = if !thorax.contains(fx, fy) {
            30.0
        } else if left.contains(fx, fy) || right.contains(fx, fy) {
            70.0
        } else {
            160.0
        };
        if let Some(op) = &opacity {
            if op.contains(fx, fy) {
                v = 185.0;
            }
        }
        (v + noise.gen_range(-12.0..12.0)).round().clamp(0.0, 255.0) as u8
    });
    let mask = LungMask::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        u8::from(left.contains(fx, fy) || right.contains(fx, fy))
    });
    Phantom { image, mask, label }
}

/// Generates `n_per_class` phantoms per class as labeled images, in
/// interleaved (covid, normal) order, with ids like `covid/covid_00000.png`
/// matching what [`write_dataset`] puts on disk.
pub fn labeled_set(n_per_class: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(n_per_class * 2);
    for i in 0..n_per_class {
        for (offset, label) in [(0u64, ClassLabel::Covid), (1u64, ClassLabel::Normal)] {
            let p = phantom(seed.wrapping_add(2 * i as u64 + offset), size, label);
            out.push(LabeledImage::new(p.image, label, id_for(label, i)));
        }
    }
    out
}

/// Generates `(image, mask)` pairs for segmentation training; half the
/// images carry an opacity so the model sees both classes.
pub fn segmentation_pairs(n: usize, size: usize, seed: u64) -> Vec<(RasterImage, LungMask)> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { ClassLabel::Covid } else { ClassLabel::Normal };
            let p = phantom(seed.wrapping_add(1000 + i as u64), size, label);
            (p.image, p.mask)
        })
        .collect()
}

fn id_for(label: ClassLabel, index: usize) -> String {
    format!("{}/{}_{index:05}.png", label.as_str(), label.as_str())
}

/// Writes a dataset tree under `root`:
/// `covid/` and `normal/` image directories plus, when `with_masks` is set,
/// a mirrored `masks/` tree holding the ground-truth lung masks.
pub fn write_dataset(
    root: &Path,
    n_per_class: usize,
    size: usize,
    seed: u64,
    with_masks: bool,
) -> Result<()> {
    for i in 0..n_per_class {
        for (offset, label) in [(0u64, ClassLabel::Covid), (1u64, ClassLabel::Normal)] {
            let p = phantom(seed.wrapping_add(2 * i as u64 + offset), size, label);
            let rel = id_for(label, i);
            let img_path = root.join(&rel);
            std::fs::create_dir_all(img_path.parent().expect("id has a directory"))?;
            p.image.save(&img_path)?;
            if with_masks {
                let mask_path = root.join("masks").join(&rel);
                std::fs::create_dir_all(mask_path.parent().expect("id has a directory"))?;
                p.mask.to_image().save(&mask_path)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_deterministic_per_seed() {
        let a = phantom(7, 64, ClassLabel::Covid);
        let b = phantom(7, 64, ClassLabel::Covid);
        assert_eq!(a.image.pixels(), b.image.pixels());
        assert_eq!(a.mask.values(), b.mask.values());

        let c = phantom(8, 64, ClassLabel::Covid);
        assert_ne!(a.image.pixels(), c.image.pixels());
    }

    #[test]
    fn positives_are_brighter_inside_the_lungs_than_negatives() {
        // The opacity is the only difference between the classes, and it sits
        // inside the mask; averaged over images, in-lung intensity separates
        // the classes while out-of-lung intensity does not.
        let mut pos_in = 0.0;
        let mut neg_in = 0.0;
        let mut pos_out = 0.0;
        let mut neg_out = 0.0;
        let n = 20;
        for i in 0..n {
            for (label, acc_in, acc_out) in [
                (ClassLabel::Covid, &mut pos_in, &mut pos_out),
                (ClassLabel::Normal, &mut neg_in, &mut neg_out),
            ] {
                let p = phantom(100 + i, 96, label);
                let (mut sum_in, mut cnt_in, mut sum_out, mut cnt_out) = (0.0, 0u64, 0.0, 0u64);
                for y in 0..96 {
                    for x in 0..96 {
                        let v = p.image.get(x, y, 0) as f64;
                        if p.mask.get(x, y) == 1 {
                            sum_in += v;
                            cnt_in += 1;
                        } else {
                            sum_out += v;
                            cnt_out += 1;
                        }
                    }
                }
                *acc_in += sum_in / cnt_in as f64 / n as f64;
                *acc_out += sum_out / cnt_out as f64 / n as f64;
            }
        }
        assert!(
            pos_in > neg_in + 5.0,
            "positives should be brighter in-lung: {pos_in:.1} vs {neg_in:.1}"
        );
        assert!(
            (pos_out - neg_out).abs() < 3.0,
            "out-of-lung intensity should not separate the classes: {pos_out:.1} vs {neg_out:.1}"
        );
    }

    #[test]
    fn masks_cover_a_plausible_lung_area() {
        for seed in 0..10 {
            let p = phantom(seed, 128, ClassLabel::Normal);
            let frac = p.mask.area() as f64 / (128.0 * 128.0);
            assert!(
                (0.2..0.45).contains(&frac),
                "lung fraction {frac:.3} out of range at seed {seed}"
            );
        }
    }

    #[test]
    fn labeled_sets_are_balanced_with_unique_ids() {
        let set = labeled_set(5, 32, 3);
        assert_eq!(set.len(), 10);
        assert_eq!(set.iter().filter(|i| i.label == ClassLabel::Covid).count(), 5);
        let ids: std::collections::HashSet<&str> =
            set.iter().map(|i| i.source_id.as_str()).collect();
        assert_eq!(ids.len(), 10);
        assert!(ids.contains("covid/covid_00000.png"));
        assert!(ids.contains("normal/normal_00004.png"));
        assert!(set.iter().all(|i| !i.is_augmented()));
    }

    #[test]
    fn written_datasets_match_the_in_memory_set() {
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(tmp.path(), 2, 32, 3, true).unwrap();
        let set = labeled_set(2, 32, 3);
        for img in &set {
            let on_disk = RasterImage::open(&tmp.path().join(&img.source_id)).unwrap();
            assert_eq!(on_disk.pixels(), img.image.pixels(), "{}", img.source_id);
            let mask = RasterImage::open(&tmp.path().join("masks").join(&img.source_id)).unwrap();
            assert_eq!(mask.width(), 32);
            assert!(mask.pixels().iter().all(|&v| v == 0 || v == 255));
        }
    }
}
