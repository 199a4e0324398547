//! Dataset manifests, balanced class sampling, stratified splitting, and the
//! batch preprocessing loop.
//!
//! A manifest lists images with their labels and stable identifiers; the
//! identifier is the path relative to the dataset root, so the same filename
//! under two class directories stays distinguishable. Sampling and splitting
//! are deterministic in (contents, seed) and do not depend on the order a
//! manifest happens to enumerate its entries.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enhance::{self, EnhancementConfig};
use crate::error::{Error, Result};
use crate::raster::{self, ClassLabel, LabeledImage, RasterImage};
use crate::seg::{self, SegmentationModel};

/// One image on disk with its label and identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: ClassLabel,
    pub source_id: String,
}

/// An ordered list of labeled images with unique paths and identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Wraps entries after checking that paths and identifiers are unique.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut paths = HashSet::new();
        let mut ids = HashSet::new();
        for e in &entries {
            if !paths.insert(e.path.clone()) {
                return Err(Error::InvalidData(format!(
                    "duplicate path in manifest: {}",
                    e.path.display()
                )));
            }
            if !ids.insert(e.source_id.clone()) {
                return Err(Error::InvalidData(format!(
                    "duplicate source_id in manifest: {}",
                    e.source_id
                )));
            }
        }
        Ok(DatasetManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Writes the manifest as CSV with a `path,label,source_id` header.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(Error::Io)?;
        Ok(())
    }

    /// Reads a manifest written by [`DatasetManifest::save_csv`].
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for record in r.deserialize() {
            entries.push(record?);
        }
        DatasetManifest::new(entries)
    }
}

/// A manifest built from a directory tree, plus the files that had to be
/// skipped because they could not be decoded.
#[derive(Debug)]
pub struct ManifestLoad {
    pub manifest: DatasetManifest,
    /// `(path, reason)` per skipped file; these are already excluded.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Enumerates `root/covid/` and `root/normal/` into a manifest.
///
/// Entries are ordered by relative path, so repeated loads of the same tree
/// agree byte for byte. Identifiers are relative paths. Files that fail to
/// decode are skipped and reported rather than failing the whole load.
pub fn load_manifest(root: &Path) -> Result<ManifestLoad> {
    let classes = [(ClassLabel::Covid, "covid"), (ClassLabel::Normal, "normal")];
    for (_, dir) in classes {
        if !root.join(dir).is_dir() {
            return Err(Error::InvalidLayout(format!(
                "dataset root {} is missing the class directory '{dir}'",
                root.display()
            )));
        }
    }

    let mut candidates: Vec<(PathBuf, ClassLabel, String)> = Vec::new();
    for (label, dir) in classes {
        for entry in std::fs::read_dir(root.join(dir))? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            let rel = format!("{dir}/{}", entry.file_name().to_string_lossy());
            candidates.push((entry.path(), label, rel));
        }
    }
    candidates.sort_by(|a, b| a.2.cmp(&b.2));

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (path, label, source_id) in candidates {
        match RasterImage::open(&path) {
            Ok(_) => entries.push(ManifestEntry {
                path,
                label,
                source_id,
            }),
            Err(e) => skipped.push((path, e.to_string())),
        }
    }
    Ok(ManifestLoad {
        manifest: DatasetManifest::new(entries)?,
        skipped,
    })
}

/// Draws exactly `n_pos` covid and `n_neg` normal entries, seeded and
/// without replacement.
///
/// The selection depends only on the set of entries and the seed, not on the
/// manifest's enumeration order. Sampling a full class yields a permutation
/// of it.
pub fn balanced_sample(
    manifest: &DatasetManifest,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut out = Vec::with_capacity(n_pos + n_neg);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    for (label, want) in [(ClassLabel::Covid, n_pos), (ClassLabel::Normal, n_neg)] {
        let sub = master.gen();
        let mut members: Vec<&ManifestEntry> = manifest
            .entries
            .iter()
            .filter(|e| e.label == label)
            .collect();
        if members.len() < want {
            return Err(Error::InvalidData(format!(
                "cannot sample {want} {} images from a pool of {}",
                label.as_str(),
                members.len()
            )));
        }
        members.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        out.extend(members.into_iter().take(want).cloned());
    }
    DatasetManifest::new(out)
}

/// Train/validation/test proportions. They must be positive and sum to 1.
///
/// The default is the 65/15/20 protocol; read as a holdout it is also the
/// 80/20 split (train+validation vs test).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.65,
            val: 0.15,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidSplit(format!(
                "split ratios must all be positive, got ({}, {}, {})",
                self.train, self.val, self.test
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Disjoint identifier sets covering one sampled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitAssignment {
    /// Checks pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        for id in &self.val {
            if self.train.contains(id) {
                return Err(Error::InvalidSplit(format!(
                    "'{id}' assigned to both train and validation"
                )));
            }
        }
        for id in &self.test {
            if self.train.contains(id) || self.val.contains(id) {
                return Err(Error::InvalidSplit(format!(
                    "'{id}' assigned to test and another split"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let split: SplitAssignment = serde_json::from_str(&text)?;
        split.validate()?;
        Ok(split)
    }
}

/// Splits a manifest into train/validation/test by seeded shuffle.
///
/// Global sizes are `floor(train·N)`, `floor(val·N)`, and the remainder.
/// Within those totals the assignment is stratified: each split's per-class
/// count stays within one image of the class-proportional share, so a
/// balanced manifest yields balanced splits.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    let n = manifest.len();
    // The tolerance absorbs float error in r·N for products that are exact
    // integers mathematically (0.15 · 4300 must floor to 645, not 644).
    let t_train = (ratios.train * n as f64 + 1e-9).floor() as usize;
    let t_val = (ratios.val * n as f64 + 1e-9).floor() as usize;
    if t_train + t_val > n {
        return Err(Error::InvalidSplit(format!(
            "ratios leave no test images for {n} entries"
        )));
    }
    let t_test = n - t_train - t_val;
    if t_train == 0 || t_val == 0 || t_test == 0 {
        return Err(Error::InvalidSplit(format!(
            "ratios ({}, {}, {}) empty a split at {n} entries: sizes would be {}/{}/{}",
            ratios.train, ratios.val, ratios.test, t_train, t_val, t_test
        )));
    }

    let classes = [ClassLabel::Covid, ClassLabel::Normal];
    let per_class: Vec<Vec<&ManifestEntry>> = classes
        .iter()
        .map(|&c| {
            let mut members: Vec<&ManifestEntry> = manifest
                .entries
                .iter()
                .filter(|e| e.label == c)
                .collect();
            members.sort_by(|a, b| a.source_id.cmp(&b.source_id));
            members
        })
        .collect();
    let sizes: Vec<usize> = per_class.iter().map(|m| m.len()).collect();

    let train_quota = apportion(t_train, &sizes, n);
    let mut val_quota = apportion(t_val, &sizes, n);
    // Cap validation quotas by the capacity left after train; with two
    // classes any overflow moves wholesale to the other class.
    for c in 0..sizes.len() {
        let cap = sizes[c] - train_quota[c];
        if val_quota[c] > cap {
            let excess = val_quota[c] - cap;
            val_quota[c] = cap;
            val_quota[1 - c] += excess;
        }
    }

    let mut split = SplitAssignment {
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    for (c, members) in per_class.iter().enumerate() {
        let sub = master.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let mut order: Vec<&str> = members.iter().map(|e| e.source_id.as_str()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (i, id) in order.into_iter().enumerate() {
            let bucket = if i < train_quota[c] {
                &mut split.train
            } else if i < train_quota[c] + val_quota[c] {
                &mut split.val
            } else {
                &mut split.test
            };
            bucket.insert(id.to_string());
        }
    }
    Ok(split)
}

/// Largest-remainder apportionment of `total` seats across classes with the
/// given populations.
fn apportion(total: usize, sizes: &[usize], n: usize) -> Vec<usize> {
    let ideal: Vec<f64> = sizes
        .iter()
        .map(|&s| total as f64 * s as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = ideal.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().take(total - assigned) {
        quota[c] += 1;
    }
    quota
}

/// Distributes labeled images into the three splits, preserving input order
/// inside each split. Every image must belong to exactly one split.
pub fn partition_images(
    images: &[LabeledImage],
    split: &SplitAssignment,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, Vec<LabeledImage>)> {
    split.validate()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for img in images {
        let id = img.source_id.as_str();
        if split.train.contains(id) {
            train.push(img.clone());
        } else if split.val.contains(id) {
            val.push(img.clone());
        } else if split.test.contains(id) {
            test.push(img.clone());
        } else {
            return Err(Error::InvalidSplit(format!(
                "image '{id}' is not assigned to any split"
            )));
        }
    }
    Ok((train, val, test))
}

/// Settings for the preprocessing loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub enhancement: EnhancementConfig,
    /// Side length of the square output, i.e. the classifier's input size.
    pub target_size: usize,
    /// Directory for content-addressed results; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.enhancement.validate()?;
        if self.target_size == 0 {
            return Err(Error::InvalidConfig(
                "preprocess target_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The preprocessed images plus a record of per-image failures.
#[derive(Debug)]
pub struct PreprocessOutcome {
    pub images: Vec<LabeledImage>,
    /// `(source_id, reason)` per failed image; these are already excluded.
    pub failures: Vec<(String, String)>,
    /// How many images were served from the cache instead of recomputed.
    pub cache_hits: usize,
}

/// Probability threshold used when binarizing predicted lung masks.
const MASK_THRESHOLD: f64 = 0.5;

/// Runs every manifest entry through grayscale → enhancement → optional lung
/// masking → resize, in that order.
///
/// With a segmentation model the enhanced image is masked at its native
/// resolution (the predicted mask is upsampled from the model's working
/// size) before the final resize. Labels and identifiers pass through
/// unchanged. Results are cached by a hash of the decoded pixels and the
/// configuration, so rerunning over an unchanged dataset decodes but never
/// recomputes.
///
/// Individual failures are collected rather than fatal, but a failure rate
/// above 5% aborts with an error.
pub fn preprocess_all(
    manifest: &DatasetManifest,
    seg: Option<&SegmentationModel>,
    cfg: &PreprocessConfig,
) -> Result<PreprocessOutcome> {
    cfg.validate()?;
    let seg_fingerprint = seg.map(model_fingerprint);
    let mut outcome = PreprocessOutcome {
        images: Vec::with_capacity(manifest.len()),
        failures: Vec::new(),
        cache_hits: 0,
    };
    for entry in &manifest.entries {
        match preprocess_entry(entry, seg, seg_fingerprint.as_deref(), cfg, &mut outcome) {
            Ok(img) => outcome
                .images
                .push(LabeledImage::new(img, entry.label, &entry.source_id)),
            Err(e) => outcome.failures.push((entry.source_id.clone(), e.to_string())),
        }
    }
    if outcome.failures.len() * 20 > manifest.len() {
        return Err(Error::InvalidData(format!(
            "preprocessing failed for {} of {} images (more than 5%); first failure: {} ({})",
            outcome.failures.len(),
            manifest.len(),
            outcome.failures[0].0,
            outcome.failures[0].1
        )));
    }
    Ok(outcome)
}

fn preprocess_entry(
    entry: &ManifestEntry,
    seg: Option<&SegmentationModel>,
    seg_fingerprint: Option<&str>,
    cfg: &PreprocessConfig,
    outcome: &mut PreprocessOutcome,
) -> Result<RasterImage> {
    let source = RasterImage::open(&entry.path)?;
    let cache_path = cfg
        .cache_dir
        .as_ref()
        .map(|dir| dir.join(cache_key(&source, seg_fingerprint, cfg) + ".png"));
    if let Some(path) = &cache_path {
        if path.is_file() {
            if let Ok(cached) = RasterImage::open(path) {
                outcome.cache_hits += 1;
                return Ok(cached);
            }
            // A corrupt cache entry falls through to recomputation.
        }
    }

    let gray = raster::to_grayscale(&source)?;
    let enhanced = enhance::enhance(&gray, &cfg.enhancement)?;
    let masked = match seg {
        None => enhanced,
        Some(model) => {
            let size = model.config().input_size;
            let at_model = raster::resize(&enhanced, size, size)?;
            let probs = seg::predict_mask(model, &at_model)?;
            let mask = seg::binarize_mask(&probs, MASK_THRESHOLD, true)?
                .resize_nearest(enhanced.width(), enhanced.height())?;
            seg::apply_mask(&enhanced, &mask)?
        }
    };
    let out = raster::resize(&masked, cfg.target_size, cfg.target_size)?;

    if let Some(path) = &cache_path {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        out.save(path)?;
    }
    Ok(out)
}

/// Content hash covering the decoded source pixels and everything that
/// influences the output: enhancement parameters, target size, and the
/// weights of the segmentation model when one is used.
fn cache_key(source: &RasterImage, seg_fingerprint: Option<&str>, cfg: &PreprocessConfig) -> String {
    let mut h = Sha256::new();
    h.update(b"preprocess-v1");
    h.update((source.width() as u64).to_le_bytes());
    h.update((source.height() as u64).to_le_bytes());
    h.update((source.channels() as u64).to_le_bytes());
    h.update(source.pixels());
    h.update(
        serde_json::to_string(&cfg.enhancement)
            .expect("enhancement config serializes")
            .as_bytes(),
    );
    h.update((cfg.target_size as u64).to_le_bytes());
    match seg_fingerprint {
        Some(fp) => {
            h.update(b"seg");
            h.update(fp.as_bytes());
        }
        None => h.update(b"noseg"),
    }
    hex(&h.finalize())
}

/// Hash of a segmentation model's weights, used in cache keys.
fn model_fingerprint(model: &SegmentationModel) -> String {
    let mut h = Sha256::new();
    for block in model.export_state() {
        h.update((block.len() as u64).to_le_bytes());
        for v in block {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg::{build_unet, UNetConfig};

    fn entry(id: &str, label: ClassLabel) -> ManifestEntry {
        ManifestEntry {
            path: PathBuf::from(id),
            label,
            source_id: id.to_string(),
        }
    }

    fn synthetic_manifest(n_pos: usize, n_neg: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..n_pos {
            entries.push(entry(&format!("covid/{i:05}.png"), ClassLabel::Covid));
        }
        for i in 0..n_neg {
            entries.push(entry(&format!("normal/{i:05}.png"), ClassLabel::Normal));
        }
        DatasetManifest::new(entries).unwrap()
    }

    fn test_image(seed: u64, w: usize, h: usize) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterImage::from_fn(w, h, 1, |_, _, _| rng.gen_range(0..=255))
    }

    fn write_tree(root: &Path, covid: &[&str], normal: &[&str]) {
        for (di, (dir, names)) in [("covid", covid), ("normal", normal)].iter().enumerate() {
            let d = root.join(dir);
            std::fs::create_dir_all(&d).unwrap();
            for (i, name) in names.iter().enumerate() {
                // Distinct seed per file so no two trees share pixel content.
                test_image((di * 1000 + i) as u64, 9, 7)
                    .save(&d.join(name))
                    .unwrap();
            }
        }
    }

    #[test]
    fn manifests_enumerate_class_directories_deterministically() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["b.png", "a.png"], &["c.png"]);
        let load = load_manifest(tmp.path()).unwrap();
        let ids: Vec<&str> = load
            .manifest
            .entries()
            .iter()
            .map(|e| e.source_id.as_str())
            .collect();
        assert_eq!(ids, ["covid/a.png", "covid/b.png", "normal/c.png"]);
        assert_eq!(load.manifest.count(ClassLabel::Covid), 2);
        assert_eq!(load.manifest.count(ClassLabel::Normal), 1);
        assert!(load.skipped.is_empty());

        let again = load_manifest(tmp.path()).unwrap();
        assert_eq!(load.manifest, again.manifest);
    }

    #[test]
    fn unreadable_files_are_skipped_and_reported() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["ok.png"], &["ok.png"]);
        std::fs::write(tmp.path().join("covid/broken.png"), b"not an image").unwrap();
        let load = load_manifest(tmp.path()).unwrap();
        assert_eq!(load.manifest.len(), 2);
        assert_eq!(load.skipped.len(), 1);
        assert!(load.skipped[0].0.ends_with("broken.png"));

        // Same filename under both classes stays distinguishable.
        let ids: BTreeSet<&str> = load
            .manifest
            .entries()
            .iter()
            .map(|e| e.source_id.as_str())
            .collect();
        assert!(ids.contains("covid/ok.png") && ids.contains("normal/ok.png"));
    }

    #[test]
    fn missing_class_directories_are_a_layout_error() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("covid")).unwrap();
        let err = load_manifest(tmp.path()).unwrap_err();
        assert!(matches!(err, Error::InvalidLayout(_)), "{err:?}");
        assert!(err.to_string().contains("normal"));
    }

    #[test]
    fn manifests_round_trip_through_csv_and_reject_duplicates() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = synthetic_manifest(3, 2);
        let path = tmp.path().join("manifest.csv");
        manifest.save_csv(&path).unwrap();
        let loaded = DatasetManifest::load_csv(&path).unwrap();
        assert_eq!(manifest, loaded);

        let dup = vec![
            entry("covid/a.png", ClassLabel::Covid),
            entry("covid/a.png", ClassLabel::Covid),
        ];
        assert!(matches!(
            DatasetManifest::new(dup).unwrap_err(),
            Error::InvalidData(_)
        ));
    }

    #[test]
    fn balanced_sampling_is_seeded_exact_and_order_insensitive() {
        let manifest = synthetic_manifest(10, 8);
        let sample = balanced_sample(&manifest, 4, 3, 7).unwrap();
        assert_eq!(sample.count(ClassLabel::Covid), 4);
        assert_eq!(sample.count(ClassLabel::Normal), 3);
        let ids: BTreeSet<&str> = sample.entries().iter().map(|e| e.source_id.as_str()).collect();
        assert_eq!(ids.len(), 7, "sampling must not repeat entries");

        let again = balanced_sample(&manifest, 4, 3, 7).unwrap();
        assert_eq!(sample, again);

        // Reversing the manifest's enumeration order changes nothing.
        let mut reversed = manifest.entries().to_vec();
        reversed.reverse();
        let from_reversed =
            balanced_sample(&DatasetManifest::new(reversed).unwrap(), 4, 3, 7).unwrap();
        assert_eq!(sample, from_reversed);

        let other = balanced_sample(&manifest, 4, 3, 8).unwrap();
        assert_ne!(sample, other);
    }

    #[test]
    fn sampling_a_full_class_permutes_it() {
        let manifest = synthetic_manifest(6, 5);
        let sample = balanced_sample(&manifest, 6, 5, 3).unwrap();
        let mut ids: Vec<&str> = sample.entries().iter().map(|e| e.source_id.as_str()).collect();
        ids.sort_unstable();
        let mut all: Vec<&str> = manifest
            .entries()
            .iter()
            .map(|e| e.source_id.as_str())
            .collect();
        all.sort_unstable();
        assert_eq!(ids, all);
    }

    #[test]
    fn oversampling_names_the_insufficient_class() {
        let manifest = synthetic_manifest(3, 10);
        let err = balanced_sample(&manifest, 4, 3, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
        assert!(err.to_string().contains("covid"));
    }

    #[test]
    fn splits_follow_the_floor_arithmetic() {
        let manifest = synthetic_manifest(2200, 2100);
        let split = split_dataset(&manifest, SplitRatios::default(), 0).unwrap();
        assert_eq!(split.train.len(), 2795);
        assert_eq!(split.val.len(), 645);
        assert_eq!(split.test.len(), 860);

        let hundred = synthetic_manifest(60, 40);
        let split = split_dataset(&hundred, SplitRatios::default(), 0).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (65, 15, 20)
        );
    }

    #[test]
    fn splits_partition_and_stratify_for_many_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..40 {
            let n_pos = rng.gen_range(8..120);
            let n_neg = rng.gen_range(8..120);
            let manifest = synthetic_manifest(n_pos, n_neg);
            let n = manifest.len();
            let split = split_dataset(&manifest, SplitRatios::default(), trial).unwrap();
            split.validate().unwrap();

            // Partition: disjoint (validated above), union complete.
            assert_eq!(split.len(), n);
            let mut union: BTreeSet<&String> = BTreeSet::new();
            union.extend(&split.train);
            union.extend(&split.val);
            union.extend(&split.test);
            assert_eq!(union.len(), n);

            // Global sizes follow floor arithmetic.
            assert_eq!(split.train.len(), (0.65 * n as f64 + 1e-9).floor() as usize);
            assert_eq!(split.val.len(), (0.15 * n as f64 + 1e-9).floor() as usize);

            // Stratified: per-class counts stay within one image of the
            // class-proportional share of each split.
            for (bucket, t) in [
                (&split.train, split.train.len()),
                (&split.val, split.val.len()),
                (&split.test, split.test.len()),
            ] {
                let covid = bucket.iter().filter(|id| id.starts_with("covid/")).count();
                let ideal = t as f64 * n_pos as f64 / n as f64;
                assert!(
                    (covid as f64 - ideal).abs() <= 1.0 + 1e-9,
                    "trial {trial}: {covid} covid in a split of {t}, ideal {ideal:.2}"
                );
            }
        }
    }

    #[test]
    fn splitting_is_deterministic_and_order_insensitive() {
        let manifest = synthetic_manifest(30, 25);
        let a = split_dataset(&manifest, SplitRatios::default(), 9).unwrap();
        let b = split_dataset(&manifest, SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);

        let mut reversed = manifest.entries().to_vec();
        reversed.reverse();
        let c = split_dataset(&DatasetManifest::new(reversed).unwrap(), SplitRatios::default(), 9)
            .unwrap();
        assert_eq!(a, c);

        let d = split_dataset(&manifest, SplitRatios::default(), 10).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn degenerate_ratios_and_empty_splits_are_rejected() {
        let manifest = synthetic_manifest(10, 10);
        for ratios in [
            SplitRatios { train: 1.0, val: 0.0, test: 0.0 },
            SplitRatios { train: 0.5, val: 0.3, test: 0.1 },
            SplitRatios { train: -0.2, val: 0.6, test: 0.6 },
        ] {
            let err = split_dataset(&manifest, ratios, 0).unwrap_err();
            assert!(matches!(err, Error::InvalidSplit(_)), "{ratios:?}: {err:?}");
        }

        // Too few entries to populate every split.
        let tiny = synthetic_manifest(1, 1);
        let err = split_dataset(&tiny, SplitRatios::default(), 0).unwrap_err();
        assert!(matches!(err, Error::InvalidSplit(_)), "{err:?}");
    }

    #[test]
    fn split_assignments_round_trip_as_json() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = synthetic_manifest(12, 9);
        let split = split_dataset(&manifest, SplitRatios::default(), 4).unwrap();
        let path = tmp.path().join("split.json");
        split.save(&path).unwrap();
        assert_eq!(SplitAssignment::load(&path).unwrap(), split);

        let overlapping = SplitAssignment {
            train: BTreeSet::from(["a".to_string()]),
            val: BTreeSet::from(["a".to_string()]),
            test: BTreeSet::from(["b".to_string()]),
        };
        assert!(matches!(
            overlapping.validate().unwrap_err(),
            Error::InvalidSplit(_)
        ));
    }

    #[test]
    fn partitioning_respects_the_assignment() {
        let images: Vec<LabeledImage> = (0..6)
            .map(|i| {
                let label = if i < 3 { ClassLabel::Covid } else { ClassLabel::Normal };
                LabeledImage::new(test_image(i, 8, 8), label, format!("img{i}"))
            })
            .collect();
        let split = SplitAssignment {
            train: BTreeSet::from(["img0".into(), "img3".into(), "img5".into()]),
            val: BTreeSet::from(["img1".into(), "img4".into()]),
            test: BTreeSet::from(["img2".into()]),
        };
        let (train, val, test) = partition_images(&images, &split).unwrap();
        let ids = |v: &[LabeledImage]| {
            v.iter().map(|i| i.source_id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&train), ["img0", "img3", "img5"]);
        assert_eq!(ids(&val), ["img1", "img4"]);
        assert_eq!(ids(&test), ["img2"]);

        let stray = vec![LabeledImage::new(test_image(9, 8, 8), ClassLabel::Covid, "ghost")];
        assert!(matches!(
            partition_images(&stray, &split).unwrap_err(),
            Error::InvalidSplit(_)
        ));
    }

    #[test]
    fn preprocessing_composes_the_documented_stages() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["x.png"], &["y.png"]);
        let manifest = load_manifest(tmp.path()).unwrap().manifest;
        let cfg = PreprocessConfig {
            enhancement: EnhancementConfig::He,
            target_size: 16,
            cache_dir: None,
        };
        let outcome = preprocess_all(&manifest, None, &cfg).unwrap();
        assert_eq!(outcome.images.len(), 2);
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.cache_hits, 0);

        // Labels and identifiers pass through untouched, in manifest order.
        for (img, entry) in outcome.images.iter().zip(manifest.entries()) {
            assert_eq!(img.source_id, entry.source_id);
            assert_eq!(img.label, entry.label);
            assert!(!img.is_augmented());
            assert_eq!((img.image.width(), img.image.height()), (16, 16));
        }

        // The loop is exactly gray → enhance → resize, stage by stage.
        let source = RasterImage::open(&manifest.entries()[0].path).unwrap();
        let manual = raster::resize(
            &enhance::enhance(
                &raster::to_grayscale(&source).unwrap(),
                &EnhancementConfig::He,
            )
            .unwrap(),
            16,
            16,
        )
        .unwrap();
        assert_eq!(outcome.images[0].image.pixels(), manual.pixels());
    }

    #[test]
    fn preprocessing_preserves_all_black_images() {
        let tmp = tempfile::tempdir().unwrap();
        for dir in ["covid", "normal"] {
            std::fs::create_dir_all(tmp.path().join(dir)).unwrap();
        }
        RasterImage::filled(12, 12, 0)
            .save(&tmp.path().join("covid/black.png"))
            .unwrap();
        RasterImage::filled(12, 12, 0)
            .save(&tmp.path().join("normal/black.png"))
            .unwrap();
        let manifest = load_manifest(tmp.path()).unwrap().manifest;
        let cfg = PreprocessConfig {
            enhancement: EnhancementConfig::He,
            target_size: 8,
            cache_dir: None,
        };
        let outcome = preprocess_all(&manifest, None, &cfg).unwrap();
        for img in &outcome.images {
            assert!(img.image.pixels().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn preprocessing_caches_by_content() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["x.png", "z.png"], &["y.png"]);
        let manifest = load_manifest(tmp.path()).unwrap().manifest;
        let cache = tempfile::tempdir().unwrap();
        let cfg = PreprocessConfig {
            enhancement: EnhancementConfig::He,
            target_size: 16,
            cache_dir: Some(cache.path().to_path_buf()),
        };
        let first = preprocess_all(&manifest, None, &cfg).unwrap();
        assert_eq!(first.cache_hits, 0);
        let second = preprocess_all(&manifest, None, &cfg).unwrap();
        assert_eq!(second.cache_hits, 3);
        for (a, b) in first.images.iter().zip(&second.images) {
            assert_eq!(a.image.pixels(), b.image.pixels());
        }

        // A different target size misses: the key covers the configuration.
        let resized = PreprocessConfig {
            target_size: 12,
            ..cfg.clone()
        };
        assert_eq!(preprocess_all(&manifest, None, &resized).unwrap().cache_hits, 0);

        // Identical pixels under a different name still hit.
        let copy_dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(copy_dir.path().join("covid")).unwrap();
        std::fs::create_dir_all(copy_dir.path().join("normal")).unwrap();
        std::fs::copy(
            tmp.path().join("covid/x.png"),
            copy_dir.path().join("covid/renamed.png"),
        )
        .unwrap();
        std::fs::copy(
            tmp.path().join("normal/y.png"),
            copy_dir.path().join("normal/renamed.png"),
        )
        .unwrap();
        let copied = load_manifest(copy_dir.path()).unwrap().manifest;
        assert_eq!(preprocess_all(&copied, None, &cfg).unwrap().cache_hits, 2);
    }

    #[test]
    fn excessive_failure_rates_abort() {
        let tmp = tempfile::tempdir().unwrap();
        let covid: Vec<String> = (0..10).map(|i| format!("c{i}.png")).collect();
        let covid_refs: Vec<&str> = covid.iter().map(String::as_str).collect();
        write_tree(tmp.path(), &covid_refs, &["n0.png"]);
        let mut entries = load_manifest(tmp.path()).unwrap().manifest.entries().to_vec();
        let cfg = PreprocessConfig {
            enhancement: EnhancementConfig::He,
            target_size: 8,
            cache_dir: None,
        };

        // 1 missing out of 12 (8%) aborts.
        entries.push(entry("covid/missing.png", ClassLabel::Covid));
        let err = preprocess_all(&DatasetManifest::new(entries.clone()).unwrap(), None, &cfg)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)), "{err:?}");
        assert!(err.to_string().contains("missing.png"));

        // 1 missing out of 21 (under 5%) is tolerated and reported.
        let eleven: Vec<String> = (0..10).map(|i| format!("m{i}.png")).collect();
        let eleven_refs: Vec<&str> = eleven.iter().map(String::as_str).collect();
        let more = tempfile::tempdir().unwrap();
        write_tree(more.path(), &covid_refs, &eleven_refs);
        let mut entries = load_manifest(more.path()).unwrap().manifest.entries().to_vec();
        entries.push(entry("covid/missing.png", ClassLabel::Covid));
        let outcome =
            preprocess_all(&DatasetManifest::new(entries).unwrap(), None, &cfg).unwrap();
        assert_eq!(outcome.images.len(), 20);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].0, "covid/missing.png");
    }

    #[test]
    fn segmentation_plumbs_the_mask_through_preprocessing() {
        let tmp = tempfile::tempdir().unwrap();
        write_tree(tmp.path(), &["x.png"], &["y.png"]);
        let manifest = load_manifest(tmp.path()).unwrap().manifest;
        let model = build_unet(
            UNetConfig {
                depth: 1,
                base_channels: 2,
                input_size: 16,
            },
            0,
        )
        .unwrap();
        let cfg = PreprocessConfig {
            enhancement: EnhancementConfig::He,
            target_size: 16,
            cache_dir: None,
        };
        let outcome = preprocess_all(&manifest, Some(&model), &cfg).unwrap();
        assert_eq!(outcome.images.len(), 2);

        // Same composition, written out stage by stage.
        let source = RasterImage::open(&manifest.entries()[0].path).unwrap();
        let enhanced = enhance::enhance(
            &raster::to_grayscale(&source).unwrap(),
            &EnhancementConfig::He,
        )
        .unwrap();
        let at_model = raster::resize(&enhanced, 16, 16).unwrap();
        let probs = seg::predict_mask(&model, &at_model).unwrap();
        let mask = seg::binarize_mask(&probs, MASK_THRESHOLD, true)
            .unwrap()
            .resize_nearest(enhanced.width(), enhanced.height())
            .unwrap();
        let manual = raster::resize(&seg::apply_mask(&enhanced, &mask).unwrap(), 16, 16).unwrap();
        assert_eq!(outcome.images[0].image.pixels(), manual.pixels());

        // The cache key distinguishes masked from unmasked runs.
        let cache = tempfile::tempdir().unwrap();
        let cached_cfg = PreprocessConfig {
            cache_dir: Some(cache.path().to_path_buf()),
            ..cfg
        };
        assert_eq!(
            preprocess_all(&manifest, Some(&model), &cached_cfg)
                .unwrap()
                .cache_hits,
            0
        );
        assert_eq!(
            preprocess_all(&manifest, None, &cached_cfg).unwrap().cache_hits,
            0
        );
        assert_eq!(
            preprocess_all(&manifest, Some(&model), &cached_cfg)
                .unwrap()
                .cache_hits,
            2
        );
    }
}
