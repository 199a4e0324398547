//! End-to-end orchestration: configuration, the full classification run, and
//! the artifact formats shared by the command-line interface.
//!
//! A run executes load → sample → split → preprocess → train → predict →
//! evaluate, one trained model per requested architecture, and writes every
//! artifact under one output directory. All randomness flows from the single
//! mandatory seed, so a run directory plus its stored config reproduces the
//! reports byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{generate_augmented_set, run_sweep, SweepConfig, SweepResult};
use crate::cache;
use crate::classify::{
    build_classifier, predict, train_classifier, Architecture, ArchitectureSpec, TrainConfig,
    TrainedClassifier,
};
use crate::dataset::{
    self, balanced_sample, load_manifest, partition_images, split_dataset, PreprocessConfig,
    SplitRatios,
};
use crate::enhance::EnhancementConfig;
use crate::error::{Error, Result};
use crate::explain;
use crate::metrics::{confusion_from_predictions, render_confusion_png, EvaluationReport};
use crate::raster::{self, ClassLabel, LabeledImage, RasterImage};
use crate::seg::{LungMask, SegmentationModel};

/// Per-class sampling quota applied before splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub covid: usize,
    pub normal: usize,
}

/// Everything a full run needs. Loadable from TOML; every field except the
/// dataset root, the output directory, and the seed has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset root holding `covid/` and `normal/`.
    pub data: PathBuf,
    /// Output directory; created if absent, owned by the run.
    pub out: PathBuf,
    /// Master seed. Mandatory — there is no wall-clock fallback.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_architectures")]
    pub architectures: Vec<Architecture>,
    /// Start classifier backbones from cached pretrained weights.
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default)]
    pub enhancement: EnhancementConfig,
    /// Mask lungs during preprocessing (needs `seg_weights`).
    #[serde(default = "default_true")]
    pub segmentation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_weights: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleSpec>,
    /// Training hyperparameters; its `seed` field is overridden by the
    /// pipeline seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Also write heatmaps, counterfactuals, and relevance records for every
    /// test image.
    #[serde(default)]
    pub explain: bool,
    /// Ground-truth masks for the relevance audit; defaults to `data/masks`
    /// when that directory exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dir: Option<PathBuf>,
}

fn default_architectures() -> Vec<Architecture> {
    Architecture::ALL.to_vec()
}

fn default_true() -> bool {
    true
}

impl PipelineConfig {
    /// A minimal config with defaults for everything optional.
    pub fn new(data: impl Into<PathBuf>, out: impl Into<PathBuf>, seed: u64) -> Self {
        PipelineConfig {
            data: data.into(),
            out: out.into(),
            seed: Some(seed),
            architectures: default_architectures(),
            pretrained: false,
            enhancement: EnhancementConfig::default(),
            segmentation: true,
            seg_weights: None,
            split: SplitRatios::default(),
            sample: None,
            train: TrainConfig::default(),
            sweep: None,
            explain: false,
            mask_dir: None,
        }
    }

    /// Parses a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Checks every field, naming the offending one in the error.
    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::InvalidConfig(
                "seed is mandatory: set `seed` in the config file or pass --seed".into(),
            ));
        }
        if !self.data.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "data: {} is not a directory",
                self.data.display()
            )));
        }
        if self.architectures.is_empty() {
            return Err(Error::InvalidConfig(
                "architectures: at least one model is required".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for arch in &self.architectures {
            if !seen.insert(arch) {
                return Err(Error::InvalidConfig(format!(
                    "architectures: {arch} is listed twice"
                )));
            }
        }
        self.enhancement
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("enhancement: {e}")))?;
        if self.segmentation {
            match &self.seg_weights {
                None => {
                    return Err(Error::InvalidConfig(
                        "segmentation is enabled but seg_weights is not set; \
                         provide a checkpoint or disable segmentation"
                            .into(),
                    ))
                }
                Some(p) if !p.is_file() => {
                    return Err(Error::InvalidConfig(format!(
                        "seg_weights: {} is not a file",
                        p.display()
                    )))
                }
                Some(_) => {}
            }
        }
        self.split
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("split: {e}")))?;
        self.train
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("train: {e}")))?;
        if self.train.epochs == 0 {
            return Err(Error::InvalidConfig(
                "train: a run needs at least one epoch".into(),
            ));
        }
        if let Some(sweep) = &self.sweep {
            sweep
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("sweep: {e}")))?;
        }
        if let Some(dir) = &self.mask_dir {
            if !dir.is_dir() {
                return Err(Error::InvalidConfig(format!(
                    "mask_dir: {} is not a directory",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    /// The mask directory for relevance audits: the configured one, else
    /// `data/masks` when present.
    pub fn effective_mask_dir(&self) -> Option<PathBuf> {
        match &self.mask_dir {
            Some(dir) => Some(dir.clone()),
            None => {
                let fallback = self.data.join("masks");
                fallback.is_dir().then_some(fallback)
            }
        }
    }
}

/// What a completed run produced, keyed by architecture name.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub test_accuracy: BTreeMap<String, f64>,
    /// Mean out-of-mask relevance over the explained test images; present
    /// only when explanations ran with masks available.
    pub mean_out_of_mask_relevance: BTreeMap<String, f64>,
}

/// One evaluated test image, as serialized into `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub source_id: String,
    pub true_label: ClassLabel,
    pub predicted_label: ClassLabel,
    pub p_covid: f64,
    pub p_normal: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelPredictionRecord {
    model: String,
    source_id: String,
    true_label: ClassLabel,
    predicted_label: ClassLabel,
    p_covid: f64,
    p_normal: f64,
}

/// Writes `predictions.csv` with columns
/// `source_id,true_label,predicted_label,p_covid,p_normal`.
pub fn write_predictions_csv(path: &Path, rows: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

/// Reads a file written by [`write_predictions_csv`].
pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in r.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}

/// Loads every image of a `covid/` + `normal/` tree as labeled images, in
/// manifest (lexicographic) order. Undecodable files are skipped with a note
/// on stderr.
pub fn load_class_tree(dir: &Path) -> Result<Vec<LabeledImage>> {
    let load = load_manifest(dir)?;
    for (path, reason) in &load.skipped {
        eprintln!("skipping {}: {reason}", path.display());
    }
    load.manifest
        .entries()
        .iter()
        .map(|e| {
            Ok(LabeledImage::new(
                RasterImage::open(&e.path)?,
                e.label,
                &e.source_id,
            ))
        })
        .collect()
}

/// Resizes every image to a square side, preserving labels and lineage.
pub fn resize_images(images: &[LabeledImage], size: usize) -> Result<Vec<LabeledImage>> {
    images
        .iter()
        .map(|li| Ok(li.with_image(raster::resize(&li.image, size, size)?)))
        .collect()
}

/// Blend weight for heatmap overlays written by explanation passes.
pub const OVERLAY_ALPHA: f64 = 0.4;

/// One explained image, as serialized into `records.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub source_id: String,
    pub predicted_label: ClassLabel,
    pub p_covid: f64,
    pub p_normal: f64,
    /// Fraction of heatmap mass outside the lung mask; absent when no mask
    /// was available for the image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_of_mask_relevance: Option<f64>,
}

/// Explains a batch of images with a trained classifier: per image a heatmap
/// PNG, a counterfactual PNG, and an overlay PNG land in `out_dir`, plus one
/// `records.json` for the batch.
///
/// When `mask_dir` is given, each image's mask is looked up at
/// `mask_dir/<source_id>` and the out-of-mask relevance is recorded.
pub fn explain_images(
    model: &mut TrainedClassifier,
    items: &[(String, RasterImage)],
    mask_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<ExplanationRecord>> {
    std::fs::create_dir_all(out_dir)?;
    let size = model.input_size();
    let mut records = Vec::with_capacity(items.len());
    for (id, image) in items {
        let input = raster::resize(&raster::to_grayscale(image)?, size, size)?;
        let expl = explain::counterfactual_cam(model, &input)?;
        let stem = artifact_stem(id);
        expl.heatmap
            .to_image()
            .save(&out_dir.join(format!("{stem}_heatmap.png")))?;
        expl.counterfactual
            .to_image()
            .save(&out_dir.join(format!("{stem}_counterfactual.png")))?;
        explain::overlay_heatmap(&input, &expl.heatmap, OVERLAY_ALPHA)?
            .save(&out_dir.join(format!("{stem}_overlay.png")))?;
        let relevance = match mask_dir.map(|dir| load_mask(dir, id, size)).transpose()? {
            Some(Some(mask)) => Some(explain::out_of_mask_relevance(&expl.heatmap, &mask)?),
            _ => None,
        };
        records.push(ExplanationRecord {
            source_id: id.clone(),
            predicted_label: expl.prediction.label,
            p_covid: expl.prediction.p_covid,
            p_normal: expl.prediction.p_normal,
            out_of_mask_relevance: relevance,
        });
    }
    let mut json = serde_json::to_string_pretty(&records)?;
    json.push('\n');
    std::fs::write(out_dir.join("records.json"), json)?;
    Ok(records)
}

/// Loads the mask stored for `id` under `dir`, resized to the model input.
/// A missing file is not an error — relevance is simply not reported.
fn load_mask(dir: &Path, id: &str, size: usize) -> Result<Option<LungMask>> {
    let path = dir.join(id);
    if !path.is_file() {
        return Ok(None);
    }
    let gray = raster::to_grayscale(&RasterImage::open(&path)?)?;
    Ok(Some(LungMask::from_image(&gray)?.resize_nearest(size, size)?))
}

/// Turns a source id like `covid/img_01.png` into a flat artifact stem like
/// `covid_img_01`.
fn artifact_stem(id: &str) -> String {
    let mut parts: Vec<String> = Path::new(id)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    if let Some(last) = parts.last_mut() {
        if let Some(stem) = Path::new(last.as_str()).file_stem() {
            *last = stem.to_string_lossy().into_owned();
        }
    }
    parts.join("_")
}

#[derive(Serialize)]
struct RunMetricsFile<'a> {
    seed: u64,
    models: &'a BTreeMap<String, EvaluationReport>,
}

#[derive(Serialize)]
struct RunManifestFile<'a> {
    seed: u64,
    config_hash: String,
    dataset: DatasetCounts,
    splits: SplitSizes,
    artifacts: Vec<String>,
    config: &'a PipelineConfig,
}

#[derive(Serialize)]
struct DatasetCounts {
    covid: usize,
    normal: usize,
    skipped: usize,
}

#[derive(Serialize)]
struct SplitSizes {
    train: usize,
    val: usize,
    test: usize,
}

/// Runs the full pipeline and writes every artifact under `cfg.out`:
/// `config.toml`, `run_manifest.json`, `splits.json`, `predictions.csv`,
/// `metrics.json`, one checkpoint and confusion figure per architecture,
/// and — with `explain` — per-image explanation sets.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let seed = cfg.seed.expect("validated above");
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::create_dir_all(cfg.out.join("checkpoints"))?;
    std::fs::create_dir_all(cfg.out.join("figures"))?;

    // Load and sample.
    let load = load_manifest(&cfg.data)?;
    for (path, reason) in &load.skipped {
        eprintln!("skipping {}: {reason}", path.display());
    }
    let sampled = match cfg.sample {
        Some(SampleSpec { covid, normal }) => balanced_sample(&load.manifest, covid, normal, seed)?,
        None => load.manifest.clone(),
    };
    if sampled.is_empty() {
        return Err(Error::InvalidData(format!(
            "no usable images under {}",
            cfg.data.display()
        )));
    }

    // Split before any training sees the data.
    let split = split_dataset(&sampled, cfg.split, seed)?;
    split.save(&cfg.out.join("splits.json"))?;

    let seg = match (cfg.segmentation, &cfg.seg_weights) {
        (true, Some(path)) => Some(SegmentationModel::load(path)?),
        _ => None,
    };

    // Preprocess once per distinct classifier input size.
    let sizes: BTreeSet<usize> = cfg.architectures.iter().map(|a| a.input_size()).collect();
    let mut by_size: BTreeMap<usize, Vec<LabeledImage>> = BTreeMap::new();
    for &size in &sizes {
        eprintln!("preprocessing {} images at {size}px", sampled.len());
        let outcome = dataset::preprocess_all(
            &sampled,
            seg.as_ref(),
            &PreprocessConfig {
                enhancement: cfg.enhancement,
                target_size: size,
                cache_dir: Some(cache::cache_dir()),
            },
        )?;
        for (id, reason) in &outcome.failures {
            eprintln!("preprocessing failed for {id}: {reason}");
        }
        by_size.insert(size, outcome.images);
    }

    // Train one model per architecture.
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let mut trained: Vec<(Architecture, TrainedClassifier)> = Vec::new();
    for &arch in &cfg.architectures {
        let spec = ArchitectureSpec::new(arch, cfg.pretrained);
        let (train, val, _) = partition_images(&by_size[&arch.input_size()], &split)?;
        eprintln!(
            "training {arch}: {} train / {} val images, {} epochs",
            train.len(),
            val.len(),
            train_cfg.epochs
        );
        let model = build_classifier(&spec, seed)?;
        let model = train_classifier(model, &train, &val, &train_cfg)?;
        model.save(&cfg.out.join("checkpoints").join(format!("{arch}.ckpt")))?;
        trained.push((arch, model));
    }

    // Predict, evaluate, and (optionally) explain on the untouched test split.
    let mask_dir = cfg.effective_mask_dir();
    let mut csv_rows: Vec<ModelPredictionRecord> = Vec::new();
    let mut reports: BTreeMap<String, EvaluationReport> = BTreeMap::new();
    let mut summary = RunSummary {
        out_dir: cfg.out.clone(),
        test_accuracy: BTreeMap::new(),
        mean_out_of_mask_relevance: BTreeMap::new(),
    };
    for (arch, model) in &mut trained {
        let (_, _, test) = partition_images(&by_size[&arch.input_size()], &split)?;
        let mut truths = Vec::with_capacity(test.len());
        let mut preds = Vec::with_capacity(test.len());
        for item in &test {
            let p = predict(model, &item.image)?;
            truths.push(item.label);
            preds.push(p.label);
            csv_rows.push(ModelPredictionRecord {
                model: arch.to_string(),
                source_id: item.source_id.clone(),
                true_label: item.label,
                predicted_label: p.label,
                p_covid: p.p_covid,
                p_normal: p.p_normal,
            });
        }
        let cm = confusion_from_predictions(&truths, &preds)?;
        let report = EvaluationReport::from_matrix(cm)?;
        summary
            .test_accuracy
            .insert(arch.to_string(), report.metrics.accuracy.unwrap_or(f64::NAN));
        render_confusion_png(
            &cm,
            &cfg.out.join("figures").join(format!("confusion_{arch}.png")),
        )?;
        reports.insert(arch.to_string(), report);

        if cfg.explain {
            let items: Vec<(String, RasterImage)> = test
                .iter()
                .map(|li| (li.source_id.clone(), li.image.clone()))
                .collect();
            let records = explain_images(
                model,
                &items,
                mask_dir.as_deref(),
                &cfg.out.join("explanations").join(arch.to_string()),
            )?;
            let audited: Vec<f64> = records
                .iter()
                .filter_map(|r| r.out_of_mask_relevance)
                .collect();
            if !audited.is_empty() {
                summary.mean_out_of_mask_relevance.insert(
                    arch.to_string(),
                    audited.iter().sum::<f64>() / audited.len() as f64,
                );
            }
        }
    }

    // Reports.
    let mut w = csv::Writer::from_path(cfg.out.join("predictions.csv"))?;
    for row in &csv_rows {
        w.serialize(row)?;
    }
    w.flush().map_err(Error::Io)?;

    let mut metrics_json = serde_json::to_string_pretty(&RunMetricsFile {
        seed,
        models: &reports,
    })?;
    metrics_json.push('\n');
    std::fs::write(cfg.out.join("metrics.json"), metrics_json)?;

    let config_toml = toml::to_string_pretty(cfg)
        .map_err(|e| Error::InvalidConfig(format!("config does not serialize: {e}")))?;
    std::fs::write(cfg.out.join("config.toml"), &config_toml)?;

    let mut artifacts = vec![
        "config.toml".to_string(),
        "splits.json".to_string(),
        "predictions.csv".to_string(),
        "metrics.json".to_string(),
    ];
    for &arch in &cfg.architectures {
        artifacts.push(format!("checkpoints/{arch}.ckpt"));
        artifacts.push(format!("figures/confusion_{arch}.png"));
        if cfg.explain {
            artifacts.push(format!("explanations/{arch}/records.json"));
        }
    }
    let mut manifest_json = serde_json::to_string_pretty(&RunManifestFile {
        seed,
        config_hash: config_hash(cfg),
        dataset: DatasetCounts {
            covid: sampled.count(ClassLabel::Covid),
            normal: sampled.count(ClassLabel::Normal),
            skipped: load.skipped.len(),
        },
        splits: SplitSizes {
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
        },
        artifacts,
        config: cfg,
    })?;
    manifest_json.push('\n');
    std::fs::write(cfg.out.join("run_manifest.json"), manifest_json)?;

    Ok(summary)
}

/// Hash identifying a configuration, recorded in the run manifest.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The sweep protocol over a dataset directory: split, generate the
/// augmented pool from the training split, then measure every increment for
/// every architecture.
///
/// `train_cfg.seed` also seeds each model build; `sweep.seed` drives pool
/// generation and the split.
pub fn sweep_from_directory(
    data_dir: &Path,
    archs: &[ArchitectureSpec],
    train_cfg: &TrainConfig,
    sweep: &SweepConfig,
) -> Result<SweepResult> {
    sweep.validate()?;
    let images = load_class_tree(data_dir)?;
    let manifest = dataset::DatasetManifest::new(
        images
            .iter()
            .map(|li| dataset::ManifestEntry {
                path: PathBuf::from(&li.source_id),
                label: li.label,
                source_id: li.source_id.clone(),
            })
            .collect(),
    )?;
    let split = split_dataset(&manifest, SplitRatios::default(), sweep.seed)?;
    let (train, val, test) = partition_images(&images, &split)?;
    let augmented = generate_augmented_set(&train, sweep)?;

    let mut rows = Vec::new();
    for spec in archs {
        let size = spec.input_size();
        let result = run_sweep(
            &resize_images(&train, size)?,
            &resize_images(&val, size)?,
            &resize_images(&test, size)?,
            &resize_images(&augmented, size)?,
            std::slice::from_ref(spec),
            train_cfg,
            sweep,
        )?;
        rows.extend(result.rows);
    }
    Ok(SweepResult { rows })
}

/// Writes `sweep.csv` with header
/// `model,augmented_count,augmented_fraction,train_acc,test_acc`.
pub fn write_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut text = String::from("model,augmented_count,augmented_fraction,train_acc,test_acc\n");
    for row in &result.rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.model, row.augmented_count, row.augmented_fraction, row.train_accuracy,
            row.test_accuracy
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}
