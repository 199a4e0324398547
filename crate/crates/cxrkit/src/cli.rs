//! Command-line interface: one subcommand per pipeline stage plus `run`,
//! which composes them end to end.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data leaks, 4 training
//! divergence, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::augment::SweepConfig;
use crate::cache;
use crate::classify::{
    build_classifier, predict, train_classifier, Architecture, ArchitectureSpec, TrainConfig,
    TrainedClassifier,
};
use crate::dataset::{self, PreprocessConfig};
use crate::enhance::{self, EnhancementConfig};
use crate::error::{Error, Result};
use crate::metrics::{confusion_from_predictions, render_confusion_png, EvaluationReport};
use crate::pipeline::{
    self, explain_images, load_class_tree, read_predictions_csv, resize_images,
    write_predictions_csv, write_sweep_csv, PipelineConfig, PredictionRecord,
};
use crate::raster::{self, RasterImage};
use crate::seg::{self, build_unet, train_unet, LungMask, SegmentationModel, UNetConfig};

#[derive(Parser)]
#[command(
    name = "cxrkit",
    version,
    about = "Chest X-ray classification pipeline: enhancement, lung segmentation, \
             CNN training, explanations, and augmentation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a contrast-enhancement filter to every image in a directory
    Enhance(EnhanceArgs),
    /// Mask lungs in images using a trained segmentation model
    Segment(SegmentArgs),
    /// Train the U-Net lung segmenter on (image, mask) pairs
    TrainSeg(TrainSegArgs),
    /// Run the preprocessing chain over a dataset tree
    Preprocess(PreprocessArgs),
    /// Train one classifier architecture on a dataset tree
    Train(TrainArgs),
    /// Predict labels for a dataset tree with a trained classifier
    Predict(PredictArgs),
    /// Compute the diagnostic metrics from a predictions file
    Evaluate(EvaluateArgs),
    /// Write heatmaps, counterfactuals, and relevance records
    Explain(ExplainArgs),
    /// Run the incremental augmentation sweep
    Sweep(SweepArgs),
    /// Run the full pipeline end to end
    Run(RunArgs),
}

/// Parameter overrides for the parametric enhancement methods.
#[derive(Args, Clone, Copy, Default)]
struct EnhanceParams {
    /// CLAHE clip limit
    #[arg(long)]
    clip: Option<f64>,
    /// CLAHE tile grid side (n gives an n x n grid)
    #[arg(long)]
    tiles: Option<usize>,
    /// Gaussian blur sigma for unsharp-g
    #[arg(long)]
    sigma: Option<f64>,
    /// Sharpening amount for the unsharp methods
    #[arg(long)]
    amount: Option<f64>,
    /// Butterworth filter order
    #[arg(long)]
    order: Option<u32>,
    /// Butterworth normalized cutoff frequency
    #[arg(long)]
    cutoff: Option<f64>,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Enhancement method: he, clahe, unsharp-g, unsharp-l, or butterworth
    #[arg(long, default_value = "he")]
    method: String,
    /// Input image file or directory of images
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; filenames are preserved
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: EnhanceParams,
}

#[derive(Args)]
struct SegmentArgs {
    /// Segmentation checkpoint
    #[arg(long)]
    weights: PathBuf,
    /// Input image file or directory of images
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for masked images
    #[arg(long)]
    out: PathBuf,
    /// Also write the binary masks here
    #[arg(long)]
    save_masks: Option<PathBuf>,
    /// Probability threshold for the mask
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct TrainSegArgs {
    /// Directory of images with ground-truth masks under `<data>/masks`
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder depth
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Channels in the first encoder block
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    /// Working resolution (must be divisible by 2^depth)
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Dataset root holding covid/ and normal/
    #[arg(long)]
    data: PathBuf,
    /// Output root; the class tree is mirrored
    #[arg(long)]
    out: PathBuf,
    /// Segmentation checkpoint (required unless --no-segmentation)
    #[arg(long)]
    seg_weights: Option<PathBuf>,
    /// Skip lung masking
    #[arg(long)]
    no_segmentation: bool,
    /// Enhancement method: he, clahe, unsharp-g, unsharp-l, or butterworth
    #[arg(long, default_value = "he")]
    enhance: String,
    /// Output side length in pixels
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[command(flatten)]
    params: EnhanceParams,
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture: alexnet, resnet50, inceptionv3, or squeezenet
    #[arg(long)]
    arch: String,
    /// Dataset tree holding covid/ and normal/ (already preprocessed)
    #[arg(long)]
    data: PathBuf,
    /// TOML file with training hyperparameters
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Start from cached pretrained backbone weights
    #[arg(long)]
    pretrained: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    /// Classifier checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset tree holding covid/ and normal/
    #[arg(long = "in")]
    input: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions CSV produced by `predict`
    #[arg(long)]
    pred: PathBuf,
    /// Output metrics JSON path
    #[arg(long)]
    out: PathBuf,
    /// Confusion-matrix figure path (default: confusion.png next to --out)
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    /// Classifier checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of images, flat or as a covid/ + normal/ tree
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory for heatmaps and records
    #[arg(long)]
    out: PathBuf,
    /// Lung masks mirroring the input layout, for the relevance audit
    #[arg(long)]
    mask_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset tree holding covid/ and normal/
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated architectures
    #[arg(long, value_delimiter = ',', default_value = "squeezenet")]
    archs: Vec<String>,
    /// TOML file with sweep settings and a [train] section
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Override both the sweep seed and the training seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML pipeline configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding covid/ and normal/
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (mandatory here or in the config file)
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated architectures
    #[arg(long, value_delimiter = ',')]
    archs: Option<Vec<String>>,
    /// Disable lung masking during preprocessing
    #[arg(long)]
    no_segmentation: bool,
    /// Segmentation checkpoint
    #[arg(long)]
    seg_weights: Option<PathBuf>,
    /// Enhancement method with default parameters
    #[arg(long)]
    enhance: Option<String>,
    /// Also write explanations for every test image
    #[arg(long)]
    explain: bool,
    /// Ground-truth masks for the relevance audit
    #[arg(long)]
    mask_dir: Option<PathBuf>,
    /// Start from cached pretrained backbone weights
    #[arg(long)]
    pretrained: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

/// Binary entry point: parse, dispatch, map errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Parses and runs a full argument vector (including the binary name);
/// the testable core of [`main`].
pub fn run_command<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| Error::InvalidConfig(format!("argument error: {e}")))?;
    dispatch(cli.command)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Enhance(args) => cmd_enhance(args),
        Command::Segment(args) => cmd_segment(args),
        Command::TrainSeg(args) => cmd_train_seg(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Run(args) => cmd_run(args),
    }
}

/// Builds an enhancement config from a method name and parameter flags,
/// refusing flags that do not belong to the chosen method.
fn enhancement_from_flags(method: &str, p: &EnhanceParams) -> Result<EnhancementConfig> {
    let mut cfg = match method {
        "he" => EnhancementConfig::He,
        "clahe" => EnhancementConfig::clahe_default(),
        "unsharp-g" | "unsharp-gaussian" => EnhancementConfig::unsharp_gaussian_default(),
        "unsharp-l" | "unsharp-laplacian" => EnhancementConfig::unsharp_laplacian_default(),
        "butterworth" => EnhancementConfig::butterworth_default(),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown enhancement method '{other}'; expected he, clahe, unsharp-g, \
                 unsharp-l, or butterworth"
            )))
        }
    };
    match &mut cfg {
        EnhancementConfig::He => {}
        EnhancementConfig::Clahe { clip, tiles } => {
            if let Some(v) = p.clip {
                *clip = v;
            }
            if let Some(n) = p.tiles {
                *tiles = [n, n];
            }
        }
        EnhancementConfig::UnsharpGaussian { sigma, amount } => {
            if let Some(v) = p.sigma {
                *sigma = v;
            }
            if let Some(v) = p.amount {
                *amount = v;
            }
        }
        EnhancementConfig::UnsharpLaplacian { amount } => {
            if let Some(v) = p.amount {
                *amount = v;
            }
        }
        EnhancementConfig::Butterworth { order, cutoff } => {
            if let Some(v) = p.order {
                *order = v;
            }
            if let Some(v) = p.cutoff {
                *cutoff = v;
            }
        }
    }
    let misapplied = [
        (p.clip.is_some() && !matches!(cfg, EnhancementConfig::Clahe { .. }), "--clip"),
        (p.tiles.is_some() && !matches!(cfg, EnhancementConfig::Clahe { .. }), "--tiles"),
        (
            p.sigma.is_some() && !matches!(cfg, EnhancementConfig::UnsharpGaussian { .. }),
            "--sigma",
        ),
        (
            p.amount.is_some()
                && !matches!(
                    cfg,
                    EnhancementConfig::UnsharpGaussian { .. }
                        | EnhancementConfig::UnsharpLaplacian { .. }
                ),
            "--amount",
        ),
        (
            p.order.is_some() && !matches!(cfg, EnhancementConfig::Butterworth { .. }),
            "--order",
        ),
        (
            p.cutoff.is_some() && !matches!(cfg, EnhancementConfig::Butterworth { .. }),
            "--cutoff",
        ),
    ];
    for (wrong, flag) in misapplied {
        if wrong {
            return Err(Error::InvalidConfig(format!(
                "{flag} does not apply to method '{method}'"
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_arch(name: &str) -> Result<Architecture> {
    name.parse()
}

/// The image files directly inside `dir` (or just `path` if it is a file),
/// sorted by filename.
fn input_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::InvalidConfig(format!(
            "{} is neither a file nor a directory",
            path.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image.png".to_string())
}

fn cmd_enhance(args: EnhanceArgs) -> Result<()> {
    let cfg = enhancement_from_flags(&args.method, &args.params)?;
    std::fs::create_dir_all(&args.out)?;
    let mut done = 0usize;
    for path in input_images(&args.input)? {
        let img = match RasterImage::open(&path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let out = enhance::enhance(&raster::to_grayscale(&img)?, &cfg)?;
        out.save(&args.out.join(file_name(&path)))?;
        done += 1;
    }
    if done == 0 {
        return Err(Error::InvalidData(format!(
            "no readable images under {}",
            args.input.display()
        )));
    }
    eprintln!("enhanced {done} images into {}", args.out.display());
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let model = SegmentationModel::load(&args.weights)?;
    let size = model.config().input_size;
    std::fs::create_dir_all(&args.out)?;
    if let Some(dir) = &args.save_masks {
        std::fs::create_dir_all(dir)?;
    }
    let mut done = 0usize;
    for path in input_images(&args.input)? {
        let img = match RasterImage::open(&path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let gray = raster::to_grayscale(&img)?;
        let probs = seg::predict_mask(&model, &raster::resize(&gray, size, size)?)?;
        let mask = seg::binarize_mask(&probs, args.threshold, true)?
            .resize_nearest(gray.width(), gray.height())?;
        seg::apply_mask(&gray, &mask)?
            .save(&args.out.join(file_name(&path)))?;
        if let Some(dir) = &args.save_masks {
            mask.to_image().save(&dir.join(file_name(&path)))?;
        }
        done += 1;
    }
    if done == 0 {
        return Err(Error::InvalidData(format!(
            "no readable images under {}",
            args.input.display()
        )));
    }
    eprintln!("segmented {done} images into {}", args.out.display());
    Ok(())
}

/// Recursively collects image files under `dir`, skipping `masks/`, and
/// pairs each with the mask of the same relative path under `dir/masks`.
fn collect_seg_pairs(dir: &Path) -> Result<Vec<(RasterImage, LungMask)>> {
    fn walk(base: &Path, current: &Path, rels: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(current)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                if current == base && entry.file_name() == "masks" {
                    continue;
                }
                walk(base, &path, rels)?;
            } else if path.is_file() {
                let rel = path
                    .strip_prefix(base)
                    .expect("walked paths live under base")
                    .to_string_lossy()
                    .into_owned();
                rels.push(rel);
            }
        }
        Ok(())
    }

    let mut rels = Vec::new();
    walk(dir, dir, &mut rels)?;
    rels.sort();
    let mut pairs = Vec::new();
    for rel in rels {
        let mask_path = dir.join("masks").join(&rel);
        if !mask_path.is_file() {
            eprintln!("skipping {rel}: no mask at {}", mask_path.display());
            continue;
        }
        let img = match RasterImage::open(&dir.join(&rel)) {
            Ok(img) => raster::to_grayscale(&img)?,
            Err(e) => {
                eprintln!("skipping {rel}: {e}");
                continue;
            }
        };
        let mask = LungMask::from_image(&raster::to_grayscale(&RasterImage::open(&mask_path)?)?)?;
        pairs.push((img, mask));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidData(format!(
            "no (image, mask) pairs under {}; masks must mirror the image tree \
             under {}/masks",
            dir.display(),
            dir.display()
        )));
    }
    Ok(pairs)
}

fn cmd_train_seg(args: TrainSegArgs) -> Result<()> {
    let cfg = UNetConfig {
        depth: args.depth,
        base_channels: args.base_channels,
        input_size: args.size,
    };
    let pairs: Vec<(RasterImage, LungMask)> = collect_seg_pairs(&args.data)?
        .into_iter()
        .map(|(img, mask)| {
            Ok((
                raster::resize(&img, args.size, args.size)?,
                mask.resize_nearest(args.size, args.size)?,
            ))
        })
        .collect::<Result<_>>()?;
    eprintln!(
        "training U-Net (depth {}, {} base channels) on {} pairs for {} epochs",
        args.depth,
        args.base_channels,
        pairs.len(),
        args.epochs
    );
    let model = build_unet(cfg, args.seed)?;
    let model = train_unet(model, &pairs, args.epochs, args.lr)?;
    model.save(&args.out)?;
    eprintln!(
        "saved {} (final loss {:.4})",
        args.out.display(),
        model.training_meta.final_loss
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let enhancement = enhancement_from_flags(&args.enhance, &args.params)?;
    let seg = match (args.no_segmentation, &args.seg_weights) {
        (true, _) => None,
        (false, Some(path)) => Some(SegmentationModel::load(path)?),
        (false, None) => {
            return Err(Error::InvalidConfig(
                "segmentation needs --seg-weights; pass --no-segmentation to skip it".into(),
            ))
        }
    };
    let load = dataset::load_manifest(&args.data)?;
    for (path, reason) in &load.skipped {
        eprintln!("skipping {}: {reason}", path.display());
    }
    let outcome = dataset::preprocess_all(
        &load.manifest,
        seg.as_ref(),
        &PreprocessConfig {
            enhancement,
            target_size: args.size,
            cache_dir: Some(cache::cache_dir()),
        },
    )?;
    for (id, reason) in &outcome.failures {
        eprintln!("preprocessing failed for {id}: {reason}");
    }

    let mut entries = Vec::with_capacity(outcome.images.len());
    for img in &outcome.images {
        let path = args.out.join(&img.source_id);
        std::fs::create_dir_all(path.parent().expect("ids have a class directory"))?;
        img.image.save(&path)?;
        entries.push(dataset::ManifestEntry {
            path,
            label: img.label,
            source_id: img.source_id.clone(),
        });
    }
    dataset::DatasetManifest::new(entries)?.save_csv(&args.out.join("manifest.csv"))?;
    eprintln!(
        "preprocessed {} images into {} ({} cache hits)",
        outcome.images.len(),
        args.out.display(),
        outcome.cache_hits
    );
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let arch = parse_arch(&args.arch)?;
    let mut cfg = load_train_config(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;

    let images = load_class_tree(&args.data)?;
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
    let split = dataset::split_dataset(&manifest, dataset::SplitRatios::default(), cfg.seed)?;
    let sized = resize_images(&images, arch.input_size())?;
    let (train, val, _test) = dataset::partition_images(&sized, &split)?;
    eprintln!(
        "training {arch} on {} train / {} val images for {} epochs",
        train.len(),
        val.len(),
        cfg.epochs
    );
    let model = build_classifier(&ArchitectureSpec::new(arch, args.pretrained), cfg.seed)?;
    let model = train_classifier(model, &train, &val, &cfg)?;
    model.save(&args.out)?;
    let last = model.history().last().expect("training ran");
    eprintln!(
        "saved {} (train acc {:.3}, val acc {:.3})",
        args.out.display(),
        last.train_accuracy,
        last.val_accuracy
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = TrainedClassifier::load(&args.ckpt)?;
    let images = load_class_tree(&args.input)?;
    let sized = resize_images(&images, model.input_size())?;
    let mut rows = Vec::with_capacity(sized.len());
    for item in &sized {
        let p = predict(&model, &item.image)?;
        rows.push(PredictionRecord {
            source_id: item.source_id.clone(),
            true_label: item.label,
            predicted_label: p.label,
            p_covid: p.p_covid,
            p_normal: p.p_normal,
        });
    }
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_predictions_csv(&args.out, &rows)?;
    eprintln!("wrote {} predictions to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let rows = read_predictions_csv(&args.pred)?;
    let truths: Vec<_> = rows.iter().map(|r| r.true_label).collect();
    let preds: Vec<_> = rows.iter().map(|r| r.predicted_label).collect();
    let cm = confusion_from_predictions(&truths, &preds)?;
    let report = EvaluationReport::from_matrix(cm)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&args.out, report.to_json())?;
    let png = args
        .png
        .unwrap_or_else(|| args.out.with_file_name("confusion.png"));
    render_confusion_png(&cm, &png)?;
    eprintln!(
        "wrote {} and {} from {} predictions",
        args.out.display(),
        png.display(),
        rows.len()
    );
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let mut model = TrainedClassifier::load(&args.ckpt)?;
    let items: Vec<(String, RasterImage)> =
        if args.input.join("covid").is_dir() && args.input.join("normal").is_dir() {
            load_class_tree(&args.input)?
                .into_iter()
                .map(|li| (li.source_id, li.image))
                .collect()
        } else {
            let mut items = Vec::new();
            for path in input_images(&args.input)? {
                match RasterImage::open(&path) {
                    Ok(img) => items.push((file_name(&path), img)),
                    Err(e) => eprintln!("skipping {}: {e}", path.display()),
                }
            }
            items
        };
    if items.is_empty() {
        return Err(Error::InvalidData(format!(
            "no readable images under {}",
            args.input.display()
        )));
    }
    let records = explain_images(&mut model, &items, args.mask_dir.as_deref(), &args.out)?;
    let audited: Vec<f64> = records.iter().filter_map(|r| r.out_of_mask_relevance).collect();
    if audited.is_empty() {
        eprintln!("explained {} images into {}", records.len(), args.out.display());
    } else {
        eprintln!(
            "explained {} images into {} (mean out-of-mask relevance {:.4})",
            records.len(),
            args.out.display(),
            audited.iter().sum::<f64>() / audited.len() as f64
        );
    }
    Ok(())
}

/// File format for `sweep --config`: the sweep fields at the top level and
/// an optional `[train]` table.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFileConfig {
    #[serde(flatten)]
    sweep: SweepConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut file_cfg = match &args.config {
        None => SweepFileConfig {
            sweep: SweepConfig::default(),
            train: TrainConfig::default(),
        },
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(seed) = args.seed {
        file_cfg.sweep.seed = seed;
        file_cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        file_cfg.train.epochs = epochs;
    }
    let archs: Vec<ArchitectureSpec> = args
        .archs
        .iter()
        .map(|name| Ok(ArchitectureSpec::new(parse_arch(name)?, false)))
        .collect::<Result<_>>()?;
    let result =
        pipeline::sweep_from_directory(&args.data, &archs, &file_cfg.train, &file_cfg.sweep)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_sweep_csv(&args.out, &result)?;
    eprintln!("wrote {} sweep rows to {}", result.rows.len(), args.out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let data = args.data.clone().ok_or_else(|| {
                Error::InvalidConfig("pass --config or both --data and --out".into())
            })?;
            let out = args.out.clone().ok_or_else(|| {
                Error::InvalidConfig("pass --config or both --data and --out".into())
            })?;
            let mut cfg = PipelineConfig::new(data, out, 0);
            cfg.seed = None;
            cfg
        }
    };
    if let Some(data) = args.data {
        cfg.data = data;
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(names) = &args.archs {
        cfg.architectures = names
            .iter()
            .map(|n| parse_arch(n))
            .collect::<Result<_>>()?;
    }
    if args.no_segmentation {
        cfg.segmentation = false;
    }
    if let Some(path) = args.seg_weights {
        cfg.seg_weights = Some(path);
    }
    if let Some(method) = &args.enhance {
        cfg.enhancement = enhancement_from_flags(method, &EnhanceParams::default())?;
    }
    if args.explain {
        cfg.explain = true;
    }
    if let Some(dir) = args.mask_dir {
        cfg.mask_dir = Some(dir);
    }
    if args.pretrained {
        cfg.pretrained = true;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }

    let summary = pipeline::run_pipeline(&cfg)?;
    for (arch, acc) in &summary.test_accuracy {
        match summary.mean_out_of_mask_relevance.get(arch) {
            Some(rel) => eprintln!(
                "{arch}: test accuracy {acc:.4}, mean out-of-mask relevance {rel:.4}"
            ),
            None => eprintln!("{arch}: test accuracy {acc:.4}"),
        }
    }
    eprintln!("artifacts in {}", summary.out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn run(args: &[&str]) -> Result<()> {
        run_command(std::iter::once("cxrkit").chain(args.iter().copied()))
    }

    #[test]
    fn enhancement_flags_build_the_right_configs() {
        let p = EnhanceParams::default();
        assert_eq!(enhancement_from_flags("he", &p).unwrap(), EnhancementConfig::He);
        assert_eq!(
            enhancement_from_flags("unsharp-g", &p).unwrap(),
            EnhancementConfig::unsharp_gaussian_default()
        );
        assert_eq!(
            enhancement_from_flags("unsharp-laplacian", &p).unwrap(),
            EnhancementConfig::unsharp_laplacian_default()
        );

        let custom = EnhanceParams {
            clip: Some(3.0),
            tiles: Some(4),
            ..Default::default()
        };
        assert_eq!(
            enhancement_from_flags("clahe", &custom).unwrap(),
            EnhancementConfig::Clahe {
                clip: 3.0,
                tiles: [4, 4]
            }
        );

        // Flags from another method are refused, as are unknown methods.
        let err = enhancement_from_flags("he", &custom).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert!(err.to_string().contains("--clip"));
        assert!(enhancement_from_flags("posterize", &p).is_err());
    }

    #[test]
    fn enhance_mirrors_filenames_and_matches_the_library() {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("in");
        std::fs::create_dir_all(&input).unwrap();
        for (name, seed) in [("a.png", 1u64), ("b.png", 2)] {
            synth::phantom(seed, 32, crate::raster::ClassLabel::Normal)
                .image
                .save(&input.join(name))
                .unwrap();
        }
        let out = tmp.path().join("out");
        run(&[
            "enhance",
            "--method",
            "he",
            "--in",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();

        for name in ["a.png", "b.png"] {
            let got = RasterImage::open(&out.join(name)).unwrap();
            let source = RasterImage::open(&input.join(name)).unwrap();
            let expected =
                enhance::enhance(&raster::to_grayscale(&source).unwrap(), &EnhancementConfig::He)
                    .unwrap();
            assert_eq!(got.pixels(), expected.pixels(), "{name}");
        }
    }

    #[test]
    fn bad_arguments_surface_as_config_errors() {
        let err = run(&["enhance", "--in", "x", "--out", "y", "--definitely-not-a-flag"])
            .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert_eq!(err.exit_code(), 2);

        let err = run(&["run"]).unwrap_err();
        assert!(err.to_string().contains("--config"));
    }

    #[test]
    fn train_seg_then_segment_produces_masked_images() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth::write_dataset(&data, 2, 32, 5, true).unwrap();
        let ckpt = tmp.path().join("seg.ckpt");
        run(&[
            "train-seg",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--epochs",
            "1",
            "--depth",
            "1",
            "--base-channels",
            "2",
            "--size",
            "16",
        ])
        .unwrap();
        assert!(ckpt.is_file());

        let out = tmp.path().join("masked");
        let masks = tmp.path().join("outmasks");
        run(&[
            "segment",
            "--weights",
            ckpt.to_str().unwrap(),
            "--in",
            data.join("covid").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--save-masks",
            masks.to_str().unwrap(),
        ])
        .unwrap();
        for name in ["covid_00000.png", "covid_00001.png"] {
            assert!(out.join(name).is_file());
            let mask = RasterImage::open(&masks.join(name)).unwrap();
            assert!(mask.pixels().iter().all(|&v| v == 0 || v == 255));
        }
    }

    #[test]
    fn train_predict_evaluate_chain_works_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth::write_dataset(&data, 4, 32, 3, false).unwrap();
        let ckpt = tmp.path().join("model.ckpt");
        run(&[
            "train",
            "--arch",
            "squeezenet",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch-size",
            "4",
            "--seed",
            "11",
        ])
        .unwrap();

        let pred = tmp.path().join("predictions.csv");
        run(&[
            "predict",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--in",
            data.to_str().unwrap(),
            "--out",
            pred.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(read_predictions_csv(&pred).unwrap().len(), 8);

        let metrics = tmp.path().join("metrics.json");
        run(&[
            "evaluate",
            "--pred",
            pred.to_str().unwrap(),
            "--out",
            metrics.to_str().unwrap(),
        ])
        .unwrap();
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
        assert!(parsed["metrics"]["accuracy"].is_number());
        assert_eq!(parsed["confusion_matrix"]["tp"].as_u64().unwrap()
            + parsed["confusion_matrix"]["fp"].as_u64().unwrap()
            + parsed["confusion_matrix"]["tn"].as_u64().unwrap()
            + parsed["confusion_matrix"]["fn"].as_u64().unwrap(), 8);
        assert!(metrics.with_file_name("confusion.png").is_file());
    }

    #[test]
    fn explain_writes_heatmaps_for_flat_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth::write_dataset(&data, 4, 32, 9, false).unwrap();
        let ckpt = tmp.path().join("model.ckpt");
        run(&[
            "train",
            "--arch",
            "squeezenet",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch-size",
            "4",
        ])
        .unwrap();

        let out = tmp.path().join("explained");
        run(&[
            "explain",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--in",
            data.join("covid").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        assert!(out.join("records.json").is_file());
        assert!(out.join("covid_00000_heatmap.png").is_file());
        assert!(out.join("covid_00000_counterfactual.png").is_file());
        assert!(out.join("covid_00000_overlay.png").is_file());
    }

    #[test]
    fn sweep_writes_the_documented_csv_shape() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth::write_dataset(&data, 6, 32, 2, false).unwrap();
        let config = tmp.path().join("sweep.toml");
        std::fs::write(
            &config,
            "step = 4\ntotal = 8\nper_op_per_class = 1\nseed = 3\n\n\
             [train]\nepochs = 1\nbatch_size = 4\n",
        )
        .unwrap();
        let out = tmp.path().join("sweep.csv");
        run(&[
            "sweep",
            "--data",
            data.to_str().unwrap(),
            "--archs",
            "squeezenet",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "model,augmented_count,augmented_fraction,train_acc,test_acc"
        );
        assert_eq!(lines.len(), 4, "header plus one row per increment: {text}");
        assert!(lines[1].starts_with("squeezenet,0,0,"));
        assert!(lines[2].starts_with("squeezenet,4,"));
        assert!(lines[3].starts_with("squeezenet,8,"));
    }

    #[test]
    fn run_accepts_flag_only_invocations() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth::write_dataset(&data, 4, 32, 8, false).unwrap();
        let out = tmp.path().join("run");
        run(&[
            "run",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "5",
            "--archs",
            "squeezenet",
            "--no-segmentation",
            "--epochs",
            "1",
            "--batch-size",
            "4",
        ])
        .unwrap();
        assert!(out.join("metrics.json").is_file());
        assert!(out.join("predictions.csv").is_file());

        // Without a seed the run is refused before touching anything.
        let err = run(&[
            "run",
            "--data",
            data.to_str().unwrap(),
            "--out",
            tmp.path().join("run2").to_str().unwrap(),
            "--no-segmentation",
        ])
        .unwrap_err();
        assert!(err.to_string().contains("seed"));
        assert!(!tmp.path().join("run2").exists());
    }
}
