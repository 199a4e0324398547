//! Runs the complete pipeline — enhancement, lung segmentation, training,
//! evaluation, and explanations — on a small synthetic dataset.
//!
//! Run with `cargo run --example full_pipeline`; the artifact tree lands in
//! `target/example-output/pipeline/`.

use std::path::Path;

use cxrkit::classify::Architecture;
use cxrkit::pipeline::{run_pipeline, PipelineConfig};
use cxrkit::seg::{build_unet, train_unet, UNetConfig};
use cxrkit::synth;

fn main() -> cxrkit::Result<()> {
    let base = Path::new("target/example-output/pipeline");
    let data = base.join("data");
    if !data.join("covid").is_dir() {
        synth::write_dataset(&data, 10, 64, 17, true)?;
    }

    // A quickly trained lung segmenter for the preprocessing stage.
    let seg_path = base.join("unet.ckpt");
    if !seg_path.is_file() {
        let pairs = synth::segmentation_pairs(6, 64, 17);
        let model = build_unet(
            UNetConfig {
                depth: 2,
                base_channels: 8,
                input_size: 64,
            },
            17,
        )?;
        let model = train_unet(model, &pairs, 60, 0.01)?;
        model.save(&seg_path)?;
        println!("trained the segmenter (final loss {:.4})", model.training_meta.final_loss);
    }

    let mut cfg = PipelineConfig::new(&data, base.join("run"), 17);
    cfg.architectures = vec![Architecture::Squeezenet];
    cfg.seg_weights = Some(seg_path);
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.explain = true;

    let summary = run_pipeline(&cfg)?;
    println!("\nper-architecture results:");
    for (arch, acc) in &summary.test_accuracy {
        match summary.mean_out_of_mask_relevance.get(arch) {
            Some(rel) => println!("  {arch}: test accuracy {acc:.3}, out-of-mask relevance {rel:.3}"),
            None => println!("  {arch}: test accuracy {acc:.3}"),
        }
    }

    println!("\nartifacts under {}:", summary.out_dir.display());
    for name in [
        "config.toml",
        "run_manifest.json",
        "splits.json",
        "predictions.csv",
        "metrics.json",
        "checkpoints/squeezenet.ckpt",
        "figures/confusion_squeezenet.png",
        "explanations/squeezenet/records.json",
    ] {
        let exists = summary.out_dir.join(name).exists();
        println!("  [{}] {name}", if exists { "x" } else { " " });
    }
    Ok(())
}
