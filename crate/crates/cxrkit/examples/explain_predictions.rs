//! Produces a relevance heatmap, counterfactual map, and overlay for a
//! classifier decision, plus the out-of-mask relevance audit against the
//! ground-truth lung mask.
//!
//! Run with `cargo run --example explain_predictions`; outputs land in
//! `target/example-output/explain/`.

use std::path::Path;

use cxrkit::classify::{
    build_classifier, train_classifier, Architecture, ArchitectureSpec, TrainConfig,
};
use cxrkit::explain::{counterfactual_cam, out_of_mask_relevance, overlay_heatmap};
use cxrkit::pipeline::resize_images;
use cxrkit::raster::{self, ClassLabel};
use cxrkit::synth;

fn main() -> cxrkit::Result<()> {
    let out = Path::new("target/example-output/explain");
    std::fs::create_dir_all(out)?;

    // A quickly trained toy model is enough to demonstrate the mechanics.
    let arch = Architecture::Squeezenet;
    let pool = resize_images(&synth::labeled_set(8, 64, 3), arch.input_size())?;
    let (train_set, val_set) = pool.split_at(12);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 0.001,
        seed: 1,
    };
    let model = build_classifier(&ArchitectureSpec::new(arch, false), cfg.seed)?;
    let mut model = train_classifier(model, train_set, val_set, &cfg)?;

    // Explain a fresh positive case.
    let phantom = synth::phantom(1234, 64, ClassLabel::Covid);
    let img = raster::resize(&phantom.image, arch.input_size(), arch.input_size())?;
    let explanation = counterfactual_cam(&mut model, &img)?;
    println!(
        "prediction: {} (p_covid {:.3}, p_normal {:.3})",
        explanation.prediction.label.as_str(),
        explanation.prediction.p_covid,
        explanation.prediction.p_normal
    );

    img.save(&out.join("input.png"))?;
    explanation.heatmap.to_image().save(&out.join("heatmap.png"))?;
    explanation
        .counterfactual
        .to_image()
        .save(&out.join("counterfactual.png"))?;
    overlay_heatmap(&img, &explanation.heatmap, 0.4)?.save(&out.join("overlay.png"))?;

    // How much relevance falls outside the true lung region?
    let mask = phantom
        .mask
        .resize_nearest(arch.input_size(), arch.input_size())?;
    let relevance = out_of_mask_relevance(&explanation.heatmap, &mask)?;
    println!("out-of-mask relevance: {relevance:.4} (0 = all attention inside the lungs)");

    println!("\nwrote four PNGs to {}", out.display());
    Ok(())
}
