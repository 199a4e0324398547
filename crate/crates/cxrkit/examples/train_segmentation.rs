//! Trains a small U-Net lung segmenter on synthetic (image, mask) pairs,
//! reports held-out Dice, and writes a masked sample.
//!
//! Run with `cargo run --example train_segmentation`; outputs land in
//! `target/example-output/segmentation/`.

use std::path::Path;

use cxrkit::seg::{apply_mask, binarize_mask, build_unet, predict_mask, train_unet, UNetConfig};
use cxrkit::synth;

fn main() -> cxrkit::Result<()> {
    let out = Path::new("target/example-output/segmentation");
    std::fs::create_dir_all(out)?;

    let train_pairs = synth::segmentation_pairs(8, 64, 1);
    let held_out = synth::segmentation_pairs(2, 64, 900);

    let cfg = UNetConfig {
        depth: 2,
        base_channels: 8,
        input_size: 64,
    };
    let mut model = build_unet(cfg, 7)?;
    for round in 1..=4 {
        model = train_unet(model, &train_pairs, 25, 0.01)?;
        let mut dice = 0.0;
        for (img, mask) in &held_out {
            let probs = predict_mask(&model, img)?;
            dice += binarize_mask(&probs, 0.5, true)?.dice(mask);
        }
        println!(
            "after {:3} epochs: loss {:.4}, held-out Dice {:.4}",
            round * 25,
            model.training_meta.final_loss,
            dice / held_out.len() as f64
        );
    }

    let ckpt = out.join("unet.ckpt");
    model.save(&ckpt)?;

    // Mask one held-out image with the trained model.
    let (img, truth) = &held_out[0];
    let probs = predict_mask(&model, img)?;
    let mask = binarize_mask(&probs, 0.5, true)?;
    img.save(&out.join("input.png"))?;
    truth.to_image().save(&out.join("truth.png"))?;
    mask.to_image().save(&out.join("predicted_mask.png"))?;
    apply_mask(img, &mask)?.save(&out.join("masked.png"))?;

    println!(
        "\nsaved {} and four PNGs to {} (sample Dice {:.4})",
        ckpt.display(),
        out.display(),
        mask.dice(truth)
    );
    Ok(())
}
