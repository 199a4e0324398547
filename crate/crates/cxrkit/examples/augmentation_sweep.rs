//! Demonstrates the four augmentation transforms and runs a miniature
//! incremental augmentation sweep.
//!
//! Run with `cargo run --example augmentation_sweep`; outputs land in
//! `target/example-output/augment/`.

use std::path::Path;

use cxrkit::augment::{apply_augmentation, generate_augmented_set, run_sweep, AugmentationOp, SweepConfig};
use cxrkit::classify::{Architecture, ArchitectureSpec, TrainConfig};
use cxrkit::pipeline::{resize_images, write_sweep_csv};
use cxrkit::synth;

fn main() -> cxrkit::Result<()> {
    let out = Path::new("target/example-output/augment");
    std::fs::create_dir_all(out)?;

    // The four transforms on one image.
    let sample = &synth::labeled_set(1, 96, 2)[0];
    sample.image.save(&out.join("original.png"))?;
    for op in [
        AugmentationOp::Tilt45,
        AugmentationOp::ScaleTo350x450,
        AugmentationOp::ContrastUp { factor: 1.5 },
        AugmentationOp::CenterCrop { fraction: 0.8 },
    ] {
        let augmented = apply_augmentation(sample, &op)?;
        augmented
            .image
            .save(&out.join(format!("{}.png", op.slug())))?;
        println!(
            "{:14} {:3}x{:3} -> {:3}x{:3}  id {}",
            op.slug(),
            sample.image.width(),
            sample.image.height(),
            augmented.image.width(),
            augmented.image.height(),
            augmented.source_id
        );
    }

    // A miniature sweep: 3 increments of 4 augmented images each.
    let sweep_cfg = SweepConfig {
        step: 4,
        total: 8,
        per_op_per_class: 1,
        seed: 0,
        ..SweepConfig::default()
    };
    let pool = synth::labeled_set(8, 48, 7);
    let (train, rest) = pool.split_at(10);
    let (val, test) = rest.split_at(2);
    let augmented = generate_augmented_set(train, &sweep_cfg)?;

    let arch = ArchitectureSpec::new(Architecture::Squeezenet, false);
    let size = arch.input_size();
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 0.001,
        seed: 0,
    };
    let result = run_sweep(
        &resize_images(train, size)?,
        &resize_images(val, size)?,
        &resize_images(test, size)?,
        &resize_images(&augmented, size)?,
        &[arch],
        &train_cfg,
        &sweep_cfg,
    )?;

    println!("\nmodel       k  fraction  train_acc  test_acc");
    for row in &result.rows {
        println!(
            "{:10} {:2}  {:8.4}  {:9.3}  {:8.3}",
            row.model, row.augmented_count, row.augmented_fraction, row.train_accuracy,
            row.test_accuracy
        );
    }

    let csv = out.join("sweep.csv");
    write_sweep_csv(&csv, &result)?;
    println!("\nwrote {} and five PNGs to {}", csv.display(), out.display());
    Ok(())
}
