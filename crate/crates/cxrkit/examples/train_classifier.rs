//! Trains one classifier architecture on synthetic radiographs and prints
//! the per-epoch history.
//!
//! Run with `cargo run --example train_classifier`; the checkpoint lands in
//! `target/example-output/classifier/`.

use std::path::Path;

use cxrkit::classify::{
    build_classifier, predict, train_classifier, Architecture, ArchitectureSpec, TrainConfig,
};
use cxrkit::pipeline::resize_images;
use cxrkit::synth;

fn main() -> cxrkit::Result<()> {
    let out = Path::new("target/example-output/classifier");
    std::fs::create_dir_all(out)?;

    let arch = Architecture::Squeezenet;
    let pool = resize_images(&synth::labeled_set(12, 64, 5), arch.input_size())?;
    let (train_set, rest) = pool.split_at(16);
    let (val_set, test_set) = rest.split_at(4);

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        learning_rate: 0.001,
        seed: 0,
    };
    let model = build_classifier(&ArchitectureSpec::new(arch, false), cfg.seed)?;
    let model = train_classifier(model, train_set, val_set, &cfg)?;

    println!("epoch  train_loss  train_acc  val_loss  val_acc");
    for e in model.history() {
        println!(
            "{:5}  {:10.4}  {:9.3}  {:8.4}  {:7.3}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
    }

    let mut correct = 0;
    println!("\ntest set:");
    for item in test_set {
        let p = predict(&model, &item.image)?;
        let hit = p.label == item.label;
        correct += usize::from(hit);
        println!(
            "  {:24} true {:6}  predicted {:6}  p_covid {:.3}  {}",
            item.source_id,
            item.label.as_str(),
            p.label.as_str(),
            p.p_covid,
            if hit { "ok" } else { "MISS" }
        );
    }
    println!(
        "test accuracy {:.3} ({correct}/{})",
        correct as f64 / test_set.len() as f64,
        test_set.len()
    );

    let ckpt = out.join(format!("{arch}.ckpt"));
    model.save(&ckpt)?;
    println!("\nsaved {}", ckpt.display());
    Ok(())
}
