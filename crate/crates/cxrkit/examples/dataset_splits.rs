//! Walks the dataset plumbing: manifest loading, balanced sampling,
//! stratified splitting, and the disjointness guarantees.
//!
//! Run with `cargo run --example dataset_splits`; a scratch dataset is
//! created under `target/example-output/dataset/`.

use std::collections::BTreeMap;
use std::path::Path;

use cxrkit::dataset::{balanced_sample, load_manifest, split_dataset, SplitRatios};
use cxrkit::raster::ClassLabel;
use cxrkit::synth;

fn main() -> cxrkit::Result<()> {
    let root = Path::new("target/example-output/dataset");
    if !root.join("covid").is_dir() {
        synth::write_dataset(root, 40, 32, 9, false)?;
    }

    let load = load_manifest(root)?;
    println!(
        "manifest: {} images ({} covid, {} normal), {} unreadable files skipped",
        load.manifest.len(),
        load.manifest.count(ClassLabel::Covid),
        load.manifest.count(ClassLabel::Normal),
        load.skipped.len()
    );

    // Draw a balanced subset, then split it 65 / 15 / 20 stratified by class.
    let sample = balanced_sample(&load.manifest, 30, 30, 0)?;
    let split = split_dataset(&sample, SplitRatios::default(), 0)?;
    println!(
        "split sizes: train {} / val {} / test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    // Per-class composition of each split.
    let labels: BTreeMap<&str, ClassLabel> = sample
        .entries()
        .iter()
        .map(|e| (e.source_id.as_str(), e.label))
        .collect();
    for (name, ids) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        let covid = ids
            .iter()
            .filter(|id| labels[id.as_str()] == ClassLabel::Covid)
            .count();
        println!("  {name:5}: {covid} covid / {} normal", ids.len() - covid);
    }

    // The three splits are disjoint by construction; validate() would reject
    // anything else, and the assignment round-trips through JSON.
    split.validate()?;
    let path = root.join("splits.json");
    split.save(&path)?;
    println!("saved the assignment to {}", path.display());
    Ok(())
}
