//! Computes the nine-metric diagnostic report for a confusion matrix and
//! renders the 2x2 confusion figure.
//!
//! Run with `cargo run --example metrics_report`; the figure lands in
//! `target/example-output/metrics/`.

use std::path::Path;

use cxrkit::metrics::{render_confusion_png, ConfusionMatrix, EvaluationReport};

fn main() -> cxrkit::Result<()> {
    let out = Path::new("target/example-output/metrics");
    std::fs::create_dir_all(out)?;

    // Clinical-scale example: an 860-image test set with 440 positives.
    let cm = ConfusionMatrix {
        true_positives: 417,
        false_positives: 21,
        true_negatives: 399,
        false_negatives: 23,
    };
    let report = EvaluationReport::from_matrix(cm)?;
    print!("{}", report.to_json());

    let png = out.join("confusion.png");
    render_confusion_png(&cm, &png)?;
    println!("\nwrote {}", png.display());
    Ok(())
}
