//! Applies every contrast-enhancement filter to one synthetic radiograph
//! and writes the results side by side.
//!
//! Run with `cargo run --example enhance_filters`; outputs land in
//! `target/example-output/enhance/`.

use std::path::Path;

use cxrkit::enhance::{enhance, EnhancementConfig};
use cxrkit::raster::{ClassLabel, RasterImage};
use cxrkit::synth;

fn stats(img: &RasterImage) -> (u8, u8, f64) {
    let pixels = img.pixels();
    let min = pixels.iter().copied().min().unwrap_or(0);
    let max = pixels.iter().copied().max().unwrap_or(0);
    let mean = pixels.iter().map(|&p| p as f64).sum::<f64>() / pixels.len() as f64;
    (min, max, mean)
}

fn main() -> cxrkit::Result<()> {
    let out = Path::new("target/example-output/enhance");
    std::fs::create_dir_all(out)?;

    let img = synth::phantom(11, 256, ClassLabel::Covid).image;
    img.save(&out.join("original.png"))?;
    let (min, max, mean) = stats(&img);
    println!("{:18} range [{min:3}, {max:3}]  mean {mean:6.1}", "original");

    let configs = [
        ("he", EnhancementConfig::He),
        ("clahe", EnhancementConfig::clahe_default()),
        ("unsharp_gaussian", EnhancementConfig::unsharp_gaussian_default()),
        ("unsharp_laplacian", EnhancementConfig::unsharp_laplacian_default()),
        ("butterworth", EnhancementConfig::butterworth_default()),
    ];
    for (name, cfg) in configs {
        let enhanced = enhance(&img, &cfg)?;
        enhanced.save(&out.join(format!("{name}.png")))?;
        let (min, max, mean) = stats(&enhanced);
        println!("{name:18} range [{min:3}, {max:3}]  mean {mean:6.1}");
    }

    println!("\nwrote six PNGs to {}", out.display());
    Ok(())
}
