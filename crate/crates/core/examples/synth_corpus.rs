//! Writes a small synthetic fundus corpus and a contact sheet of samples.
//!
//! `cargo run --example synth_corpus -- OUT_DIR [per_class] [size]`

use std::env;
use std::path::PathBuf;

use drfuse::dataset::Grade;
use drfuse::imageio;
use drfuse::synth::{generate_synthetic_corpus, SynthSpec};
use image::{imageops, RgbImage};

fn main() -> drfuse::Result<()> {
    let out = PathBuf::from(env::args().nth(1).unwrap_or_else(|| "synthetic_corpus".into()));
    let per_class = env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(6);
    let size: u32 = env::args().nth(3).and_then(|a| a.parse().ok()).unwrap_or(128);
    let paths = generate_synthetic_corpus(&out, &SynthSpec::balanced(per_class, size, 1))?;
    println!("wrote {} images under {}", paths.len(), out.display());
    let cols = per_class.min(6) as u32;
    let mut sheet = RgbImage::new(cols * size, 5 * size);
    for (row, g) in Grade::ALL.iter().enumerate() {
        for (col, p) in paths.iter().filter(|p| p.parent().is_some_and(|d| d.ends_with(g.canonical_name()))).take(cols as usize).enumerate() {
            let img = imageio::load_rgb(p)?;
            imageops::replace(&mut sheet, &img, (col as u32 * size) as i64, (row as u32 * size) as i64);
        }
    }
    let sheet_path = out.join("contact_sheet.png");
    imageio::save_rgb(&sheet, &sheet_path)?;
    println!("contact sheet: {}", sheet_path.display());
    Ok(())
}
