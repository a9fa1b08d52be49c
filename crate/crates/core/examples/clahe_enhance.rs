//! CLAHE on the L* channel of one image, with the clip factor spelled out
//! and before/after contrast.
//!
//! `cargo run --release --example clahe_enhance -- [IMAGE] [OUT_DIR]`

use std::env;
use std::path::PathBuf;

use drfuse::enhance::clahe::{clahe, clip_factor, l_channel_std, ClipSpec, TileGrid};
use drfuse::enhance::{enhance_image, EnhanceOptions};
use drfuse::imageio;
use drfuse::synth::render;
use drfuse::dataset::Grade;
use rand::SeedableRng;

fn main() -> drfuse::Result<()> {
    let out = PathBuf::from(env::args().nth(2).unwrap_or_else(|| "clahe_out".into()));
    let img = match env::args().nth(1) {
        Some(p) => imageio::load_rgb(p.as_ref())?,
        None => {
            // a dim, washed-out fundus
            let mut img = render(Grade::Moderate, 256, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4));
            img.pixels_mut().for_each(|p| p.0 = p.0.map(|v| 60 + v / 3));
            img
        }
    };
    let grid = TileGrid::default();
    let clip = ClipSpec::default();
    let m = (img.width() / grid.cols as u32 * img.height() / grid.rows as u32) as usize;
    println!(
        "{}x{} image, {}x{} tiles of {m} pixels, alpha {} s_max {} -> beta {:.2}",
        img.width(),
        img.height(),
        grid.rows,
        grid.cols,
        clip.alpha,
        clip.s_max,
        clip_factor(m, 256, clip.alpha, clip.s_max)
    );
    let eq = clahe(&img, grid, clip)?;
    println!("L* std-dev {:.2} -> {:.2}", l_channel_std(&img), l_channel_std(&eq));
    let model_input = enhance_image(&img, &EnhanceOptions::default())?;
    imageio::save_rgb(&img, &out.join("before.png"))?;
    imageio::save_rgb(&eq, &out.join("clahe.png"))?;
    imageio::save_rgb(&model_input, &out.join("model_input_128.png"))?;
    println!("wrote before.png, clahe.png, model_input_128.png under {}", out.display());
    Ok(())
}
