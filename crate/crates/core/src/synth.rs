//! Procedural fundus-like images with grade-specific lesion signatures, for
//! exercising the pipeline without the public corpora.
//!
//! Every image shows an orange retinal disc on black with an optic disc and
//! a few vessels. The grade decides the lesion type:
//!
//! | grade | signature |
//! |---|---|
//! | No_DR | none |
//! | Mild | many small red dots |
//! | Moderate | bright yellow exudate spots |
//! | Severe | a few large near-black blobs |
//! | Proliferative_DR | pale thin tortuous vessels |

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassDistribution, Grade};
use crate::error::{invalid, Result};
use crate::imageio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub counts: ClassDistribution,
    pub size: u32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(counts: [usize; 5], size: u32, seed: u64) -> Self {
        Self {
            counts: ClassDistribution::from_counts(counts),
            size,
            seed,
        }
    }

    /// `n` images per grade.
    pub fn balanced(n: usize, size: u32, seed: u64) -> Self {
        Self::new([n; 5], size, seed)
    }
}

fn blend(img: &mut RgbImage, x: i64, y: i64, c: [f32; 3], a: f32) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    let p = img.get_pixel_mut(x as u32, y as u32);
    for i in 0..3 {
        p.0[i] = (p.0[i] as f32 * (1.0 - a) + c[i] * a).round().clamp(0.0, 255.0) as u8;
    }
}

/// Filled disc with a one-pixel antialiased rim.
fn disc(img: &mut RgbImage, cx: f32, cy: f32, r: f32, c: [f32; 3], alpha: f32) {
    let (x0, x1) = ((cx - r - 1.0).floor() as i64, (cx + r + 1.0).ceil() as i64);
    let (y0, y1) = ((cy - r - 1.0).floor() as i64, (cy + r + 1.0).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
            let cover = (r + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                blend(img, x, y, c, alpha * cover);
            }
        }
    }
}

/// Quadratic Bézier stroke.
fn curve(img: &mut RgbImage, p: [(f32, f32); 3], width: f32, c: [f32; 3], alpha: f32) {
    let len = ((p[1].0 - p[0].0).hypot(p[1].1 - p[0].1) + (p[2].0 - p[1].0).hypot(p[2].1 - p[1].1)).max(1.0);
    let steps = (len * 2.0) as usize;
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let u = 1.0 - t;
        let x = u * u * p[0].0 + 2.0 * u * t * p[1].0 + t * t * p[2].0;
        let y = u * u * p[0].1 + 2.0 * u * t * p[1].1 + t * t * p[2].1;
        disc(img, x, y, width / 2.0, c, alpha);
    }
}

/// A uniformly random point inside the retina disc, away from its rim.
fn inside(rng: &mut ChaCha8Rng, c: f32, r: f32) -> (f32, f32) {
    loop {
        let (x, y) = (rng.gen_range(-1.0..1.0f32), rng.gen_range(-1.0..1.0f32));
        if x * x + y * y <= 1.0 {
            return (c + x * r, c + y * r);
        }
    }
}

/// Renders one `size × size` image of the given grade. Lesion sizes scale
/// with the image but never drop below about two pixels across.
pub fn render(grade: Grade, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f32;
    let k = s / 128.0;
    let mut img = RgbImage::from_pixel(size, size, Rgb([0, 0, 0]));
    let c = s / 2.0;
    let r = s * 0.46;
    let tint = rng.gen_range(-20.0..20.0f32);
    let base = [190.0 + tint, 95.0 + tint * 0.5, 45.0 + rng.gen_range(-10.0..10.0f32)];
    // radial darkening towards the rim
    for i in 0..6 {
        let f = 1.0 - i as f32 / 6.0;
        let shade = 0.7 + 0.3 * (1.0 - f);
        disc(&mut img, c, c, r * f, base.map(|v| v * shade), 1.0);
    }
    let od_side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
    let od = (c + od_side * r * 0.45, c + rng.gen_range(-0.1..0.1) * r);
    for _ in 0..4 {
        let end = inside(rng, c, r * 0.9);
        let mid = ((od.0 + end.0) / 2.0 + rng.gen_range(-10.0..10.0) * k, (od.1 + end.1) / 2.0 + rng.gen_range(-10.0..10.0) * k);
        curve(&mut img, [od, mid, end], 2.2 * k, [120.0, 30.0, 20.0], 0.8);
    }
    disc(&mut img, od.0, od.1, 9.0 * k, [250.0, 225.0, 150.0], 0.95);
    let lesion_r = r * 0.75;
    match grade {
        Grade::NoDr => {}
        Grade::Mild => {
            for _ in 0..rng.gen_range(16..24) {
                let (x, y) = inside(rng, c, lesion_r);
                disc(&mut img, x, y, (rng.gen_range(4.5..6.0) * k).max(2.0), [150.0, 0.0, 10.0], 1.0);
            }
        }
        Grade::Moderate => {
            for _ in 0..rng.gen_range(8..12) {
                let (x, y) = inside(rng, c, lesion_r);
                disc(&mut img, x, y, (rng.gen_range(6.0..9.0) * k).max(2.0), [255.0, 240.0, 90.0], 1.0);
            }
        }
        Grade::Severe => {
            for _ in 0..rng.gen_range(3..5) {
                let (x, y) = inside(rng, c, lesion_r);
                disc(&mut img, x, y, rng.gen_range(13.0..17.0) * k, [30.0, 5.0, 35.0], 0.95);
            }
        }
        Grade::ProliferativeDr => {
            for _ in 0..rng.gen_range(5..8) {
                let a = inside(rng, c, lesion_r);
                let b = (a.0 + rng.gen_range(-30.0..30.0) * k, a.1 + rng.gen_range(-30.0..30.0) * k);
                let m = (a.0 + rng.gen_range(-25.0..25.0) * k, b.1 + rng.gen_range(-25.0..25.0) * k);
                curve(&mut img, [a, m, b], (4.0 * k).max(2.0), [245.0, 200.0, 210.0], 1.0);
            }
        }
    }
    for p in img.pixels_mut() {
        if p.0 != [0, 0, 0] {
            for v in &mut p.0 {
                *v = (*v as f32 + rng.gen_range(-6.0..6.0f32)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

/// Writes `root/<Grade>/synth_<grade>_<n>.png` for every requested image and
/// returns the written paths in generation order.
pub fn generate_synthetic_corpus(root: &Path, spec: &SynthSpec) -> Result<Vec<PathBuf>> {
    if spec.size < 32 {
        return Err(invalid!("synthetic images must be at least 32 pixels, got {}", spec.size));
    }
    if spec.counts.counts().iter().all(|&n| n == 0) {
        return Err(invalid!("synthetic corpus needs at least one image"));
    }
    let mut out = Vec::with_capacity(spec.counts.total());
    for g in Grade::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(31).wrapping_add(g.index() as u64 + 1));
        let dir = root.join(g.canonical_name());
        for n in 0..spec.counts.get(g) {
            let img = render(g, spec.size, &mut rng);
            let path = dir.join(format!("synth_{}_{n:05}.png", g.canonical_name()));
            imageio::save_rgb(&img, &path)?;
            out.push(path);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{scan_corpus, CorpusId, ScanOptions};

    #[test]
    fn tree_holds_requested_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new([50, 10, 60, 8, 5], 64, 1);
        let paths = generate_synthetic_corpus(dir.path(), &spec).unwrap();
        assert_eq!(paths.len(), 133);
        let rep = scan_corpus(dir.path(), CorpusId::Synthetic, &ScanOptions::default()).unwrap();
        assert_eq!(rep.manifest.distribution().counts(), [50, 10, 60, 8, 5]);
    }

    #[test]
    fn seeds_change_pixels() {
        for g in Grade::ALL {
            let a = render(g, 64, &mut ChaCha8Rng::seed_from_u64(1));
            let b = render(g, 64, &mut ChaCha8Rng::seed_from_u64(2));
            let a2 = render(g, 64, &mut ChaCha8Rng::seed_from_u64(1));
            assert_ne!(a, b);
            assert_eq!(a, a2);
        }
    }

    #[test]
    fn lesions_change_the_image() {
        let plain = render(Grade::NoDr, 128, &mut ChaCha8Rng::seed_from_u64(5));
        for g in [Grade::Mild, Grade::Moderate, Grade::Severe, Grade::ProliferativeDr] {
            let img = render(g, 128, &mut ChaCha8Rng::seed_from_u64(5));
            let diff = plain.pixels().zip(img.pixels()).filter(|(a, b)| {
                a.0.iter().zip(b.0).any(|(x, y)| (*x as i32 - y as i32).abs() > 40)
            });
            assert!(diff.count() > 20, "{g:?}");
        }
    }

    #[test]
    fn rejects_empty_or_tiny() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_corpus(dir.path(), &SynthSpec::new([0; 5], 64, 0)).is_err());
        assert!(generate_synthetic_corpus(dir.path(), &SynthSpec::new([1; 5], 16, 0)).is_err());
    }
}
