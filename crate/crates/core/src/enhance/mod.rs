//! Image enhancement: CLAHE on luminance, resizing and normalization.

pub mod clahe;
pub mod color;

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use clahe::{
    bilinear_blend, clahe, clip_and_redistribute, clip_factor, l_channel_std, tile_mapping, ClipSpec, TileGrid,
    TileMapping,
};

use crate::dataset::{DatasetManifest, ImageRecord};
use crate::error::{invalid, Error, Result};
use crate::imageio;

pub const MODEL_INPUT_SIZE: u32 = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Interpolation::Bilinear),
            "nearest" => Ok(Interpolation::Nearest),
            _ => Err(invalid!("unknown interpolation {s:?}")),
        }
    }
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_rgb_bilinear(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    resize_rgb(img, width, height, Interpolation::Bilinear)
}

pub fn resize_rgb(img: &RgbImage, width: u32, height: u32, interp: Interpolation) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let src = img.as_raw();
    let mut out = vec![0u8; width as usize * height as usize * 3];
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    for y in 0..height as usize {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        for x in 0..width as usize {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let o = (y * width as usize + x) * 3;
            match interp {
                Interpolation::Nearest => {
                    let (nx, ny) = (fx.round() as usize, fy.round() as usize);
                    let i = (ny * sw + nx) * 3;
                    out[o..o + 3].copy_from_slice(&src[i..i + 3]);
                }
                Interpolation::Bilinear => {
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
                    let (wx, wy) = (fx - x0 as f64, fy - y0 as f64);
                    for c in 0..3 {
                        let p = |xx: usize, yy: usize| src[(yy * sw + xx) * 3 + c] as f64;
                        let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                        let bottom = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                        out[o + c] = (top * (1.0 - wy) + bottom * wy).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }
    RgbImage::from_raw(width, height, out).expect("buffer sized above")
}

/// Resampling of float HWC data; used where rounding to bytes would lose
/// precision.
pub fn resize_f32_bilinear(src: &[f32], sw: usize, sh: usize, channels: usize, width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![0f32; width * height * channels];
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..channels {
                let p = |xx: usize, yy: usize| src[(yy * sw + xx) * channels + c];
                let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                let bottom = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                out[(y * width + x) * channels + c] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

/// A `size × size × 3` image with values in [0, 1], row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedTensor {
    pub size: usize,
    pub data: Vec<f32>,
}

impl EnhancedTensor {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "expected {size}x{size}x3 = {} values, got {}",
                size * size * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("tensor value {v} outside [0, 1]"));
        }
        Ok(Self { size, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.size, self.size, 3)
    }

    pub fn from_image(img: &RgbImage) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::Shape(format!("image is {}x{}, not square", img.width(), img.height())));
        }
        Self::new(img.width() as usize, img.as_raw().iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_image(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.size as u32, self.size as u32, bytes).expect("square buffer")
    }
}

/// Resize to the model input size, then scale intensities into [0, 1].
pub fn normalize_resize(img: &RgbImage) -> EnhancedTensor {
    normalize_resize_to(img, MODEL_INPUT_SIZE, Interpolation::Bilinear)
}

pub fn normalize_resize_to(img: &RgbImage, size: u32, interp: Interpolation) -> EnhancedTensor {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let src: Vec<f32> = img.as_raw().iter().map(|&b| b as f32).collect();
    let data = if (sw, sh) == (size as usize, size as usize) {
        src
    } else if interp == Interpolation::Bilinear {
        resize_f32_bilinear(&src, sw, sh, 3, size as usize, size as usize)
    } else {
        resize_rgb(img, size, size, interp).as_raw().iter().map(|&b| b as f32).collect()
    };
    EnhancedTensor {
        size: size as usize,
        data: data.into_iter().map(|v| (v / 255.0).clamp(0.0, 1.0)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceOptions {
    pub grid: TileGrid,
    pub clip: ClipSpec,
    pub size: u32,
    pub interpolation: Interpolation,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self {
            grid: TileGrid::default(),
            clip: ClipSpec::default(),
            size: MODEL_INPUT_SIZE,
            interpolation: Interpolation::Bilinear,
        }
    }
}

/// One line of the before/after contrast report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub source_path: String,
    pub output_path: String,
    pub l_std_before: f64,
    pub l_std_after: f64,
}

/// CLAHE at native resolution followed by resizing; the stored PNG holds the
/// 8-bit image that [`EnhancedTensor::from_image`] later normalizes.
pub fn enhance_image(img: &RgbImage, opts: &EnhanceOptions) -> Result<RgbImage> {
    let eq = clahe(img, opts.grid, opts.clip)?;
    Ok(resize_rgb(&eq, opts.size, opts.size, opts.interpolation))
}

/// Enhances every record and rewrites paths to the enhanced copies.
pub fn enhance_manifest(
    manifest: &DatasetManifest,
    opts: &EnhanceOptions,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<ContrastRow>)> {
    let mut records = Vec::with_capacity(manifest.len());
    let mut rows = Vec::with_capacity(manifest.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let img = imageio::load_rgb(Path::new(&r.path))?;
        let out = enhance_image(&img, opts)?;
        let stem = Path::new(&r.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let dest = out_dir
            .join(r.source.as_str())
            .join(r.label.canonical_name())
            .join(format!("{i:06}_{stem}.png"));
        imageio::save_rgb(&out, &dest)?;
        rows.push(ContrastRow {
            source_path: r.path.clone(),
            output_path: dest.to_string_lossy().into_owned(),
            l_std_before: l_channel_std(&img),
            l_std_after: l_channel_std(&out),
        });
        records.push(ImageRecord {
            path: dest.to_string_lossy().into_owned(),
            ..r.clone()
        });
    }
    let provenance = format!(
        "{} | clahe grid={}x{} alpha={} s_max={} size={}",
        manifest.provenance, opts.grid.rows, opts.grid.cols, opts.clip.alpha, opts.clip.s_max, opts.size
    );
    Ok((DatasetManifest::new(records, provenance, manifest.seed)?, rows))
}

pub fn contrast_report_text(rows: &[ContrastRow]) -> String {
    let mut s = String::from("source,output,l_std_before,l_std_after\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.4}\n",
            r.source_path, r.output_path, r.l_std_before, r.l_std_after
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_white_is_all_ones() {
        let img = RgbImage::from_pixel(128, 128, image::Rgb([255, 255, 255]));
        let t = normalize_resize(&img);
        assert_eq!(t.shape(), (128, 128, 3));
        assert!(t.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkerboard_halving_equals_block_average() {
        let img = RgbImage::from_fn(256, 256, |x, y| {
            let v = if (x + y) % 2 == 0 { 200 } else { 40 };
            image::Rgb([v, (x % 256) as u8, (y % 256) as u8])
        });
        let t = normalize_resize(&img);
        for y in 0..128usize {
            for x in 0..128usize {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += img.get_pixel((2 * x + dx) as u32, (2 * y + dy) as u32).0[c] as f32;
                        }
                    }
                    let oracle = acc / 4.0 / 255.0;
                    assert!((t.data[(y * 128 + x) * 3 + c] - oracle).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn output_shape_is_fixed() {
        for (w, h) in [(7, 300), (500, 90), (128, 128)] {
            let img = RgbImage::from_pixel(w, h, image::Rgb([3, 4, 5]));
            assert_eq!(normalize_resize(&img).shape(), (128, 128, 3));
        }
    }

    #[test]
    fn tensor_rejects_out_of_range() {
        assert!(EnhancedTensor::new(1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(EnhancedTensor::new(1, vec![0.0, 0.5]).is_err());
    }
}
