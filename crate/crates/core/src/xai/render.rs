use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use serde::Serialize;

use super::{CamMethod, CamRequest, Explainer, Explanation, Heatmap, HEATMAP_SIZE};
use crate::enhance::{resize_f32_bilinear, EnhancedTensor};
use crate::error::{invalid, Error, Result};
use crate::imageio;

/// Jet colormap: blue at 0, through cyan, yellow, to dark red at 1.
pub fn jet(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f32| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends the jet-colored heatmap onto `image` with per-pixel weight
/// `opacity · heat`, resizing the heatmap to the image first.
pub fn overlay(image: &RgbImage, heatmap: &Heatmap, opacity: f32) -> RgbImage {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let heat = if (heatmap.width, heatmap.height) == (w, h) {
        heatmap.values.clone()
    } else {
        resize_f32_bilinear(&heatmap.values, heatmap.width, heatmap.height, 1, w, h)
    };
    let a = opacity.clamp(0.0, 1.0);
    let mut out = image.clone();
    for (i, p) in out.pixels_mut().enumerate() {
        let t = heat[i].clamp(0.0, 1.0);
        let wgt = a * t;
        if wgt == 0.0 {
            continue;
        }
        let c = jet(t);
        for k in 0..3 {
            p.0[k] = (p.0[k] as f32 * (1.0 - wgt) + c[k] as f32 * wgt).round() as u8;
        }
    }
    out
}

/// One row of a comparison grid: a model (through its explainer) and the
/// image to explain with it.
pub struct GridRow<'a> {
    pub label: String,
    pub explainer: &'a Explainer<'a>,
    pub image: EnhancedTensor,
    /// Class to explain; the model's prediction when `None`.
    pub class: Option<usize>,
    /// Target layer; the explainer's default when `None`.
    pub layer: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridCell {
    pub row: usize,
    pub column: usize,
    pub model: String,
    pub method: String,
    pub class: Option<usize>,
    pub layer: String,
    pub error: Option<String>,
}

pub struct ComparisonGrid {
    pub image: RgbImage,
    pub cells: Vec<GridCell>,
    pub rows: usize,
    pub columns: usize,
}

impl ComparisonGrid {
    /// JSON listing of every cell.
    pub fn manifest(&self) -> String {
        serde_json::to_string_pretty(&self.cells).expect("grid cells serialize")
    }
}

const GUTTER: u32 = 4;

fn placeholder() -> RgbImage {
    let s = HEATMAP_SIZE as u32;
    let mut img = RgbImage::from_pixel(s, s, Rgb([90, 90, 90]));
    for i in 0..s {
        for d in 0..3u32 {
            let j = (i + d).min(s - 1);
            img.put_pixel(i, j, Rgb([200, 30, 30]));
            img.put_pixel(s - 1 - i, j, Rgb([200, 30, 30]));
        }
    }
    img
}

/// Rows are models, columns are the original image then one overlay per
/// method. A failing cell is drawn as a crossed-out placeholder and its
/// error is kept in the cell record.
pub fn comparison_grid(rows: &[GridRow], methods: &[CamMethod], opacity: f32) -> Result<ComparisonGrid> {
    if rows.is_empty() || methods.is_empty() {
        return Err(invalid!("comparison grid needs at least one model and one method"));
    }
    let cell = HEATMAP_SIZE as u32;
    let columns = methods.len() + 1;
    let width = columns as u32 * cell + (columns as u32 + 1) * GUTTER;
    let height = rows.len() as u32 * cell + (rows.len() as u32 + 1) * GUTTER;
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut cells = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let base = imageops::resize(&row.image.to_image(), cell, cell, imageops::FilterType::Triangle);
        let y = GUTTER + r as u32 * (cell + GUTTER);
        imageops::replace(&mut canvas, &base, GUTTER as i64, y as i64);
        let layer = row.layer.clone().unwrap_or_else(|| row.explainer.default_layer().to_string());
        let input = row.explainer.input(&row.image);
        let class = match (&input, row.class) {
            (_, Some(c)) => Ok(c),
            (Ok(x), None) => row.explainer.predicted_class(x),
            (Err(e), None) => Err(invalid!("{e}")),
        };
        cells.push(GridCell {
            row: r,
            column: 0,
            model: row.label.clone(),
            method: "original".into(),
            class: class.as_ref().ok().copied(),
            layer: String::new(),
            error: None,
        });
        for (m, &method) in methods.iter().enumerate() {
            let column = m + 1;
            let result = match (&input, &class) {
                (Ok(x), Ok(c)) => row
                    .explainer
                    .explain(&CamRequest::new(x.clone(), method).class(*c).layer(layer.clone())),
                (Err(e), _) | (_, Err(e)) => Err(invalid!("{e}")),
            };
            let (tile, error) = match result {
                Ok(e) => (overlay(&base, &e.heatmap, opacity), None),
                Err(e) => (placeholder(), Some(e.to_string())),
            };
            let x = GUTTER + column as u32 * (cell + GUTTER);
            imageops::replace(&mut canvas, &tile, x as i64, y as i64);
            cells.push(GridCell {
                row: r,
                column,
                model: row.label.clone(),
                method: method.to_string(),
                class: class.as_ref().ok().copied(),
                layer: layer.clone(),
                error,
            });
        }
    }
    Ok(ComparisonGrid {
        image: canvas,
        cells,
        rows: rows.len(),
        columns,
    })
}

/// Writes `<stem>_<method>_heatmap.txt` (raw layer-resolution grid),
/// `<stem>_<method>_heatmap128.txt` and `<stem>_<method>_overlay.png`.
pub fn write_explanation(dir: &Path, stem: &str, e: &Explanation, image: &RgbImage, opacity: f32) -> Result<Vec<PathBuf>> {
    if stem.is_empty() {
        return Err(Error::Invalid("empty output stem".into()));
    }
    let m = e.raw.method;
    let raw = dir.join(format!("{stem}_{m}_heatmap.txt"));
    imageio::write_text(&raw, &e.raw.to_text())?;
    let up = dir.join(format!("{stem}_{m}_heatmap128.txt"));
    imageio::write_text(&up, &e.heatmap.to_text())?;
    let ov = dir.join(format!("{stem}_{m}_overlay.png"));
    imageio::save_rgb(&overlay(image, &e.heatmap, opacity), &ov)?;
    Ok(vec![raw, up, ov])
}
