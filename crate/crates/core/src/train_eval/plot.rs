//! Minimal line-chart rasterizer for loss, accuracy and ROC curves. Charts
//! carry no text; the numbers live in the accompanying CSV files.

use image::{Rgb, RgbImage};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

const MARGIN: u32 = 24;

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3], thick: i64) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).round() as i64;
        let y = (a.1 + (b.1 - a.1) * t).round() as i64;
        for dy in 0..thick {
            for dx in 0..thick {
                put(img, x + dx - thick / 2, y + dy - thick / 2, c);
            }
        }
    }
}

/// Draws the series into a `width × height` chart over the given data ranges.
/// Legend swatches run along the top margin in series order.
pub fn line_chart(series: &[Series], width: u32, height: u32, xr: (f64, f64), yr: (f64, f64)) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (x0, y0) = (MARGIN as f64, MARGIN as f64);
    let (x1, y1) = ((width - MARGIN) as f64, (height - MARGIN) as f64);
    let grid = [225, 225, 225];
    for i in 1..4 {
        let f = i as f64 / 4.0;
        line(&mut img, (x0 + f * (x1 - x0), y0), (x0 + f * (x1 - x0), y1), grid, 1);
        line(&mut img, (x0, y0 + f * (y1 - y0)), (x1, y0 + f * (y1 - y0)), grid, 1);
    }
    let axis = [60, 60, 60];
    for (a, b) in [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))] {
        line(&mut img, a, b, axis, 1);
    }
    let span = |r: (f64, f64)| if r.1 > r.0 { r.1 - r.0 } else { 1.0 };
    let map = |p: (f64, f64)| {
        (
            x0 + (p.0 - xr.0) / span(xr) * (x1 - x0),
            y1 - (p.1 - yr.0) / span(yr) * (y1 - y0),
        )
    };
    for (i, s) in series.iter().enumerate() {
        for w in s.points.windows(2) {
            line(&mut img, map(w[0]), map(w[1]), s.color, 2);
        }
        if s.points.len() == 1 {
            let p = map(s.points[0]);
            line(&mut img, p, p, s.color, 4);
        }
        let lx = x0 + 4.0 + i as f64 * 18.0;
        for dy in 0..8 {
            line(&mut img, (lx, 6.0 + dy as f64), (lx + 12.0, 6.0 + dy as f64), s.color, 1);
        }
    }
    img
}

/// Range covering every point, padded by 5% (or ±0.5 when flat).
pub fn auto_range(series: &[Series], axis: usize) -> (f64, f64) {
    let vals: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(move |p| if axis == 0 { p.0 } else { p.1 }))
        .filter(|v| v.is_finite())
        .collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}
