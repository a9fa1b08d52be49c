//! Contrast-limited adaptive histogram equalization on the L* channel.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::color::{lab_to_rgb, level_to_l, l_to_level, rgb_to_lab, Lab};
use crate::error::{invalid, Result};

pub const GRAY_LEVELS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for TileGrid {
    fn default() -> Self {
        Self { rows: 8, cols: 8 }
    }
}

impl TileGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(invalid!("tile grid needs at least 2x2 tiles, got {rows}x{cols}"));
        }
        Ok(Self { rows, cols })
    }
}

impl std::str::FromStr for TileGrid {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once(['x', 'X', ','])
            .ok_or_else(|| invalid!("grid must look like 8x8, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| invalid!("bad grid {s:?}: {e}"));
        TileGrid::new(parse(r)?, parse(c)?)
    }
}

/// Clip-limit parameters.
///
/// `alpha` is the clip factor in percent and `s_max` the maximum slope; a
/// normalised clip value `c` in [0, 1] is read as `alpha = 100·c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub alpha: f64,
    pub s_max: f64,
}

pub const DEFAULT_S_MAX: f64 = 4.0;

impl ClipSpec {
    pub fn new(alpha: f64, s_max: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !(s_max >= 1.0) {
            return Err(invalid!("clip needs alpha >= 0 and s_max >= 1, got {alpha}, {s_max}"));
        }
        Ok(Self { alpha, s_max })
    }

    pub fn from_normalized(clip: f64, s_max: f64) -> Result<Self> {
        Self::new(100.0 * clip, s_max)
    }

    pub fn beta(&self, region_pixels: usize, gray_levels: usize) -> f64 {
        clip_factor(region_pixels, gray_levels, self.alpha, self.s_max)
    }
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self::from_normalized(0.5, DEFAULT_S_MAX).expect("valid defaults")
    }
}

/// β = (M/N)·(1 + α/100·(s_max − 1)).
pub fn clip_factor(region_pixels: usize, gray_levels: usize, alpha: f64, s_max: f64) -> f64 {
    (region_pixels as f64 / gray_levels as f64) * (1.0 + alpha / 100.0 * (s_max - 1.0))
}

/// Caps every bin at the clip limit and spreads the excess over bins with room
/// left, repeating until nothing exceeds the cap. The total count is preserved.
pub fn clip_and_redistribute(hist: &[u32], beta: f64) -> Result<Vec<u32>> {
    let total: u64 = hist.iter().map(|&h| h as u64).sum();
    let bins = hist.len() as u64;
    if beta * bins as f64 + 1e-9 < total as f64 {
        return Err(invalid!(
            "clip limit {beta} over {bins} bins cannot hold {total} counts"
        ));
    }
    let floor = beta.floor() as u64;
    let cap = if floor * bins >= total { floor } else { beta.ceil() as u64 };
    let mut h: Vec<u64> = hist.iter().map(|&v| v as u64).collect();
    loop {
        let mut excess = 0;
        for v in h.iter_mut() {
            if *v > cap {
                excess += *v - cap;
                *v = cap;
            }
        }
        if excess == 0 {
            break;
        }
        let open: Vec<usize> = (0..h.len()).filter(|&i| h[i] < cap).collect();
        let share = excess / open.len() as u64;
        let rem = (excess % open.len() as u64) as usize;
        for (rank, &i) in open.iter().enumerate() {
            h[i] += share + u64::from(rank < rem);
        }
    }
    Ok(h.into_iter().map(|v| v as u32).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileMapping {
    pub lut: Vec<u8>,
    pub hist: Vec<u32>,
}

impl TileMapping {
    pub fn identity(hist: Vec<u32>) -> Self {
        Self {
            lut: (0..hist.len()).map(|n| n as u8).collect(),
            hist,
        }
    }

    pub fn map(&self, level: u8) -> u8 {
        self.lut[level as usize]
    }
}

/// Scaled cumulative histogram: `lut[n] = round((N−1)/M · Σ_{k≤n} h[k])`.
pub fn tile_mapping(hist: &[u32], region_pixels: usize, gray_levels: usize) -> TileMapping {
    let scale = (gray_levels - 1) as f64 / region_pixels as f64;
    let mut acc = 0u64;
    let lut = hist
        .iter()
        .map(|&h| {
            acc += h as u64;
            (scale * acc as f64).round().clamp(0.0, (gray_levels - 1) as f64) as u8
        })
        .collect();
    TileMapping {
        lut,
        hist: hist.to_vec(),
    }
}

/// Four-neighbour blend of mapped values `[ul, ur, ll, lr]`.
///
/// `x`/`y` are the distances from the pixel to the upper/lower tile-center
/// rows and `r`/`s` the distances to the left/right tile-center columns.
pub fn bilinear_blend(f: [f64; 4], x: f64, y: f64, r: f64, s: f64) -> Result<f64> {
    if !(x + y > 0.0) || !(r + s > 0.0) {
        return Err(invalid!("degenerate blend weights x+y={} r+s={}", x + y, r + s));
    }
    let [ul, ur, ll, lr] = f;
    let left = y / (x + y) * ul + x / (x + y) * ll;
    let right = y / (x + y) * ur + x / (x + y) * lr;
    Ok(s / (r + s) * left + r / (r + s) * right)
}

/// Tile boundaries along one axis: integer division, the last tile absorbs
/// the remainder.
pub fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    let base = len / tiles;
    (0..tiles)
        .map(|t| {
            let start = t * base;
            let end = if t + 1 == tiles { len } else { start + base };
            (start, end)
        })
        .collect()
}

/// For a pixel coordinate, the two neighbouring tile indices and the
/// distances to their centers. Outside the outermost centers both indices
/// coincide (nearest-tile behaviour along that axis).
pub fn axis_neighbours(pos: usize, bounds: &[(usize, usize)]) -> (usize, usize, f64, f64) {
    let centers: Vec<f64> = bounds.iter().map(|&(a, b)| (a as f64 + b as f64 - 1.0) / 2.0).collect();
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0, 1.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0, 1.0);
    }
    let j = centers.iter().rposition(|&c| c <= p).expect("p above first center");
    (j, j + 1, p - centers[j], centers[j + 1] - p)
}

/// A single-channel 8-bit plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Plane {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Computes the clipped tile mappings for a plane.
pub fn tile_mappings(plane: &Plane, grid: TileGrid, clip: ClipSpec) -> Result<Vec<Vec<TileMapping>>> {
    let rows = tile_bounds(plane.height, grid.rows);
    let cols = tile_bounds(plane.width, grid.cols);
    let mut out = Vec::with_capacity(grid.rows);
    for &(y0, y1) in &rows {
        let mut row = Vec::with_capacity(grid.cols);
        for &(x0, x1) in &cols {
            let mut hist = vec![0u32; GRAY_LEVELS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[plane.get(x, y) as usize] += 1;
                }
            }
            let m = (y1 - y0) * (x1 - x0);
            let occupied = hist.iter().filter(|&&h| h > 0).count();
            if occupied <= 1 {
                row.push(TileMapping::identity(hist));
                continue;
            }
            let clipped = clip_and_redistribute(&hist, clip.beta(m, GRAY_LEVELS))?;
            row.push(tile_mapping(&clipped, m, GRAY_LEVELS));
        }
        out.push(row);
    }
    Ok(out)
}

/// CLAHE on a single 8-bit plane.
pub fn clahe_plane(plane: &Plane, grid: TileGrid, clip: ClipSpec) -> Result<Plane> {
    TileGrid::new(grid.rows, grid.cols)?;
    if plane.width < 2 * grid.cols || plane.height < 2 * grid.rows {
        return Err(invalid!(
            "{}x{} image is too small for a {}x{} tile grid",
            plane.width,
            plane.height,
            grid.rows,
            grid.cols
        ));
    }
    let maps = tile_mappings(plane, grid, clip)?;
    let rows = tile_bounds(plane.height, grid.rows);
    let cols = tile_bounds(plane.width, grid.cols);
    let col_nb: Vec<_> = (0..plane.width).map(|x| axis_neighbours(x, &cols)).collect();
    let mut data = vec![0u8; plane.data.len()];
    for y in 0..plane.height {
        let (i0, i1, dy_up, dy_down) = axis_neighbours(y, &rows);
        for x in 0..plane.width {
            let (j0, j1, dx_left, dx_right) = col_nb[x];
            let p = plane.get(x, y);
            let f = [
                maps[i0][j0].map(p) as f64,
                maps[i0][j1].map(p) as f64,
                maps[i1][j0].map(p) as f64,
                maps[i1][j1].map(p) as f64,
            ];
            let v = bilinear_blend(f, dy_up, dy_down, dx_left, dx_right)?;
            data[y * plane.width + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(Plane {
        width: plane.width,
        height: plane.height,
        data,
    })
}

/// L* plane (8-bit levels) plus the float chroma of every pixel.
pub fn split_lab(img: &RgbImage) -> (Plane, Vec<Lab>) {
    let labs: Vec<Lab> = img.pixels().map(|p| rgb_to_lab(p.0)).collect();
    let plane = Plane {
        width: img.width() as usize,
        height: img.height() as usize,
        data: labs.iter().map(|l| l_to_level(l.l)).collect(),
    };
    (plane, labs)
}

/// Equalizes L* only and recombines it with the original a*/b*.
pub fn clahe(img: &RgbImage, grid: TileGrid, clip: ClipSpec) -> Result<RgbImage> {
    let (plane, labs) = split_lab(img);
    let out = clahe_plane(&plane, grid, clip)?;
    let mut res = RgbImage::new(img.width(), img.height());
    for (i, px) in res.pixels_mut().enumerate() {
        let lab = Lab {
            l: level_to_l(out.data[i]),
            ..labs[i]
        };
        px.0 = lab_to_rgb(lab);
    }
    Ok(res)
}

/// Standard deviation of the 8-bit L* plane.
pub fn l_channel_std(img: &RgbImage) -> f64 {
    let (plane, _) = split_lab(img);
    let n = plane.data.len() as f64;
    let mean = plane.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    (plane.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_factor_cases() {
        assert_eq!(clip_factor(1024, 256, 0.0, 7.0), 4.0);
        assert_eq!(clip_factor(256, 256, 100.0, 4.0), 4.0);
        assert_eq!(clip_factor(300, 256, 55.0, 1.0), 300.0 / 256.0);
    }

    #[test]
    fn redistribute_hand_case() {
        assert_eq!(clip_and_redistribute(&[10, 0, 0, 0], 4.0).unwrap(), vec![4, 2, 2, 2]);
    }

    #[test]
    fn redistribute_no_op_cases() {
        assert_eq!(clip_and_redistribute(&[1, 3, 0, 2], 4.0).unwrap(), vec![1, 3, 0, 2]);
        assert_eq!(clip_and_redistribute(&[4, 4, 4, 4], 4.0).unwrap(), vec![4, 4, 4, 4]);
    }

    #[test]
    fn redistribute_impossible_cap() {
        assert!(clip_and_redistribute(&[10, 0, 0, 0], 2.0).is_err());
    }

    #[test]
    fn fractional_beta_uses_ceiling_only_when_needed() {
        let h = clip_and_redistribute(&[9, 0, 0, 0], 2.5).unwrap();
        assert_eq!(h.iter().sum::<u32>(), 9);
        assert!(h.iter().all(|&v| v <= 3));
        let h = clip_and_redistribute(&[7, 0, 0, 0], 2.5).unwrap();
        assert!(h.iter().all(|&v| v <= 2));
    }

    #[test]
    fn mapping_hand_cases() {
        assert_eq!(tile_mapping(&[2, 2, 0, 0], 4, 4).lut, vec![2, 3, 3, 3]);
        let step = tile_mapping(&[16, 0, 0, 0], 16, 4);
        assert_eq!(step.lut, vec![3, 3, 3, 3]);
        let uniform = tile_mapping(&[1u32; 256], 256, 256);
        for (n, &v) in uniform.lut.iter().enumerate() {
            assert!((v as i32 - n as i32).abs() <= 1);
        }
        assert_eq!(uniform.lut[255], 255);
    }

    #[test]
    fn blend_cases() {
        assert_eq!(bilinear_blend([10.0, 20.0, 30.0, 40.0], 1.0, 1.0, 1.0, 1.0).unwrap(), 25.0);
        assert!((bilinear_blend([7.0; 4], 0.3, 2.0, 5.0, 0.1).unwrap() - 7.0).abs() < 1e-12);
        // at the upper-left center only the upper-left mapping counts
        assert_eq!(bilinear_blend([10.0, 20.0, 30.0, 40.0], 0.0, 4.0, 0.0, 4.0).unwrap(), 10.0);
        assert!(bilinear_blend([0.0; 4], 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn bounds_absorb_remainder() {
        assert_eq!(tile_bounds(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
    }

    #[test]
    fn grid_parse() {
        assert_eq!("8x8".parse::<TileGrid>().unwrap(), TileGrid { rows: 8, cols: 8 });
        assert!("1x8".parse::<TileGrid>().is_err());
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = RgbImage::from_pixel(12, 40, image::Rgb([180, 90, 60]));
        let out = clahe(&img, TileGrid::default(), ClipSpec::default());
        let err = out.unwrap_err().to_string();
        assert!(err.contains("too small"), "{err}");
        let img = RgbImage::from_pixel(64, 48, image::Rgb([180, 90, 60]));
        let out = clahe(&img, TileGrid::default(), ClipSpec::default()).unwrap();
        for (a, b) in img.pixels().zip(out.pixels()) {
            for c in 0..3 {
                assert!((a.0[c] as i32 - b.0[c] as i32).abs() <= 1);
            }
        }
    }

    #[test]
    fn tile_centers_get_their_own_mapping() {
        // 30x30 with a 2x2 grid: tiles of 15 pixels, centers at pixel 7 and 22
        let data: Vec<u8> = (0..900).map(|i| ((i * 37) % 251) as u8).collect();
        let plane = Plane {
            width: 30,
            height: 30,
            data,
        };
        let grid = TileGrid::new(2, 2).unwrap();
        let clip = ClipSpec::default();
        let maps = tile_mappings(&plane, grid, clip).unwrap();
        let out = clahe_plane(&plane, grid, clip).unwrap();
        for (ti, cy) in [7usize, 22].into_iter().enumerate() {
            for (tj, cx) in [7usize, 22].into_iter().enumerate() {
                assert_eq!(out.get(cx, cy), maps[ti][tj].map(plane.get(cx, cy)));
            }
        }
    }
}
