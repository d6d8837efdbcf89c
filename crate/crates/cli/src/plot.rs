//! Minimal raster plots: ROC curves, loss curves and cue-map grids.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::Result;

pub const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

const SIZE: u32 = 320;
const MARGIN: u32 = 24;

/// Plot area mapping unit coordinates onto pixels.
pub struct Chart {
    pub img: RgbImage,
}

impl Chart {
    pub fn new() -> Self {
        let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
        let grey = Rgb([160, 160, 160]);
        let (lo, hi) = (MARGIN, SIZE - MARGIN);
        for i in lo..=hi {
            for (x, y) in [(i, lo), (i, hi), (lo, i), (hi, i)] {
                img.put_pixel(x, y, grey);
            }
        }
        Self { img }
    }

    fn to_px(x: f64, y: f64) -> (i64, i64) {
        let span = (SIZE - 2 * MARGIN) as f64;
        let px = MARGIN as f64 + x.clamp(0.0, 1.0) * span;
        let py = (SIZE - MARGIN) as f64 - y.clamp(0.0, 1.0) * span;
        (px.round() as i64, py.round() as i64)
    }

    /// Bresenham segment between two unit-square points.
    pub fn segment(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let (mut x0, mut y0) = Self::to_px(a.0, a.1);
        let (x1, y1) = Self::to_px(b.0, b.1);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            if x0 >= 0 && y0 >= 0 && (x0 as u32) < SIZE && (y0 as u32) < SIZE {
                self.img.put_pixel(x0 as u32, y0 as u32, Rgb(color));
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], color: [u8; 3]) {
        for w in pts.windows(2) {
            self.segment(w[0], w[1], color);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

impl Default for Chart {
    fn default() -> Self {
        Self::new()
    }
}

/// ROC curves (FPR on x, TPR on y) with the chance diagonal.
pub fn roc_chart(curves: &[Vec<(f64, f64)>]) -> Chart {
    let mut c = Chart::new();
    c.segment((0.0, 0.0), (1.0, 1.0), [200, 200, 200]);
    for (i, pts) in curves.iter().enumerate() {
        c.polyline(pts, PALETTE[i % PALETTE.len()]);
    }
    c
}

/// Loss values against step, both axes rescaled to the unit square.
pub fn loss_chart(series: &[Vec<f64>]) -> Chart {
    let mut c = Chart::new();
    let max = series.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0_f64, f64::max).max(1e-12);
    for (i, s) in series.iter().enumerate() {
        let n = (s.len().max(2) - 1) as f64;
        let pts: Vec<(f64, f64)> = s.iter().enumerate().map(|(j, &v)| (j as f64 / n, v / max)).collect();
        c.polyline(&pts, PALETTE[i % PALETTE.len()]);
    }
    c
}

/// Grey image of a square map with values in `[0, 1]`, scaled up by `zoom`.
pub fn gray_map(values: &[f64], side: usize, zoom: u32) -> GrayImage {
    GrayImage::from_fn(side as u32 * zoom, side as u32 * zoom, |x, y| {
        let v = values[(y / zoom) as usize * side + (x / zoom) as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// RGB image from an `H×W×3` row-major buffer in `[0, 1]`.
pub fn rgb_image(pixels: &[f32], side: usize) -> RgbImage {
    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let o = (y as usize * side + x as usize) * 3;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(pixels[o]), q(pixels[o + 1]), q(pixels[o + 2])])
    })
}

/// Two-row grid: raw images on top, cue maps (nearest-upsampled to the image size) below.
pub fn cue_grid(items: &[(RgbImage, GrayImage)], cell: u32) -> RgbImage {
    let mut out = RgbImage::from_pixel(cell * items.len().max(1) as u32, cell * 2, Rgb([0, 0, 0]));
    for (i, (raw, cue)) in items.iter().enumerate() {
        let raw = image::imageops::resize(raw, cell, cell, image::imageops::FilterType::Nearest);
        let cue = image::imageops::resize(cue, cell, cell, image::imageops::FilterType::Nearest);
        let x0 = i as u32 * cell;
        for y in 0..cell {
            for x in 0..cell {
                out.put_pixel(x0 + x, y, *raw.get_pixel(x, y));
                let v = cue.get_pixel(x, y).0[0];
                out.put_pixel(x0 + x, cell + y, Rgb([v, v, v]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_hits_both_corners() {
        let c = roc_chart(&[]);
        let (x0, y0) = Chart::to_px(0.0, 0.0);
        let (x1, y1) = Chart::to_px(1.0, 1.0);
        assert_eq!(c.img.get_pixel(x0 as u32, y0 as u32).0, [200, 200, 200]);
        assert_eq!(c.img.get_pixel(x1 as u32, y1 as u32).0, [200, 200, 200]);
    }

    #[test]
    fn gray_map_scales_values() {
        let m = gray_map(&[0.0, 1.0, 0.5, 0.25], 2, 3);
        assert_eq!(m.dimensions(), (6, 6));
        assert_eq!(m.get_pixel(0, 0).0[0], 0);
        assert_eq!(m.get_pixel(5, 0).0[0], 255);
        assert_eq!(m.get_pixel(0, 5).0[0], 128);
    }
}
