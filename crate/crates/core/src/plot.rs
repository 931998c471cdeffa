//! Static PNG figures: heatmaps (rows × columns, layers along x) and simple
//! line charts. No text rendering; the companion CSV carries the labels.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::{Error, Result};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const SERIES: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// Piecewise-linear dark-blue → teal → yellow ramp for `v` in [0, 1].
pub fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 3] = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let x = v * 2.0;
    let i = (x.floor() as usize).min(1);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Renders `values` with one `cell`-pixel square per entry, scaled to the
/// matrix range.
pub fn heatmap(values: &Array2<f64>, cell: u32) -> Result<RgbImage> {
    let (rows, cols) = values.dim();
    if rows == 0 || cols == 0 || cell == 0 {
        return Err(Error::invalid("heatmap needs a non-empty matrix and a positive cell size"));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(cols as u32 * cell, rows as u32 * cell);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = values[[(y / cell) as usize, (x / cell) as usize]];
        *px = colormap((v - lo) / span);
    }
    Ok(img)
}

pub fn write_heatmap(values: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let cell = (480 / values.ncols().max(1)).clamp(4, 40) as u32;
    heatmap(values, cell)?.save(path)?;
    Ok(())
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line chart of several `(x, y)` series on shared axes.
pub fn line_chart(series: &[Vec<(f64, f64)>], width: u32, height: u32) -> Result<RgbImage> {
    let points: Vec<(f64, f64)> = series.iter().flatten().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if points.is_empty() {
        return Err(Error::invalid("line chart needs at least one finite point"));
    }
    let margin = 20i64;
    let (w, h) = (width as i64, height as i64);
    if w <= 2 * margin || h <= 2 * margin {
        return Err(Error::invalid("line chart is too small"));
    }
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
    };
    let (x_lo, x_hi) = bounds(|p| p.0);
    let (y_lo, y_hi) = bounds(|p| p.1);
    let to_px = |(x, y): (f64, f64)| {
        let px = margin + ((x - x_lo) / (x_hi - x_lo) * (w - 2 * margin) as f64).round() as i64;
        let py = h - margin - ((y - y_lo) / (y_hi - y_lo) * (h - 2 * margin) as f64).round() as i64;
        (px, py)
    };
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    draw_line(&mut img, (margin, h - margin), (w - margin, h - margin), AXIS);
    draw_line(&mut img, (margin, margin), (margin, h - margin), AXIS);
    for (i, s) in series.iter().enumerate() {
        let color = SERIES[i % SERIES.len()];
        let pts: Vec<(i64, i64)> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).map(to_px).collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &pts {
            for (ox, oy) in [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)] {
                draw_line(&mut img, (x + ox, y + oy), (x + ox, y + oy), color);
            }
        }
    }
    Ok(img)
}

pub fn write_line_chart(series: &[Vec<(f64, f64)>], path: impl AsRef<Path>) -> Result<()> {
    line_chart(series, 640, 400)?.save(path)?;
    Ok(())
}
