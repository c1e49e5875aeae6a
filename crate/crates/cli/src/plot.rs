//! Minimal line plots of sparsification curves.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};

const WIDTH: u32 = 360;
const HEIGHT: u32 = 260;
const MARGIN: u32 = 30;

pub const BLUE: Rgb<u8> = Rgb([30, 90, 200]);
pub const GREEN: Rgb<u8> = Rgb([20, 150, 60]);
pub const GRAY: Rgb<u8> = Rgb([150, 150, 150]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);

pub struct Series<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub color: Rgb<u8>,
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
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

/// Plots series over x ∈ [0, 1] and y ∈ [0, y_max] with a white background.
pub fn render(series: &[Series<'_>]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let y_max = series
        .iter()
        .flat_map(|s| s.ys.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        (
            (MARGIN as f64 + x.clamp(0.0, 1.0) * pw).round() as i64,
            (MARGIN as f64 + ph - (y / y_max).clamp(0.0, 1.0) * ph).round() as i64,
        )
    };
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), AXIS);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, y_max), AXIS);
    for s in series {
        for i in 1..s.xs.len().min(s.ys.len()) {
            line(&mut img, to_px(s.xs[i - 1], s.ys[i - 1]), to_px(s.xs[i], s.ys[i]), s.color);
        }
    }
    img
}

pub fn save(path: &Path, series: &[Series<'_>]) -> Result<()> {
    render(series).save(path)?;
    Ok(())
}
