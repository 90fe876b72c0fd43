//! Minimal line plots rasterised straight to PNG (axes and series, no text).

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

pub const PALETTE_NAMES: [&str; 6] = ["blue", "red", "green", "purple", "orange", "cyan"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const MARGIN: u32 = 24;

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

/// Renders the series into a `width`×`height` image sharing one data box.
pub fn line_plot(series: &[Series], width: u32, height: u32) -> Result<RgbImage> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::invalid("plot is too small"));
    }
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("plot data must be finite"));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| pts.iter().map(sel).fold(init, f);
    let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (l, r, t, b) = (MARGIN as i64, (width - MARGIN) as i64, MARGIN as i64, (height - MARGIN) as i64);
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, (l, b), (r, b), black);
    draw_line(&mut img, (l, b), (l, t), black);
    let map = |(x, y): (f64, f64)| {
        let px = l as f64 + (x - x0) / (x1 - x0) * (r - l) as f64;
        let py = b as f64 - (y - y0) / (y1 - y0) * (b - t) as f64;
        (px.round() as i64, py.round() as i64)
    };
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let mapped: Vec<(i64, i64)> = s.points.iter().map(|p| map(*p)).collect();
        for w in mapped.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
        if let [only] = mapped.as_slice() {
            draw_line(&mut img, (only.0 - 2, only.1), (only.0 + 2, only.1), color);
        }
    }
    Ok(img)
}

pub fn save_plot(series: &[Series], path: &Path) -> Result<()> {
    line_plot(series, 480, 320)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_in_palette_colours() {
        let s = vec![
            Series {
                name: "a".into(),
                points: vec![(0.0, 0.0), (1.0, 1.0)],
            },
            Series {
                name: "b".into(),
                points: vec![(0.0, 1.0), (1.0, 0.0)],
            },
        ];
        let img = line_plot(&s, 100, 80).unwrap();
        let has = |c: [u8; 3]| img.pixels().any(|p| p.0 == c);
        assert!(has(PALETTE[0]) && has(PALETTE[1]));
        assert!(line_plot(&[], 100, 80).is_err());
    }
}
