//! Minimal PNG charts: training curves and a per-arm boxplot. Values are
//! drawn on a fixed [0, 1] vertical axis with gridlines every 0.1; there
//! is no text rendering, series are told apart by color.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 30;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);

/// Series colors, in order.
pub const PALETTE: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40])];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Canvas { img: RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND) };
        for i in 0..=10 {
            let y = c.y(i as f64 / 10.0);
            c.line((MARGIN, y), (WIDTH as i64 - MARGIN, y), GRID);
        }
        c.line((MARGIN, MARGIN), (MARGIN, HEIGHT as i64 - MARGIN), AXIS);
        c.line((MARGIN, HEIGHT as i64 - MARGIN), (WIDTH as i64 - MARGIN, HEIGHT as i64 - MARGIN), AXIS);
        c
    }

    fn y(&self, v: f64) -> i64 {
        let span = (HEIGHT as i64 - 2 * MARGIN) as f64;
        HEIGHT as i64 - MARGIN - (v.clamp(0.0, 1.0) * span).round() as i64
    }

    fn x(&self, t: f64) -> i64 {
        let span = (WIDTH as i64 - 2 * MARGIN) as f64;
        MARGIN + (t.clamp(0.0, 1.0) * span).round() as i64
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && x < WIDTH as i64 && y < HEIGHT as i64 {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    /// Bresenham.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
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

    fn thick_line(&mut self, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
        self.line(a, b, color);
        self.line((a.0, a.1 + 1), (b.0, b.1 + 1), color);
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        self.line((x0, y0), (x1, y0), color);
        self.line((x1, y0), (x1, y1), color);
        self.line((x1, y1), (x0, y1), color);
        self.line((x0, y1), (x0, y0), color);
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Line chart of one or more series over a shared index axis.
pub fn line_chart(path: &Path, series: &[&[f64]]) -> Result<()> {
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::InvalidArgument("line chart needs at least one value".into()));
    }
    let mut c = Canvas::new();
    let t = |i: usize| if len == 1 { 0.5 } else { i as f64 / (len - 1) as f64 };
    for (s, color) in series.iter().zip(PALETTE.iter().cycle()) {
        for i in 1..s.len() {
            let a = (c.x(t(i - 1)), c.y(s[i - 1]));
            let b = (c.x(t(i)), c.y(s[i]));
            c.thick_line(a, b, *color);
        }
        if s.len() == 1 {
            let (x, y) = (c.x(t(0)), c.y(s[0]));
            c.rect(x - 2, y - 2, x + 2, y + 2, *color);
        }
    }
    c.save(path)
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box (quartiles), median and whiskers (min, max) per group.
pub fn boxplot(path: &Path, groups: &[&[f64]]) -> Result<()> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::InvalidArgument("boxplot needs non-empty groups".into()));
    }
    let mut c = Canvas::new();
    let n = groups.len();
    for (k, (g, color)) in groups.iter().zip(PALETTE.iter().cycle()).enumerate() {
        let mut v = g.to_vec();
        v.sort_by(f64::total_cmp);
        let center = c.x((k as f64 + 0.5) / n as f64);
        let half = ((WIDTH as i64 - 2 * MARGIN) / (n as i64 * 4)).max(3);
        let (q1, med, q3) = (c.y(quantile(&v, 0.25)), c.y(quantile(&v, 0.5)), c.y(quantile(&v, 0.75)));
        let (lo, hi) = (c.y(v[0]), c.y(v[v.len() - 1]));
        c.rect(center - half, q3, center + half, q1, *color);
        c.thick_line((center - half, med), (center + half, med), *color);
        c.line((center, q1), (center, lo), *color);
        c.line((center, q3), (center, hi), *color);
        c.line((center - half / 2, lo), (center + half / 2, lo), *color);
        c.line((center - half / 2, hi), (center + half / 2, hi), *color);
    }
    c.save(path)
}
