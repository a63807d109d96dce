//! Small raster plots drawn straight into RGB images.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::runs::BoxStats;
use super::train::ConfusionMatrix;
use crate::dataset::lut256;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub width: u32,
    pub height: u32,
    /// Side of one confusion-matrix cell in pixels.
    pub cell_px: u32,
    pub margin: u32,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            cell_px: 24,
            margin: 24,
        }
    }
}

impl PlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_px == 0 || self.width < 4 * self.margin.max(8) || self.height < 4 * self.margin.max(8) {
            return Err(Error::config("plot size must exceed four margins and cells must be at least 1 px"));
        }
        Ok(())
    }
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const TRAIN_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
pub const TEST_COLOR: Rgb<u8> = Rgb([255, 127, 14]);

/// Distinct colours for class indices, sampled along the colormap.
pub fn class_color(class: usize, n_classes: usize) -> Rgb<u8> {
    let i = if n_classes <= 1 { 0 } else { class * 255 / (n_classes - 1) };
    Rgb(lut256()[i.min(255)])
}

struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = (x - self.xr.0) / (self.xr.1 - self.xr.0);
        let fy = (y - self.yr.0) / (self.yr.1 - self.yr.0);
        (self.x0 + fx * self.w, self.y0 + (1.0 - fy) * self.h)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, c: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            put(img, x, y, c);
        }
    }
}

fn dot(img: &mut RgbImage, (x, y): (f64, f64), r: i64, c: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn frame(img: &mut RgbImage, p: &Panel, yticks: &[f64]) {
    for &t in yticks {
        let (_, y) = p.px(p.xr.0, t);
        line(img, (p.x0, y), (p.x0 + p.w, y), GRID);
        line(img, (p.x0 - 4.0, y), (p.x0, y), AXIS);
    }
    let (l, r, t, b) = (p.x0, p.x0 + p.w, p.y0, p.y0 + p.h);
    line(img, (l, t), (l, b), AXIS);
    line(img, (l, b), (r, b), AXIS);
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn ticks((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn series(img: &mut RgbImage, p: &Panel, ys: &[Option<f64>], c: Rgb<u8>) {
    let pts: Vec<(f64, f64)> = ys
        .iter()
        .enumerate()
        .filter_map(|(i, y)| y.filter(|v| v.is_finite()).map(|v| p.px(i as f64 + 1.0, v)))
        .collect();
    for w in pts.windows(2) {
        line(img, w[0], w[1], c);
    }
    for &pt in &pts {
        dot(img, pt, 2, c);
    }
}

/// Two side-by-side panels, loss on the left and accuracy on the right, each
/// with a train and an optional test curve.
pub fn curves_plot(
    loss: (&[Option<f64>], &[Option<f64>]),
    accuracy: (&[Option<f64>], &[Option<f64>]),
    cfg: &PlotConfig,
) -> RgbImage {
    let mut img = RgbImage::from_pixel(cfg.width, cfg.height, WHITE);
    let m = cfg.margin as f64;
    let half = cfg.width as f64 / 2.0;
    let n = loss.0.len().max(2) as f64;
    let xr = (1.0, n);
    let ly = range(loss.0.iter().chain(loss.1).flatten().copied().chain([0.0]));
    let panels = [
        (Panel { x0: m, y0: m, w: half - 2.0 * m, h: cfg.height as f64 - 2.0 * m, xr, yr: ly }, loss),
        (
            Panel { x0: half + m, y0: m, w: half - 2.0 * m, h: cfg.height as f64 - 2.0 * m, xr, yr: (0.0, 1.0) },
            accuracy,
        ),
    ];
    for (p, (train, test)) in &panels {
        frame(&mut img, p, &ticks(p.yr, 5));
        series(&mut img, p, train, TRAIN_COLOR);
        series(&mut img, p, test, TEST_COLOR);
    }
    img
}

/// Row-normalized confusion heatmap, `cell_px` pixels per cell.
pub fn confusion_plot(confusion: &ConfusionMatrix, cfg: &PlotConfig) -> RgbImage {
    let k = confusion.n_classes() as u32;
    let side = (k * cfg.cell_px).max(1);
    let mut img = RgbImage::from_pixel(side, side, WHITE);
    let rows = confusion.row_sums();
    for (r, row) in confusion.counts.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let frac = if rows[r] > 0 { v as f64 / rows[r] as f64 } else { 0.0 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let color = Rgb([shade, shade, 255u8.saturating_sub((100.0 * frac) as u8)]);
            let cp = cfg.cell_px as i64;
            fill_rect(&mut img, c as i64 * cp, r as i64 * cp, cp, cp, color);
        }
    }
    img
}

/// One box-and-whisker per distribution.
pub fn box_plot(stats: &[BoxStats], cfg: &PlotConfig) -> RgbImage {
    let mut img = RgbImage::from_pixel(cfg.width, cfg.height, WHITE);
    let m = cfg.margin as f64;
    let lo = stats.iter().map(|s| s.min).fold(1.0, f64::min);
    let yr = (lo - 0.05 * (1.0 - lo).max(0.02), 1.0 + 0.05 * (1.0 - lo).max(0.02));
    let n = stats.len().max(1) as f64;
    let p = Panel {
        x0: m,
        y0: m,
        w: cfg.width as f64 - 2.0 * m,
        h: cfg.height as f64 - 2.0 * m,
        xr: (0.0, n),
        yr,
    };
    frame(&mut img, &p, &ticks(yr, 5));
    for (i, s) in stats.iter().enumerate() {
        let xc = i as f64 + 0.5;
        let (l, _) = p.px(xc - 0.25, 0.0);
        let (r, _) = p.px(xc + 0.25, 0.0);
        let (cx, _) = p.px(xc, 0.0);
        let y = |v: f64| p.px(xc, v).1;
        line(&mut img, (cx, y(s.min)), (cx, y(s.q1)), AXIS);
        line(&mut img, (cx, y(s.q3)), (cx, y(s.max)), AXIS);
        for v in [s.min, s.max] {
            line(&mut img, (cx - (r - l) / 4.0, y(v)), (cx + (r - l) / 4.0, y(v)), AXIS);
        }
        line(&mut img, (l, y(s.q1)), (r, y(s.q1)), TRAIN_COLOR);
        line(&mut img, (l, y(s.q3)), (r, y(s.q3)), TRAIN_COLOR);
        line(&mut img, (l, y(s.q1)), (l, y(s.q3)), TRAIN_COLOR);
        line(&mut img, (r, y(s.q1)), (r, y(s.q3)), TRAIN_COLOR);
        line(&mut img, (l, y(s.median)), (r, y(s.median)), TEST_COLOR);
        dot(&mut img, (cx, y(s.mean)), 3, TEST_COLOR);
    }
    img
}

/// Scatter of 2-D points coloured by label.
pub fn scatter_plot(coords: &[[f64; 2]], labels: &[usize], n_classes: usize, cfg: &PlotConfig) -> RgbImage {
    let mut img = RgbImage::from_pixel(cfg.width, cfg.height, WHITE);
    let m = cfg.margin as f64;
    let p = Panel {
        x0: m,
        y0: m,
        w: cfg.width as f64 - 2.0 * m,
        h: cfg.height as f64 - 2.0 * m,
        xr: range(coords.iter().map(|c| c[0])),
        yr: range(coords.iter().map(|c| c[1])),
    };
    frame(&mut img, &p, &[]);
    for (c, &l) in coords.iter().zip(labels) {
        dot(&mut img, p.px(c[0], c[1]), 3, class_color(l, n_classes));
    }
    img
}
