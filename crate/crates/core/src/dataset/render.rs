//! Rendering temporal-spatial matrices to RGB images.

use std::path::Path;
use std::sync::OnceLock;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    /// Gray level copied into all three channels.
    #[default]
    Grayscale3,
    /// 256-entry perceptual lookup table.
    Lut256,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    pub out_height: usize,
    pub out_width: usize,
    pub colormap: Colormap,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            out_height: 64,
            out_width: 64,
            colormap: Colormap::Grayscale3,
        }
    }
}

impl RenderSpec {
    pub const MIN_SIDE: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if self.out_height < Self::MIN_SIDE || self.out_width < Self::MIN_SIDE {
            return Err(Error::config(format!(
                "image size {}x{} is below the {} pixel minimum",
                self.out_height,
                self.out_width,
                Self::MIN_SIDE
            )));
        }
        Ok(())
    }
}

const LUT_SOURCE: &str = include_str!("../../data/lut256.csv");

pub fn lut256() -> &'static [[u8; 3]; 256] {
    static LUT: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [[0u8; 3]; 256];
        let mut n = 0;
        for (slot, line) in lut.iter_mut().zip(LUT_SOURCE.lines()) {
            let parts: Vec<u8> = line
                .split(',')
                .map(|s| s.trim().parse().expect("LUT entry is an 8-bit integer"))
                .collect();
            *slot = [parts[0], parts[1], parts[2]];
            n += 1;
        }
        assert_eq!(n, 256, "LUT must have 256 entries");
        lut
    })
}

/// Min-max scaling into `[0, 1]`; a constant matrix maps to zeros.
pub fn normalize(m: &Matrix) -> Matrix {
    match m.min_max() {
        Some((lo, hi)) if hi > lo => {
            let span = hi - lo;
            m.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
        }
        _ => m.map(|_| 0.0),
    }
}

/// Resamples one axis: area averaging when shrinking, bilinear (pixel-center
/// aligned) when growing.
fn resample(src: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = src.len();
    if n_out == n_in {
        return src.to_vec();
    }
    if n_out < n_in {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|j| {
                let (start, end) = (j as f64 * scale, (j + 1) as f64 * scale);
                let mut acc = 0.0;
                let mut i = start.floor() as usize;
                while i < n_in && (i as f64) < end {
                    let overlap = end.min((i + 1) as f64) - start.max(i as f64);
                    acc += overlap * src[i];
                    i += 1;
                }
                acc / scale
            })
            .collect()
    } else {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|j| {
                let x = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                let t = x - i0 as f64;
                src[i0] * (1.0 - t) + src[i1] * t
            })
            .collect()
    }
}

pub fn resize(m: &Matrix, rows: usize, cols: usize) -> Result<Matrix> {
    if m.rows() == 0 || m.cols() == 0 || rows == 0 || cols == 0 {
        return Err(Error::shape(format!(
            "cannot resize {}x{} to {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    let mut horizontal = Vec::with_capacity(m.rows() * cols);
    for row in m.iter_rows() {
        horizontal.extend(resample(row, cols));
    }
    let mut out = vec![0.0; rows * cols];
    let mut column = vec![0.0; m.rows()];
    for c in 0..cols {
        for (r, v) in column.iter_mut().enumerate() {
            *v = horizontal[r * cols + c];
        }
        for (r, v) in resample(&column, rows).into_iter().enumerate() {
            out[r * cols + c] = v;
        }
    }
    Matrix::from_vec(rows, cols, out)
}

/// Normalized and resized scalar field in `[0, 1]`, exactly what the colormap
/// is applied to.
pub fn render_scalar(m: &Matrix, spec: &RenderSpec) -> Result<Matrix> {
    spec.validate()?;
    if !m.is_finite() {
        return Err(Error::config("cannot render a matrix with non-finite entries"));
    }
    Ok(resize(&normalize(m), spec.out_height, spec.out_width)?.map(|v| v.clamp(0.0, 1.0)))
}

pub fn colorize(scalar: &Matrix, colormap: Colormap) -> RgbImage {
    let mut img = RgbImage::new(scalar.cols() as u32, scalar.rows() as u32);
    for (r, row) in scalar.iter_rows().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let rgb = match colormap {
                Colormap::Grayscale3 => [level; 3],
                Colormap::Lut256 => lut256()[usize::from(level)],
            };
            img.put_pixel(c as u32, r as u32, Rgb(rgb));
        }
    }
    img
}

pub fn render_image(m: &Matrix, spec: &RenderSpec) -> Result<RgbImage> {
    Ok(colorize(&render_scalar(m, spec)?, spec.colormap))
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    crate::util::atomic_write(path, &bytes)
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// `H x W x 3` tensor with channel values scaled into `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![img.height() as usize, img.width() as usize, 3], data)
        .expect("RGB buffer is H x W x 3")
}
