//! Grayscale word images and the resampling primitives shared by rendering
//! and augmentation.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::RenderParams;

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic(RenderParams),
    External { manifest: PathBuf, line: usize },
}

/// A single word image. Pixels are stored row-major as `(height, width)` with
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordImage {
    pub pixels: Array2<f64>,
    pub transcription: Option<String>,
    pub provenance: Provenance,
}

impl WordImage {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Checks the height, width and pixel-range invariants.
    pub fn check(&self, height: usize) -> Result<()> {
        if self.height() != height {
            return Err(Error::Empty(format!(
                "image height {} != expected {height}",
                self.height()
            )));
        }
        if self.width() == 0 {
            return Err(Error::Empty("image has zero width".into()));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Empty(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn with_pixels(&self, pixels: Array2<f64>) -> WordImage {
        WordImage {
            pixels,
            transcription: self.transcription.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Mean of the outermost pixel ring, used as fill for warps and padding.
    pub fn background(&self) -> f64 {
        border_mean(&self.pixels)
    }
}

pub fn border_mean(img: &Array2<f64>) -> f64 {
    let (h, w) = img.dim();
    if h == 0 || w == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in 0..w {
        sum += img[[0, x]];
        n += 1;
        if h > 1 {
            sum += img[[h - 1, x]];
            n += 1;
        }
    }
    for y in 1..h.saturating_sub(1) {
        sum += img[[y, 0]];
        n += 1;
        if w > 1 {
            sum += img[[y, w - 1]];
            n += 1;
        }
    }
    sum / n as f64
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let (h, w) = img.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * img[[y, xx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[[yy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Bilinear sample at continuous pixel coordinates; outside the image the
/// `fill` value is blended in.
pub fn sample_bilinear(img: &Array2<f64>, x: f64, y: f64, fill: f64) -> f64 {
    let (h, w) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as isize;
    let y0 = y0 as isize;
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            fill
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    // skip neighbours with zero weight so exact-grid samples stay exact
    let mut v = (1.0 - fx) * (1.0 - fy) * at(y0, x0);
    if fx > 0.0 {
        v += fx * (1.0 - fy) * at(y0, x0 + 1);
    }
    if fy > 0.0 {
        v += (1.0 - fx) * fy * at(y0 + 1, x0);
        if fx > 0.0 {
            v += fx * fy * at(y0 + 1, x0 + 1);
        }
    }
    v
}

/// Area-weighted resampling along one axis (box filter). Handles both
/// shrinking and enlarging.
fn resample_axis(src: &[f64], dst: &mut [f64]) {
    let n_src = src.len();
    let n_dst = dst.len();
    if n_src == n_dst {
        dst.copy_from_slice(src);
        return;
    }
    let scale = n_src as f64 / n_dst as f64;
    if scale < 1.0 {
        // enlarging: linear interpolation on pixel centres
        for (i, d) in dst.iter_mut().enumerate() {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n_src - 1);
            let f = pos - lo as f64;
            *d = src[lo] * (1.0 - f) + src[hi] * f;
        }
        return;
    }
    for (i, d) in dst.iter_mut().enumerate() {
        let start = i as f64 * scale;
        let end = start + scale;
        let mut acc = 0.0;
        let mut j = start.floor() as usize;
        while (j as f64) < end && j < n_src {
            let lo = start.max(j as f64);
            let hi = end.min(j as f64 + 1.0);
            acc += src[j] * (hi - lo);
            j += 1;
        }
        *d = acc / scale;
    }
}

pub fn resize(img: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == (height, width) {
        return img.clone();
    }
    let mut tmp = Array2::<f64>::zeros((h, width));
    let mut row_out = vec![0.0; width];
    for y in 0..h {
        let row: Vec<f64> = img.row(y).to_vec();
        resample_axis(&row, &mut row_out);
        tmp.row_mut(y).iter_mut().zip(&row_out).for_each(|(d, s)| *d = *s);
    }
    let mut out = Array2::<f64>::zeros((height, width));
    let mut col_out = vec![0.0; height];
    for x in 0..width {
        let col: Vec<f64> = tmp.column(x).to_vec();
        resample_axis(&col, &mut col_out);
        out.column_mut(x).iter_mut().zip(&col_out).for_each(|(d, s)| *d = *s);
    }
    out
}

/// Width after scaling to `height` with preserved aspect ratio.
pub fn scaled_width(h: usize, w: usize, height: usize) -> usize {
    ((w as f64 * height as f64 / h as f64).round() as usize).max(1)
}

/// Scales to the given height preserving aspect ratio and clamps to `[0, 1]`.
pub fn resize_to_height(img: &Array2<f64>, height: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = resize(img, height, scaled_width(h, w, height));
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

pub fn to_gray_image(img: &Array2<f64>) -> image::GrayImage {
    let (h, w) = img.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn from_gray_image(img: &image::GrayImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    })
}

/// Loads any supported raster; colour is collapsed by luminance.
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Ok(from_gray_image(&img.to_luma8()))
}

pub fn save_gray(img: &Array2<f64>, path: &Path) -> Result<()> {
    to_gray_image(img).save(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })
}
