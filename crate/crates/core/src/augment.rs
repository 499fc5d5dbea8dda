//! Weak and strong image augmentations.
//!
//! Weak augmentation applies a random affine warp (shear, rotation and a
//! horizontal rescale), Gaussian blur and additive Gaussian noise. Strong
//! augmentation runs the weak pipeline and then a random mesh (grid)
//! distortion. Every warp uses bilinear interpolation.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, resize_to_height, sample_bilinear, WordImage};
use crate::synth::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Identity,
    Weak,
    Strong,
}

impl std::str::FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(AugmentKind::Identity),
            "weak" => Ok(AugmentKind::Weak),
            "strong" => Ok(AugmentKind::Strong),
            other => Err(Error::config("augment.kind", format!("unknown augmentation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub cell_size: usize,
    pub jitter_std: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            cell_size: 16,
            jitter_std: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub kind: AugmentKind,
    pub blur_sigma: Range,
    pub noise_std: Range,
    /// Degrees.
    pub shear: Range,
    /// Degrees.
    pub rotation: Range,
    /// Horizontal scale factor.
    pub rescale: Range,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridParams>,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            kind: AugmentKind::Identity,
            blur_sigma: Range::point(0.0),
            noise_std: Range::point(0.0),
            shear: Range::point(0.0),
            rotation: Range::point(0.0),
            rescale: Range::point(1.0),
            grid: None,
        }
    }

    pub fn weak() -> Self {
        Self {
            kind: AugmentKind::Weak,
            blur_sigma: Range(0.0, 1.0),
            noise_std: Range(0.0, 0.05),
            shear: Range(-8.0, 8.0),
            rotation: Range(-3.0, 3.0),
            rescale: Range(0.9, 1.1),
            grid: None,
        }
    }

    pub fn strong() -> Self {
        Self {
            kind: AugmentKind::Strong,
            grid: Some(GridParams::default()),
            ..Self::weak()
        }
    }

    pub fn of_kind(kind: AugmentKind) -> Self {
        match kind {
            AugmentKind::Identity => Self::identity(),
            AugmentKind::Weak => Self::weak(),
            AugmentKind::Strong => Self::strong(),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let ranges = [
            ("blur_sigma", self.blur_sigma),
            ("noise_std", self.noise_std),
            ("shear", self.shear),
            ("rotation", self.rotation),
            ("rescale", self.rescale),
        ];
        for (name, r) in ranges {
            if !(r.0.is_finite() && r.1.is_finite()) || r.0 > r.1 {
                return Err(Error::config(format!("{field}.{name}"), format!("invalid range [{}, {}]", r.0, r.1)));
            }
        }
        if self.blur_sigma.0 < 0.0 || self.noise_std.0 < 0.0 {
            return Err(Error::config(field, "blur sigma and noise std must be nonnegative"));
        }
        if self.rescale.0 <= 0.0 {
            return Err(Error::config(format!("{field}.rescale"), "scale factors must be positive"));
        }
        if self.shear.0 <= -80.0 || self.shear.1 >= 80.0 {
            return Err(Error::config(format!("{field}.shear"), "shear must stay within (-80, 80) degrees"));
        }
        match (self.kind, &self.grid) {
            (AugmentKind::Strong, None) => {
                return Err(Error::config(format!("{field}.grid"), "strong augmentation needs grid parameters"))
            }
            (_, Some(g)) if g.cell_size < 2 => {
                return Err(Error::config(format!("{field}.grid.cell_size"), "cell size must be at least 2"))
            }
            (_, Some(g)) if !(g.jitter_std >= 0.0) => {
                return Err(Error::config(format!("{field}.grid.jitter_std"), "jitter must be nonnegative"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Applies `policy` and rescales the result back to the input height.
/// The transcription and provenance are carried over unchanged.
pub fn apply<R: Rng + ?Sized>(policy: &AugmentationPolicy, image: &WordImage, rng: &mut R) -> WordImage {
    if policy.kind == AugmentKind::Identity {
        return image.clone();
    }
    let height = image.height();
    let fill = image.background();

    let shear = policy.shear.sample(rng);
    let rotation = policy.rotation.sample(rng);
    let rescale = policy.rescale.sample(rng);
    let sigma = policy.blur_sigma.sample(rng);
    let noise = policy.noise_std.sample(rng);

    let mut px = affine_warp(&image.pixels, shear, rotation, rescale, fill);
    px = gaussian_blur(&px, sigma);
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).expect("finite std");
        px.mapv_inplace(|v| v + dist.sample(rng));
    }
    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    px = resize_to_height(&px, height);

    if let (AugmentKind::Strong, Some(grid)) = (policy.kind, policy.grid) {
        px = grid_warp(&px, grid.cell_size, grid.jitter_std, fill, rng);
    }
    image.with_pixels(px)
}

/// Shears, rotates and horizontally rescales around the image centre.
/// The canvas grows to the bounding box of the warped image.
fn affine_warp(img: &Array2<f64>, shear_deg: f64, rot_deg: f64, xscale: f64, fill: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let sh = shear_deg.to_radians().tan();
    let (s, c) = rot_deg.to_radians().sin_cos();
    // forward: scale x, shear, rotate
    let m = [
        [c * xscale, c * sh - s],
        [s * xscale, s * sh + c],
    ];
    let fwd = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + m[0][0] * dx + m[0][1] * dy, cy + m[1][0] * dx + m[1][1] * dy)
    };
    let corners = [fwd(0.0, 0.0), fwd(w as f64, 0.0), fwd(0.0, h as f64), fwd(w as f64, h as f64)];
    let x0 = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x1 = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y0 = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y1 = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let ow = ((x1 - x0).round() as usize).max(1);
    let oh = ((y1 - y0).round() as usize).max(1);

    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (dx, dy) = (x as f64 + 0.5 + x0 - cx, y as f64 + 0.5 + y0 - cy);
        let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
        let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
        sample_bilinear(img, sx - 0.5, sy - 0.5, fill)
    })
}

fn mesh_positions(extent: usize, cell: usize) -> Vec<f64> {
    let last = extent.saturating_sub(1);
    let mut v: Vec<f64> = (0..).map(|i| i * cell).take_while(|&p| p < last).map(|p| p as f64).collect();
    v.push(last as f64);
    if v.len() == 1 {
        v.push(last as f64);
    }
    v
}

fn grid_warp<R: Rng + ?Sized>(img: &Array2<f64>, cell_size: usize, jitter_std: f64, fill: f64, rng: &mut R) -> Array2<f64> {
    let (h, w) = img.dim();
    let xs = mesh_positions(w, cell_size);
    let ys = mesh_positions(h, cell_size);
    let (nx, ny) = (xs.len(), ys.len());
    let mut disp = vec![(0.0, 0.0); nx * ny];
    if jitter_std > 0.0 {
        let dist = Normal::new(0.0, jitter_std).expect("finite std");
        for j in 1..ny.saturating_sub(1) {
            for i in 1..nx.saturating_sub(1) {
                disp[j * nx + i] = (dist.sample(rng), dist.sample(rng));
            }
        }
    } else {
        return img.clone();
    }

    let locate = |pos: &[f64], v: f64| -> (usize, f64) {
        let mut k = 0;
        while k + 2 < pos.len() && v > pos[k + 1] {
            k += 1;
        }
        let span = pos[k + 1] - pos[k];
        let t = if span > 0.0 { ((v - pos[k]) / span).clamp(0.0, 1.0) } else { 0.0 };
        (k, t)
    };
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let (j, ty) = locate(&ys, y as f64);
        for x in 0..w {
            let (i, tx) = locate(&xs, x as f64);
            let d00 = disp[j * nx + i];
            let d10 = disp[j * nx + i + 1];
            let d01 = disp[(j + 1) * nx + i];
            let d11 = disp[(j + 1) * nx + i + 1];
            let dx = (1.0 - ty) * ((1.0 - tx) * d00.0 + tx * d10.0) + ty * ((1.0 - tx) * d01.0 + tx * d11.0);
            let dy = (1.0 - ty) * ((1.0 - tx) * d00.1 + tx * d10.1) + ty * ((1.0 - tx) * d01.1 + tx * d11.1);
            out[[y, x]] = sample_bilinear(img, x as f64 + dx, y as f64 + dy, fill).clamp(0.0, 1.0);
        }
    }
    out
}

/// Random mesh distortion: interior control points of a `cell_size` grid
/// are jittered by i.i.d. Gaussian offsets; border points stay fixed.
pub fn grid_distort<R: Rng + ?Sized>(image: &WordImage, cell_size: usize, jitter_std: f64, rng: &mut R) -> WordImage {
    let cell_size = cell_size.max(2);
    let px = grid_warp(&image.pixels, cell_size, jitter_std.max(0.0), image.background(), rng);
    image.with_pixels(px)
}
