//! Synthetic word-image rendering.

mod dataset;
mod glyphs;

pub use dataset::{build_synthetic_dataset, load_manifest_dataset, write_manifest_dataset, Dataset};
pub use glyphs::{GlyphSource, ProceduralGlyphs};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, resize_to_height, Provenance, WordImage};

/// Appearance parameters of one rendered word. Lengths are in pixels at
/// the render line height; angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub glyph_source_id: usize,
    pub stroke_width: f64,
    pub char_spacing: f64,
    pub skew_angle: f64,
    pub slant_angle: f64,
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub smoothing_sigma: f64,
}

impl RenderParams {
    /// Upright dark-on-light text without smoothing.
    pub fn plain() -> Self {
        Self {
            glyph_source_id: 0,
            stroke_width: 2.0,
            char_spacing: 1.0,
            skew_angle: 0.0,
            slant_angle: 0.0,
            fg_intensity: 0.0,
            bg_intensity: 1.0,
            smoothing_sigma: 0.0,
        }
    }
}

/// Inclusive `[min, max]` range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn point(v: f64) -> Self {
        Range(v, v)
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite()) || self.0 > self.1 {
            return Err(Error::Range {
                name: name.into(),
                message: format!("[{}, {}] is not a valid range", self.0, self.1),
            });
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.0..=self.1).contains(&v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderRanges {
    pub stroke_width: Range,
    pub char_spacing: Range,
    pub skew_angle: Range,
    pub slant_angle: Range,
    pub fg_intensity: Range,
    pub bg_intensity: Range,
    pub smoothing_sigma: Range,
    pub min_contrast: f64,
}

impl Default for RenderRanges {
    fn default() -> Self {
        Self {
            stroke_width: Range(1.0, 4.0),
            char_spacing: Range(-2.0, 6.0),
            skew_angle: Range(-5.0, 5.0),
            slant_angle: Range(-30.0, 30.0),
            fg_intensity: Range(0.0, 1.0),
            bg_intensity: Range(0.0, 1.0),
            smoothing_sigma: Range(0.0, 1.5),
            min_contrast: 0.3,
        }
    }
}

const MAX_CONTRAST_TRIES: usize = 10_000;

impl RenderRanges {
    pub fn validate(&self) -> Result<()> {
        self.stroke_width.check("render.ranges.stroke_width")?;
        self.char_spacing.check("render.ranges.char_spacing")?;
        self.skew_angle.check("render.ranges.skew_angle")?;
        self.slant_angle.check("render.ranges.slant_angle")?;
        self.fg_intensity.check("render.ranges.fg_intensity")?;
        self.bg_intensity.check("render.ranges.bg_intensity")?;
        self.smoothing_sigma.check("render.ranges.smoothing_sigma")?;
        for (name, r) in [
            ("render.ranges.fg_intensity", self.fg_intensity),
            ("render.ranges.bg_intensity", self.bg_intensity),
        ] {
            if r.0 < 0.0 || r.1 > 1.0 {
                return Err(Error::Range {
                    name: name.into(),
                    message: "intensities must lie in [0, 1]".into(),
                });
            }
        }
        if self.stroke_width.0 <= 0.0 {
            return Err(Error::Range {
                name: "render.ranges.stroke_width".into(),
                message: "stroke width must be positive".into(),
            });
        }
        if self.smoothing_sigma.0 < 0.0 {
            return Err(Error::Range {
                name: "render.ranges.smoothing_sigma".into(),
                message: "sigma must be nonnegative".into(),
            });
        }
        let best = (self.fg_intensity.1 - self.bg_intensity.0).max(self.bg_intensity.1 - self.fg_intensity.0);
        if best < self.min_contrast {
            return Err(Error::Range {
                name: "render.ranges.min_contrast".into(),
                message: format!(
                    "intensity ranges allow at most {best:.3} contrast, below the minimum {}",
                    self.min_contrast
                ),
            });
        }
        Ok(())
    }
}

/// Draws each parameter uniformly from its range. Intensities are
/// resampled jointly until they meet the minimum contrast.
pub fn sample_render_params<R: Rng + ?Sized>(ranges: &RenderRanges, num_faces: usize, rng: &mut R) -> Result<RenderParams> {
    ranges.validate()?;
    let glyph_source_id = if num_faces > 1 { rng.random_range(0..num_faces) } else { 0 };
    let stroke_width = ranges.stroke_width.sample(rng);
    let char_spacing = ranges.char_spacing.sample(rng);
    let skew_angle = ranges.skew_angle.sample(rng);
    let slant_angle = ranges.slant_angle.sample(rng);
    let smoothing_sigma = ranges.smoothing_sigma.sample(rng);
    for _ in 0..MAX_CONTRAST_TRIES {
        let fg = ranges.fg_intensity.sample(rng);
        let bg = ranges.bg_intensity.sample(rng);
        if (fg - bg).abs() >= ranges.min_contrast {
            return Ok(RenderParams {
                glyph_source_id,
                stroke_width,
                char_spacing,
                skew_angle,
                slant_angle,
                fg_intensity: fg,
                bg_intensity: bg,
                smoothing_sigma,
            });
        }
    }
    Err(Error::Range {
        name: "render.ranges.min_contrast".into(),
        message: format!("no intensity pair met the contrast after {MAX_CONTRAST_TRIES} draws"),
    })
}

/// Output of the layout stage, before smoothing and rescaling.
#[derive(Debug, Clone)]
pub struct RawRender {
    pub mask: Array2<bool>,
    pub pixels: Array2<f64>,
}

pub fn render_raw(text: &str, params: &RenderParams, glyphs: &GlyphSource, line_height: usize) -> Result<RawRender> {
    let mask = glyphs.rasterize(text, params, line_height)?;
    let pixels = mask.mapv(|m| if m { params.fg_intensity } else { params.bg_intensity });
    Ok(RawRender { mask, pixels })
}

/// Renders `text` and scales the result to `height` rows.
///
/// `line_height` is the size glyphs are laid out at; stroke widths and
/// spacings in `params` are measured at that size.
pub fn render_word(
    text: &str,
    params: &RenderParams,
    glyphs: &GlyphSource,
    line_height: usize,
    height: usize,
) -> Result<WordImage> {
    let raw = render_raw(text, params, glyphs, line_height)?;
    let smoothed = gaussian_blur(&raw.pixels, params.smoothing_sigma);
    Ok(WordImage {
        pixels: resize_to_height(&smoothed, height),
        transcription: Some(text.to_owned()),
        provenance: Provenance::Synthetic(*params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_ranges_give_fixed_params() {
        let p = RenderParams {
            stroke_width: 2.5,
            char_spacing: 1.0,
            skew_angle: 3.0,
            slant_angle: -12.0,
            fg_intensity: 0.1,
            bg_intensity: 0.9,
            smoothing_sigma: 0.7,
            glyph_source_id: 0,
        };
        let ranges = RenderRanges {
            stroke_width: Range::point(p.stroke_width),
            char_spacing: Range::point(p.char_spacing),
            skew_angle: Range::point(p.skew_angle),
            slant_angle: Range::point(p.slant_angle),
            fg_intensity: Range::point(p.fg_intensity),
            bg_intensity: Range::point(p.bg_intensity),
            smoothing_sigma: Range::point(p.smoothing_sigma),
            min_contrast: 0.3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_render_params(&ranges, 1, &mut rng).unwrap(), p);
    }

    #[test]
    fn separated_intensity_ranges_have_contrast() {
        let ranges = RenderRanges {
            fg_intensity: Range(0.0, 0.2),
            bg_intensity: Range(0.8, 1.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = sample_render_params(&ranges, 1, &mut rng).unwrap();
            assert!((p.bg_intensity - p.fg_intensity) >= 0.6);
        }
    }

    #[test]
    fn unsatisfiable_contrast_is_rejected() {
        let ranges = RenderRanges {
            fg_intensity: Range(0.4, 0.5),
            bg_intensity: Range(0.5, 0.6),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_render_params(&ranges, 1, &mut rng).is_err());
        let bad = RenderRanges {
            skew_angle: Range(5.0, -5.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn render_is_deterministic_and_monotone_in_length() {
        let g = GlyphSource::procedural();
        let p = RenderParams::plain();
        let a = render_word("abc", &p, &g, 64, 64).unwrap();
        let b = render_word("abc", &p, &g, 64, 64).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = render_word("abcdef", &p, &g, 64, 64).unwrap();
        assert!(a.width() < c.width());
        a.check(64).unwrap();
    }

    #[test]
    fn zero_sigma_keeps_exact_raster() {
        let g = GlyphSource::procedural();
        let p = RenderParams {
            fg_intensity: 0.2,
            bg_intensity: 0.7,
            ..RenderParams::plain()
        };
        let raw = render_raw("Hi!", &p, &g, 64).unwrap();
        let img = render_word("Hi!", &p, &g, 64, raw.pixels.nrows()).unwrap();
        assert_eq!(img.pixels, raw.pixels);
        for (m, v) in raw.mask.iter().zip(img.pixels.iter()) {
            assert_eq!(*v, if *m { 0.2 } else { 0.7 });
        }
        assert!(raw.mask.iter().any(|m| *m));
    }
}
