//! Glyph sources: built-in stroke skeletons and TrueType/OpenType font files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ab_glyph::{Font, FontVec, PxScale, ScaleFont};
use ndarray::Array2;

use super::RenderParams;
use crate::charset::Charset;
use crate::error::{Error, Result};

/// Stroke skeletons on a grid where y=1 is the ascender line, y=4 the
/// x-height, y=8 the baseline and y=10 the descender. Polylines are
/// separated by `|`.
const PROCEDURAL_GLYPHS: &[(char, &str)] = &[
    ('a', "3,4.5 2,4 1,4 0,5 0,7 1,8 2,8 3,7.5 | 3,4 3,8"),
    ('b', "0,1 0,8 | 0,5 1,4 2,4 3,5 3,7 2,8 1,8 0,7"),
    ('c', "3,4.5 2,4 1,4 0,5 0,7 1,8 2,8 3,7.5"),
    ('d', "3,1 3,8 | 3,5 2,4 1,4 0,5 0,7 1,8 2,8 3,7"),
    ('e', "0,6 3,6 3,5 2,4 1,4 0,5 0,7 1,8 2,8 3,7.5"),
    ('f', "2.5,1.5 2,1 1.5,1 1,1.5 1,8 | 0,4 2,4"),
    ('g', "3,5 2,4 1,4 0,5 0,6.5 1,7.5 2,7.5 3,6.5 | 3,4 3,9 2,10 1,10 0,9.5"),
    ('h', "0,1 0,8 | 0,5 1,4 2,4 3,5 3,8"),
    ('i', "0.5,4 0.5,8 | 0.5,2.2 0.5,2.6"),
    ('j', "1.5,4 1.5,9 1,10 0,10 | 1.5,2.2 1.5,2.6"),
    ('k', "0,1 0,8 | 3,4 0,6.5 | 1,5.8 3,8"),
    ('l', "0.5,1 0.5,8"),
    ('m', "0,4 0,8 | 0,5 1,4 2,5 2,8 | 2,5 3,4 4,5 4,8"),
    ('n', "0,4 0,8 | 0,5 1,4 2,4 3,5 3,8"),
    ('o', "1,4 2,4 3,5 3,7 2,8 1,8 0,7 0,5 1,4"),
    ('p', "0,4 0,10 | 0,5 1,4 2,4 3,5 3,7 2,8 1,8 0,7"),
    ('q', "3,4 3,10 | 3,5 2,4 1,4 0,5 0,7 1,8 2,8 3,7"),
    ('r', "0,4 0,8 | 0,5.5 1,4.3 2,4 2.5,4.2"),
    ('s', "3,4.5 2,4 1,4 0,4.8 0.5,5.8 2.5,6.2 3,7.2 2,8 1,8 0,7.5"),
    ('t', "1,2 1,7.5 1.5,8 2.2,8 | 0,4 2.2,4"),
    ('u', "0,4 0,7 1,8 2,8 3,7 | 3,4 3,8"),
    ('v', "0,4 1.5,8 3,4"),
    ('w', "0,4 1,8 2,5 3,8 4,4"),
    ('x', "0,4 3,8 | 3,4 0,8"),
    ('y', "0,4 1.5,8 | 3,4 1.5,8 0.8,10 0,10"),
    ('z', "0,4 3,4 0,8 3,8"),
    ('A', "0,8 1.75,1 3.5,8 | 0.8,5.5 2.7,5.5"),
    ('B', "0,1 0,8 2.5,8 3.5,7 3.5,5.5 2.5,4.5 0,4.5 | 0,1 2.3,1 3.2,1.8 3.2,3.6 2.3,4.5"),
    ('C', "3.5,2 2.5,1 1,1 0,2.5 0,6.5 1,8 2.5,8 3.5,7"),
    ('D', "0,1 0,8 2,8 3.5,6.5 3.5,2.5 2,1 0,1"),
    ('E', "3.5,1 0,1 0,8 3.5,8 | 0,4.5 2.5,4.5"),
    ('F', "3.5,1 0,1 0,8 | 0,4.5 2.5,4.5"),
    ('G', "3.5,2 2.5,1 1,1 0,2.5 0,6.5 1,8 2.5,8 3.5,7 3.5,5 2,5"),
    ('H', "0,1 0,8 | 3.5,1 3.5,8 | 0,4.5 3.5,4.5"),
    ('I', "0,1 2,1 | 1,1 1,8 | 0,8 2,8"),
    ('J', "1,1 3,1 | 2.5,1 2.5,7 1.5,8 0.5,8 0,7"),
    ('K', "0,1 0,8 | 3.5,1 0,5 | 1.2,3.8 3.5,8"),
    ('L', "0,1 0,8 3,8"),
    ('M', "0,8 0,1 2,5 4,1 4,8"),
    ('N', "0,8 0,1 3.5,8 3.5,1"),
    ('O', "1,1 2.5,1 3.5,2.5 3.5,6.5 2.5,8 1,8 0,6.5 0,2.5 1,1"),
    ('P', "0,8 0,1 2.5,1 3.5,2 3.5,3.5 2.5,4.5 0,4.5"),
    ('Q', "1,1 2.5,1 3.5,2.5 3.5,6.5 2.5,8 1,8 0,6.5 0,2.5 1,1 | 2,6 3.8,8.5"),
    ('R', "0,8 0,1 2.5,1 3.5,2 3.5,3.5 2.5,4.5 0,4.5 | 1.5,4.5 3.5,8"),
    ('S', "3.5,2 2.5,1 1,1 0,2 0,3.5 1,4.5 2.5,4.5 3.5,5.5 3.5,7 2.5,8 1,8 0,7"),
    ('T', "0,1 4,1 | 2,1 2,8"),
    ('U', "0,1 0,7 1,8 2.5,8 3.5,7 3.5,1"),
    ('V', "0,1 1.75,8 3.5,1"),
    ('W', "0,1 1,8 2,3.5 3,8 4,1"),
    ('X', "0,1 3.5,8 | 3.5,1 0,8"),
    ('Y', "0,1 1.75,4.5 3.5,1 | 1.75,4.5 1.75,8"),
    ('Z', "0,1 3.5,1 0,8 3.5,8"),
    ('0', "1,1 2,1 3,2.5 3,6.5 2,8 1,8 0,6.5 0,2.5 1,1 | 0.5,7 2.5,2"),
    ('1', "0.5,2.5 1.5,1 1.5,8 | 0.5,8 2.5,8"),
    ('2', "0,2 1,1 2,1 3,2 3,3.5 0,8 3,8"),
    ('3', "0,1.8 1,1 2,1 3,2 3,3.5 2,4.5 1,4.5 | 2,4.5 3,5.5 3,7 2,8 1,8 0,7.2"),
    ('4', "2.5,8 2.5,1 0,5.5 3,5.5"),
    ('5', "3,1 0.3,1 0,4.2 1,3.8 2,3.8 3,5 3,7 2,8 1,8 0,7.2"),
    ('6', "2.8,1.5 2,1 1,1 0,2.5 0,7 1,8 2,8 3,7 3,5.5 2,4.5 1,4.5 0,5.5"),
    ('7', "0,1 3,1 1,8"),
    ('8', "1,1 2,1 3,2 3,3.5 2,4.5 1,4.5 0,3.5 0,2 1,1 | 1,4.5 0,5.5 0,7 1,8 2,8 3,7 3,5.5 2,4.5"),
    ('9', "3,3 2,4.2 1,4.2 0,3.2 0,2 1,1 2,1 3,2 3,6.5 2,8 1,8 0.2,7.4"),
    ('.', "0.3,7.5 0.3,8"),
    (',', "0.5,7.5 0.5,8 0,9.2"),
    (';', "0.5,4.3 0.5,4.8 | 0.5,7.5 0.5,8 0,9.2"),
    (':', "0.3,4.3 0.3,4.8 | 0.3,7.5 0.3,8"),
    ('!', "0.3,1 0.3,6 | 0.3,7.5 0.3,8"),
    ('?', "0,2 1,1 2,1 3,2 3,3 1.5,4.5 1.5,6 | 1.5,7.5 1.5,8"),
    ('\'', "0.3,1 0.3,2.8"),
    ('"', "0.3,1 0.3,2.8 | 1.3,1 1.3,2.8"),
    ('-', "0,5.5 2,5.5"),
    ('(', "1.2,0.8 0.3,2.5 0,4.5 0.3,6.5 1.2,8.8"),
    (')', "0,0.8 0.9,2.5 1.2,4.5 0.9,6.5 0,8.8"),
];

/// Vertical extent of the skeleton grid, including a half-unit margin.
const GRID_HEIGHT: f64 = 11.0;
const GRID_TOP_MARGIN: f64 = 0.5;
const BASELINE: f64 = 8.0;
/// Gap between neighbouring skeletons before `char_spacing` is added.
const GRID_GAP: f64 = 0.9;

#[derive(Debug, Clone)]
struct Skeleton {
    strokes: Vec<Vec<(f64, f64)>>,
    width: f64,
}

fn parse_skeleton(spec: &str) -> Skeleton {
    let strokes: Vec<Vec<(f64, f64)>> = spec
        .split('|')
        .map(|poly| {
            poly.split_whitespace()
                .map(|pt| {
                    let (x, y) = pt.split_once(',').expect("point is x,y");
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect();
    let width = strokes
        .iter()
        .flatten()
        .map(|p| p.0)
        .fold(0.0_f64, f64::max)
        .max(0.6);
    Skeleton { strokes, width }
}

/// Distance from `p` to segment `a`–`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Shear by `slant` (positive leans right) around the baseline, then rotate
/// by `skew` around `centre`.
struct WordTransform {
    tan_slant: f64,
    cos: f64,
    sin: f64,
    baseline: f64,
    centre: (f64, f64),
}

impl WordTransform {
    fn new(params: &RenderParams, baseline: f64, centre: (f64, f64)) -> Self {
        let skew = params.skew_angle.to_radians();
        Self {
            tan_slant: params.slant_angle.to_radians().tan(),
            cos: skew.cos(),
            sin: skew.sin(),
            baseline,
            centre,
        }
    }

    fn forward(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let x = x + self.tan_slant * (self.baseline - y);
        let (dx, dy) = (x - self.centre.0, y - self.centre.1);
        (
            self.centre.0 + self.cos * dx - self.sin * dy,
            self.centre.1 + self.sin * dx + self.cos * dy,
        )
    }

    fn inverse(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (dx, dy) = (x - self.centre.0, y - self.centre.1);
        let x = self.centre.0 + self.cos * dx + self.sin * dy;
        let y = self.centre.1 - self.sin * dx + self.cos * dy;
        (x - self.tan_slant * (self.baseline - y), y)
    }
}

fn bounding_box(points: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64, f64) {
    points.fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), (x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
    )
}

pub struct FontFace {
    path: PathBuf,
    font: FontVec,
}

impl std::fmt::Debug for FontFace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FontFace").field("path", &self.path).finish()
    }
}

/// Produces binary word masks for rendering.
#[derive(Debug)]
pub enum GlyphSource {
    Procedural(ProceduralGlyphs),
    Fonts(Vec<FontFace>),
}

#[derive(Debug, Clone)]
pub struct ProceduralGlyphs {
    skeletons: HashMap<char, Skeleton>,
}

impl Default for ProceduralGlyphs {
    fn default() -> Self {
        Self {
            skeletons: PROCEDURAL_GLYPHS
                .iter()
                .map(|&(c, s)| (c, parse_skeleton(s)))
                .collect(),
        }
    }
}

impl GlyphSource {
    pub fn procedural() -> Self {
        GlyphSource::Procedural(ProceduralGlyphs::default())
    }

    /// Resolves `procedural:` or a directory of `.ttf` / `.otf` files.
    pub fn from_uri(uri: &str) -> Result<Self> {
        if uri == "procedural:" || uri == "procedural" {
            return Ok(Self::procedural());
        }
        Self::from_font_dir(Path::new(uri))
    }

    pub fn from_font_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ttf" | "otf"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::config(
                "render.glyphs",
                format!("no .ttf/.otf files in {}", dir.display()),
            ));
        }
        let faces = paths
            .into_iter()
            .map(|path| {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let font = FontVec::try_from_vec(bytes).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: format!("invalid font: {e}"),
                })?;
                Ok(FontFace { path, font })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GlyphSource::Fonts(faces))
    }

    /// Number of selectable faces; `RenderParams::glyph_source_id` indexes these.
    pub fn num_faces(&self) -> usize {
        match self {
            GlyphSource::Procedural(_) => 1,
            GlyphSource::Fonts(f) => f.len(),
        }
    }

    pub fn covers(&self, face: usize, c: char) -> bool {
        match self {
            GlyphSource::Procedural(p) => p.skeletons.contains_key(&c),
            GlyphSource::Fonts(f) => f
                .get(face)
                .is_some_and(|f| f.font.glyph_id(c).0 != 0),
        }
    }

    /// Charset symbols some face cannot render, as `(face, symbol)` pairs.
    pub fn coverage_gaps(&self, charset: &Charset) -> Vec<(usize, char)> {
        (0..self.num_faces())
            .flat_map(|face| {
                charset
                    .symbols()
                    .iter()
                    .filter(move |&&c| !self.covers(face, c))
                    .map(move |&c| (face, c))
            })
            .collect()
    }

    /// Binary foreground mask of `text` laid out with `params` at
    /// `line_height` pixels, before any intensity, smoothing or rescaling.
    pub fn rasterize(&self, text: &str, params: &RenderParams, line_height: usize) -> Result<Array2<bool>> {
        if text.is_empty() {
            return Err(Error::Empty("cannot render an empty string".into()));
        }
        for c in text.chars() {
            if !self.covers(params.glyph_source_id, c) {
                return Err(Error::Uncovered {
                    symbol: c,
                    context: format!("glyph source (face {})", params.glyph_source_id),
                });
            }
        }
        match self {
            GlyphSource::Procedural(p) => Ok(p.rasterize(text, params, line_height)),
            GlyphSource::Fonts(faces) => Ok(rasterize_font(
                &faces[params.glyph_source_id],
                text,
                params,
                line_height,
            )),
        }
    }
}

impl ProceduralGlyphs {
    fn rasterize(&self, text: &str, params: &RenderParams, line_height: usize) -> Array2<bool> {
        let scale = line_height as f64 / GRID_HEIGHT;
        let radius = (params.stroke_width / 2.0).max(0.5);

        // layout in pixel space, unsheared
        let mut segments: Vec<((f64, f64), (f64, f64))> = Vec::new();
        let mut cursor = 0.0;
        for c in text.chars() {
            let sk = &self.skeletons[&c];
            for stroke in &sk.strokes {
                let pts: Vec<(f64, f64)> = stroke
                    .iter()
                    .map(|&(x, y)| (cursor + x * scale, (y + GRID_TOP_MARGIN) * scale))
                    .collect();
                if pts.len() == 1 {
                    segments.push((pts[0], pts[0]));
                }
                segments.extend(pts.windows(2).map(|w| (w[0], w[1])));
            }
            cursor += (sk.width + GRID_GAP) * scale + params.char_spacing;
            // keep glyph origins strictly increasing under tight spacing
            cursor = cursor.max(0.0);
        }

        let baseline = (BASELINE + GRID_TOP_MARGIN) * scale;
        let (x0, _, x1, _) = bounding_box(segments.iter().flat_map(|s| [s.0, s.1]));
        let centre = ((x0 + x1) / 2.0, line_height as f64 / 2.0);
        let tf = WordTransform::new(params, baseline, centre);
        let segments: Vec<_> = segments
            .into_iter()
            .map(|(a, b)| (tf.forward(a), tf.forward(b)))
            .collect();

        let margin = radius + 2.0;
        let (bx0, by0, bx1, by1) = bounding_box(segments.iter().flat_map(|s| [s.0, s.1]));
        let (ox, oy) = (bx0 - margin, by0 - margin);
        let w = ((bx1 - bx0) + 2.0 * margin).ceil().max(1.0) as usize;
        let h = ((by1 - by0) + 2.0 * margin).ceil().max(1.0) as usize;
        let mut mask = Array2::from_elem((h, w), false);
        for &(a, b) in &segments {
            let lo_x = ((a.0.min(b.0) - radius - ox).floor().max(0.0)) as usize;
            let hi_x = ((a.0.max(b.0) + radius - ox).ceil() as usize).min(w - 1);
            let lo_y = ((a.1.min(b.1) - radius - oy).floor().max(0.0)) as usize;
            let hi_y = ((a.1.max(b.1) + radius - oy).ceil() as usize).min(h - 1);
            for y in lo_y..=hi_y {
                for x in lo_x..=hi_x {
                    let p = (x as f64 + 0.5 + ox, y as f64 + 0.5 + oy);
                    if segment_distance(p, a, b) <= radius {
                        mask[[y, x]] = true;
                    }
                }
            }
        }
        mask
    }
}

fn rasterize_font(face: &FontFace, text: &str, params: &RenderParams, line_height: usize) -> Array2<bool> {
    let px = line_height as f32 * 0.75;
    let font = face.font.as_scaled(PxScale::from(px));
    let ascent = font.ascent();
    let pad = params.stroke_width.ceil() as usize + 2;

    // unsheared layout into a generous canvas
    let mut placed = Vec::new();
    let mut cursor = pad as f32;
    let mut prev = None;
    for c in text.chars() {
        let id = font.glyph_id(c);
        if let Some(p) = prev {
            cursor += font.kern(p, id);
        }
        let glyph = id.with_scale_and_position(px, ab_glyph::point(cursor, ascent + pad as f32));
        cursor += font.h_advance(id) + params.char_spacing as f32;
        cursor = cursor.max(0.0);
        prev = Some(id);
        placed.push(glyph);
    }
    let width = (cursor.ceil() as usize + 2 * pad).max(1);
    let height = line_height.max((font.height().ceil() as usize) + 2 * pad);
    let mut cover = Array2::<f32>::zeros((height, width));
    for g in placed {
        if let Some(outline) = face.font.outline_glyph(g) {
            let b = outline.px_bounds();
            outline.draw(|x, y, v| {
                let xx = b.min.x as i64 + x as i64;
                let yy = b.min.y as i64 + y as i64;
                if xx >= 0 && yy >= 0 && (xx as usize) < width && (yy as usize) < height {
                    let cell = &mut cover[[yy as usize, xx as usize]];
                    *cell = cell.max(v);
                }
            });
        }
    }
    let mut mask = cover.mapv(|v| v >= 0.5);

    // thicken: the font outline is treated as a width-1 stroke
    let extra = ((params.stroke_width - 1.0) / 2.0).max(0.0);
    if extra > 0.0 {
        let r = extra.ceil() as isize;
        let src = mask.clone();
        for ((y, x), m) in mask.indexed_iter_mut() {
            if *m {
                continue;
            }
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy) as f64).sqrt() > extra + 0.5 {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0
                        && xx >= 0
                        && (yy as usize) < height
                        && (xx as usize) < width
                        && src[[yy as usize, xx as usize]]
                    {
                        *m = true;
                        break 'search;
                    }
                }
            }
        }
    }

    // shear + rotate by inverse nearest-neighbour mapping
    let baseline = ascent as f64 + pad as f64;
    let centre = (width as f64 / 2.0, height as f64 / 2.0);
    let tf = WordTransform::new(params, baseline, centre);
    let corners = [
        (0.0, 0.0),
        (width as f64, 0.0),
        (0.0, height as f64),
        (width as f64, height as f64),
    ];
    let (bx0, by0, bx1, by1) = bounding_box(corners.iter().map(|&p| tf.forward(p)));
    let ow = (bx1 - bx0).ceil().max(1.0) as usize;
    let oh = (by1 - by0).ceil().max(1.0) as usize;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (sx, sy) = tf.inverse((x as f64 + 0.5 + bx0, y as f64 + 0.5 + by0));
        let (sx, sy) = (sx.floor(), sy.floor());
        sx >= 0.0 && sy >= 0.0 && (sx as usize) < width && (sy as usize) < height && mask[[sy as usize, sx as usize]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_covers_default_charset() {
        let g = GlyphSource::procedural();
        assert!(g.coverage_gaps(&Charset::english()).is_empty());
        let gaps = g.coverage_gaps(&Charset::new("a#").unwrap());
        assert_eq!(gaps, vec![(0, '#')]);
    }

    #[test]
    fn transform_inverse_roundtrip() {
        let params = RenderParams {
            slant_angle: 20.0,
            skew_angle: -4.0,
            ..RenderParams::plain()
        };
        let tf = WordTransform::new(&params, 40.0, (30.0, 20.0));
        let p = (12.5, 7.25);
        let q = tf.inverse(tf.forward(p));
        assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
    }

    #[test]
    fn uncovered_symbol_errors() {
        let g = GlyphSource::procedural();
        let err = g.rasterize("a#", &RenderParams::plain(), 64).unwrap_err();
        assert!(matches!(err, Error::Uncovered { symbol: '#', .. }));
    }
}
