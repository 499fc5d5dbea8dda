use std::fmt::Write as _;
use std::path::Path;

use super::{render_word, sample_render_params, GlyphSource, RenderRanges};
use crate::charset::Charset;
use crate::error::{Error, Result};
use crate::raster::{load_gray, resize_to_height, save_gray, Provenance, WordImage};
use crate::rng::derive_rng;

/// An ordered, nonempty collection of word images sharing one charset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<WordImage>,
    pub charset: Charset,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Vec<WordImage>, charset: Charset, split: impl Into<String>) -> Result<Self> {
        let split = split.into();
        if images.is_empty() {
            return Err(Error::Empty(format!("dataset {split:?} is empty")));
        }
        for (i, img) in images.iter().enumerate() {
            if let Some(t) = &img.transcription {
                if let Some(c) = t.chars().find(|&c| !charset.contains(c)) {
                    return Err(Error::Uncovered {
                        symbol: c,
                        context: format!("charset (sample {i} of {split:?})"),
                    });
                }
            }
        }
        Ok(Self { images, charset, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.images.iter().all(|i| i.transcription.is_some())
    }

    /// Copy with every transcription removed.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            images: self
                .images
                .iter()
                .map(|i| WordImage {
                    transcription: None,
                    ..i.clone()
                })
                .collect(),
            charset: self.charset.clone(),
            split: self.split.clone(),
        }
    }
}

/// Renders one image per string with independently drawn parameters.
/// Item `i` uses a generator derived from `(seed, i)`, so the result does
/// not depend on evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn build_synthetic_dataset(
    strings: &[String],
    ranges: &RenderRanges,
    glyphs: &GlyphSource,
    charset: &Charset,
    line_height: usize,
    height: usize,
    seed: u64,
) -> Result<Dataset> {
    if strings.is_empty() {
        return Err(Error::Empty("no strings to render".into()));
    }
    ranges.validate()?;
    let images = strings
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let wrap = |e: Error| Error::RenderItem {
                index: i,
                text: text.clone(),
                source: Box::new(e),
            };
            if let Some(c) = text.chars().find(|&c| !charset.contains(c)) {
                return Err(wrap(Error::Uncovered {
                    symbol: c,
                    context: "charset".into(),
                }));
            }
            let mut rng = derive_rng(seed, &[i as u64]);
            let params = sample_render_params(ranges, glyphs.num_faces(), &mut rng).map_err(wrap)?;
            render_word(text, &params, glyphs, line_height, height).map_err(wrap)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, charset.clone(), "synthetic")
}

/// Reads a tab-separated manifest: `relative_image_path[<TAB>transcription]`.
/// Blank lines and lines starting with `#` are skipped.
pub fn load_manifest_dataset(manifest: &Path, image_root: &Path, charset: &Charset, height: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut images = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let rel = cols.next().unwrap_or_default();
        let label = cols.next();
        let err = |message: String| Error::Manifest {
            path: manifest.to_owned(),
            line: lineno,
            message,
        };
        if cols.next().is_some() {
            return Err(err("expected at most two tab-separated columns".into()));
        }
        if rel.is_empty() {
            return Err(err("empty image path".into()));
        }
        if let Some(label) = label {
            if let Some(c) = label.chars().find(|&c| !charset.contains(c)) {
                return Err(err(format!("transcription {label:?} contains out-of-charset symbol {c:?}")));
            }
        }
        let path = image_root.join(rel);
        if !path.is_file() {
            return Err(err(format!("image file {} not found", path.display())));
        }
        let pixels = load_gray(&path).map_err(|e| err(e.to_string()))?;
        if pixels.is_empty() {
            return Err(err(format!("image {} is empty", path.display())));
        }
        images.push(WordImage {
            pixels: resize_to_height(&pixels, height),
            transcription: label.map(str::to_owned),
            provenance: Provenance::External {
                manifest: manifest.to_owned(),
                line: lineno,
            },
        });
    }
    let split = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, charset.clone(), split)
}

/// Writes `images/NNNNNN.png` and `manifest.tsv` under `dir`, returning the
/// manifest path.
pub fn write_manifest_dataset(dataset: &Dataset, dir: &Path) -> Result<std::path::PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = String::new();
    for (i, img) in dataset.images.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        save_gray(&img.pixels, &dir.join(&rel))?;
        match &img.transcription {
            Some(t) => writeln!(manifest, "{rel}\t{t}").unwrap(),
            None => writeln!(manifest, "{rel}").unwrap(),
        }
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
