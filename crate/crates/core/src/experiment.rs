//! Dataset construction and training phases driven by an [`ExperimentConfig`].

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::confidence::{quantile, sorted_confidences};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::derive_rng;
use crate::selftrain::{predict_pseudo_labels, pretrain_synthetic, AdaptationConfig, PretrainReport};
use crate::synth::{build_synthetic_dataset, load_manifest_dataset, Dataset, GlyphSource, RenderRanges};
use crate::textcorpus::{derive_statistics, generate_strings, ingest_text, CorpusSpec, TextCorpus};

/// A short English passage bundled with the library.
pub const DESK_CORPUS: &str = include_str!("../data/desk_corpus.txt");

/// The desk-scale experiment: style A source, style B target.
pub const DESK_CONFIG: &str = include_str!("../configs/desk.toml");

const SEED_SOURCE: u64 = 1;
const SEED_TARGET: u64 = 2;
const SEED_EVAL: u64 = 3;
const SEED_MODEL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
            Split::Eval => "eval",
        }
    }
}

fn sub_seed(config: &ExperimentConfig, tag: u64) -> u64 {
    use rand::Rng;
    derive_rng(config.seed, &[tag]).random()
}

pub fn load_corpus(config: &ExperimentConfig) -> Result<TextCorpus> {
    let parts = config
        .corpus
        .sources
        .iter()
        .map(|src| match src.strip_prefix("builtin:") {
            Some("desk") => ingest_text(DESK_CORPUS.as_bytes(), src),
            Some(other) => Err(Error::config("corpus.sources", format!("unknown builtin corpus {other:?}"))),
            None => {
                let raw = std::fs::read(src).map_err(|e| Error::io(src, e))?;
                ingest_text(&raw, src)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TextCorpus::concat(parts))
}

pub fn glyph_source(config: &ExperimentConfig) -> Result<GlyphSource> {
    let glyphs = GlyphSource::from_uri(&config.render.glyphs)?;
    let charset = config.charset()?;
    if let Some((face, c)) = glyphs.coverage_gaps(&charset).first() {
        return Err(Error::Uncovered {
            symbol: *c,
            context: format!("glyph source {:?} (face {face})", config.render.glyphs),
        });
    }
    Ok(glyphs)
}

/// Transcriptions for a synthesized split.
pub fn split_strings(config: &ExperimentConfig, split: Split) -> Result<Vec<String>> {
    let charset = config.charset()?;
    let corpus = load_corpus(config)?;
    let stats = derive_statistics(&corpus, &charset)?;
    let (count, tag) = match split {
        Split::Source => (config.corpus.count, SEED_SOURCE),
        Split::Target => (config.data.target_count, SEED_TARGET),
        Split::Eval => (config.data.eval_count, SEED_EVAL),
    };
    let spec = CorpusSpec {
        mode: config.corpus.mode,
        target_count: count,
        seed: sub_seed(config, tag),
    };
    generate_strings(&spec, &corpus, &stats, &charset)
}

/// Renders a split with its configured style.
pub fn synthesize(config: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let strings = split_strings(config, split)?;
    let ranges: &RenderRanges = match split {
        Split::Source => &config.render.source,
        Split::Target | Split::Eval => &config.render.target,
    };
    let tag = match split {
        Split::Source => SEED_SOURCE,
        Split::Target => SEED_TARGET,
        Split::Eval => SEED_EVAL,
    };
    let mut ds = build_synthetic_dataset(
        &strings,
        ranges,
        &glyph_source(config)?,
        &config.charset()?,
        config.render.line_height,
        config.model.height,
        sub_seed(config, tag + 100),
    )?;
    ds.split = split.name().into();
    Ok(ds)
}

fn from_manifest(config: &ExperimentConfig, manifest: &Path, split: Split) -> Result<Dataset> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut ds = load_manifest_dataset(manifest, root, &config.charset()?, config.model.height)?;
    ds.split = split.name().into();
    Ok(ds)
}

/// The dataset for `split`: from its manifest when configured, otherwise
/// synthesized. Target images are always returned without labels.
pub fn dataset(config: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let manifest = match split {
        Split::Source => &config.data.source_manifest,
        Split::Target => &config.data.target_manifest,
        Split::Eval => &config.data.eval_manifest,
    };
    let ds = match manifest {
        Some(m) => from_manifest(config, m, split)?,
        None => {
            if split == Split::Eval && config.data.eval_count == 0 {
                return Err(Error::Empty("no evaluation split configured".into()));
            }
            synthesize(config, split)?
        }
    };
    Ok(if split == Split::Target { ds.unlabeled() } else { ds })
}

/// The optional evaluation split.
pub fn eval_dataset(config: &ExperimentConfig) -> Result<Option<Dataset>> {
    if config.data.eval_manifest.is_none() && config.data.eval_count == 0 {
        return Ok(None);
    }
    dataset(config, Split::Eval).map(Some)
}

pub fn initial_state(config: &ExperimentConfig) -> Result<ModelState> {
    ModelState::new(config.recognizer()?, sub_seed(config, SEED_MODEL))
}

/// Fresh model trained on the source split.
pub fn pretrain(config: &ExperimentConfig, source: &Dataset) -> Result<(ModelState, PretrainReport)> {
    let mut state = initial_state(config)?;
    let report = pretrain_synthetic(&mut state, source, &config.pretrain_config())?;
    Ok((state, report))
}

/// Adaptation settings; a quantile threshold is computed from `model0`'s
/// confidences on `target`.
pub fn adaptation_config(config: &ExperimentConfig, model0: &ModelState, target: &Dataset) -> Result<AdaptationConfig> {
    config.adaptation(|q| {
        let (samples, _) = predict_pseudo_labels(model0, target, 0, config.adapt.include_eos_confidence)?;
        Ok(quantile(&sorted_confidences(&samples), q))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_parses() {
        let c = ExperimentConfig::from_toml_str(DESK_CONFIG, &[]).unwrap();
        assert_eq!(c.charset().unwrap().len(), 34);
        assert_eq!(c.adapt.cycles, 15);
    }

    #[test]
    fn synthesized_splits_are_deterministic_and_distinct() {
        let c = ExperimentConfig::from_toml_str(
            DESK_CONFIG,
            &["corpus.count=5".into(), "data.target_count=4".into(), "data.eval_count=3".into()],
        )
        .unwrap();
        let a = dataset(&c, Split::Source).unwrap();
        let b = dataset(&c, Split::Source).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.len(), 5);
        let t = dataset(&c, Split::Target).unwrap();
        assert!(t.images.iter().all(|i| i.transcription.is_none()));
        let e = dataset(&c, Split::Eval).unwrap();
        assert!(e.is_labeled());
        assert_ne!(split_strings(&c, Split::Source).unwrap()[..3], split_strings(&c, Split::Eval).unwrap()[..]);
    }
}
