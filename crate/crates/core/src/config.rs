//! Experiment configuration: one TOML document covering every component,
//! with dotted `key=value` overrides.
//!
//! ```toml
//! seed = 7
//! charset = "abcdefghijklmnopqrstuvwxyz.,;:!?'-"
//!
//! [corpus]
//! sources = ["builtin:desk"]   # or paths to UTF-8 text files
//! mode = "uniform"             # natural | uniform | random
//! count = 2000                 # synthetic source images
//!
//! [render]
//! glyphs = "procedural:"       # or a directory of .ttf/.otf files
//! line_height = 64
//! [render.source]              # parameter ranges of the synthetic source domain
//! slant_angle = [10.0, 30.0]
//! [render.target]              # ranges used when the target domain is synthesized
//! slant_angle = [-30.0, -10.0]
//!
//! [data]
//! target_count = 1000          # synthesized unlabeled target images
//! eval_count = 300             # synthesized labeled target test images
//! # target_manifest / eval_manifest / source_manifest: TSV files that replace synthesis
//!
//! [augment.weak]               # policy parameters; see AugmentationPolicy
//! [augment.strong]
//!
//! [model]                      # recognizer; the charset is the top-level one
//! height = 32
//!
//! [pretrain]
//! epochs = 1
//! augmentation = "weak"
//!
//! [adapt]
//! cycles = 50
//! views = ["weak", "strong"]
//! # learning_rate = 2e-4       # defaults to model.learning_rate
//! [adapt.selection]
//! kind = "threshold"           # none | threshold | top_fraction | random_fraction
//! tau = 0.55                   # or tau_quantile: quantile of the initial model's confidences
//! # schedule = [[10, 0.6], [20, 0.8], [20, 1.0]]   # (cycles, fraction) stages
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentKind, AugmentationPolicy};
use crate::charset::Charset;
use crate::confidence::{Schedule, SelectionPolicy};
use crate::error::{Error, Result};
use crate::model::{BackboneKind, RecognizerConfig};
use crate::selftrain::{AdaptationConfig, PretrainConfig, ViewPair};
use crate::synth::RenderRanges;
use crate::textcorpus::CorpusMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub charset: String,
    pub corpus: CorpusSection,
    pub render: RenderSection,
    pub data: DataSection,
    pub augment: AugmentSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub adapt: AdaptSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub sources: Vec<String>,
    pub mode: CorpusMode,
    pub count: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            sources: vec!["builtin:desk".into()],
            mode: CorpusMode::Uniform,
            count: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub glyphs: String,
    pub line_height: usize,
    pub source: RenderRanges,
    pub target: RenderRanges,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            glyphs: "procedural:".into(),
            line_height: 64,
            source: RenderRanges::default(),
            target: RenderRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub target_count: usize,
    pub eval_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            weak: AugmentationPolicy::weak(),
            strong: AugmentationPolicy::strong(),
        }
    }
}

impl AugmentSection {
    pub fn policy(&self, kind: AugmentKind) -> AugmentationPolicy {
        match kind {
            AugmentKind::Identity => AugmentationPolicy::identity(),
            AugmentKind::Weak => self.weak.clone(),
            AugmentKind::Strong => self.strong.clone(),
        }
    }
}

/// Recognizer settings without the charset, which is shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub compact_channels: Vec<usize>,
    pub height: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub embed_dim: usize,
    pub attention_window: usize,
    pub max_decode_len: usize,
    pub label_smoothing: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = RecognizerConfig::default();
        Self {
            backbone: d.backbone,
            compact_channels: d.compact_channels,
            height: d.height,
            encoder_hidden: d.encoder_hidden,
            decoder_hidden: d.decoder_hidden,
            attention_dim: d.attention_dim,
            embed_dim: d.embed_dim,
            attention_window: d.attention_window,
            max_decode_len: d.max_decode_len,
            label_smoothing: d.label_smoothing,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            grad_clip: d.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub augmentation: AugmentKind,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 1,
            augmentation: AugmentKind::Weak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    None,
    Threshold,
    TopFraction,
    RandomFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub kind: SelectionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Threshold given as a quantile of the initial model's confidences on
    /// the unlabeled target set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_quantile: Option<f64>,
    /// `(number of cycles, fraction)` stages; defaults to the 1:2:2 split of
    /// 60%, 80% and 100% over the configured cycles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<(usize, f64)>>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            kind: SelectionKind::Threshold,
            tau: Some(0.55),
            tau_quantile: None,
            schedule: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub cycles: usize,
    pub selection: SelectionSection,
    pub views: [AugmentKind; 2],
    pub epochs_per_cycle: usize,
    pub max_nonfinite_steps: usize,
    pub min_selected: usize,
    pub max_starved_cycles: usize,
    pub include_eos_confidence: bool,
    /// Adaptation learning rate; `model.learning_rate` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let d = AdaptationConfig::default();
        Self {
            cycles: d.cycles,
            selection: SelectionSection::default(),
            views: [AugmentKind::Weak, AugmentKind::Strong],
            epochs_per_cycle: d.epochs_per_cycle,
            max_nonfinite_steps: d.max_nonfinite_steps,
            min_selected: d.min_selected,
            max_starved_cycles: d.max_starved_cycles,
            include_eos_confidence: d.include_eos_confidence,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Confidence fractions of the error-by-confidence curve.
    pub fractions: Vec<f64>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            charset: Charset::english().as_string(),
            corpus: CorpusSection::default(),
            render: RenderSection::default(),
            data: DataSection {
                target_count: 1000,
                eval_count: 300,
                ..Default::default()
            },
            augment: AugmentSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            adapt: AdaptSection::default(),
            report: ReportSection::default(),
        }
    }
}

/// Splits `key=value`; the value is parsed as a TOML value and falls back to
/// a plain string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "malformed override key"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((key.split('.').map(str::to_owned).collect(), value))
}

fn apply_override(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = doc;
    for (i, part) in parents.iter().enumerate() {
        let entry = table
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path[..=i].join("."), "is not a table"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Dotted path of the offending key, including an unknown or missing field
/// named in the message.
fn field_path(path: &str, message: &str) -> String {
    let mut field = if path == "." { String::new() } else { path.to_owned() };
    for marker in ["unknown field `", "missing field `"] {
        if let Some(name) = message.split(marker).nth(1).and_then(|r| r.split('`').next()) {
            if field == name || field.ends_with(&format!(".{name}")) {
                continue;
            }
            if !field.is_empty() {
                field.push('.');
            }
            field.push_str(name);
        }
    }
    if field.is_empty() {
        "<document>".into()
    } else {
        field
    }
}

impl ExperimentConfig {
    /// Parses a document, applies overrides in order and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("<document>", e.message().to_owned()))?;
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            apply_override(&mut doc, &path, value)?;
        }
        let config: ExperimentConfig =
            serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
                let msg = e.inner().message().to_owned();
                Error::config(field_path(&e.path().to_string(), &msg), msg)
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn charset(&self) -> Result<Charset> {
        Charset::new(&self.charset).map_err(|e| Error::config("charset", e.to_string()))
    }

    pub fn recognizer(&self) -> Result<RecognizerConfig> {
        let m = &self.model;
        Ok(RecognizerConfig {
            charset: self.charset()?,
            backbone: m.backbone,
            compact_channels: m.compact_channels.clone(),
            height: m.height,
            encoder_hidden: m.encoder_hidden,
            decoder_hidden: m.decoder_hidden,
            attention_dim: m.attention_dim,
            embed_dim: m.embed_dim,
            attention_window: m.attention_window,
            max_decode_len: m.max_decode_len,
            label_smoothing: m.label_smoothing,
            learning_rate: m.learning_rate,
            batch_size: m.batch_size,
            grad_clip: m.grad_clip,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            augmentation: self.augment.policy(self.pretrain.augmentation),
        }
    }

    pub fn schedule(&self) -> Schedule {
        match &self.adapt.selection.schedule {
            Some(stages) => Schedule::from_stages(stages),
            None => Schedule::scaled(self.adapt.cycles),
        }
    }

    /// The adaptation settings. A quantile threshold is resolved with
    /// `tau_from_quantile`, which receives the configured quantile.
    pub fn adaptation(&self, tau_from_quantile: impl FnOnce(f64) -> Result<f64>) -> Result<AdaptationConfig> {
        let a = &self.adapt;
        let s = &a.selection;
        let selection = match s.kind {
            SelectionKind::None => SelectionPolicy::None,
            SelectionKind::Threshold => SelectionPolicy::Threshold {
                tau: match (s.tau, s.tau_quantile) {
                    (Some(t), None) => t,
                    (None, Some(q)) => tau_from_quantile(q)?,
                    _ => unreachable!("checked by validate"),
                },
            },
            SelectionKind::TopFraction => SelectionPolicy::TopFraction {
                schedule: self.schedule(),
            },
            SelectionKind::RandomFraction => SelectionPolicy::RandomFraction {
                schedule: self.schedule(),
            },
        };
        let config = AdaptationConfig {
            cycles: a.cycles,
            selection,
            views: ViewPair {
                first: self.augment.policy(a.views[0]),
                second: self.augment.policy(a.views[1]),
            },
            epochs_per_cycle: a.epochs_per_cycle,
            max_nonfinite_steps: a.max_nonfinite_steps,
            min_selected: a.min_selected,
            max_starved_cycles: a.max_starved_cycles,
            include_eos_confidence: a.include_eos_confidence,
            learning_rate: a.learning_rate,
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks cross-field consistency; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.charset()?;
        if self.corpus.sources.is_empty() {
            return Err(Error::config("corpus.sources", "at least one text source is required"));
        }
        if self.corpus.count == 0 {
            return Err(Error::config("corpus.count", "must be at least 1"));
        }
        if self.render.line_height < 8 {
            return Err(Error::config("render.line_height", "must be at least 8"));
        }
        for (name, ranges) in [("render.source", &self.render.source), ("render.target", &self.render.target)] {
            ranges
                .validate()
                .map_err(|e| Error::config(name, e.to_string()))?;
        }
        if self.data.target_manifest.is_none() && self.data.target_count == 0 {
            return Err(Error::config("data.target_count", "must be at least 1 without a target manifest"));
        }
        self.augment.weak.validate("augment.weak")?;
        self.augment.strong.validate("augment.strong")?;
        if self.augment.weak.kind != AugmentKind::Weak {
            return Err(Error::config("augment.weak.kind", "must be \"weak\""));
        }
        if self.augment.strong.kind != AugmentKind::Strong {
            return Err(Error::config("augment.strong.kind", "must be \"strong\""));
        }
        self.recognizer()?.validate()?;
        if self.pretrain.epochs == 0 {
            return Err(Error::config("pretrain.epochs", "must be at least 1"));
        }
        let s = &self.adapt.selection;
        match (s.kind, s.tau, s.tau_quantile) {
            (SelectionKind::Threshold, Some(_), None) => {}
            (SelectionKind::Threshold, None, Some(q)) => {
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::config("adapt.selection.tau_quantile", "must lie in (0, 1)"));
                }
            }
            (SelectionKind::Threshold, Some(_), Some(_)) => {
                return Err(Error::config(
                    "adapt.selection.tau_quantile",
                    "give either tau or tau_quantile, not both",
                ))
            }
            (SelectionKind::Threshold, None, None) => {
                return Err(Error::config("adapt.selection.tau", "threshold selection needs tau or tau_quantile"))
            }
            (_, Some(_), _) => {
                return Err(Error::config("adapt.selection.tau", "only valid for threshold selection"))
            }
            (_, _, Some(_)) => {
                return Err(Error::config("adapt.selection.tau_quantile", "only valid for threshold selection"))
            }
            _ => {}
        }
        if s.schedule.is_some() && !matches!(s.kind, SelectionKind::TopFraction | SelectionKind::RandomFraction) {
            return Err(Error::config("adapt.selection.schedule", "only valid for fraction selection"));
        }
        self.adaptation(|_| Ok(0.5))?;
        for &f in &self.report.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config("report.fractions", format!("fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_valid() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn overrides_are_typed() {
        let c = ExperimentConfig::from_toml_str(
            "",
            &["adapt.cycles=3".into(), "model.learning_rate=1e-3".into(), "corpus.mode=natural".into()],
        )
        .unwrap();
        assert_eq!(c.adapt.cycles, 3);
        assert_eq!(c.model.learning_rate, 1e-3);
        assert_eq!(c.corpus.mode, CorpusMode::Natural);
    }

    #[test]
    fn resolved_document_round_trips() {
        let c = ExperimentConfig::from_toml_str("", &["adapt.selection.kind=top_fraction".into(), "adapt.selection.tau=-1".into()]);
        assert!(c.is_err());
        let c = ExperimentConfig::from_toml_str(
            "[adapt.selection]\nkind = \"top_fraction\"\nschedule = [[2, 0.5], [48, 1.0]]\n",
            &[],
        )
        .unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn errors_name_the_field() {
        let cases: &[(&str, &str)] = &[
            ("[model]\nlabel_smoothing = 1.0\n", "model.label_smoothing"),
            ("[model]\nbogus = 1\n", "model.bogus"),
            ("[model]\nheight = \"tall\"\n", "model.height"),
            ("charset = \"aab\"\n", "charset"),
            ("[adapt.selection]\nkind = \"none\"\ntau = 0.5\n", "adapt.selection.tau"),
            ("[adapt.selection]\nkind = \"threshold\"\ntau = 1.5\n", "adapt.selection.tau"),
            ("[adapt.selection]\ntau = 0.5\ntau_quantile = 0.4\n", "adapt.selection.tau_quantile"),
            ("[adapt.selection]\nkind = \"threshold\"\n", "adapt.selection.tau"),
            ("[adapt]\ncycles = 60\n[adapt.selection]\nkind = \"top_fraction\"\ntau = 0.5\n", "adapt.selection.tau"),
            ("[adapt]\ncycles = 60\n[adapt.selection]\nkind = \"random_fraction\"\nschedule = [[10, 0.5]]\n", "adapt.selection.schedule"),
            ("[pretrain]\nepochs = 0\n", "pretrain.epochs"),
            ("[render.source]\nstroke_width = [3.0, 1.0]\n", "render.source"),
            ("[augment.strong]\nkind = \"strong\"\nblur_sigma = [0.0, 1.0]\nnoise_std = [0.0, 0.1]\nshear = [0.0, 0.0]\nrotation = [0.0, 0.0]\nrescale = [1.0, 1.0]\n", "augment.strong.grid"),
            ("[report]\nfractions = [0.0]\n", "report.fractions"),
        ];
        for (doc, field) in cases {
            match ExperimentConfig::from_toml_str(doc, &[]) {
                Err(Error::Config { field: f, .. }) => assert_eq!(&f, field, "{doc}"),
                other => panic!("{doc}: expected config error, got {other:?}"),
            }
        }
    }
}
