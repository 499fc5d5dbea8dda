//! Synthetic pretraining and the pseudo-label self-training loop.
//!
//! All randomness of a training phase is drawn from a seed taken from the
//! model's own generator at the start of that phase, so a checkpoint written
//! between cycles is enough to resume a run bit-exactly.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationPolicy};
use crate::confidence::{self, select, word_confidence, PseudoLabeledSample, SelectionPolicy};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{load_checkpoint, save_checkpoint, ModelState};
use crate::raster::WordImage;
use crate::rng::derive_rng;
use crate::synth::Dataset;

const TAG_ORDER: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_SELECT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub augmentation: AugmentationPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            augmentation: AugmentationPolicy::weak(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub first_loss: f64,
    pub last_loss: f64,
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}

/// Trains on weakly augmented synthetic samples for `config.epochs` epochs.
pub fn pretrain_synthetic(state: &mut ModelState, data: &Dataset, config: &PretrainConfig) -> Result<PretrainReport> {
    if !data.is_labeled() {
        return Err(Error::Empty("pretraining needs a fully labeled dataset".into()));
    }
    let seed: u64 = state.rng.random();
    let batch_size = state.config.batch_size;
    let mut report = PretrainReport {
        steps: 0,
        epoch_losses: Vec::new(),
        first_loss: f64::NAN,
        last_loss: f64::NAN,
    };
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derive_rng(seed, &[TAG_ORDER, epoch as u64]));
        let mut total = 0.0;
        let mut count = 0;
        for (b, idx) in batches(&order, batch_size).enumerate() {
            let views: Vec<WordImage> = idx
                .iter()
                .map(|&i| {
                    let mut rng = derive_rng(seed, &[TAG_AUGMENT, epoch as u64, i as u64]);
                    augment::apply(&config.augmentation, &data.images[i], &mut rng)
                })
                .collect();
            let batch: Vec<(&WordImage, &str)> = views
                .iter()
                .zip(idx)
                .map(|(v, &i)| (v, data.images[i].transcription.as_deref().unwrap_or("")))
                .collect();
            let loss = state.train_step(&batch)?;
            if b == 0 && epoch == 0 {
                report.first_loss = loss;
            }
            report.last_loss = loss;
            report.steps += 1;
            total += loss;
            count += 1;
        }
        report.epoch_losses.push(total / count.max(1) as f64);
    }
    Ok(report)
}

/// Greedy, unaugmented prediction of every image with its confidence.
pub fn predict_pseudo_labels(
    state: &ModelState,
    data: &Dataset,
    cycle: usize,
    include_eos: bool,
) -> Result<(Vec<PseudoLabeledSample>, Vec<bool>)> {
    if data.is_empty() {
        return Err(Error::Empty("no images to pseudo-label".into()));
    }
    let mut samples = Vec::with_capacity(data.len());
    let mut ended = Vec::with_capacity(data.len());
    for (index, image) in data.images.iter().enumerate() {
        let pred = state.predict(image)?;
        samples.push(PseudoLabeledSample {
            index,
            confidence: word_confidence(&pred, include_eos)?,
            pseudo_label: pred.text,
            cycle_predicted: cycle,
        });
        ended.push(pred.ended);
    }
    Ok((samples, ended))
}

/// Which augmentation policy produces each of the two views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub first: AugmentationPolicy,
    pub second: AugmentationPolicy,
}

impl Default for ViewPair {
    fn default() -> Self {
        Self {
            first: AugmentationPolicy::weak(),
            second: AugmentationPolicy::strong(),
        }
    }
}

/// Draws both augmented views of every sample in `batch`. View `v` of the
/// sample at batch position `i` uses its own generator derived from a seed
/// taken from `rng`.
pub fn augmented_views<R: Rng + ?Sized>(
    images: &[WordImage],
    batch: &[PseudoLabeledSample],
    views: &ViewPair,
    rng: &mut R,
) -> Vec<[WordImage; 2]> {
    let seed: u64 = rng.random();
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let image = &images[s.index];
            let a = augment::apply(&views.first, image, &mut derive_rng(seed, &[i as u64, 0]));
            let b = augment::apply(&views.second, image, &mut derive_rng(seed, &[i as u64, 1]));
            [a, b]
        })
        .collect()
}

/// Sum over the batch of both views' recognition losses against the fixed
/// pseudo-label.
pub fn consistency_batch_loss<R: Rng + ?Sized>(
    state: &ModelState,
    images: &[WordImage],
    batch: &[PseudoLabeledSample],
    views: &ViewPair,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("empty consistency batch".into()));
    }
    let eps = state.config.label_smoothing;
    let mut total = 0.0;
    for (pair, s) in augmented_views(images, batch, views, rng).iter().zip(batch) {
        for view in pair {
            total += state.recognition_loss(view, &s.pseudo_label, eps)?;
        }
    }
    Ok(total)
}

/// One optimizer step on both views of `batch`. The step minimizes the
/// consistency loss divided by the number of views (`2 * batch.len()`).
/// Returns that mean loss.
pub fn consistency_train_step<R: Rng + ?Sized>(
    state: &mut ModelState,
    images: &[WordImage],
    batch: &[PseudoLabeledSample],
    views: &ViewPair,
    learning_rate: f64,
    rng: &mut R,
) -> Result<f64> {
    let pairs = augmented_views(images, batch, views, rng);
    let items: Vec<(&WordImage, &str)> = pairs
        .iter()
        .zip(batch)
        .flat_map(|(pair, s)| pair.iter().map(move |v| (v, s.pseudo_label.as_str())))
        .collect();
    state.train_step_at(&items, learning_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub cycles: usize,
    pub selection: SelectionPolicy,
    pub views: ViewPair,
    pub epochs_per_cycle: usize,
    /// Abort once this many non-finite training losses occurred.
    pub max_nonfinite_steps: usize,
    /// A cycle selecting fewer samples than this counts as starved.
    pub min_selected: usize,
    /// Abort after this many consecutive starved cycles.
    pub max_starved_cycles: usize,
    /// Whether the end-of-sequence step enters the confidence mean.
    pub include_eos_confidence: bool,
    /// Learning rate of the adaptation steps; the model's own when absent.
    pub learning_rate: Option<f64>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            cycles: 50,
            selection: SelectionPolicy::Threshold { tau: 0.55 },
            views: ViewPair::default(),
            epochs_per_cycle: 1,
            max_nonfinite_steps: 1,
            min_selected: 1,
            max_starved_cycles: 3,
            include_eos_confidence: true,
            learning_rate: None,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate("adapt.selection", self.cycles)?;
        self.views.first.validate("adapt.views.first")?;
        self.views.second.validate("adapt.views.second")?;
        if self.epochs_per_cycle < 1 {
            return Err(Error::config("adapt.epochs_per_cycle", "must be at least 1"));
        }
        if self.max_nonfinite_steps < 1 {
            return Err(Error::config("adapt.max_nonfinite_steps", "must be at least 1"));
        }
        if self.max_starved_cycles < 1 {
            return Err(Error::config("adapt.max_starved_cycles", "must be at least 1"));
        }
        if self.learning_rate.is_some_and(|lr| !(lr.is_finite() && lr >= 0.0)) {
            return Err(Error::config("adapt.learning_rate", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub num_candidates: usize,
    /// Predictions that hit the step limit without an end token; never selected.
    pub num_unterminated: usize,
    pub num_selected: usize,
    pub mean_confidence: f64,
    pub median_confidence: f64,
    pub confidence_deciles: Vec<f64>,
    pub selected_mean_confidence: Option<f64>,
    /// Mean training loss over the cycle; absent when the cycle was skipped.
    pub train_loss: Option<f64>,
    pub steps: usize,
    pub cer: Option<f64>,
    pub wer: Option<f64>,
}

/// Where a run keeps its checkpoints and cycle reports.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn reports(&self) -> PathBuf {
        self.dir.join("cycles.jsonl")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoints").join("last.ckpt")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoints").join("best.ckpt")
    }

    pub fn read_reports(&self) -> Result<Vec<CycleReport>> {
        let path = self.reports();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Manifest {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    fn write_reports(&self, reports: &[CycleReport]) -> Result<()> {
        let path = self.reports();
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut out = String::new();
        for r in reports {
            out.push_str(&serde_json::to_string(r).expect("report serializes"));
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    fn append_report(&self, report: &CycleReport) -> Result<()> {
        let path = self.reports();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(report).expect("report serializes")).map_err(|e| Error::io(&path, e))
    }

    /// Loads the last checkpoint and drops reports of cycles it does not cover.
    pub fn resume(&self) -> Result<(ModelState, Vec<CycleReport>)> {
        let ckpt = self.last_checkpoint();
        if !ckpt.exists() {
            return Err(Error::Checkpoint {
                path: ckpt,
                message: "no checkpoint to resume from".into(),
            });
        }
        let state = load_checkpoint(&ckpt)?;
        let mut reports = self.read_reports()?;
        reports.retain(|r| (r.cycle as u64) < state.cycle);
        self.write_reports(&reports)?;
        Ok((state, reports))
    }
}

/// Test hook: stop with [`Error::Interrupted`] after `batches` training
/// batches of cycle `cycle`, without writing anything for that cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupt {
    pub cycle: usize,
    pub batches: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AdaptOptions<'a> {
    pub eval: Option<&'a Dataset>,
    pub run: Option<RunFiles>,
    /// Reports of cycles already completed (when resuming).
    pub previous: Vec<CycleReport>,
    pub interrupt: Option<Interrupt>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs self-training cycles `state.cycle .. config.cycles`.
pub fn adapt(
    state: &mut ModelState,
    unlabeled: &Dataset,
    config: &AdaptationConfig,
    options: AdaptOptions,
) -> Result<Vec<CycleReport>> {
    config.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled dataset is empty".into()));
    }
    let mut reports = options.previous;
    if let Some(run) = &options.run {
        if state.cycle == 0 {
            run.write_reports(&[])?;
        }
    }
    let mut starved = reports
        .iter()
        .rev()
        .take_while(|r| r.num_selected < config.min_selected)
        .count();
    let mut best_cer = reports.iter().filter_map(|r| r.cer).fold(f64::INFINITY, f64::min);
    let mut nonfinite = 0;
    let last_good = |run: &Option<RunFiles>| {
        run.as_ref().map(|r| r.last_checkpoint()).filter(|p| p.exists())
    };

    let learning_rate = config.learning_rate.unwrap_or(state.config.learning_rate);
    let start = state.cycle as usize;
    let mut new_reports = Vec::new();
    for cycle in start..config.cycles {
        let seed: u64 = state.rng.random();
        let (candidates, ended) = predict_pseudo_labels(state, unlabeled, cycle, config.include_eos_confidence)?;
        let terminated: Vec<PseudoLabeledSample> = candidates
            .iter()
            .zip(&ended)
            .filter(|(_, &e)| e)
            .map(|(s, _)| s.clone())
            .collect();
        let selected = if terminated.is_empty() {
            Vec::new()
        } else {
            select(&terminated, &config.selection, cycle, &mut derive_rng(seed, &[TAG_SELECT]))?
        };

        let mut losses = Vec::new();
        if !selected.is_empty() {
            let mut done = 0;
            for epoch in 0..config.epochs_per_cycle {
                let mut order = selected.clone();
                order.shuffle(&mut derive_rng(seed, &[TAG_ORDER, epoch as u64]));
                for (b, chunk) in order.chunks(state.config.batch_size).enumerate() {
                    if let Some(int) = options.interrupt {
                        if int.cycle == cycle && int.batches == done {
                            return Err(Error::Interrupted { cycle });
                        }
                    }
                    let mut rng = derive_rng(seed, &[TAG_AUGMENT, epoch as u64, b as u64]);
                    match consistency_train_step(state, &unlabeled.images, chunk, &config.views, learning_rate, &mut rng) {
                        Ok(loss) => losses.push(loss),
                        Err(Error::NonFiniteLoss { loss, .. }) => {
                            nonfinite += 1;
                            if nonfinite >= config.max_nonfinite_steps {
                                return Err(Error::Divergence {
                                    cycle,
                                    reason: format!("non-finite training loss {loss}"),
                                    last_good: last_good(&options.run),
                                });
                            }
                        }
                        Err(e) => return Err(e),
                    }
                    done += 1;
                }
            }
        }

        if selected.len() < config.min_selected {
            starved += 1;
        } else {
            starved = 0;
        }

        let (cer, wer) = match options.eval {
            Some(eval) => {
                let r = evaluate(state, eval, config.include_eos_confidence)?;
                (Some(r.cer), Some(r.wer))
            }
            None => (None, None),
        };
        let sorted = confidence::sorted_confidences(&candidates);
        let deciles = confidence::selection_report(&candidates, selected.len()).confidence_deciles;
        let report = CycleReport {
            cycle,
            num_candidates: candidates.len(),
            num_unterminated: ended.iter().filter(|e| !**e).count(),
            num_selected: selected.len(),
            mean_confidence: mean(&sorted),
            median_confidence: confidence::quantile(&sorted, 0.5),
            confidence_deciles: deciles,
            selected_mean_confidence: (!selected.is_empty())
                .then(|| mean(&selected.iter().map(|s| s.confidence).collect::<Vec<_>>())),
            train_loss: (!losses.is_empty()).then(|| mean(&losses)),
            steps: losses.len(),
            cer,
            wer,
        };
        log::info!(
            "cycle {cycle}: selected {}/{} loss {:?} cer {:?}",
            report.num_selected,
            report.num_candidates,
            report.train_loss,
            report.cer
        );
        state.cycle = cycle as u64 + 1;
        if let Some(run) = &options.run {
            save_checkpoint(state, &run.last_checkpoint())?;
            if let Some(c) = cer {
                if c < best_cer {
                    best_cer = c;
                    save_checkpoint(state, &run.best_checkpoint())?;
                }
            }
            run.append_report(&report)?;
        }
        new_reports.push(report);

        if starved >= config.max_starved_cycles {
            return Err(Error::Divergence {
                cycle,
                reason: format!(
                    "{starved} consecutive cycles selected fewer than {} samples",
                    config.min_selected
                ),
                last_good: last_good(&options.run),
            });
        }
    }
    reports.extend(new_reports);
    Ok(reports)
}

/// Convenience for callers that keep a run directory: resume if a
/// checkpoint exists there, otherwise start from `state`.
pub fn adapt_in_dir(
    state: ModelState,
    unlabeled: &Dataset,
    config: &AdaptationConfig,
    eval: Option<&Dataset>,
    dir: &Path,
    resume: bool,
) -> Result<(ModelState, Vec<CycleReport>)> {
    let run = RunFiles::new(dir);
    let (mut state, previous) = if resume { run.resume()? } else { (state, Vec::new()) };
    let reports = adapt(
        &mut state,
        unlabeled,
        config,
        AdaptOptions {
            eval,
            run: Some(run),
            previous,
            interrupt: None,
        },
    )?;
    Ok((state, reports))
}
