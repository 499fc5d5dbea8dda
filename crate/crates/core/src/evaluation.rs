//! Character and word error rates, confidence/error curves and threshold sweeps.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::confidence::word_confidence;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::synth::Dataset;

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub reference: String,
    pub hypothesis: String,
    pub distance: usize,
    pub confidence: f64,
}

impl SampleRecord {
    pub fn new(reference: &str, hypothesis: &str, confidence: f64) -> Self {
        Self {
            reference: reference.to_owned(),
            hypothesis: hypothesis.to_owned(),
            distance: edit_distance(reference, hypothesis),
            confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cer: f64,
    pub wer: f64,
    pub records: Vec<SampleRecord>,
}

/// Micro-averaged CER and exact-match WER of `records`.
///
/// With no reference characters at all, CER is 0 when nothing was inserted
/// and infinite otherwise.
pub fn score<'a>(records: impl IntoIterator<Item = &'a SampleRecord>) -> (f64, f64) {
    let (mut dist, mut chars, mut wrong, mut n) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        dist += r.distance;
        chars += r.reference.chars().count();
        wrong += usize::from(r.reference != r.hypothesis);
        n += 1;
    }
    let cer = if chars > 0 {
        dist as f64 / chars as f64
    } else if dist == 0 {
        0.0
    } else {
        f64::INFINITY
    };
    let wer = if n > 0 { wrong as f64 / n as f64 } else { 0.0 };
    (cer, wer)
}

impl EvalResult {
    pub fn from_records(records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("nothing to evaluate".into()));
        }
        let (cer, wer) = score(&records);
        Ok(Self { cer, wer, records })
    }

    /// Per-sample records as TSV with a header row.
    pub fn records_tsv(&self) -> String {
        let mut out = String::from("reference\thypothesis\tdistance\tconfidence\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6}", r.reference, r.hypothesis, r.distance, r.confidence);
        }
        out
    }
}

/// Greedy, unaugmented recognition of every labeled image.
pub fn evaluate(state: &ModelState, data: &Dataset, include_eos: bool) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset is empty".into()));
    }
    if !data.is_labeled() {
        return Err(Error::Empty("evaluation dataset has unlabeled images".into()));
    }
    let mut records = Vec::with_capacity(data.len());
    for image in &data.images {
        let pred = state.predict(image)?;
        let reference = image.transcription.as_deref().unwrap_or_default();
        records.push(SampleRecord::new(reference, &pred.text, word_confidence(&pred, include_eos)?));
    }
    EvalResult::from_records(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionPoint {
    pub fraction: f64,
    pub count: usize,
    pub cer: f64,
    pub wer: f64,
}

/// Record indices by descending confidence; equal confidences keep input order.
fn by_confidence(records: &[SampleRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .confidence
            .partial_cmp(&records[a].confidence)
            .unwrap_or(Ordering::Equal)
    });
    order
}

fn count_for(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

/// Error rates over the `ceil(f * n)` most confident samples, per fraction.
pub fn error_by_confidence_fraction(records: &[SampleRecord], fractions: &[f64]) -> Vec<FractionPoint> {
    let order = by_confidence(records);
    fractions
        .iter()
        .map(|&fraction| {
            let count = count_for(fraction, records.len());
            let (cer, wer) = score(order[..count].iter().map(|&i| &records[i]));
            FractionPoint {
                fraction,
                count,
                cer,
                wer,
            }
        })
        .collect()
}

/// Error rates over the `ceil(f * n)` least confident samples.
pub fn least_confident_error(records: &[SampleRecord], fraction: f64) -> FractionPoint {
    let order = by_confidence(records);
    let count = count_for(fraction, records.len());
    let (cer, wer) = score(order[order.len() - count..].iter().map(|&i| &records[i]));
    FractionPoint {
        fraction,
        count,
        cer,
        wer,
    }
}

pub fn fraction_curve_csv(points: &[FractionPoint]) -> String {
    let mut out = String::from("fraction,count,cer,wer\n");
    for p in points {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", p.fraction, p.count, p.cer, p.wer);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` is the run without selection.
    pub tau: Option<f64>,
    pub cer: Option<f64>,
    pub wer: Option<f64>,
    pub diverged: bool,
}

/// Runs `runner` once per entry of `taus` (`None` meaning no selection) and
/// tabulates the final error rates. Diverged runs are kept as rows.
pub fn threshold_sweep<F>(taus: &[Option<f64>], mut runner: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(Option<f64>) -> Result<(f64, f64)>,
{
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let row = match runner(tau) {
            Ok((cer, wer)) => SweepRow {
                tau,
                cer: Some(cer),
                wer: Some(wer),
                diverged: false,
            },
            Err(Error::Divergence { .. }) => SweepRow {
                tau,
                cer: None,
                wer: None,
                diverged: true,
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Columns: `tau` (`none` for the baseline), `cer`, `wer`, `status`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau,cer,wer,status\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let tau = r.tau.map(|t| t.to_string()).unwrap_or_else(|| "none".into());
        let status = if r.diverged { "diverged" } else { "ok" };
        let _ = writeln!(out, "{tau},{},{},{status}", opt(r.cer), opt(r.wer));
    }
    out
}
