//! Word-level confidence and pseudo-label selection strategies.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prediction;

/// Mean over decode steps of the largest class probability.
///
/// With `include_eos` false, a trailing end-of-sequence step is left out of
/// the mean (unless it is the only step).
pub fn word_confidence(pred: &Prediction, include_eos: bool) -> Result<f64> {
    let mut steps = pred.step_dists.len();
    if steps == 0 {
        return Err(Error::Empty("prediction has no decode steps".into()));
    }
    if !include_eos && pred.ended && steps > 1 {
        steps -= 1;
    }
    let total: f64 = pred.step_dists[..steps]
        .iter()
        .map(|d| d.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .sum();
    Ok(total / steps as f64)
}

/// An unlabeled image (by dataset index) with its predicted transcription.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSample {
    pub index: usize,
    pub pseudo_label: String,
    pub confidence: f64,
    pub cycle_predicted: usize,
}

/// Fraction applied to the cycles `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    pub start: usize,
    pub end: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule(pub Vec<ScheduleStage>);

impl Default for Schedule {
    /// 60% for cycles 0-9, 80% for 10-29, 100% for 30-49.
    fn default() -> Self {
        Self::from_stages(&[(10, 0.6), (20, 0.8), (20, 1.0)])
    }
}

impl Schedule {
    /// Builds consecutive stages from `(length, fraction)` pairs.
    pub fn from_stages(stages: &[(usize, f64)]) -> Self {
        let mut start = 0;
        Self(
            stages
                .iter()
                .map(|&(len, fraction)| {
                    let s = ScheduleStage {
                        start,
                        end: start + len,
                        fraction,
                    };
                    start += len;
                    s
                })
                .collect(),
        )
    }

    /// Default stage proportions (1:2:2) stretched over `cycles` cycles.
    pub fn scaled(cycles: usize) -> Self {
        let first = (cycles as f64 / 5.0).round() as usize;
        let second = ((cycles - first) as f64 / 2.0).round() as usize;
        Self::from_stages(&[(first, 0.6), (second, 0.8), (cycles - first - second, 1.0)])
    }

    pub fn fraction(&self, cycle: usize) -> Option<f64> {
        self.0
            .iter()
            .find(|s| (s.start..s.end).contains(&cycle))
            .map(|s| s.fraction)
    }

    /// Stages must be contiguous from cycle 0 and cover `cycles` cycles.
    pub fn validate(&self, field: &str, cycles: usize) -> Result<()> {
        let mut next = 0;
        for s in &self.0 {
            if s.start != next || s.end < s.start {
                return Err(Error::config(field, format!("stage starting at {} is not contiguous", s.start)));
            }
            if !(s.fraction > 0.0 && s.fraction <= 1.0) {
                return Err(Error::config(field, format!("fraction {} outside (0, 1]", s.fraction)));
            }
            next = s.end;
        }
        if next < cycles {
            return Err(Error::config(field, format!("stages cover {next} cycles but {cycles} are configured")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionPolicy {
    None,
    Threshold { tau: f64 },
    TopFraction { schedule: Schedule },
    RandomFraction { schedule: Schedule },
}

impl SelectionPolicy {
    pub fn validate(&self, field: &str, cycles: usize) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Threshold { tau } => {
                if *tau > 0.0 && *tau < 1.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("{field}.tau"), "must lie in (0, 1)"))
                }
            }
            Self::TopFraction { schedule } | Self::RandomFraction { schedule } => {
                schedule.validate(&format!("{field}.schedule"), cycles)
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Threshold { tau } => format!("threshold({tau})"),
            Self::TopFraction { .. } => "top_fraction".into(),
            Self::RandomFraction { .. } => "random_fraction".into(),
        }
    }
}

fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

/// Applies `policy` for `cycle`. The result keeps the input order for the
/// none, threshold and random policies; top-fraction returns samples by
/// descending confidence with ties in input order.
pub fn select<R: Rng + ?Sized>(
    samples: &[PseudoLabeledSample],
    policy: &SelectionPolicy,
    cycle: usize,
    rng: &mut R,
) -> Result<Vec<PseudoLabeledSample>> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to select from".into()));
    }
    let fraction_for = |schedule: &Schedule| {
        schedule
            .fraction(cycle)
            .ok_or_else(|| Error::config("adapt.selection.schedule", format!("no stage covers cycle {cycle}")))
    };
    Ok(match policy {
        SelectionPolicy::None => samples.to_vec(),
        SelectionPolicy::Threshold { tau } => samples.iter().filter(|s| s.confidence >= *tau).cloned().collect(),
        SelectionPolicy::TopFraction { schedule } => {
            let k = fraction_count(fraction_for(schedule)?, samples.len());
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.sort_by(|&a, &b| {
                samples[b]
                    .confidence
                    .partial_cmp(&samples[a].confidence)
                    .unwrap_or(Ordering::Equal)
            });
            order.into_iter().take(k).map(|i| samples[i].clone()).collect()
        }
        SelectionPolicy::RandomFraction { schedule } => {
            let k = fraction_count(fraction_for(schedule)?, samples.len());
            let mut picked = index::sample(rng, samples.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| samples[i].clone()).collect()
        }
    })
}

/// Counts and confidence deciles of one selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub num_candidates: usize,
    pub num_selected: usize,
    /// Confidence quantiles at 0%, 10%, ..., 100% over all candidates.
    pub confidence_deciles: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn sorted_confidences(samples: &[PseudoLabeledSample]) -> Vec<f64> {
    let mut c: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    c.sort_by(f64::total_cmp);
    c
}

pub fn selection_report(candidates: &[PseudoLabeledSample], selected: usize) -> SelectionReport {
    let sorted = sorted_confidences(candidates);
    SelectionReport {
        num_candidates: candidates.len(),
        num_selected: selected,
        confidence_deciles: (0..=10).map(|i| quantile(&sorted, i as f64 / 10.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pred(maxes: &[f64], ended: bool) -> Prediction {
        Prediction {
            char_ids: vec![0; maxes.len()],
            text: String::new(),
            step_dists: maxes
                .iter()
                .map(|&m| Array1::from(vec![m, 1.0 - m]))
                .collect(),
            attention_masses: vec![],
            ended,
        }
    }

    fn samples(conf: &[f64]) -> Vec<PseudoLabeledSample> {
        conf.iter()
            .enumerate()
            .map(|(i, &c)| PseudoLabeledSample {
                index: i,
                pseudo_label: "a".into(),
                confidence: c,
                cycle_predicted: 0,
            })
            .collect()
    }

    #[test]
    fn mean_of_step_maxima() {
        let c = word_confidence(&pred(&[0.5, 0.6, 0.7], true), true).unwrap();
        assert!((c - 0.6).abs() < 1e-15);
        let c = word_confidence(&pred(&[0.5, 0.6, 0.7], true), false).unwrap();
        assert!((c - 0.55).abs() < 1e-15);
        assert_eq!(word_confidence(&pred(&[0.93], true), true).unwrap(), 0.93);
        assert!(word_confidence(&pred(&[], false), true).is_err());
    }

    #[test]
    fn uniform_steps_give_inverse_k() {
        let mut p = pred(&[], false);
        p.step_dists = vec![Array1::from_elem(10, 0.1); 4];
        assert!((word_confidence(&p, true).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn threshold_keeps_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = samples(&[0.5, 0.55, 0.9]);
        let out = select(&s, &SelectionPolicy::Threshold { tau: 0.55 }, 0, &mut rng).unwrap();
        assert_eq!(out.iter().map(|s| s.index).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn top_fraction_rounds_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = samples(&[0.2, 0.9, 0.5, 0.7, 0.1]);
        let policy = SelectionPolicy::TopFraction {
            schedule: Schedule::from_stages(&[(1, 0.6)]),
        };
        let out = select(&s, &policy, 0, &mut rng).unwrap();
        assert_eq!(out.iter().map(|s| s.index).collect::<Vec<_>>(), vec![1, 3, 2]);
    }

    #[test]
    fn default_schedule_matches_stages() {
        let s = Schedule::default();
        assert_eq!(s.fraction(0), Some(0.6));
        assert_eq!(s.fraction(9), Some(0.6));
        assert_eq!(s.fraction(10), Some(0.8));
        assert_eq!(s.fraction(30), Some(1.0));
        assert_eq!(s.fraction(49), Some(1.0));
        assert_eq!(s.fraction(50), None);
        s.validate("s", 50).unwrap();
        assert!(s.validate("s", 51).is_err());
        let scaled = Schedule::scaled(15);
        scaled.validate("s", 15).unwrap();
        assert_eq!(scaled.fraction(2), Some(0.6));
        assert_eq!(scaled.fraction(3), Some(0.8));
        assert_eq!(scaled.fraction(14), Some(1.0));
    }

    #[test]
    fn deciles_span_range() {
        let s = samples(&[0.3, 0.1, 0.2]);
        let r = selection_report(&s, 2);
        assert_eq!(r.confidence_deciles.len(), 11);
        assert_eq!(r.confidence_deciles[0], 0.1);
        assert_eq!(r.confidence_deciles[10], 0.3);
        assert!((r.confidence_deciles[5] - 0.2).abs() < 1e-15);
    }
}
