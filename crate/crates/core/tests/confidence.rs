mod common;

use common::rng;
use ndarray::{arr1, Array1};
use proptest::prelude::*;
use selftrain::confidence::*;
use selftrain::Prediction;

fn prediction(steps: Vec<Array1<f64>>, ended: bool) -> Prediction {
    Prediction {
        char_ids: steps.iter().map(|d| selftrain::model::decoder::argmax(d.view())).collect(),
        text: String::new(),
        attention_masses: vec![arr1(&[1.0]); steps.len()],
        step_dists: steps,
        ended,
    }
}

#[test]
fn hand_computed_confidences() {
    let p = prediction(
        vec![arr1(&[0.5, 0.3, 0.2]), arr1(&[0.1, 0.6, 0.3]), arr1(&[0.2, 0.1, 0.7])],
        true,
    );
    assert!((word_confidence(&p, true).unwrap() - 0.6).abs() < 1e-15);
    assert!((word_confidence(&p, false).unwrap() - 0.55).abs() < 1e-15);
    let uniform = prediction(vec![Array1::from_elem(10, 0.1); 4], false);
    assert!((word_confidence(&uniform, true).unwrap() - 0.1).abs() < 1e-15);
    let single = prediction(vec![arr1(&[0.93, 0.07])], true);
    assert_eq!(word_confidence(&single, false).unwrap(), 0.93);
}

#[test]
fn selection_examples() {
    let samples: Vec<_> = [0.5, 0.55, 0.9]
        .iter()
        .enumerate()
        .map(|(i, &c)| sample(i, c))
        .collect();
    let kept = select(&samples, &SelectionPolicy::Threshold { tau: 0.55 }, 0, &mut rng(0)).unwrap();
    assert_eq!(indices(&kept), vec![1, 2]);

    let five: Vec<_> = [0.2, 0.9, 0.4, 0.8, 0.7].iter().enumerate().map(|(i, &c)| sample(i, c)).collect();
    let top = SelectionPolicy::TopFraction {
        schedule: Schedule::from_stages(&[(1, 0.6)]),
    };
    let mut got = indices(&select(&five, &top, 0, &mut rng(0)).unwrap());
    got.sort();
    assert_eq!(got, vec![1, 3, 4]);

    let all = SelectionPolicy::RandomFraction {
        schedule: Schedule::from_stages(&[(1, 1.0)]),
    };
    for seed in 0..5 {
        let mut got = indices(&select(&five, &all, 0, &mut rng(seed)).unwrap());
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }
}

fn sample(index: usize, confidence: f64) -> PseudoLabeledSample {
    PseudoLabeledSample {
        index,
        pseudo_label: "x".into(),
        confidence,
        cycle_predicted: 0,
    }
}

fn indices(s: &[PseudoLabeledSample]) -> Vec<usize> {
    s.iter().map(|x| x.index).collect()
}

fn samples_strategy() -> impl Strategy<Value = Vec<PseudoLabeledSample>> {
    // A coarse grid makes ties and exact boundary hits common.
    prop::collection::vec(0u32..=20, 1..40)
        .prop_map(|cs| cs.into_iter().enumerate().map(|(i, c)| sample(i, c as f64 / 20.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn thresholds_nest(samples in samples_strategy(), a in 1u32..20, b in 1u32..20) {
        let (lo, hi) = (a.min(b) as f64 / 20.0, a.max(b) as f64 / 20.0);
        let loose = indices(&select(&samples, &SelectionPolicy::Threshold { tau: lo }, 0, &mut rng(0)).unwrap());
        let strict = indices(&select(&samples, &SelectionPolicy::Threshold { tau: hi }, 0, &mut rng(0)).unwrap());
        prop_assert!(strict.iter().all(|i| loose.contains(i)));
        let expected: Vec<usize> = samples.iter().filter(|s| s.confidence >= hi).map(|s| s.index).collect();
        prop_assert_eq!(strict, expected);
    }

    #[test]
    fn threshold_is_idempotent(samples in samples_strategy(), t in 1u32..20) {
        let policy = SelectionPolicy::Threshold { tau: t as f64 / 20.0 };
        let once = select(&samples, &policy, 0, &mut rng(1)).unwrap();
        let twice = if once.is_empty() { Vec::new() } else { select(&once, &policy, 0, &mut rng(2)).unwrap() };
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn full_top_fraction_keeps_the_multiset(samples in samples_strategy()) {
        let policy = SelectionPolicy::TopFraction { schedule: Schedule::from_stages(&[(1, 1.0)]) };
        let mut got = indices(&select(&samples, &policy, 0, &mut rng(0)).unwrap());
        got.sort();
        prop_assert_eq!(got, (0..samples.len()).collect::<Vec<_>>());
    }

    #[test]
    fn top_fraction_takes_the_most_confident(samples in samples_strategy(), f in 1u32..=10) {
        let f = f as f64 / 10.0;
        let policy = SelectionPolicy::TopFraction { schedule: Schedule::from_stages(&[(1, f)]) };
        let got = select(&samples, &policy, 0, &mut rng(0)).unwrap();
        prop_assert_eq!(got.len(), (f * samples.len() as f64).ceil() as usize);
        let worst_kept = got.iter().map(|s| s.confidence).fold(f64::INFINITY, f64::min);
        let kept = indices(&got);
        for s in samples.iter().filter(|s| !kept.contains(&s.index)) {
            prop_assert!(s.confidence <= worst_kept);
        }
    }

    #[test]
    fn confidence_ignores_order_of_non_max_entries(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 2..8), 1..6), seed in 0u64..100) {
        use rand::seq::SliceRandom;
        let mut r = rng(seed);
        let steps: Vec<Array1<f64>> = raw.iter().map(|v| { let a = Array1::from(v.clone()); let s = a.sum(); a / s }).collect();
        let shuffled: Vec<Array1<f64>> = steps.iter().map(|d| {
            let m = selftrain::model::decoder::argmax(d.view());
            let mut rest: Vec<f64> = d.iter().enumerate().filter(|(i, _)| *i != m).map(|(_, v)| *v).collect();
            rest.shuffle(&mut r);
            rest.insert(m, d[m]);
            Array1::from(rest)
        }).collect();
        let c = word_confidence(&prediction(steps.clone(), false), true).unwrap();
        prop_assert_eq!(c, word_confidence(&prediction(shuffled, false), true).unwrap());
        let widest = steps.iter().map(|d| d.len()).max().unwrap() as f64;
        prop_assert!(c >= 1.0 / widest - 1e-12 && c <= 1.0);
    }
}

#[test]
fn schedule_covers_cycles_in_order() {
    let s = Schedule::default();
    assert_eq!(s.fraction(0), Some(0.6));
    assert_eq!(s.fraction(9), Some(0.6));
    assert_eq!(s.fraction(10), Some(0.8));
    assert_eq!(s.fraction(30), Some(1.0));
    assert_eq!(s.fraction(49), Some(1.0));
    let small = Schedule::scaled(15);
    let fractions: Vec<f64> = (0..15).map(|c| small.fraction(c).unwrap()).collect();
    assert_eq!(fractions.iter().filter(|f| **f == 0.6).count(), 3);
    assert_eq!(fractions.iter().filter(|f| **f == 0.8).count(), 6);
    assert!(fractions.windows(2).all(|w| w[0] <= w[1]));
}
