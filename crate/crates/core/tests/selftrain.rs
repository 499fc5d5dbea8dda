mod common;

use common::{noise_image, rng, tiny_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selftrain::augment::{self, AugmentationPolicy};
use selftrain::confidence::{PseudoLabeledSample, SelectionPolicy};
use selftrain::rng::derive_rng;
use selftrain::selftrain::*;
use selftrain::synth::Dataset;
use selftrain::{Error, ModelState};

fn tiny_data(seed: u64, n: usize) -> Dataset {
    let mut r = rng(seed);
    let images = (0..n).map(|_| {
        let w = r.random_range(24..72);
        noise_image(32, w, &mut r)
    });
    Dataset::new(images.collect(), tiny_config().charset, "target").unwrap()
}

fn pseudo(index: usize, label: &str) -> PseudoLabeledSample {
    PseudoLabeledSample {
        index,
        pseudo_label: label.into(),
        confidence: 0.5,
        cycle_predicted: 0,
    }
}

#[test]
fn consistency_loss_is_the_sum_of_view_losses() {
    let views = ViewPair::default();
    let labels = ["", "a", "bc", "cab", "ccc"];
    for trial in 0..100u64 {
        let state = ModelState::new(tiny_config(), trial).unwrap();
        let data = tiny_data(trial, 4);
        let mut r = rng(trial + 1000);
        let size = r.random_range(1..=4);
        let batch: Vec<_> = (0..size).map(|i| pseudo(i, labels[r.random_range(0..labels.len())])).collect();

        let mut loss_rng = ChaCha8Rng::seed_from_u64(trial);
        let total = consistency_batch_loss(&state, &data.images, &batch, &views, &mut loss_rng).unwrap();

        // Rebuild each view on its own and score it separately.
        let seed: u64 = ChaCha8Rng::seed_from_u64(trial).random();
        let eps = state.config.label_smoothing;
        let mut sum = 0.0;
        for (i, s) in batch.iter().enumerate() {
            for (v, policy) in [&views.first, &views.second].into_iter().enumerate() {
                let view = augment::apply(policy, &data.images[s.index], &mut derive_rng(seed, &[i as u64, v as u64]));
                sum += state.recognition_loss(&view, &s.pseudo_label, eps).unwrap();
            }
        }
        assert!((total - sum).abs() < 1e-6, "trial {trial}: {total} vs {sum}");
    }
}

#[test]
fn identical_views_double_the_loss() {
    let state = ModelState::new(tiny_config(), 3).unwrap();
    let data = tiny_data(3, 3);
    let batch = vec![pseudo(0, "ab"), pseudo(2, "c")];
    let same = ViewPair {
        first: AugmentationPolicy::identity(),
        second: AugmentationPolicy::identity(),
    };
    let total = consistency_batch_loss(&state, &data.images, &batch, &same, &mut rng(0)).unwrap();
    let eps = state.config.label_smoothing;
    let single: f64 = batch
        .iter()
        .map(|s| state.recognition_loss(&data.images[s.index], &s.pseudo_label, eps).unwrap())
        .sum();
    assert!((total - 2.0 * single).abs() < 1e-12);
}

fn small_adapt(cycles: usize, selection: SelectionPolicy) -> AdaptationConfig {
    AdaptationConfig {
        cycles,
        selection,
        max_starved_cycles: 10,
        ..Default::default()
    }
}

/// A tiny model with a short supervised warm-up, so its greedy decodes
/// terminate and become usable pseudo-labels.
fn tiny_state(seed: u64) -> ModelState {
    let mut cfg = tiny_config();
    cfg.batch_size = 2;
    cfg.learning_rate = 1e-2;
    let mut state = ModelState::new(cfg, seed).unwrap();
    let data = tiny_data(seed + 500, 3);
    let batch: Vec<_> = data.images.iter().zip(["ab", "c", "bca"]).collect();
    for _ in 0..40 {
        state.train_step(&batch).unwrap();
    }
    state
}

#[test]
fn zero_cycles_change_nothing() {
    let mut state = tiny_state(1);
    let before = state.clone();
    let reports = adapt(&mut state, &tiny_data(1, 3), &small_adapt(0, SelectionPolicy::None), AdaptOptions::default()).unwrap();
    assert!(reports.is_empty());
    assert_eq!(state, before);
}

#[test]
fn empty_selection_skips_training() {
    let mut state = tiny_state(2);
    let params = state.params.clone();
    let cfg = small_adapt(2, SelectionPolicy::Threshold { tau: 0.999 });
    let reports = adapt(&mut state, &tiny_data(2, 4), &cfg, AdaptOptions::default()).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.num_selected, 0);
        assert_eq!(r.steps, 0);
        assert_eq!(r.train_loss, None);
    }
    assert_eq!(state.params, params);
    assert_eq!(state.cycle, 2);
}

#[test]
fn starvation_trips_the_divergence_guard() {
    let mut state = tiny_state(2);
    let cfg = AdaptationConfig {
        max_starved_cycles: 2,
        ..small_adapt(5, SelectionPolicy::Threshold { tau: 0.999 })
    };
    let err = adapt(&mut state, &tiny_data(2, 4), &cfg, AdaptOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Divergence { cycle: 1, .. }), "{err:?}");
}

#[test]
fn training_on_pseudo_labels_updates_the_model() {
    let mut state = tiny_state(4);
    let params = state.params.clone();
    let data = tiny_data(4, 5);
    let reports = adapt(&mut state, &data, &small_adapt(2, SelectionPolicy::None), AdaptOptions::default()).unwrap();
    assert_ne!(state.params, params);
    assert!(reports.iter().any(|r| r.num_selected > 0));
    for r in &reports {
        assert!(r.num_selected <= data.len());
        assert_eq!(r.num_candidates, data.len());
        assert!(r.train_loss.is_some_and(f64::is_finite) || r.num_selected == 0);
    }
}

#[test]
fn interrupted_run_resumes_to_identical_results() {
    let data = tiny_data(7, 6);
    let eval = {
        let mut d = tiny_data(8, 3);
        for (im, t) in d.images.iter_mut().zip(["ab", "c", "bca"]) {
            im.transcription = Some(t.into());
        }
        d
    };
    let cfg = small_adapt(4, SelectionPolicy::None);

    let full_dir = tempfile::tempdir().unwrap();
    let (full, _) = adapt_in_dir(tiny_state(9), &data, &cfg, Some(&eval), full_dir.path(), false).unwrap();

    let cut_dir = tempfile::tempdir().unwrap();
    let mut state = tiny_state(9);
    let err = adapt(
        &mut state,
        &data,
        &cfg,
        AdaptOptions {
            eval: Some(&eval),
            run: Some(RunFiles::new(cut_dir.path())),
            interrupt: Some(Interrupt { cycle: 2, batches: 1 }),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Interrupted { cycle: 2 }));
    assert_eq!(RunFiles::new(cut_dir.path()).read_reports().unwrap().len(), 2);

    let (resumed, _) = adapt_in_dir(tiny_state(0), &data, &cfg, Some(&eval), cut_dir.path(), true).unwrap();
    assert_eq!(resumed, full);
    let read = |d: &std::path::Path| std::fs::read(RunFiles::new(d).reports()).unwrap();
    assert_eq!(String::from_utf8(read(full_dir.path())).unwrap(), String::from_utf8(read(cut_dir.path())).unwrap());
    assert_eq!(
        std::fs::read(RunFiles::new(full_dir.path()).last_checkpoint()).unwrap(),
        std::fs::read(RunFiles::new(cut_dir.path()).last_checkpoint()).unwrap()
    );
}

#[test]
fn pretraining_reduces_loss_on_a_tiny_set() {
    let mut data = tiny_data(11, 4);
    for (im, t) in data.images.iter_mut().zip(["a", "bb", "cab", "ca"]) {
        im.transcription = Some(t.into());
    }
    let mut state = tiny_state(11);
    let report = pretrain_synthetic(
        &mut state,
        &data,
        &PretrainConfig {
            epochs: 60,
            augmentation: AugmentationPolicy::identity(),
        },
    )
    .unwrap();
    assert_eq!(report.steps, 120);
    assert!(report.epoch_losses.last().unwrap() < &(report.epoch_losses[0] - 0.2));
    assert!(pretrain_synthetic(&mut state, &data.unlabeled(), &PretrainConfig::default()).is_err());
}
