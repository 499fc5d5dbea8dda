#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selftrain::model::RecognizerConfig;
use selftrain::raster::{Provenance, WordImage};
use selftrain::Charset;

/// A recognizer small enough for finite differences: K = 4, hidden sizes ≤ 8.
pub fn tiny_config() -> RecognizerConfig {
    RecognizerConfig {
        charset: Charset::new("abc").unwrap(),
        compact_channels: vec![2, 3, 3, 4, 4],
        height: 32,
        encoder_hidden: 5,
        decoder_hidden: 6,
        attention_dim: 4,
        embed_dim: 6,
        attention_window: 2,
        max_decode_len: 6,
        ..Default::default()
    }
}

pub fn external() -> Provenance {
    Provenance::External {
        manifest: "fixture".into(),
        line: 0,
    }
}

pub fn noise_image(height: usize, width: usize, rng: &mut impl Rng) -> WordImage {
    WordImage {
        pixels: Array2::from_shape_fn((height, width), |_| rng.random::<f64>()),
        transcription: None,
        provenance: external(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
