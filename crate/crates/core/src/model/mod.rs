//! Sequence-to-sequence word recognizer.
//!
//! A convolutional backbone turns the image into a feature map whose columns
//! form the input sequence of a two-layer bidirectional GRU encoder. An
//! attention decoder ([`decoder`]) emits one distribution over the charset
//! (plus end-of-sequence) per step. Everything is computed in `f64` with
//! hand-written backward passes; one sample at a time, so batches need no
//! padding or masking.

mod checkpoint;
pub mod cnn;
pub mod decoder;
pub mod gru;
pub mod params;

pub use checkpoint::{config_hash, load_checkpoint, meta_path, read_meta, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

use ndarray::{Array1, Array2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charset::Charset;
use crate::error::{Error, Result};
use crate::raster::WordImage;
use cnn::{Backbone, BackboneCache, FeatureMap};
use decoder::{argmax, AttentionDecoder};
use gru::{BiGru, BiGruCache};
use params::{Adam, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Five single-convolution blocks, horizontal stride 8.
    Compact,
    /// VGG-19 convolution layout (16 layers), horizontal stride 8.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerConfig {
    pub charset: Charset,
    pub backbone: BackboneKind,
    /// Output channels of the five compact blocks.
    pub compact_channels: Vec<usize>,
    /// Input image height.
    pub height: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub embed_dim: usize,
    /// Half-width of the local attention window, in encoder positions.
    pub attention_window: usize,
    pub max_decode_len: usize,
    pub label_smoothing: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            charset: Charset::english(),
            backbone: BackboneKind::Compact,
            compact_channels: vec![16, 32, 48, 64, 64],
            height: 64,
            encoder_hidden: 64,
            decoder_hidden: 64,
            attention_dim: 64,
            embed_dim: 32,
            attention_window: 8,
            max_decode_len: 32,
            label_smoothing: 0.4,
            learning_rate: 2e-4,
            batch_size: 32,
            grad_clip: Some(5.0),
        }
    }
}

/// Vertical pooling of the five blocks divides the height by this.
pub const HEIGHT_REDUCTION: usize = 32;
const POOLS: [(usize, usize); 5] = [(2, 2), (2, 2), (2, 2), (2, 1), (2, 1)];

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("model.label_smoothing", "must lie in [0, 1)"));
        }
        if self.max_decode_len < 1 {
            return Err(Error::config("model.max_decode_len", "must be at least 1"));
        }
        for (name, v) in [
            ("model.encoder_hidden", self.encoder_hidden),
            ("model.decoder_hidden", self.decoder_hidden),
            ("model.attention_dim", self.attention_dim),
            ("model.embed_dim", self.embed_dim),
            ("model.batch_size", self.batch_size),
        ] {
            if v < 1 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.height < HEIGHT_REDUCTION || self.height % HEIGHT_REDUCTION != 0 {
            return Err(Error::config(
                "model.height",
                format!("must be a positive multiple of {HEIGHT_REDUCTION}"),
            ));
        }
        if self.backbone == BackboneKind::Compact && self.compact_channels.len() != POOLS.len() {
            return Err(Error::config("model.compact_channels", "expected five channel counts"));
        }
        if self.compact_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("model.compact_channels", "channel counts must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("model.learning_rate", "must be nonnegative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("model.grad_clip", "must be positive"));
            }
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<(Vec<usize>, (usize, usize))> {
        match self.backbone {
            BackboneKind::Compact => self
                .compact_channels
                .iter()
                .zip(POOLS)
                .map(|(&c, p)| (vec![c], p))
                .collect(),
            BackboneKind::Full => vec![
                (vec![64, 64], POOLS[0]),
                (vec![128, 128], POOLS[1]),
                (vec![256; 4], POOLS[2]),
                (vec![512; 4], POOLS[3]),
                (vec![512; 4], POOLS[4]),
            ],
        }
    }
}

/// The architecture: parameter handles only, no values.
#[derive(Debug, Clone)]
pub struct Network {
    pub layout: ParamLayout,
    backbone: Backbone,
    enc1: BiGru,
    enc2: BiGru,
    pub decoder: AttentionDecoder,
}

impl Network {
    pub fn new(config: &RecognizerConfig) -> Self {
        let mut layout = ParamLayout::default();
        let backbone = Backbone::new(&mut layout, &config.blocks(), config.height);
        let enc1 = BiGru::new(&mut layout, "enc.0", backbone.feature_dim(), config.encoder_hidden);
        let enc2 = BiGru::new(&mut layout, "enc.1", 2 * config.encoder_hidden, config.encoder_hidden);
        let decoder = AttentionDecoder::new(
            &mut layout,
            config.charset.vocab_size(),
            config.charset.num_classes(),
            2 * config.encoder_hidden,
            config.decoder_hidden,
            config.embed_dim,
            config.attention_dim,
            config.attention_window,
        );
        Self {
            layout,
            backbone,
            enc1,
            enc2,
            decoder,
        }
    }

    /// Horizontal downsampling factor of the backbone.
    pub fn stride(&self) -> usize {
        self.backbone.stride
    }
}

/// Encoder feature sequence `h_0 .. h_{N-1}`, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub features: Array2<f64>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Greedy decoding result.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Emitted ids, including a final end-of-sequence id when one was produced.
    pub char_ids: Vec<usize>,
    pub text: String,
    /// Distribution over `charset.num_classes()` classes per emitted step.
    pub step_dists: Vec<Array1<f64>>,
    /// Attention weights over encoder positions per emitted step.
    pub attention_masses: Vec<Array1<f64>>,
    pub ended: bool,
}

struct EncoderCache {
    backbone: BackboneCache,
    map_channels: usize,
    map_h: usize,
    map_w: usize,
    g1: BiGruCache,
    g2: BiGruCache,
}

/// Learnable parameters, optimizer state, counters and generator state.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: RecognizerConfig,
    pub params: Vec<f64>,
    pub optimizer: Adam,
    /// Completed self-training cycles.
    pub cycle: u64,
    pub rng: ChaCha8Rng,
    net: Network,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.optimizer == other.optimizer
            && self.cycle == other.cycle
            && self.rng == other.rng
    }
}

/// Zero-mean, unit-variance input normalization. Polarity is kept.
fn standardize(pixels: &Array2<f64>) -> Array2<f64> {
    let mean = pixels.mean().unwrap_or(0.0);
    let var = pixels.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
    let std = var.sqrt().max(1e-3);
    pixels.mapv(|v| (v - mean) / std)
}

/// Smoothed target distribution: `1 - eps` on the true class and
/// `eps / (K - 1)` on every other class.
pub fn smoothed_target(classes: usize, truth: usize, eps: f64) -> Array1<f64> {
    let mut q = Array1::from_elem(classes, eps / (classes - 1) as f64);
    q[truth] = 1.0 - eps;
    q
}

/// Entropy of the smoothed target, the lower bound of the recognition loss.
pub fn smoothed_entropy(classes: usize, eps: f64) -> f64 {
    let q = smoothed_target(classes, 0, eps);
    -q.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn log_softmax(x: &Array1<f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = x.mapv(|v| (v - m).exp()).sum().ln() + m;
    x.mapv(|v| v - lse)
}

impl ModelState {
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = Network::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net.layout.initialize(&mut rng);
        let optimizer = Adam::new(params.len());
        Ok(Self {
            config,
            params,
            optimizer,
            cycle: 0,
            rng,
            net,
        })
    }

    pub(crate) fn from_parts(
        config: RecognizerConfig,
        params: Vec<f64>,
        optimizer: Adam,
        cycle: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let net = Network::new(&config);
        if params.len() != net.layout.total() {
            return Err(Error::Empty(format!(
                "parameter count {} does not match the architecture ({})",
                params.len(),
                net.layout.total()
            )));
        }
        Ok(Self {
            config,
            params,
            optimizer,
            cycle,
            rng,
            net,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn charset(&self) -> &Charset {
        &self.config.charset
    }

    /// Mutable view of a named parameter tensor.
    pub fn param_mut(&mut self, name: &str) -> Option<ArrayViewMut2<'_, f64>> {
        let mat = self.net.layout.get(name)?;
        Some(mat.view_mut(&mut self.params))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.net.layout.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Smallest image width the backbone accepts.
    pub fn min_width(&self) -> usize {
        self.net.stride()
    }

    fn check_image(&self, image: &WordImage) -> Result<()> {
        if image.height() != self.config.height {
            return Err(Error::Empty(format!(
                "image height {} does not match model height {}",
                image.height(),
                self.config.height
            )));
        }
        if image.width() < self.min_width() {
            return Err(Error::TooNarrow {
                width: image.width(),
                minimum: self.min_width(),
            });
        }
        Ok(())
    }

    fn encode_cached(&self, params: &[f64], image: &WordImage) -> Result<(Array2<f64>, EncoderCache)> {
        self.check_image(image)?;
        let (h, w) = image.pixels.dim();
        let input = FeatureMap {
            data: standardize(&image.pixels)
                .into_shape_with_order((1, h * w))
                .expect("contiguous image"),
            h,
            w,
        };
        let (map, backbone) = self.net.backbone.forward(params, input);
        let xs = cnn::columns(&map);
        let (h1, g1) = self.net.enc1.forward(params, &xs);
        let (h2, g2) = self.net.enc2.forward(params, &h1);
        Ok((
            h2,
            EncoderCache {
                backbone,
                map_channels: map.data.nrows(),
                map_h: map.h,
                map_w: map.w,
                g1,
                g2,
            },
        ))
    }

    fn encode_backward(&self, params: &[f64], cache: EncoderCache, d_enc: &Array2<f64>, grad: &mut [f64]) {
        let d_h1 = self.net.enc2.backward(params, &cache.g2, d_enc, grad);
        let d_xs = self.net.enc1.backward(params, &cache.g1, &d_h1, grad);
        let d_map = cnn::uncolumns(&d_xs, cache.map_channels, cache.map_h, cache.map_w);
        self.net.backbone.backward(params, cache.backbone, d_map, grad);
    }

    pub fn encode(&self, image: &WordImage) -> Result<EncoderOutput> {
        let (features, _) = self.encode_cached(&self.params, image)?;
        Ok(EncoderOutput { features })
    }

    /// Emits the most probable class at every step until end-of-sequence or
    /// `max_decode_len` steps.
    pub fn decode_greedy(&self, enc: &EncoderOutput) -> Prediction {
        let dec = &self.net.decoder;
        let ctx = dec.context(&self.params, &enc.features);
        let eos = self.config.charset.eos();
        let mut token = self.config.charset.sos();
        let mut s = dec.initial_state();
        let mut centroid = 0.0;
        let mut pred = Prediction {
            char_ids: Vec::new(),
            text: String::new(),
            step_dists: Vec::new(),
            attention_masses: Vec::new(),
            ended: false,
        };
        for _ in 0..self.config.max_decode_len {
            let (out, _) = dec.step(&self.params, &ctx, token, &s, centroid);
            let id = argmax(out.probs.view());
            pred.char_ids.push(id);
            pred.step_dists.push(out.probs);
            pred.attention_masses.push(out.attention);
            if id == eos {
                pred.ended = true;
                break;
            }
            token = id;
            s = out.state;
            centroid = out.centroid;
        }
        pred.text = self.config.charset.decode(&pred.char_ids);
        pred
    }

    pub fn predict(&self, image: &WordImage) -> Result<Prediction> {
        Ok(self.decode_greedy(&self.encode(image)?))
    }

    fn target_ids(&self, target: &str) -> Result<Vec<usize>> {
        let mut ids = self.config.charset.encode(target)?;
        ids.push(self.config.charset.eos());
        if ids.len() > self.config.max_decode_len {
            return Err(Error::TargetTooLong {
                target: target.to_owned(),
                steps: ids.len(),
                max: self.config.max_decode_len,
            });
        }
        Ok(ids)
    }

    /// Teacher-forced loss for one sample; when `grad` is given, adds
    /// `scale * d(loss)/d(params)` into it.
    fn sample_loss(&self, params: &[f64], image: &WordImage, target: &str, eps: f64, grad: Option<(&mut [f64], f64)>) -> Result<f64> {
        let targets = self.target_ids(target)?;
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(self.config.charset.sos());
        inputs.extend_from_slice(&targets[..targets.len() - 1]);

        let (enc, cache) = self.encode_cached(params, image)?;
        let dec = &self.net.decoder;
        let ctx = dec.context(params, &enc);
        let (outs, caches) = dec.teacher_forced(params, &ctx, &inputs);

        let k = self.config.charset.num_classes();
        let steps = targets.len() as f64;
        let mut loss = 0.0;
        let mut d_logits = Vec::with_capacity(outs.len());
        for (out, &y) in outs.iter().zip(&targets) {
            let q = smoothed_target(k, y, eps);
            loss -= q.dot(&log_softmax(&out.logits));
            d_logits.push(&out.probs - &q);
        }
        loss /= steps;

        if let Some((grad, scale)) = grad {
            for d in &mut d_logits {
                *d *= scale / steps;
            }
            let d_enc = dec.backward(params, &ctx, &caches, &d_logits, grad);
            self.encode_backward(params, cache, &d_enc, grad);
        }
        Ok(loss)
    }

    /// Smoothed cross-entropy averaged over the target steps (end token included).
    pub fn recognition_loss(&self, image: &WordImage, target: &str, eps: f64) -> Result<f64> {
        self.sample_loss(&self.params, image, target, eps, None)
    }

    /// Loss at an arbitrary parameter vector; used for finite-difference checks.
    pub fn recognition_loss_at(&self, params: &[f64], image: &WordImage, target: &str, eps: f64) -> Result<f64> {
        self.sample_loss(params, image, target, eps, None)
    }

    /// Loss and its full parameter gradient for one sample.
    pub fn loss_and_gradient(&self, image: &WordImage, target: &str, eps: f64) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.sample_loss(&self.params, image, target, eps, Some((&mut grad, 1.0)))?;
        Ok((loss, grad))
    }

    /// Mean loss over `batch` and the gradient of that mean.
    pub fn batch_loss_and_gradient(&self, batch: &[(&WordImage, &str)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("empty training batch".into()));
        }
        let eps = self.config.label_smoothing;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for (image, target) in batch {
            total += self.sample_loss(&self.params, image, target, eps, Some((&mut grad, scale)))?;
        }
        Ok((total * scale, grad))
    }

    /// One optimizer step on the mean batch loss. Returns that loss.
    pub fn train_step(&mut self, batch: &[(&WordImage, &str)]) -> Result<f64> {
        self.train_step_at(batch, self.config.learning_rate)
    }

    /// [`ModelState::train_step`] with an explicit learning rate.
    pub fn train_step_at(&mut self, batch: &[(&WordImage, &str)], learning_rate: f64) -> Result<f64> {
        let (loss, mut grad) = self.batch_loss_and_gradient(batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                loss,
                batch_size: batch.len(),
                step: self.optimizer.t,
            });
        }
        if let Some(max_norm) = self.config.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                let k = max_norm / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        self.optimizer.step(&mut self.params, &grad, learning_rate);
        Ok(loss)
    }
}
