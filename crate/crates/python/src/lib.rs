//! Python bindings: scoring, confidence, text generation, rendering and a
//! recognizer handle.

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use selftrain::confidence;
use selftrain::evaluation::{self, SampleRecord};
use selftrain::model::{load_checkpoint, save_checkpoint};
use selftrain::raster::{Provenance, WordImage};
use selftrain::synth::{self, GlyphSource, RenderRanges};
use selftrain::textcorpus::{self, CorpusMode, CorpusSpec};
use selftrain::{Charset, ModelState, Prediction, RecognizerConfig};

fn py_err(e: selftrain::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("pixels must be a nonempty rectangular list of rows"));
    }
    Ok(Array2::from_shape_vec((h, w), rows.concat()).expect("shape checked"))
}

/// Levenshtein distance between two strings.
#[pyfunction]
fn edit_distance(a: &str, b: &str) -> usize {
    evaluation::edit_distance(a, b)
}

/// Micro-averaged CER and exact-match WER of paired references and hypotheses.
#[pyfunction]
fn cer_wer(references: Vec<String>, hypotheses: Vec<String>) -> PyResult<(f64, f64)> {
    if references.len() != hypotheses.len() {
        return Err(PyValueError::new_err("references and hypotheses differ in length"));
    }
    let records: Vec<SampleRecord> = references
        .iter()
        .zip(&hypotheses)
        .map(|(r, h)| SampleRecord::new(r, h, 0.0))
        .collect();
    Ok(evaluation::score(&records))
}

/// Mean of the per-step maximum probability.
#[pyfunction]
#[pyo3(signature = (step_dists, ended = true, include_eos = true))]
fn word_confidence(step_dists: Vec<Vec<f64>>, ended: bool, include_eos: bool) -> PyResult<f64> {
    let pred = Prediction {
        char_ids: Vec::new(),
        text: String::new(),
        attention_masses: Vec::new(),
        step_dists: step_dists.into_iter().map(Array1::from).collect(),
        ended,
    };
    confidence::word_confidence(&pred, include_eos).map_err(py_err)
}

/// Strings drawn from `text` in `natural`, `uniform` or `random` mode.
#[pyfunction]
#[pyo3(signature = (text, count, mode = "uniform", seed = 0, charset = None))]
fn generate_strings(text: &str, count: usize, mode: &str, seed: u64, charset: Option<&str>) -> PyResult<Vec<String>> {
    let charset = match charset {
        Some(c) => Charset::new(c).map_err(py_err)?,
        None => Charset::english(),
    };
    let corpus = textcorpus::ingest_text(text.as_bytes(), "python").map_err(py_err)?;
    let stats = textcorpus::derive_statistics(&corpus, &charset).map_err(py_err)?;
    let spec = CorpusSpec {
        mode: mode.parse::<CorpusMode>().map_err(py_err)?,
        target_count: count,
        seed,
    };
    textcorpus::generate_strings(&spec, &corpus, &stats, &charset).map_err(py_err)
}

/// Renders `text` with procedural glyphs and randomly drawn style
/// parameters; returns rows of pixel values in [0, 1].
#[pyfunction]
#[pyo3(signature = (text, height = 32, seed = 0, slant = None, stroke = None))]
fn render_word(
    text: &str,
    height: usize,
    seed: u64,
    slant: Option<(f64, f64)>,
    stroke: Option<(f64, f64)>,
) -> PyResult<Vec<Vec<f64>>> {
    let mut ranges = RenderRanges::default();
    if let Some((a, b)) = slant {
        ranges.slant_angle = synth::Range(a, b);
    }
    if let Some((a, b)) = stroke {
        ranges.stroke_width = synth::Range(a, b);
    }
    let glyphs = GlyphSource::procedural();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = synth::sample_render_params(&ranges, glyphs.num_faces(), &mut rng).map_err(py_err)?;
    let img = synth::render_word(text, &params, &glyphs, 64, height).map_err(py_err)?;
    Ok(to_rows(&img.pixels))
}

/// A word recognizer with its optimizer state.
#[pyclass(module = "selftrain_py")]
struct Recognizer {
    state: ModelState,
}

fn word_image(pixels: Vec<Vec<f64>>, label: Option<String>) -> PyResult<WordImage> {
    Ok(WordImage {
        pixels: from_rows(pixels)?,
        transcription: label,
        provenance: Provenance::External {
            manifest: "python".into(),
            line: 0,
        },
    })
}

#[pymethods]
impl Recognizer {
    /// `config_json` holds any recognizer fields to override, e.g.
    /// `{"height": 32, "encoder_hidden": 16}`.
    #[new]
    #[pyo3(signature = (charset, seed = 0, config_json = None))]
    fn new(charset: &str, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let mut value = serde_json::to_value(RecognizerConfig {
            charset: Charset::new(charset).map_err(py_err)?,
            ..Default::default()
        })
        .expect("config serializes");
        if let Some(text) = config_json {
            let extra: serde_json::Value =
                serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let Some(fields) = extra.as_object() else {
                return Err(PyValueError::new_err("config_json must be an object"));
            };
            for (k, v) in fields {
                value[k] = v.clone();
            }
        }
        let config: RecognizerConfig =
            serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            state: ModelState::new(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            state: load_checkpoint(path.as_ref()).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.state, path.as_ref()).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.state.num_params()
    }

    #[getter]
    fn height(&self) -> usize {
        self.state.config.height
    }

    /// Greedy transcription and its confidence.
    fn predict(&self, pixels: Vec<Vec<f64>>) -> PyResult<(String, f64)> {
        let pred = self.state.predict(&word_image(pixels, None)?).map_err(py_err)?;
        let c = confidence::word_confidence(&pred, true).map_err(py_err)?;
        Ok((pred.text, c))
    }

    /// Smoothed cross-entropy of `label` under teacher forcing.
    fn loss(&self, pixels: Vec<Vec<f64>>, label: &str) -> PyResult<f64> {
        let eps = self.state.config.label_smoothing;
        self.state
            .recognition_loss(&word_image(pixels, None)?, label, eps)
            .map_err(py_err)
    }

    /// One optimizer step on a batch; returns the mean loss.
    fn train_step(&mut self, images: Vec<Vec<Vec<f64>>>, labels: Vec<String>) -> PyResult<f64> {
        if images.len() != labels.len() {
            return Err(PyValueError::new_err("images and labels differ in length"));
        }
        let images = images
            .into_iter()
            .map(|p| word_image(p, None))
            .collect::<PyResult<Vec<_>>>()?;
        let batch: Vec<(&WordImage, &str)> = images.iter().zip(labels.iter().map(String::as_str)).collect();
        self.state.train_step(&batch).map_err(py_err)
    }
}

#[pymodule]
fn selftrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(cer_wer, m)?)?;
    m.add_function(wrap_pyfunction!(word_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(generate_strings, m)?)?;
    m.add_function(wrap_pyfunction!(render_word, m)?)?;
    m.add_class::<Recognizer>()?;
    Ok(())
}
