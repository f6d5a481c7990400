//! Python bindings: load or create a model, embed and recover bit strings,
//! apply the evaluation edits and run training from a config.
//!
//! Images cross the boundary as flat channel-major float lists of length
//! `3 * height * width` with values in `[0, 1]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stegamark::cli::RunConfig;
use stegamark::data_io::{self, load_image_dir, ImageBuffer, Message};
use stegamark::losses::{self, AdaptiveWeights, LossTriple};
use stegamark::robustness::{self, EditKind};
use stegamark::trainer::{self, load_checkpoint, read_metrics, TrainState, CHECKPOINT_FILE, METRICS_FILE};
use stegamark::{Error, ModelConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image(pixels: Vec<f32>, height: usize, width: usize) -> PyResult<ImageBuffer> {
    ImageBuffer::from_chw(height, width, pixels).map_err(py_err)
}

fn message(bits: Vec<u8>) -> PyResult<Message> {
    Message::new(bits).map_err(py_err)
}

/// A watermark encoder/decoder pair.
#[pyclass(name = "Model", module = "stegamark_py")]
struct PyModel {
    inner: stegamark::Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized toy-preset model with the given sizes.
    #[new]
    #[pyo3(signature = (image_size = 64, n_bits = 16, seed = 0))]
    fn new(image_size: usize, n_bits: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            image_size,
            n_bits,
            ..ModelConfig::toy()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = stegamark::Model::init(cfg, &mut rng).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Model stored in a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner: state.model })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config.image_size
    }

    #[getter]
    fn n_bits(&self) -> usize {
        self.inner.config.n_bits
    }

    #[getter]
    fn norm(&self) -> String {
        self.inner.config.norm.mode.to_string()
    }

    #[getter]
    fn output_mode(&self) -> String {
        self.inner.config.output_mode.to_string()
    }

    /// Watermark a square image of the model's size; returns the encoded
    /// pixels (clamped to `[0, 1]`).
    fn encode(&self, pixels: Vec<f32>, bits: Vec<u8>) -> PyResult<Vec<f32>> {
        let s = self.inner.config.image_size;
        let (enc, _) = self.inner.encode(&image(pixels, s, s)?, &message(bits)?).map_err(py_err)?;
        Ok(enc.pixels().to_vec())
    }

    fn decode(&self, pixels: Vec<f32>) -> PyResult<Vec<u8>> {
        let s = self.inner.config.image_size;
        let m = self.inner.decode(&image(pixels, s, s)?).map_err(py_err)?;
        Ok(m.bits().to_vec())
    }

    fn decode_logits(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let s = self.inner.config.image_size;
        self.inner.decode_logits(&image(pixels, s, s)?).map_err(py_err)
    }

    /// Read an image file (resized to the model size), watermark it and
    /// write the result as PNG.
    fn encode_file(&self, src: PathBuf, bits: Vec<u8>, dst: PathBuf) -> PyResult<()> {
        let s = self.inner.config.image_size;
        let img = ImageBuffer::load(&src, Some((s, s))).map_err(py_err)?;
        let (enc, _) = self.inner.encode(&img, &message(bits)?).map_err(py_err)?;
        enc.save_png(&dst).map_err(py_err)
    }

    fn decode_file(&self, path: PathBuf) -> PyResult<Vec<u8>> {
        let s = self.inner.config.image_size;
        let img = ImageBuffer::load(&path, Some((s, s))).map_err(py_err)?;
        Ok(self.inner.decode(&img).map_err(py_err)?.bits().to_vec())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(image_size={}, n_bits={}, norm='{}', output_mode='{}')",
            c.image_size, c.n_bits, c.norm.mode, c.output_mode
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n_bits, seed = 0))]
fn random_message(n_bits: usize, seed: u64) -> PyResult<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(data_io::random_message(n_bits, &mut rng).map_err(py_err)?.bits().to_vec())
}

#[pyfunction]
fn bit_accuracy(a: Vec<u8>, b: Vec<u8>) -> PyResult<f64> {
    data_io::bit_accuracy(&message(a)?, &message(b)?).map_err(py_err)
}

/// Apply an evaluation edit (`brightness`, `one_bit`, `frame`, ...) at `level`.
#[pyfunction]
#[pyo3(signature = (kind, pixels, height, width, level = 1.0))]
fn apply_edit(kind: &str, pixels: Vec<f32>, height: usize, width: usize, level: f64) -> PyResult<Vec<f32>> {
    let kind: EditKind = kind.parse().map_err(py_err)?;
    let out = kind.apply(&image(pixels, height, width)?, level).map_err(py_err)?;
    Ok(out.pixels().to_vec())
}

/// Pixels left untouched by a centred crop of `width` per edge.
#[pyfunction]
fn retained_pixels(height: usize, width: usize, band: usize) -> usize {
    robustness::retained_pixels(height, width, band)
}

/// `Σ L_i exp(−2 s_i) + 2 Σ s_i` for losses `(L_R, L_P, L_M)`.
#[pyfunction]
fn combine_adaptive(losses_: (f64, f64, f64), log_sigmas: (f64, f64, f64)) -> PyResult<f64> {
    let t = LossTriple::new(losses_.0, losses_.1, losses_.2).map_err(py_err)?;
    let w = AdaptiveWeights::from_array([log_sigmas.0, log_sigmas.1, log_sigmas.2]);
    Ok(losses::combine_adaptive(&t, &w))
}

/// Train from a config file and/or `key=value` overrides, writing metrics
/// and a checkpoint to `out_dir`. Returns the metrics rows as dicts.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None, overrides = Vec::new()))]
fn train(
    py: Python<'_>,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    overrides: Vec<String>,
) -> PyResult<Vec<std::collections::BTreeMap<String, f64>>> {
    let mut cfg = match &config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    for o in &overrides {
        cfg.set_pair(o).map_err(|e| PyValueError::new_err(e.to_string()))?;
    }
    let tc = cfg.train.clone();
    let dir = tc
        .data_dir
        .clone()
        .ok_or_else(|| PyValueError::new_err("train.data_dir is not set"))?;
    let size = tc.model.image_size;
    py.detach(|| -> Result<(), Error> {
        let mut data = load_image_dir(&dir, (size, size))?;
        if let Some(n) = tc.max_images {
            data = data.truncated(n);
        }
        let _: TrainState = trainer::train(&tc, &data, &out_dir)?;
        Ok(())
    })
    .map_err(py_err)?;
    let rows = read_metrics(&out_dir.join(METRICS_FILE)).map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            [
                ("step", r.step as f64),
                ("L_R", r.l_r),
                ("L_P", r.l_p),
                ("L_M", r.l_m),
                ("loss", r.loss),
                ("bit_acc", r.bit_acc),
                ("strength", r.strength),
                ("ratio_R", r.ratio_r),
                ("ratio_P", r.ratio_p),
                ("grad_enc_fc", r.grad_enc_fc),
                ("grad_dec_conv1", r.grad_dec_conv1),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
        })
        .collect())
}

#[pymodule]
fn stegamark_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(random_message, m)?)?;
    m.add_function(wrap_pyfunction!(bit_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(apply_edit, m)?)?;
    m.add_function(wrap_pyfunction!(retained_pixels, m)?)?;
    m.add_function(wrap_pyfunction!(combine_adaptive, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("CHECKPOINT_FILE", CHECKPOINT_FILE)?;
    Ok(())
}
