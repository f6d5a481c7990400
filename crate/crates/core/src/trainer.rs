//! Training loop, gradient probes and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{sample_batch, Batch, Dataset};
use crate::decoder::{self, DECRYPT_CONV1};
use crate::encoder::{self, MESSAGE_FC};
use crate::error::{Error, Result};
use crate::losses::{
    self, combine_adaptive_var, combine_fixed_var, fixed_weight_at, weight_ratio_adaptive, weight_ratio_fixed,
    AdaptiveWeights, FixedWeightSchedule, LossMode, LossTriple, PerceptualBackend,
};
use crate::model::{Model, ModelConfig};
use crate::nn::layers::apply_bn_updates;
use crate::nn::norm::{BatchStats, NormMode};
use crate::nn::optim::clip_global_norm;
use crate::nn::{Adam, Ctx, Tape, Tensor};
use crate::perturb::{perturb_pipeline, strength_schedule, PerturbConfig};

/// Layers whose mean |gradient| is reported in every metrics row.
pub const DEFAULT_PROBES: [&str; 2] = [MESSAGE_FC, DECRYPT_CONV1];

const LOG_SIGMA: &str = "loss.log_sigma";

const MAGIC: &[u8; 4] = b"SGMK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.sgmk";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub perceptual: PerceptualBackend,
    pub fixed_weights: FixedWeightSchedule,
    pub adaptive_init: AdaptiveWeights,
    pub perturb: PerturbConfig,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub data_dir: Option<PathBuf>,
    /// Use at most this many images from `data_dir`.
    pub max_images: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 4,
            total_steps: 100_000,
            learning_rate: 1e-4,
            seed: 0,
            loss_mode: LossMode::Adaptive,
            perceptual: PerceptualBackend::Pyramid,
            fixed_weights: FixedWeightSchedule::default(),
            adaptive_init: AdaptiveWeights::default(),
            perturb: PerturbConfig::default(),
            grad_clip: 10.0,
            log_every: 100,
            checkpoint_every: 5000,
            data_dir: None,
            max_images: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale setup: 64×64 images, 16 bits, narrow layers.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        Self {
            perturb: PerturbConfig {
                ramp_steps: 5000,
                ..PerturbConfig::for_image_size(model.image_size)
            },
            model,
            batch_size: 8,
            total_steps: 20_000,
            learning_rate: 1e-3,
            log_every: 50,
            checkpoint_every: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.perturb.validate()?;
        self.fixed_weights.validate()?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.model.norm.mode == NormMode::Batch && self.batch_size < 2 {
            return Err(Error::Config("batch normalization needs batch_size >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("log_every and checkpoint_every must be at least 1".into()));
        }
        if self.loss_mode == LossMode::Adaptive {
            self.adaptive_init.check().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adaptive: AdaptiveWeights,
    pub optimizer: Adam,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(config.model.clone(), &mut rng)?;
        Ok(Self {
            adaptive: config.adaptive_init,
            optimizer: Adam::new(config.learning_rate),
            model,
            step: 0,
            rng,
            config,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_P")]
    pub l_p: f64,
    #[serde(rename = "L_M")]
    pub l_m: f64,
    pub loss: f64,
    pub bit_acc: f64,
    pub strength: f64,
    #[serde(rename = "ratio_R")]
    pub ratio_r: f64,
    #[serde(rename = "ratio_P")]
    pub ratio_p: f64,
    pub grad_enc_fc: f64,
    pub grad_dec_conv1: f64,
}

struct Pass {
    losses: LossTriple,
    total: f64,
    bit_acc: f64,
    grads: BTreeMap<String, Tensor<f32>>,
    log_sigma_grad: Option<Tensor<f32>>,
    bn_updates: Vec<(String, BatchStats<f32>)>,
}

fn fraction_correct(logits: &[f32], targets: &[f32]) -> f64 {
    let hits = logits
        .iter()
        .zip(targets)
        .filter(|(&l, &t)| (l >= 0.0) == (t >= 0.5))
        .count();
    hits as f64 / logits.len().max(1) as f64
}

/// First sample whose values in `t` are not all finite.
fn bad_sample(t: &Tensor<f32>) -> Option<usize> {
    let n = t.shape()[0];
    let per = t.len() / n.max(1);
    t.data().chunks(per).position(|c| c.iter().any(|v| !v.is_finite()))
}

/// Forward and backward through encoder → perturbations → decoder.
fn forward_backward(state: &TrainState, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<Pass> {
    let cfg = &state.config;
    let mcfg = &state.model.config;
    if batch.n_bits() != mcfg.n_bits {
        return Err(Error::Shape(format!(
            "batch carries {} bits, model expects {}",
            batch.n_bits(),
            mcfg.n_bits
        )));
    }
    let store = &state.model.params;
    let mut tape = Tape::<f32>::new();
    let vars = store.bind(&mut tape);
    let images = tape.constant(batch.images.clone());
    let targets_t = batch.message_tensor::<f32>();
    let targets = tape.constant(targets_t.clone());
    let mut ctx = Ctx::new(&mut tape, &vars, store, mcfg.norm, true);

    let (encoded, residual) = encoder::encode(&mut ctx, images, targets, mcfg)?;
    let strength = strength_schedule(state.step, cfg.perturb.ramp_steps);
    let (perturbed, _) = perturb_pipeline(ctx.tape, encoded, strength, &cfg.perturb, rng)?;
    let logits = decoder::decode(&mut ctx, perturbed, mcfg)?;
    let bn_updates = std::mem::take(&mut ctx.bn_updates);

    let l_r = losses::residual_loss(&mut tape, residual);
    let l_p = losses::perceptual_loss(&mut tape, encoded, images, cfg.perceptual)?;
    let l_m = losses::message_loss(&mut tape, logits, targets)?;
    let parts = [l_r, l_p, l_m];

    let log_sigma = match cfg.loss_mode {
        LossMode::Adaptive => Some(tape.variable(Tensor::from_fn(&[3], |i| state.adaptive.as_array()[i] as f32))),
        LossMode::Fixed => None,
    };
    let total = match log_sigma {
        Some(s) => combine_adaptive_var(&mut tape, parts, s)?,
        None => combine_fixed_var(&mut tape, parts, fixed_weight_at(state.step, &cfg.fixed_weights)),
    };

    let total_value = f64::from(tape.scalar(total));
    if !total_value.is_finite() {
        let batch_index = bad_sample(tape.value(encoded))
            .or_else(|| bad_sample(tape.value(perturbed)))
            .or_else(|| bad_sample(tape.value(logits)));
        return Err(Error::TrainingDiverged {
            step: state.step,
            batch_index,
            detail: format!(
                "loss {total_value} (L_R {}, L_P {}, L_M {})",
                tape.scalar(l_r),
                tape.scalar(l_p),
                tape.scalar(l_m)
            ),
        });
    }
    let losses = LossTriple {
        l_r: f64::from(tape.scalar(l_r)),
        l_p: f64::from(tape.scalar(l_p)),
        l_m: f64::from(tape.scalar(l_m)),
    };
    let bit_acc = fraction_correct(tape.value(logits).data(), targets_t.data());

    let mut g = tape.backward(total);
    let grads = vars.gradients(&mut g, store);
    let log_sigma_grad = log_sigma.map(|s| g.take(s).unwrap_or_else(|| Tensor::zeros(&[3])));
    Ok(Pass {
        losses,
        total: total_value,
        bit_acc,
        grads,
        log_sigma_grad,
        bn_updates,
    })
}

/// Mean |gradient| of `<layer>.weight` for each named layer.
pub fn mean_abs_gradients(grads: &BTreeMap<String, Tensor<f32>>, layers: &[&str]) -> Result<BTreeMap<String, f64>> {
    layers
        .iter()
        .map(|l| {
            let key = format!("{l}.weight");
            grads
                .get(&key)
                .map(|g| (l.to_string(), f64::from(g.mean_abs())))
                .ok_or_else(|| Error::InvalidArgument(format!("no parameter '{key}' to probe")))
        })
        .collect()
}

/// Full loss and backward pass without an update; reports the mean absolute
/// weight gradient of each layer in `layers`. The state is not modified.
pub fn grad_probe(state: &TrainState, batch: &Batch, layers: &[&str]) -> Result<BTreeMap<String, f64>> {
    let mut rng = state.rng.clone();
    let pass = forward_backward(state, batch, &mut rng)?;
    mean_abs_gradients(&pass.grads, layers)
}

/// One optimization step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<MetricsRow> {
    let mut rng = state.rng.clone();
    let pass = forward_backward(state, batch, &mut rng)?;
    state.rng = rng;
    let cfg = state.config.clone();
    let strength = strength_schedule(state.step, cfg.perturb.ramp_steps);
    let probes = mean_abs_gradients(&pass.grads, &DEFAULT_PROBES)?;
    let (ratio_r, ratio_p) = match cfg.loss_mode {
        LossMode::Adaptive => weight_ratio_adaptive(&state.adaptive),
        LossMode::Fixed => {
            weight_ratio_fixed(fixed_weight_at(state.step, &cfg.fixed_weights)).unwrap_or((f64::NAN, f64::NAN))
        }
    };

    let mut grads = pass.grads;
    if let Some(gs) = pass.log_sigma_grad {
        grads.insert(LOG_SIGMA.to_string(), gs);
    }
    clip_global_norm(&mut grads, cfg.grad_clip);

    let mut log_sigma = Tensor::from_fn(&[3], |i| state.adaptive.as_array()[i] as f32);
    let trainable = state
        .model
        .params
        .iter_mut()
        .chain(std::iter::once((LOG_SIGMA, &mut log_sigma)));
    state.optimizer.update_tensors(trainable, &grads);
    if cfg.loss_mode == LossMode::Adaptive {
        let d = log_sigma.data();
        state.adaptive = AdaptiveWeights::from_array([d[0], d[1], d[2]].map(f64::from));
    }
    apply_bn_updates(&mut state.model.params, &pass.bn_updates, batch.len());
    state.step += 1;

    Ok(MetricsRow {
        step: state.step,
        l_r: pass.losses.l_r,
        l_p: pass.losses.l_p,
        l_m: pass.losses.l_m,
        loss: pass.total,
        bit_acc: pass.bit_acc,
        strength,
        ratio_r,
        ratio_p,
        grad_enc_fc: probes[MESSAGE_FC],
        grad_dec_conv1: probes[DECRYPT_CONV1],
    })
}

/// Whether a step observer wants training to continue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Train until `state.step == until` (or the observer stops it), sampling
/// batches from `dataset` with the state's generator. The observer sees
/// every step's row.
pub fn run_steps(
    state: &mut TrainState,
    dataset: &Dataset,
    until: u64,
    mut observe: impl FnMut(&TrainState, &MetricsRow) -> Result<Flow>,
) -> Result<()> {
    while state.step < until {
        let (bs, n_bits) = (state.config.batch_size, state.model.config.n_bits);
        let batch = sample_batch(dataset, bs, n_bits, &mut state.rng)?;
        let row = train_step(state, &batch)?;
        if state.config.loss_mode == LossMode::Adaptive && state.step % state.config.log_every == 0 {
            state.adaptive.check()?;
        }
        if observe(state, &row)? == Flow::Stop {
            break;
        }
    }
    Ok(())
}

fn metrics_writer(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists() && fs::metadata(path)?.len() > 0;
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(file))
}

fn run_logged(state: &mut TrainState, dataset: &Dataset, out_dir: &Path, append: bool) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut writer = metrics_writer(&out_dir.join(METRICS_FILE), append)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let total = state.config.total_steps;
    run_steps(state, dataset, total, |st, row| {
        if row.step % st.config.log_every == 0 || row.step == total {
            writer.serialize(row)?;
            writer.flush()?;
        }
        if row.step % st.config.checkpoint_every == 0 {
            save_checkpoint(st, &ckpt)?;
        }
        Ok(Flow::Continue)
    })?;
    save_checkpoint(state, &ckpt)?;
    Ok(())
}

/// Fresh run: writes `metrics.csv` and `checkpoint.sgmk` into `out_dir`.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainState> {
    let mut state = TrainState::new(config.clone())?;
    run_logged(&mut state, dataset, out_dir, false)?;
    Ok(state)
}

/// Continue a checkpointed run up to `total_steps` (the stored value when
/// `None`), appending to the metrics file in `out_dir`.
pub fn resume(checkpoint: &Path, dataset: &Dataset, out_dir: &Path, total_steps: Option<u64>) -> Result<TrainState> {
    let mut state = load_checkpoint(checkpoint)?;
    if let Some(n) = total_steps {
        state.config.total_steps = n;
    }
    run_logged(&mut state, dataset, out_dir, true)?;
    Ok(state)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Layout: `SGMK`, u32 version, u64 payload length, bincode payload,
/// SHA-256 of the payload. Integers are little-endian.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let payload = bincode::serialize(state).map_err(|e| checkpoint_err(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(payload.len() + 48);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&Sha256::digest(&payload));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(checkpoint_err(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(checkpoint_err(
            path,
            format!("format version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let len = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    if buf.len() != 16 + len + 32 {
        return Err(checkpoint_err(path, "truncated or corrupt file (length mismatch)"));
    }
    let payload = &buf[16..16 + len];
    if Sha256::digest(payload).as_slice() != &buf[16 + len..] {
        return Err(checkpoint_err(path, "corrupt file (checksum mismatch)"));
    }
    bincode::deserialize(payload).map_err(|e| checkpoint_err(path, format!("corrupt payload: {e}")))
}
