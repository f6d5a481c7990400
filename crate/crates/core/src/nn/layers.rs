//! Layer helpers shared by the encoder and decoder.

use rand::Rng;

use super::norm::{self, BatchStats, NormConfig, NormMode};
use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

const BN_MOMENTUM: f64 = 0.1;

/// State threaded through one forward pass.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a Bound,
    pub store: &'a ParamStore<T>,
    pub norm: NormConfig,
    pub training: bool,
    /// Batch statistics observed by training-mode batch norms, by layer name.
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        vars: &'a Bound,
        store: &'a ParamStore<T>,
        norm: NormConfig,
        training: bool,
    ) -> Self {
        Self {
            tape,
            vars,
            store,
            norm,
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.vars.get(&format!("{name}.weight"));
        let b = self.vars.try_get(&format!("{name}.bias"));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.vars.get(&format!("{name}.weight"));
        let b = self.vars.try_get(&format!("{name}.bias"));
        self.tape.linear(x, w, b)
    }

    /// Normalization per the configured mode; identity when the mode is `None`.
    pub fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = match self.norm.mode {
            NormMode::None => return Ok(x),
            NormMode::Instance => norm::instance_norm(self.tape, x, self.norm.eps),
            NormMode::Batch => {
                let mean = self.running(&format!("{name}.running_mean"))?;
                let var = self.running(&format!("{name}.running_var"))?;
                let (y, stats) = norm::batch_norm(self.tape, x, self.norm.eps, (&mean, &var), self.training)?;
                if let Some(stats) = stats {
                    self.bn_updates.push((name.to_string(), stats));
                }
                y
            }
        };
        if self.norm.affine {
            let g = self.vars.get(&format!("{name}.gamma"));
            let b = self.vars.get(&format!("{name}.beta"));
            Ok(self.tape.channel_affine(y, g, b))
        } else {
            Ok(y)
        }
    }

    fn running(&self, key: &str) -> Result<Vec<T>> {
        self.store
            .buffer(key)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| crate::error::Error::InvalidArgument(format!("missing buffer '{key}'")))
    }

    /// Convolution, normalization, ReLU.
    pub fn conv_block(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(name, x, stride, 1);
        let y = self.norm(name, y)?;
        Ok(self.tape.relu(y))
    }

    /// Dense layer, normalization, ReLU.
    pub fn dense_block(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.linear(name, x);
        let y = self.norm(name, y)?;
        Ok(self.tape.relu(y))
    }
}

/// Fold batch statistics from a training step into the running averages.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[(String, BatchStats<T>)], batch_count: usize) {
    let m = T::of(BN_MOMENTUM);
    let unbias = if batch_count > 1 {
        T::of(batch_count as f64 / (batch_count as f64 - 1.0))
    } else {
        T::one()
    };
    for (name, stats) in updates {
        if let Some(rm) = store.buffer_mut(&format!("{name}.running_mean")) {
            for (r, &s) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * s;
            }
        }
        if let Some(rv) = store.buffer_mut(&format!("{name}.running_var")) {
            for (r, &s) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * s * unbias;
            }
        }
    }
}

pub fn add_conv<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), ParamStore::glorot(&[cout, cin, k, k], rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub fn add_linear<T: Real>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.weight"), ParamStore::glorot(&[fout, fin], rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fout]));
}

/// Parameters and buffers a normalization over `channels` needs under `cfg`.
/// Dense `[B, F]` activations use `channels = F`.
pub fn add_norm<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, cfg: &NormConfig) {
    if cfg.mode == NormMode::None {
        return;
    }
    if cfg.mode == NormMode::Batch {
        store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        store.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
    }
    if cfg.affine {
        store.insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
    }
}
