//! Normalization layers inserted before activations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Which normalization precedes each activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    None,
    Batch,
    Instance,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::None => "none",
            NormMode::Batch => "batch",
            NormMode::Instance => "instance",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "non" => Ok(NormMode::None),
            "batch" | "bn" => Ok(NormMode::Batch),
            "instance" | "in" => Ok(NormMode::Instance),
            other => Err(Error::Config(format!(
                "unknown norm mode '{other}' (expected none, batch or instance)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub mode: NormMode,
    pub eps: f64,
    /// Learnable per-channel scale and shift after normalizing.
    pub affine: bool,
    /// Normalize the decoder logits before the final sigmoid.
    pub before_decoder_sigmoid: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            mode: NormMode::Instance,
            eps: DEFAULT_EPS,
            affine: false,
            before_decoder_sigmoid: true,
        }
    }
}

/// Per-(instance, channel) standardization over spatial positions:
/// `y = (x − μ) / √(v + eps)`.
pub fn instance_norm<T: Real>(tape: &mut Tape<T>, x: Var, eps: f64) -> Var {
    tape.instance_norm(x, T::of(eps))
}

/// Batch statistics gathered by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch normalization over `(instance, spatial)` per channel.
///
/// Training mode normalizes with the batch statistics and returns them so the
/// caller can update running averages. Inference mode applies the running
/// statistics as a constant per-channel affine map.
pub fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    eps: f64,
    running: (&[T], &[T]),
    train: bool,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let shape = tape.shape(x).to_vec();
    let channels = shape[1];
    if running.0.len() != channels || running.1.len() != channels {
        return Err(Error::Shape(format!(
            "running stats of length {} for {} channels",
            running.0.len(),
            channels
        )));
    }
    if train {
        if shape[0] < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in training mode needs batch size >= 2".into(),
            ));
        }
        let (y, mean, var) = tape.batch_norm_train(x, T::of(eps));
        Ok((y, Some(BatchStats { mean, var })))
    } else {
        let scale: Vec<T> = running
            .1
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let shift: Vec<T> = running.0.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
        let g = tape.constant(Tensor::from_vec(&[channels], scale)?);
        let b = tape.constant(Tensor::from_vec(&[channels], shift)?);
        Ok((tape.channel_affine(x, g, b), None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run_instance(x: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = instance_norm(&mut tape, v, DEFAULT_EPS);
        tape.value(y).clone()
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let y = run_instance(Tensor::full(&[1, 2, 4, 4], 0.7));
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn two_level_channel_maps_to_plus_minus_one() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| if i < 8 { 1.0 } else { 3.0 });
        let y = run_instance(x);
        for (i, v) in y.data().iter().enumerate() {
            let expect = if i < 8 { -1.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-4, "{v} vs {expect}");
        }
    }

    #[test]
    fn random_input_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(-4.0..9.0));
        let y = run_instance(x);
        for g in y.data().chunks(64) {
            let m = g.iter().sum::<f64>() / 64.0;
            let v = g.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn invariant_to_positive_affine_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.gen_range(0.0..1.0));
        let y1 = run_instance(x.clone());
        let y2 = run_instance(x.map(|v| 3.5 * v - 2.0));
        assert!(y1.max_abs_diff(&y2) < 1e-4);
    }

    #[test]
    fn batch_norm_train_needs_two_samples() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::full(&[1, 2, 3, 3], 1.0));
        let err = batch_norm(&mut tape, v, DEFAULT_EPS, (&[0.0, 0.0], &[1.0, 1.0]), true);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn batch_norm_inference_with_unit_stats_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 * 0.3 - 1.0);
        let v = tape.constant(x.clone());
        let (y, stats) = batch_norm(&mut tape, v, DEFAULT_EPS, (&[0.0, 0.0], &[1.0, 1.0]), false).unwrap();
        assert!(stats.is_none());
        let expect = x.map(|v| v / (1.0 + DEFAULT_EPS).sqrt());
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn batch_norm_of_constant_batch_is_zero() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::full(&[3, 2, 4, 4], 0.25));
        let (y, _) = batch_norm(&mut tape, v, DEFAULT_EPS, (&[0.0, 0.0], &[1.0, 1.0]), true).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batch_norm_on_duplicated_instance_equals_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(-1.0..2.0));
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let pair = Tensor::from_vec(&[2, 3, 4, 4], both).unwrap();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(pair.clone());
        let (bn, _) = batch_norm(&mut tape, v, DEFAULT_EPS, (&[0.0; 3], &[1.0; 3]), true).unwrap();
        let inorm = run_instance(pair);
        assert!(tape.value(bn).max_abs_diff(&inorm) < 1e-12);
    }

    #[test]
    fn parses_modes() {
        assert_eq!("instance".parse::<NormMode>().unwrap(), NormMode::Instance);
        assert_eq!("BN".parse::<NormMode>().unwrap(), NormMode::Batch);
        assert!("group".parse::<NormMode>().is_err());
    }
}
