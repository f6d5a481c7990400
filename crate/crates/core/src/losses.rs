//! Image-fidelity and message losses plus the two weighting regimes: fixed
//! ramped weights and learned log-σ weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tape, Var};

/// Number of dyadic scales in the pyramid perceptual loss (full resolution
/// included).
pub const PYRAMID_LEVELS: usize = 4;

/// Residual, perceptual and message losses of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub l_r: f64,
    pub l_p: f64,
    pub l_m: f64,
}

impl LossTriple {
    pub fn new(l_r: f64, l_p: f64, l_m: f64) -> Result<Self> {
        let t = Self { l_r, l_p, l_m };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("L_R", self.l_r), ("L_P", self.l_p), ("L_M", self.l_m)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.l_r, self.l_p, self.l_m]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerceptualBackend {
    /// Squared error summed over four dyadic average-pool scales.
    Pyramid,
    /// Learned perceptual metric; needs pretrained weights that are not
    /// shipped, so selecting it is a configuration error.
    Lpips,
}

impl fmt::Display for PerceptualBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerceptualBackend::Pyramid => "pyramid",
            PerceptualBackend::Lpips => "lpips",
        })
    }
}

impl FromStr for PerceptualBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pyramid" => Ok(PerceptualBackend::Pyramid),
            "lpips" => Ok(PerceptualBackend::Lpips),
            other => Err(Error::Config(format!("unknown perceptual backend '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    Fixed,
    Adaptive,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Fixed => "fixed",
            LossMode::Adaptive => "adaptive",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(LossMode::Fixed),
            "adaptive" => Ok(LossMode::Adaptive),
            other => Err(Error::Config(format!(
                "unknown loss mode '{other}' (expected fixed or adaptive)"
            ))),
        }
    }
}

/// Mean squared residual.
pub fn residual_loss<T: Real>(tape: &mut Tape<T>, residual: Var) -> Var {
    let sq = tape.square(residual);
    tape.mean(sq)
}

/// Perceptual distance between two image batches of equal shape.
pub fn perceptual_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, backend: PerceptualBackend) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "perceptual loss on {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    match backend {
        PerceptualBackend::Pyramid => pyramid_loss(tape, a, b),
        PerceptualBackend::Lpips => Err(Error::Config(
            "the lpips backend needs pretrained network weights, which are not bundled; use pyramid".into(),
        )),
    }
}

fn pyramid_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(a).dims4();
    let div = 1 << (PYRAMID_LEVELS - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "pyramid loss needs sides divisible by {div}, got {h}x{w}"
        )));
    }
    let mut diff = tape.sub(a, b);
    let mut total: Option<Var> = None;
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            diff = tape.avg_pool2(diff);
        }
        let sq = tape.square(diff);
        let m = tape.mean(sq);
        total = Some(match total {
            Some(t) => tape.add(t, m),
            None => m,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Mean binary cross-entropy with logits, `softplus(l) − t·l`.
pub fn message_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: Var) -> Result<Var> {
    if tape.shape(logits) != tape.shape(targets) {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            tape.shape(logits),
            tape.shape(targets)
        )));
    }
    let sp = tape.softplus(logits);
    let tl = tape.mul(targets, logits);
    let per_bit = tape.sub(sp, tl);
    Ok(tape.mean(per_bit))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedWeightSchedule {
    pub lambda_r_max: f64,
    pub lambda_p_max: f64,
    pub lambda_m: f64,
    pub ramp_start: u64,
    pub ramp_end: u64,
}

impl Default for FixedWeightSchedule {
    fn default() -> Self {
        Self {
            lambda_r_max: 1.5,
            lambda_p_max: 1.5,
            lambda_m: 1.0,
            ramp_start: 1500,
            ramp_end: 15_000,
        }
    }
}

impl FixedWeightSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_start > self.ramp_end {
            return Err(Error::Config(format!(
                "ramp_start {} exceeds ramp_end {}",
                self.ramp_start, self.ramp_end
            )));
        }
        if [self.lambda_r_max, self.lambda_p_max, self.lambda_m]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Weights `(λ_R, λ_P, λ_M)` at `step`: image weights are zero before the
/// ramp, linear during it and at their maxima afterwards.
pub fn fixed_weight_at(step: u64, s: &FixedWeightSchedule) -> [f64; 3] {
    let frac = if step < s.ramp_start {
        0.0
    } else if step >= s.ramp_end {
        1.0
    } else {
        (step - s.ramp_start) as f64 / (s.ramp_end - s.ramp_start) as f64
    };
    [frac * s.lambda_r_max, frac * s.lambda_p_max, s.lambda_m]
}

pub fn combine_fixed(t: &LossTriple, lambdas: [f64; 3]) -> f64 {
    lambdas[0] * t.l_r + lambdas[1] * t.l_p + lambdas[2] * t.l_m
}

/// Tape version of [`combine_fixed`].
pub fn combine_fixed_var<T: Real>(tape: &mut Tape<T>, losses: [Var; 3], lambdas: [f64; 3]) -> Var {
    let parts: Vec<Var> = losses
        .iter()
        .zip(lambdas)
        .map(|(&l, w)| tape.scale(l, T::of(w)))
        .collect();
    let s = tape.add(parts[0], parts[1]);
    tape.add(s, parts[2])
}

/// Learned balance `Σ L_i / σ_i² + 2 log(σ_R σ_P σ_M)`, parameterized by
/// `log σ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub log_sigma_r: f64,
    pub log_sigma_p: f64,
    pub log_sigma_m: f64,
}

impl Default for AdaptiveWeights {
    /// The message loss starts with ten times the effective weight of each
    /// image loss.
    fn default() -> Self {
        let s = 10f64.sqrt().ln();
        Self {
            log_sigma_r: s,
            log_sigma_p: s,
            log_sigma_m: 0.0,
        }
    }
}

impl AdaptiveWeights {
    pub fn unit() -> Self {
        Self {
            log_sigma_r: 0.0,
            log_sigma_p: 0.0,
            log_sigma_m: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.log_sigma_r, self.log_sigma_p, self.log_sigma_m]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            log_sigma_r: a[0],
            log_sigma_p: a[1],
            log_sigma_m: a[2],
        }
    }

    pub fn sigmas(&self) -> [f64; 3] {
        self.as_array().map(f64::exp)
    }

    pub fn check(&self) -> Result<()> {
        if self.sigmas().iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("adaptive sigmas {:?}", self.sigmas())))
        }
    }
}

pub fn combine_adaptive(t: &LossTriple, w: &AdaptiveWeights) -> f64 {
    t.as_array()
        .iter()
        .zip(w.as_array())
        .map(|(l, s)| l * (-2.0 * s).exp() + 2.0 * s)
        .sum()
}

/// Tape version of [`combine_adaptive`]; `log_sigmas` is a `[3]` variable.
pub fn combine_adaptive_var<T: Real>(tape: &mut Tape<T>, losses: [Var; 3], log_sigmas: Var) -> Result<Var> {
    if tape.shape(log_sigmas) != [3] {
        return Err(Error::Shape(format!("log sigmas {:?}, expected [3]", tape.shape(log_sigmas))));
    }
    let mut stacked = Vec::with_capacity(3);
    for l in losses {
        stacked.push(tape.reshape(l, &[1]));
    }
    let l = concat_scalars(tape, &stacked);
    let neg2 = tape.scale(log_sigmas, T::of(-2.0));
    let inv_var = tape.exp(neg2);
    let weighted = tape.mul(l, inv_var);
    let a = tape.sum(weighted);
    let b = tape.sum(log_sigmas);
    let b = tape.scale(b, T::of(2.0));
    Ok(tape.add(a, b))
}

/// Stack `[1]` variables into one `[k]` variable via reshape and channel
/// concatenation.
fn concat_scalars<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Var {
    let as4: Vec<Var> = parts.iter().map(|&p| tape.reshape(p, &[1, 1, 1, 1])).collect();
    let mut acc = as4[0];
    for &p in &as4[1..] {
        acc = tape.concat_channels(acc, p);
    }
    tape.reshape(acc, &[parts.len()])
}

/// Image-to-message weight ratios `(σ_M²/σ_R², σ_M²/σ_P²)`.
pub fn weight_ratio_adaptive(w: &AdaptiveWeights) -> (f64, f64) {
    (
        (2.0 * (w.log_sigma_m - w.log_sigma_r)).exp(),
        (2.0 * (w.log_sigma_m - w.log_sigma_p)).exp(),
    )
}

/// Image-to-message weight ratios `(λ_R/λ_M, λ_P/λ_M)`.
pub fn weight_ratio_fixed(lambdas: [f64; 3]) -> Result<(f64, f64)> {
    if lambdas[2] == 0.0 {
        return Err(Error::InvalidArgument("λ_M is zero; ratio undefined".into()));
    }
    Ok((lambdas[0] / lambdas[2], lambdas[1] / lambdas[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fd_grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.scalar(v)
    }

    #[test]
    fn residual_examples() {
        assert_eq!(eval(|t| { let r = t.constant(Tensor::zeros(&[1, 3, 4, 4])); residual_loss(t, r) }), 0.0);
        let l = eval(|t| { let r = t.constant(Tensor::full(&[1, 3, 4, 4], 0.1)); residual_loss(t, r) });
        assert!((l - 0.01).abs() < 1e-15);
        let x = Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64).sin());
        let a = eval(|t| { let r = t.constant(x.clone()); residual_loss(t, r) });
        let b = eval(|t| { let r = t.constant(x.map(|v| 2.0 * v)); residual_loss(t, r) });
        assert!((b - 4.0 * a).abs() < 1e-12);
    }

    #[test]
    fn pyramid_examples() {
        let a = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 37) % 19) as f64 / 19.0);
        let b = a.map(|v| v + 0.1);
        let same = eval(|t| { let x = t.constant(a.clone()); let y = t.constant(a.clone()); perceptual_loss(t, x, y, PerceptualBackend::Pyramid).unwrap() });
        assert_eq!(same, 0.0);
        let shifted = eval(|t| { let x = t.constant(a.clone()); let y = t.constant(b.clone()); perceptual_loss(t, x, y, PerceptualBackend::Pyramid).unwrap() });
        assert!((shifted - 0.04).abs() < 1e-12, "{shifted}");
        let c = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 11) % 7) as f64 / 7.0);
        let ab = eval(|t| { let x = t.constant(a.clone()); let y = t.constant(c.clone()); perceptual_loss(t, x, y, PerceptualBackend::Pyramid).unwrap() });
        let ba = eval(|t| { let x = t.constant(c.clone()); let y = t.constant(a.clone()); perceptual_loss(t, x, y, PerceptualBackend::Pyramid).unwrap() });
        assert_eq!(ab, ba);
    }

    #[test]
    fn perceptual_rejects_mismatch_and_lpips() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(matches!(perceptual_loss(&mut tape, a, b, PerceptualBackend::Pyramid), Err(Error::Shape(_))));
        assert!(matches!(perceptual_loss(&mut tape, a, a, PerceptualBackend::Lpips), Err(Error::Config(_))));
    }

    fn bce(logits: Vec<f64>, targets: Vec<f64>) -> f64 {
        let n = logits.len();
        eval(|t| {
            let l = t.constant(Tensor::from_vec(&[1, n], logits).unwrap());
            let y = t.constant(Tensor::from_vec(&[1, n], targets).unwrap());
            message_loss(t, l, y).unwrap()
        })
    }

    #[test]
    fn message_loss_examples() {
        assert!((bce(vec![0.0; 8], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
        assert!(bce(vec![20.0], vec![1.0]) < 1e-8);
        assert!((bce(vec![20.0], vec![0.0]) - 20.0).abs() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let l: Vec<f64> = (0..5).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let y: Vec<f64> = (0..5).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            assert!(bce(l, y) >= 0.0);
        }
    }

    #[test]
    fn fixed_schedule_examples() {
        let s = FixedWeightSchedule::default();
        assert_eq!(fixed_weight_at(0, &s), [0.0, 0.0, 1.0]);
        let mid = fixed_weight_at((s.ramp_start + s.ramp_end) / 2, &s);
        assert!((mid[0] - 0.75).abs() < 1e-12 && (mid[1] - 0.75).abs() < 1e-12);
        assert_eq!(fixed_weight_at(2 * s.ramp_end, &s), [1.5, 1.5, 1.0]);
        assert_eq!(weight_ratio_fixed(fixed_weight_at(0, &s)).unwrap(), (0.0, 0.0));
        assert_eq!(weight_ratio_fixed(fixed_weight_at(s.ramp_end + 1, &s)).unwrap(), (1.5, 1.5));
        assert!(weight_ratio_fixed([1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn combine_examples() {
        let t = LossTriple::new(1.0, 2.0, 3.0).unwrap();
        assert_eq!(combine_fixed(&t, [1.0, 1.0, 1.0]), 6.0);
        assert_eq!(combine_fixed(&t, [0.0, 0.0, 1.0]), 3.0);
        assert_eq!(combine_adaptive(&t, &AdaptiveWeights::unit()), 6.0);
        assert_eq!(weight_ratio_adaptive(&AdaptiveWeights::unit()), (1.0, 1.0));
        let mut w = AdaptiveWeights::unit();
        w.log_sigma_r += 2f64.sqrt().ln();
        let (r, _) = weight_ratio_adaptive(&w);
        assert!((1.0 / r - 2.0).abs() < 1e-12);
        assert!(LossTriple::new(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn adaptive_gradient_vanishes_at_sigma_squared_equal_loss() {
        let losses = [0.3f64, 0.02, 1.7];
        let at = Tensor::from_fn(&[3], |i| 0.5 * losses[i].ln());
        let mut tape = Tape::<f64>::new();
        let s = tape.variable(at);
        let ls = losses.map(|l| tape.constant(Tensor::scalar(l)));
        let total = combine_adaptive_var(&mut tape, ls, s).unwrap();
        let g = tape.backward(total);
        assert!(g.get(s).unwrap().data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn tape_combiners_match_scalar_formulas_and_gradients() {
        let t = LossTriple::new(0.4, 0.9, 0.25).unwrap();
        let w = AdaptiveWeights::default();
        let mut tape = Tape::<f64>::new();
        let ls = t.as_array().map(|l| tape.constant(Tensor::scalar(l)));
        let s = tape.variable(Tensor::from_vec(&[3], w.as_array().to_vec()).unwrap());
        let a = combine_adaptive_var(&mut tape, ls, s).unwrap();
        assert!((tape.scalar(a) - combine_adaptive(&t, &w)).abs() < 1e-12);
        let f = combine_fixed_var(&mut tape, ls, [0.5, 2.0, 1.0]);
        assert!((tape.scalar(f) - combine_fixed(&t, [0.5, 2.0, 1.0])).abs() < 1e-12);

        let err = fd_grad_check(
            |tape, x| {
                let ls = [0.4, 0.9, 0.25].map(|l| tape.constant(Tensor::scalar(l)));
                combine_adaptive_var(tape, ls, x).unwrap()
            },
            &Tensor::from_vec(&[3], vec![0.3, -0.2, 0.1]).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
