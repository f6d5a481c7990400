//! Message embedding and the U-Net residual encoder.
//!
//! The message is mapped by a dense layer onto a coarse `3 × H/8 × W/8` grid,
//! upsampled ×8 with nearest neighbour, concatenated with the zero-centred
//! image and fed to a four-level U-Net whose 1×1 output head predicts the
//! residual `R`. The watermarked image is either `image + R` or
//! `sigmoid(image − 0.5 + R)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::layers::{add_conv, add_linear, add_norm};
use crate::nn::{Ctx, ParamStore, Real, Tensor, Var};

/// Spatial factor between the message grid and the image.
pub const MESSAGE_UPSAMPLE: usize = 8;

pub const MESSAGE_FC: &str = "encoder.message_fc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    /// `encoded = image + R`, unclamped in the loss path.
    Additive,
    /// `encoded = sigmoid(image − 0.5 + R)`, always inside (0, 1).
    Sigmoid,
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputMode::Additive => "additive",
            OutputMode::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "additive" | "add" => Ok(OutputMode::Additive),
            "sigmoid" => Ok(OutputMode::Sigmoid),
            other => Err(Error::Config(format!(
                "unknown output mode '{other}' (expected additive or sigmoid)"
            ))),
        }
    }
}

fn widths(cfg: &ModelConfig) -> [usize; 4] {
    let b = cfg.unet_base;
    [b, 2 * b, 4 * b, 8 * b]
}

/// Side lengths of the coarse message grid.
pub fn message_grid(cfg: &ModelConfig) -> Result<(usize, usize)> {
    let (h, w) = (cfg.image_size, cfg.image_size);
    if h % MESSAGE_UPSAMPLE != 0 || w % MESSAGE_UPSAMPLE != 0 {
        return Err(Error::Shape(format!(
            "image side {h} is not divisible by {MESSAGE_UPSAMPLE}"
        )));
    }
    Ok((h / MESSAGE_UPSAMPLE, w / MESSAGE_UPSAMPLE))
}

pub fn init_params<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let (gh, gw) = message_grid(cfg)?;
    let [c0, c1, c2, c3] = widths(cfg);
    let norm = &cfg.norm;
    add_linear(store, MESSAGE_FC, cfg.n_bits, 3 * gh * gw, rng);
    add_norm(store, MESSAGE_FC, 3, norm);
    let convs: [(&str, usize, usize); 10] = [
        ("encoder.down0", 6, c0),
        ("encoder.down1", c0, c1),
        ("encoder.down2", c1, c2),
        ("encoder.down3", c2, c3),
        ("encoder.up2", c3, c2),
        ("encoder.merge2", 2 * c2, c2),
        ("encoder.up1", c2, c1),
        ("encoder.merge1", 2 * c1, c1),
        ("encoder.up0", c1, c0),
        ("encoder.merge0", 2 * c0, c0),
    ];
    for (name, cin, cout) in convs {
        add_conv(store, name, cin, cout, 3, rng);
        add_norm(store, name, cout, norm);
    }
    // Zero head: training starts from an identity encoding.
    store.insert("encoder.residual.weight", Tensor::zeros(&[3, c0, 1, 1]));
    store.insert("encoder.residual.bias", Tensor::zeros(&[3]));
    Ok(())
}

/// Dense layer to the coarse grid, normalization + ReLU, then ×8
/// nearest-neighbour upsampling. `messages` is `[B, n_bits]`; the result is
/// `[B, 3, H, W]`.
pub fn embed_message<T: Real>(ctx: &mut Ctx<'_, T>, messages: Var, cfg: &ModelConfig) -> Result<Var> {
    let (gh, gw) = message_grid(cfg)?;
    let shape = ctx.tape.shape(messages).to_vec();
    if shape.len() != 2 || shape[1] != cfg.n_bits {
        return Err(Error::Shape(format!(
            "messages {:?} do not match n_bits = {}",
            shape, cfg.n_bits
        )));
    }
    let dense = ctx.linear(MESSAGE_FC, messages);
    let grid = ctx.tape.reshape(dense, &[shape[0], 3, gh, gw]);
    let grid = ctx.norm(MESSAGE_FC, grid)?;
    let grid = ctx.tape.relu(grid);
    Ok(ctx.tape.upsample_nearest(grid, MESSAGE_UPSAMPLE))
}

/// Returns `(encoded, residual)`, both `[B, 3, H, W]`.
pub fn encode<T: Real>(ctx: &mut Ctx<'_, T>, images: Var, messages: Var, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let (_, c, h, w) = ctx.tape.value(images).dims4();
    if c != 3 || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "image {c}x{h}x{w} does not match model size 3x{0}x{0}",
            cfg.image_size
        )));
    }
    let msg = embed_message(ctx, messages, cfg)?;
    let centred = ctx.tape.add_scalar(images, T::of(-0.5));
    let input = ctx.tape.concat_channels(msg, centred);

    let d0 = ctx.conv_block("encoder.down0", input, 1)?;
    let d1 = ctx.conv_block("encoder.down1", d0, 2)?;
    let d2 = ctx.conv_block("encoder.down2", d1, 2)?;
    let d3 = ctx.conv_block("encoder.down3", d2, 2)?;

    let u2 = ctx.tape.upsample_nearest(d3, 2);
    let u2 = ctx.conv_block("encoder.up2", u2, 1)?;
    let u2 = ctx.tape.concat_channels(d2, u2);
    let u2 = ctx.conv_block("encoder.merge2", u2, 1)?;

    let u1 = ctx.tape.upsample_nearest(u2, 2);
    let u1 = ctx.conv_block("encoder.up1", u1, 1)?;
    let u1 = ctx.tape.concat_channels(d1, u1);
    let u1 = ctx.conv_block("encoder.merge1", u1, 1)?;

    let u0 = ctx.tape.upsample_nearest(u1, 2);
    let u0 = ctx.conv_block("encoder.up0", u0, 1)?;
    let u0 = ctx.tape.concat_channels(d0, u0);
    let u0 = ctx.conv_block("encoder.merge0", u0, 1)?;

    let residual = ctx.conv("encoder.residual", u0, 1, 0);
    let encoded = combine(ctx, images, residual, cfg.output_mode);
    Ok((encoded, residual))
}

/// Merge image and residual under `mode`.
pub fn combine<T: Real>(ctx: &mut Ctx<'_, T>, images: Var, residual: Var, mode: OutputMode) -> Var {
    match mode {
        OutputMode::Additive => ctx.tape.add(images, residual),
        OutputMode::Sigmoid => {
            let centred = ctx.tape.add_scalar(images, T::of(-0.5));
            let pre = ctx.tape.add(centred, residual);
            ctx.tape.sigmoid(pre)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{NormMode, Tape};

    fn cfg(size: usize, n_bits: usize, mode: OutputMode) -> ModelConfig {
        ModelConfig {
            image_size: size,
            n_bits,
            unet_base: 2,
            decoder_base: 2,
            output_mode: mode,
            ..ModelConfig::default()
        }
    }

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_params(&mut s, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn embed(cfg: &ModelConfig, s: &ParamStore<f64>, bits: Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars = s.bind_frozen(&mut tape);
        let m = tape.constant(bits);
        let mut ctx = Ctx::new(&mut tape, &vars, s, cfg.norm, false);
        let out = embed_message(&mut ctx, m, cfg)?;
        Ok(tape.value(out).clone())
    }

    fn run(cfg: &ModelConfig, s: &ParamStore<f64>, img: Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = img.shape()[0];
        let bits = Tensor::from_fn(&[n, cfg.n_bits], |_| f64::from(rng.gen_range(0..2u8)));
        let mut tape = Tape::new();
        let vars = s.bind_frozen(&mut tape);
        let (i, m) = (tape.constant(img), tape.constant(bits));
        let mut ctx = Ctx::new(&mut tape, &vars, s, cfg.norm, false);
        let (e, r) = encode(&mut ctx, i, m, cfg).unwrap();
        (tape.value(e).clone(), tape.value(r).clone())
    }

    #[test]
    fn full_scale_message_grid() {
        let c = cfg(400, 100, OutputMode::Sigmoid);
        assert_eq!(message_grid(&c).unwrap(), (50, 50));
        assert!(message_grid(&cfg(60, 4, OutputMode::Sigmoid)).is_err());
    }

    #[test]
    fn embed_shape_and_wrong_length() {
        let c = cfg(32, 6, OutputMode::Sigmoid);
        let s = store(&c, 1);
        let out = embed(&c, &s, Tensor::from_fn(&[2, 6], |i| (i % 2) as f64)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 32, 32]);
        assert!(embed(&c, &s, Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn zero_dense_layer_embeds_to_zero() {
        let mut c = cfg(16, 4, OutputMode::Sigmoid);
        c.norm.mode = NormMode::None;
        let mut s = store(&c, 2);
        for suffix in ["weight", "bias"] {
            s.get_mut(&format!("{MESSAGE_FC}.{suffix}")).unwrap().data_mut().fill(0.0);
        }
        let out = embed(&c, &s, Tensor::full(&[1, 4], 1.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsampled_blocks_are_constant() {
        let mut c = cfg(24, 5, OutputMode::Sigmoid);
        c.norm.mode = NormMode::None;
        let s = store(&c, 4);
        let out = embed(&c, &s, Tensor::from_fn(&[1, 5], |i| (i % 2) as f64)).unwrap();
        for ch in 0..3 {
            for by in 0..3 {
                for bx in 0..3 {
                    let corner = out.data()[(ch * 24 + by * 8) * 24 + bx * 8];
                    for y in 0..8 {
                        for x in 0..8 {
                            assert_eq!(out.data()[(ch * 24 + by * 8 + y) * 24 + bx * 8 + x], corner);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_output_strictly_inside_unit_interval() {
        let c = cfg(16, 4, OutputMode::Sigmoid);
        let mut s = store(&c, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in s.get_mut("encoder.residual.weight").unwrap().data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let img = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.gen_range(-2.0..3.0));
        let (enc, _) = run(&c, &s, img);
        assert!(enc.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn untrained_head_gives_zero_residual() {
        let c = cfg(16, 4, OutputMode::Additive);
        let s = store(&c, 7);
        let img = Tensor::from_fn(&[1, 3, 16, 16], |i| (i % 11) as f64 / 10.0);
        let (enc, res) = run(&c, &s, img.clone());
        assert!(res.data().iter().all(|&v| v == 0.0));
        assert_eq!(enc, img);

        let c = cfg(16, 4, OutputMode::Sigmoid);
        let (enc, _) = run(&c, &store(&c, 7), Tensor::full(&[1, 3, 16, 16], 0.5));
        assert!(enc.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let c = cfg(16, 4, OutputMode::Sigmoid);
        let s = store(&c, 8);
        let mut tape = Tape::new();
        let vars = s.bind_frozen(&mut tape);
        let i = tape.constant(Tensor::zeros(&[1, 3, 24, 24]));
        let m = tape.constant(Tensor::zeros(&[1, 4]));
        let mut ctx = Ctx::new(&mut tape, &vars, &s, c.norm, false);
        assert!(encode(&mut ctx, i, m, &c).is_err());
    }

    #[test]
    fn output_mode_round_trips_through_text() {
        for m in [OutputMode::Additive, OutputMode::Sigmoid] {
            assert_eq!(m.to_string().parse::<OutputMode>().unwrap(), m);
        }
        assert!("tanh".parse::<OutputMode>().is_err());
    }
}
