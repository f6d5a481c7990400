//! Spatial-transformer rectification followed by the convolutional
//! bit decoder.

use rand::Rng;

use crate::data_io::Message;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::layers::{add_conv, add_linear, add_norm};
use crate::nn::{Ctx, ParamStore, Real, Tensor, Var};

/// First convolution of the decrypt stack; its mean |gradient| is the
/// decoder-side vanishing-gradient probe.
pub const DECRYPT_CONV1: &str = "decoder.decrypt.conv1";
pub const DECRYPT_OUT: &str = "decoder.decrypt.fc2";
pub const STN_THETA: &str = "decoder.stn.theta";

/// Row-major 2×3 identity affine.
pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Output side of a 3×3, pad-1 convolution with stride 2.
fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

fn stn_hidden(cfg: &ModelConfig) -> usize {
    4 * cfg.decoder_base
}

fn decrypt_hidden(cfg: &ModelConfig) -> usize {
    8 * cfg.decoder_base
}

/// `(name, cin, cout, stride)` of the seven decrypt convolutions.
fn decrypt_convs(cfg: &ModelConfig) -> [(String, usize, usize, usize); 7] {
    let c = cfg.decoder_base;
    let spec = [
        (3, c, 2),
        (c, c, 1),
        (c, 2 * c, 2),
        (2 * c, 2 * c, 1),
        (2 * c, 4 * c, 2),
        (4 * c, 4 * c, 1),
        (4 * c, 4 * c, 2),
    ];
    let mut out: [(String, usize, usize, usize); 7] = Default::default();
    for (i, (cin, cout, s)) in spec.into_iter().enumerate() {
        out[i] = (format!("decoder.decrypt.conv{}", i + 1), cin, cout, s);
    }
    out
}

fn stn_convs(cfg: &ModelConfig) -> [(&'static str, usize, usize); 3] {
    let c = cfg.decoder_base;
    [
        ("decoder.stn.conv1", 3, c),
        ("decoder.stn.conv2", c, 2 * c),
        ("decoder.stn.conv3", 2 * c, 4 * c),
    ]
}

pub fn init_params<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let norm = &cfg.norm;
    let mut side = cfg.image_size;
    for (name, cin, cout) in stn_convs(cfg) {
        add_conv(store, name, cin, cout, 3, rng);
        add_norm(store, name, cout, norm);
        side = halve(side);
    }
    let flat = 4 * cfg.decoder_base * side * side;
    add_linear(store, "decoder.stn.fc1", flat, stn_hidden(cfg), rng);
    add_norm(store, "decoder.stn.fc1", stn_hidden(cfg), norm);
    // Identity initialization of the affine head.
    store.insert(format!("{STN_THETA}.weight"), Tensor::zeros(&[6, stn_hidden(cfg)]));
    store.insert(
        format!("{STN_THETA}.bias"),
        Tensor::from_fn(&[6], |i| T::of(IDENTITY_AFFINE[i])),
    );

    let mut side = cfg.image_size;
    for (name, cin, cout, stride) in decrypt_convs(cfg) {
        add_conv(store, &name, cin, cout, 3, rng);
        add_norm(store, &name, cout, norm);
        if stride == 2 {
            side = halve(side);
        }
    }
    let flat = 4 * cfg.decoder_base * side * side;
    add_linear(store, "decoder.decrypt.fc1", flat, decrypt_hidden(cfg), rng);
    add_norm(store, "decoder.decrypt.fc1", decrypt_hidden(cfg), norm);
    add_linear(store, DECRYPT_OUT, decrypt_hidden(cfg), cfg.n_bits, rng);
    if norm.before_decoder_sigmoid {
        add_norm(store, DECRYPT_OUT, cfg.n_bits, norm);
    }
    Ok(())
}

fn flatten<T: Real>(ctx: &mut Ctx<'_, T>, x: Var) -> Var {
    let s = ctx.tape.shape(x).to_vec();
    let n = s[0];
    let rest = s[1..].iter().product();
    ctx.tape.reshape(x, &[n, rest])
}

/// Affine parameters `[B, 6]` predicted by the localizer.
pub fn localize<T: Real>(ctx: &mut Ctx<'_, T>, images: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut x = images;
    for (name, _, _) in stn_convs(cfg) {
        x = ctx.conv_block(name, x, 2)?;
    }
    let x = flatten(ctx, x);
    let x = ctx.dense_block("decoder.stn.fc1", x)?;
    Ok(ctx.linear(STN_THETA, x))
}

/// Resample `images[B,3,H,W]` on the grid produced by the predicted affine.
pub fn stn_rectify<T: Real>(ctx: &mut Ctx<'_, T>, images: Var, cfg: &ModelConfig) -> Result<Var> {
    let theta = localize(ctx, images, cfg)?;
    Ok(warp_affine(ctx, images, theta))
}

/// Bilinear affine resampling with normalized `theta[B,6]`.
pub fn warp_affine<T: Real>(ctx: &mut Ctx<'_, T>, images: Var, theta: Var) -> Var {
    let (_, _, h, w) = ctx.tape.value(images).dims4();
    let grid = ctx.tape.affine_grid(theta, h, w);
    ctx.tape.grid_sample(images, grid)
}

/// Rectify, then map to `[B, n_bits]` pre-sigmoid logits.
pub fn decode<T: Real>(ctx: &mut Ctx<'_, T>, images: Var, cfg: &ModelConfig) -> Result<Var> {
    let (_, c, h, w) = ctx.tape.value(images).dims4();
    if c != 3 || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "decoder expects 3x{0}x{0}, got {c}x{h}x{w}",
            cfg.image_size
        )));
    }
    let mut x = stn_rectify(ctx, images, cfg)?;
    for (name, _, _, stride) in decrypt_convs(cfg) {
        x = ctx.conv_block(&name, x, stride)?;
    }
    let x = flatten(ctx, x);
    let x = ctx.dense_block("decoder.decrypt.fc1", x)?;
    let logits = ctx.linear(DECRYPT_OUT, x);
    if cfg.norm.before_decoder_sigmoid {
        ctx.norm(DECRYPT_OUT, logits)
    } else {
        Ok(logits)
    }
}

/// Threshold at zero; a logit of exactly 0 decodes to 1.
pub fn logits_to_bits<T: Real>(logits: &[T]) -> Result<Message> {
    if let Some(v) = logits.iter().find(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("logit {v:?}")));
    }
    Message::new(
        logits
            .iter()
            .map(|&v| u8::from(v >= T::zero()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Tape;

    fn small() -> (ModelConfig, ParamStore<f64>) {
        let cfg = ModelConfig {
            image_size: 24,
            n_bits: 6,
            unet_base: 2,
            decoder_base: 2,
            ..ModelConfig::default()
        };
        let mut s = ParamStore::new();
        init_params(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (cfg, s)
    }

    fn rectify(cfg: &ModelConfig, s: &ParamStore<f64>, img: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let vars = s.bind_frozen(&mut tape);
        let i = tape.constant(img.clone());
        let mut ctx = Ctx::new(&mut tape, &vars, s, cfg.norm, false);
        let out = stn_rectify(&mut ctx, i, cfg).unwrap();
        tape.value(out).clone()
    }

    fn logits(cfg: &ModelConfig, s: &ParamStore<f64>, img: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let vars = s.bind_frozen(&mut tape);
        let i = tape.constant(img.clone());
        let mut ctx = Ctx::new(&mut tape, &vars, s, cfg.norm, false);
        let out = decode(&mut ctx, i, cfg).unwrap();
        tape.value(out).clone()
    }

    fn warp(img: &Tensor<f64>, theta: [f64; 6]) -> Tensor<f64> {
        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let t = tape.constant(Tensor::from_vec(&[1, 6], theta.to_vec()).unwrap());
        let empty = ParamStore::new();
        let vars = empty.bind_frozen(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, &empty, Default::default(), false);
        let out = warp_affine(&mut ctx, i, t);
        tape.value(out).clone()
    }

    #[test]
    fn fresh_localizer_is_identity() {
        let (cfg, s) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn(&[2, 3, 24, 24], |_| rng.gen_range(0.0..1.0));
        assert!(rectify(&cfg, &s, &img).max_abs_diff(&img) < 1e-6);
        let one = Tensor::from_vec(&[1, 3, 24, 24], img.sample(0).to_vec()).unwrap();
        assert!(warp(&one, IDENTITY_AFFINE).max_abs_diff(&one) < 1e-6);
    }

    #[test]
    fn translation_matches_shifted_ramp() {
        // f(x, y) = 0.03 x + 0.05 y is reproduced exactly by bilinear sampling.
        let w = 16;
        let f = |x: f64, y: f64| 0.03 * x + 0.05 * y;
        let img = Tensor::from_fn(&[1, 1, w, w], |i| f((i % w) as f64, (i / w) as f64));
        let out = warp(&img, [1.0, 0.0, 0.1, 0.0, 1.0, 0.0]);
        let shift = 0.1 * w as f64 / 2.0;
        for y in 0..w {
            for x in 0..w - 2 {
                let expect = f(x as f64 + shift, y as f64);
                assert!((out.data()[y * w + x] - expect).abs() < 1e-6, "({x},{y})");
            }
        }
    }

    #[test]
    fn logits_have_one_entry_per_bit() {
        let (cfg, s) = small();
        let img = Tensor::full(&[3, 3, 24, 24], 0.4);
        assert_eq!(logits(&cfg, &s, &img).shape(), &[3, 6]);
        let mut tape = Tape::new();
        let vars = s.bind_frozen(&mut tape);
        let i = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let mut ctx = Ctx::new(&mut tape, &vars, &s, cfg.norm, false);
        assert!(decode(&mut ctx, i, &cfg).is_err());
    }

    #[test]
    fn distinct_images_give_distinct_logits() {
        let (mut cfg, _) = small();
        cfg.norm.before_decoder_sigmoid = false;
        let mut s = ParamStore::new();
        init_params(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::from_fn(&[100, 3, 24, 24], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[100, 3, 24, 24], |_| rng.gen_range(0.0..1.0));
        let (la, lb) = (logits(&cfg, &s, &a), logits(&cfg, &s, &b));
        let collisions = la
            .data()
            .chunks(6)
            .zip(lb.data().chunks(6))
            .filter(|(x, y)| x == y)
            .count();
        assert_eq!(collisions, 0);
        assert_eq!(la, logits(&cfg, &s, &a));
    }

    #[test]
    fn threshold_and_tie_rule() {
        assert_eq!(logits_to_bits(&[-5.0f32; 4]).unwrap().bits(), &[0, 0, 0, 0]);
        assert_eq!(logits_to_bits(&[3.0f64, -3.0, 0.0]).unwrap().bits(), &[1, 0, 1]);
        assert!(logits_to_bits(&[0.0, f32::NAN]).is_err());
    }

    #[test]
    fn permutation_maps_elementwise() {
        let l = [0.3f64, -1.0, 2.0, -0.1, 0.0];
        let perm = [4, 2, 0, 3, 1];
        let base = logits_to_bits(&l).unwrap();
        let permuted: Vec<f64> = perm.iter().map(|&i| l[i]).collect();
        let pb = logits_to_bits(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pb.bits()[k], base.bits()[i]);
        }
    }
}
