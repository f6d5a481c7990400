//! Helpers shared by the integration targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stegamark::data_io::{synthetic_image, Dataset, DatasetItem};
use stegamark::decoder;
use stegamark::encoder::{self, OutputMode};
use stegamark::losses::{self, PerceptualBackend};
use stegamark::model::{Model, ModelConfig};
use stegamark::nn::{fd_grad_check, fd_grad_check_coords, norm, Ctx, NormMode, ParamStore, Tape, Tensor, Var};
use stegamark::perturb::{self, CropRect, PerturbConfig};

pub const FD_STEP: f64 = 1e-6;

pub fn dataset(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| DatasetItem {
            name: format!("img_{i:03}.png"),
            image: synthetic_image(size, size, &mut rng).unwrap(),
        })
        .collect();
    Dataset::from_items(items, (size, size)).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ c ⊙ y` with fixed random weights, so no coordinate's gradient cancels.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = uniform(tape.shape(y), -1.0, 1.0, &mut rng);
    let p = tape.mul_const(y, c);
    tape.sum(p)
}

fn check(name: &str, f: impl Fn(&mut Tape<f64>, Var) -> Var, x: &Tensor<f64>) -> (String, f64) {
    let err = fd_grad_check(f, x, FD_STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name.to_string(), err)
}

fn check_coords(name: &str, f: impl Fn(&mut Tape<f64>, Var) -> Var, x: &Tensor<f64>, coords: &[usize]) -> (String, f64) {
    let err = fd_grad_check_coords(f, x, FD_STEP, coords).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name.to_string(), err)
}

/// Small f64 model whose residual head and localizer output are random, so
/// every path (message → encoder → image → STN → logits) carries gradient.
pub fn live_model(norm_mode: NormMode, output_mode: OutputMode, seed: u64) -> (ModelConfig, ParamStore<f64>) {
    let mut cfg = ModelConfig::toy();
    cfg.image_size = 24;
    cfg.n_bits = 4;
    cfg.unet_base = 2;
    cfg.decoder_base = 2;
    cfg.norm.mode = norm_mode;
    cfg.output_mode = output_mode;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(cfg.clone(), &mut rng).unwrap();
    let mut store = model.params.cast::<f64>();
    for name in ["encoder.residual.weight", "decoder.stn.theta.weight"] {
        let t = store.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    (cfg, store)
}

/// Every perturbation, both norms, both loss combiners, the STN and the full
/// encode → perturb → decode → loss chain, as (case, worst relative error).
pub fn differentiability_suite() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let img = uniform(&[2, 3, 8, 8], 0.2, 0.7, &mut rng);
    let mut out = Vec::new();

    out.push(check("perturb/brightness", |t, x| {
        let y = perturb::brightness(t, x, &[1.3, 0.6]).unwrap();
        weighted_sum(t, y, 1)
    }, &img));
    out.push(check("perturb/contrast", |t, x| {
        let y = perturb::contrast(t, x, &[1.2, 0.5]).unwrap();
        weighted_sum(t, y, 2)
    }, &img));
    out.push(check("perturb/saturation", |t, x| {
        let y = perturb::saturation(t, x, &[1.2, 0.3]).unwrap();
        weighted_sum(t, y, 3)
    }, &img));
    out.push(check("perturb/rgb_offset", |t, x| {
        let y = perturb::rgb_offset(t, x, &[[0.05, -0.05, 0.1], [-0.1, 0.0, 0.02]]).unwrap();
        weighted_sum(t, y, 4)
    }, &img));
    out.push(check("perturb/gaussian_noise", |t, x| {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let y = perturb::gaussian_noise(t, x, &[0.01, 0.02], &mut r).unwrap();
        weighted_sum(t, y, 5)
    }, &img));
    out.push(check("perturb/defocus_blur", |t, x| {
        let y = perturb::defocus_blur(t, x, &[0.8, 1.3]).unwrap();
        weighted_sum(t, y, 6)
    }, &img));
    out.push(check("perturb/motion_blur", |t, x| {
        let y = perturb::motion_blur(t, x, &[3, 5], &[0.4, 2.0]).unwrap();
        weighted_sum(t, y, 7)
    }, &img));
    let homs = [
        perturb::homography_from_offsets(8, 8, &[[0.7, -0.4], [-0.3, 0.5], [0.2, 0.9], [-0.6, -0.1]]).unwrap(),
        perturb::homography_from_offsets(8, 8, &[[-0.2, 0.3], [0.4, 0.1], [-0.5, -0.6], [0.3, 0.2]]).unwrap(),
    ];
    out.push(check("perturb/perspective_warp", |t, x| {
        let y = perturb::warp_homography(t, x, &homs).unwrap();
        weighted_sum(t, y, 8)
    }, &img));
    let rects = [
        CropRect { x0: 1.3, y0: 0.7, width: 5.1, height: 6.2 },
        CropRect { x0: 0.4, y0: 1.9, width: 6.6, height: 4.7 },
    ];
    out.push(check("perturb/crop_resize", |t, x| {
        let y = perturb::crop_resize(t, x, &rects, (8, 8)).unwrap();
        weighted_sum(t, y, 9)
    }, &img));
    let cfg = PerturbConfig::for_image_size(8);
    let mut draw_rng = ChaCha8Rng::seed_from_u64(31);
    let draws: Vec<_> = (0..2)
        .map(|_| perturb::sample_draw(8, 8, 0.6, &cfg, &mut draw_rng).unwrap())
        .collect();
    out.push(check("perturb/pipeline", |t, x| {
        let y = perturb::apply_draws(t, x, &draws).unwrap();
        weighted_sum(t, y, 10)
    }, &img));

    let feats = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    out.push(check("norm/instance", |t, x| {
        let y = norm::instance_norm(t, x, 1e-5);
        weighted_sum(t, y, 11)
    }, &feats));
    out.push(check("norm/batch_train", |t, x| {
        let (y, _) = norm::batch_norm(t, x, 1e-5, (&[0.0; 3], &[1.0; 3]), true).unwrap();
        weighted_sum(t, y, 12)
    }, &feats));
    out.push(check("norm/batch_inference", |t, x| {
        let (y, _) = norm::batch_norm(t, x, 1e-5, (&[0.1, -0.2, 0.3], &[0.5, 2.0, 1.5]), false).unwrap();
        weighted_sum(t, y, 13)
    }, &feats));

    let residual = uniform(&[2, 3, 8, 8], -0.2, 0.2, &mut rng);
    let other = uniform(&[2, 3, 8, 8], 0.1, 0.9, &mut rng);
    let logits_t = uniform(&[2, 5], -2.0, 2.0, &mut rng);
    let targets = Tensor::from_fn(&[2, 5], |i| (i % 2) as f64);
    let proj = uniform(&[5, 3 * 64], -0.1, 0.1, &mut rng);
    let three_losses = |t: &mut Tape<f64>, x: Var| -> [Var; 3] {
        let l_r = losses::residual_loss(t, x);
        let o = t.constant(other.clone());
        let l_p = losses::perceptual_loss(t, x, o, PerceptualBackend::Pyramid).unwrap();
        // Logits depend on x through a fixed random projection.
        let flat = t.reshape(x, &[2, 3 * 64]);
        let w = t.constant(proj.clone());
        let lg = t.linear(flat, w, None);
        let base = t.constant(logits_t.clone());
        let lg = t.add(lg, base);
        let tg = t.constant(targets.clone());
        [l_r, l_p, losses::message_loss(t, lg, tg).unwrap()]
    };
    out.push(check("loss/combine_fixed", |t, x| {
        let l = three_losses(t, x);
        losses::combine_fixed_var(t, l, [1.5, 0.7, 1.0])
    }, &residual));
    out.push(check("loss/combine_adaptive", |t, x| {
        let l = three_losses(t, x);
        let s = t.constant(Tensor::from_vec(&[3], vec![0.3, -0.2, 0.1]).unwrap());
        losses::combine_adaptive_var(t, l, s).unwrap()
    }, &residual));
    let fixed_losses = [0.02, 0.3, 0.6];
    out.push(check("loss/combine_adaptive_log_sigma", |t, s| {
        let l = fixed_losses.map(|v| t.constant(Tensor::from_vec(&[1], vec![v]).unwrap()));
        let l = l.map(|v| t.sum(v));
        losses::combine_adaptive_var(t, l, s).unwrap()
    }, &Tensor::from_vec(&[3], vec![0.4, -0.3, 0.2]).unwrap()));

    // STN: warp with respect to the affine, then the full localizer path.
    let theta = Tensor::from_vec(&[2, 6], vec![1.05, 0.04, 0.03, -0.02, 0.97, -0.05, 0.93, -0.06, 0.01, 0.05, 1.02, 0.04]).unwrap();
    let stn_img = uniform(&[2, 3, 24, 24], 0.1, 0.9, &mut rng);
    let (mcfg, store) = live_model(NormMode::Instance, OutputMode::Sigmoid, 5);
    out.push(check("stn/theta", |t, th| {
        let vars = store.bind_frozen(t);
        let mut ctx = Ctx::new(t, &vars, &store, mcfg.norm, true);
        let im = ctx.tape.constant(stn_img.clone());
        let y = decoder::warp_affine(&mut ctx, im, th);
        weighted_sum(t, y, 14)
    }, &theta));
    let coords: Vec<usize> = (0..stn_img.len()).step_by(23).collect();
    out.push(check_coords("stn/rectify_image", |t, x| {
        let vars = store.bind_frozen(t);
        let mut ctx = Ctx::new(t, &vars, &store, mcfg.norm, true);
        let y = decoder::stn_rectify(&mut ctx, x, &mcfg).unwrap();
        weighted_sum(t, y, 15)
    }, &stn_img, &coords));

    for (mode, label) in NORMS {
        let (mcfg, store) = live_model(mode, OutputMode::Sigmoid, 6);
        let draws = e2e_draws(&mut draw_rng);
        let msgs = e2e_messages();
        out.push(check_coords(&format!("end_to_end/{label}/image"), |t, x| {
            let m = t.constant(msgs.clone());
            end_to_end_loss(t, &mcfg, &store, &draws, x, m)
        }, &stn_img, &coords));
        out.push(check(&format!("end_to_end/{label}/message"), |t, m| {
            let x = t.constant(stn_img.clone());
            end_to_end_loss(t, &mcfg, &store, &draws, x, m)
        }, &msgs));
    }
    out
}

pub const NORMS: [(NormMode, &str); 3] = [(NormMode::Instance, "instance"), (NormMode::Batch, "batch"), (NormMode::None, "none")];

fn e2e_messages() -> Tensor<f64> {
    Tensor::from_fn(&[2, 4], |i| ((i * 7 + 1) % 3 % 2) as f64)
}

fn e2e_draws(rng: &mut ChaCha8Rng) -> Vec<perturb::PerturbDraw> {
    let cfg = PerturbConfig::for_image_size(24);
    (0..2).map(|_| perturb::sample_draw(24, 24, 0.5, &cfg, rng).unwrap()).collect()
}

/// Encode, perturb, decode and combine all three losses adaptively.
pub fn end_to_end_loss(
    t: &mut Tape<f64>,
    mcfg: &ModelConfig,
    store: &ParamStore<f64>,
    draws: &[perturb::PerturbDraw],
    images: Var,
    messages: Var,
) -> Var {
    let vars = store.bind_frozen(t);
    let mut ctx = Ctx::new(t, &vars, store, mcfg.norm, true);
    let (enc, res) = encoder::encode(&mut ctx, images, messages, mcfg).unwrap();
    let noisy = perturb::apply_draws(ctx.tape, enc, draws).unwrap();
    let logits = decoder::decode(&mut ctx, noisy, mcfg).unwrap();
    let t = ctx.tape;
    let l_r = losses::residual_loss(t, res);
    let l_p = losses::perceptual_loss(t, enc, images, PerceptualBackend::Pyramid).unwrap();
    let targets = t.constant(Tensor::from_fn(&[2, 4], |i| (i % 2) as f64));
    let l_m = losses::message_loss(t, logits, targets).unwrap();
    let s = t.constant(Tensor::from_vec(&[3], vec![0.5, 0.5, 0.0]).unwrap());
    losses::combine_adaptive_var(t, [l_r, l_p, l_m], s).unwrap()
}

/// Mean |∂loss/∂message| of the end-to-end chain for each norm mode; zero
/// would mean a finite-difference pass above proved nothing.
pub fn end_to_end_message_gradients() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let img = uniform(&[2, 3, 24, 24], 0.1, 0.9, &mut rng);
    NORMS
        .iter()
        .map(|&(mode, label)| {
            let (mcfg, store) = live_model(mode, OutputMode::Sigmoid, 6);
            let draws = e2e_draws(&mut rng);
            let mut t = Tape::new();
            let m = t.variable(e2e_messages());
            let x = t.constant(img.clone());
            let loss = end_to_end_loss(&mut t, &mcfg, &store, &draws, x, m);
            let g = t.backward(loss);
            (label.to_string(), g.get(m).map_or(0.0, |g| g.mean_abs()))
        })
        .collect()
}
