use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stegamark::data_io::{bit_accuracy, synthetic_image, ImageBuffer, Message};
use stegamark::losses::{self, combine_adaptive, AdaptiveWeights, LossTriple, PerceptualBackend};
use stegamark::nn::{norm, Tape, Tensor};
use stegamark::perturb::{sample_draw, strength_schedule, BlurDraw, PerturbConfig};
use stegamark::robustness::{self, percentile};

fn bits(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, n)
}

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

fn eval(x: &Tensor<f64>, f: impl FnOnce(&mut Tape<f64>, stegamark::nn::Var) -> stegamark::nn::Var) -> Tensor<f64> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = f(&mut t, v);
    t.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bit_accuracy_is_a_symmetric_fraction(a in bits(24), b in bits(24)) {
        let (ma, mb) = (Message::new(a).unwrap(), Message::new(b).unwrap());
        let ab = bit_accuracy(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, bit_accuracy(&mb, &ma).unwrap());
        prop_assert_eq!(bit_accuracy(&ma, &ma).unwrap(), 1.0);
        prop_assert_eq!(bit_accuracy(&ma, &ma.complement()).unwrap(), 0.0);
    }

    #[test]
    fn messages_reject_non_binary_values(mut v in bits(10), i in 0usize..10, bad in 2u8..=255) {
        v[i] = bad;
        prop_assert!(Message::new(v).is_err());
    }

    #[test]
    fn retained_pixels_matches_closed_form(h in 16usize..120, w in 16usize..120, band in 0usize..8) {
        let kept = robustness::retained_pixels(h, w, band);
        prop_assert_eq!(kept, (h - 2 * band) * (w - 2 * band));
        let img = ImageBuffer::filled(h, w, 1.0).unwrap();
        let framed = robustness::add_frame(&img, band).unwrap();
        let lit = framed.pixels()[..h * w].iter().filter(|&&v| v == 1.0).count();
        prop_assert_eq!(lit, kept);
    }

    #[test]
    fn dither_is_binary(seed in any::<u64>()) {
        let img = synthetic_image(24, 24, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let out = robustness::one_bit_dither(&img);
        prop_assert!(out.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn instance_norm_ignores_affine_rescaling(
        x in tensor(&[2, 3, 4, 4], -1.0, 1.0),
        a in 0.5f64..4.0,
        b in -2.0f64..2.0,
    ) {
        let base = eval(&x, |t, v| norm::instance_norm(t, v, 1e-8));
        let scaled = x.map(|v| a * v + b);
        let moved = eval(&scaled, |t, v| norm::instance_norm(t, v, 1e-8));
        prop_assert!(base.max_abs_diff(&moved) < 1e-4);
    }

    #[test]
    fn pyramid_loss_is_symmetric_and_nonnegative(
        a in tensor(&[1, 3, 16, 16], 0.0, 1.0),
        b in tensor(&[1, 3, 16, 16], 0.0, 1.0),
    ) {
        let loss = |p: &Tensor<f64>, q: &Tensor<f64>| {
            let mut t = Tape::new();
            let (u, v) = (t.constant(p.clone()), t.constant(q.clone()));
            let l = losses::perceptual_loss(&mut t, u, v, PerceptualBackend::Pyramid).unwrap();
            t.scalar(l)
        };
        let ab = loss(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - loss(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(loss(&a, &a), 0.0);
        let shifted = a.map(|v| v + 0.1);
        prop_assert!((loss(&a, &shifted) - 0.04).abs() < 1e-12);
    }

    #[test]
    fn residual_loss_is_quadratic(r in tensor(&[1, 3, 8, 8], -1.0, 1.0), k in 0.1f64..5.0) {
        let l = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let o = losses::residual_loss(&mut t, v);
            t.scalar(o)
        };
        let base = l(&r);
        prop_assert!((l(&r.map(|v| k * v)) - k * k * base).abs() <= 1e-12 * (1.0 + k * k * base));
    }

    #[test]
    fn adaptive_objective_is_stationary_at_sigma_squared_equal_loss(
        l_r in 1e-4f64..1.0, l_p in 1e-4f64..1.0, l_m in 1e-4f64..2.0,
    ) {
        let t = LossTriple::new(l_r, l_p, l_m).unwrap();
        let opt = AdaptiveWeights::from_array(t.as_array().map(|l| 0.5 * l.ln()));
        let best = combine_adaptive(&t, &opt);
        for i in 0..3 {
            for d in [-1e-3, 1e-3] {
                let mut s = opt.as_array();
                s[i] += d;
                prop_assert!(combine_adaptive(&t, &AdaptiveWeights::from_array(s)) > best);
            }
        }
    }

    #[test]
    fn draws_stay_within_strength_bounds(seed in any::<u64>(), strength in 0.0f64..=1.0) {
        let cfg = PerturbConfig::for_image_size(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = sample_draw(64, 64, strength, &cfg, &mut rng).unwrap();
        let tol = 1e-12;
        for c in d.corner_offsets {
            prop_assert!(c[0].abs() <= strength * cfg.max_corner_shift + tol);
            prop_assert!(c[1].abs() <= strength * cfg.max_corner_shift + tol);
        }
        match d.blur {
            BlurDraw::Defocus { sigma } => prop_assert!(sigma <= strength * cfg.defocus_sigma_max + tol),
            BlurDraw::Motion { length, .. } => {
                prop_assert!(length as f64 <= 1.0 + (strength * (cfg.blur_kernel as f64 - 1.0)).round())
            }
        }
        prop_assert!(d.rgb_offset.iter().all(|o| o.abs() <= strength * cfg.rgb_offset_max + tol));
        prop_assert!((d.brightness - 1.0).abs() <= strength * cfg.brightness_delta + tol);
        prop_assert!((d.contrast - 1.0).abs() <= strength * cfg.contrast_delta + tol);
        prop_assert!((d.saturation - 1.0).abs() <= strength * cfg.saturation_delta + tol);
        prop_assert!(d.noise_sigma <= strength * cfg.noise_sigma_max + tol);
        if let Some(rect) = d.crop {
            prop_assert!(rect.inside(64, 64));
            prop_assert!(rect.area_fraction(64, 64) >= 1.0 - strength * (1.0 - cfg.crop_area_range.0) - 1e-9);
        }
    }

    #[test]
    fn strength_ramp_is_monotone_and_bounded(a in 0u64..50_000, b in 0u64..50_000, ramp in 1u64..20_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (s_lo, s_hi) = (strength_schedule(lo, ramp), strength_schedule(hi, ramp));
        prop_assert!((0.0..=1.0).contains(&s_lo) && (0.0..=1.0).contains(&s_hi));
        prop_assert!(s_lo <= s_hi);
    }

    #[test]
    fn percentiles_are_ordered(mut v in prop::collection::vec(0.0f64..1.0, 1..40)) {
        v.sort_by(f64::total_cmp);
        let qs = [0.0, 0.1, 0.5, 0.9, 1.0].map(|q| percentile(&v, q));
        prop_assert!(qs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(qs[0], v[0]);
        prop_assert_eq!(qs[4], *v.last().unwrap());
    }
}
