//! Differentiable training-time perturbations between encoder and decoder.
//!
//! Every operation works on an `[N, 3, H, W]` tape variable with one set of
//! parameters per sample and is differentiable with respect to the pixels.
//! Operations whose parameters are exactly the identity are skipped, so the
//! pipeline at strength zero returns its input untouched.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Kernel, Real, Tape, Tensor, Var};

/// Reference side the default corner shift is quoted at.
const REFERENCE_SIDE: f64 = 400.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Master switch; when false the pipeline is the identity.
    pub enabled: bool,
    /// Maximum displacement of each corner for the perspective warp, in pixels.
    pub max_corner_shift: f64,
    /// Maximum motion-blur line length, in pixels.
    pub blur_kernel: usize,
    pub defocus_sigma_max: f64,
    /// Factors are drawn from `[1 − s·δ, 1 + s·δ]`.
    pub brightness_delta: f64,
    pub contrast_delta: f64,
    pub saturation_delta: f64,
    pub rgb_offset_max: f64,
    pub noise_sigma_max: f64,
    pub crop_enabled: bool,
    pub crop_area_range: (f64, f64),
    pub crop_ratio_range: (f64, f64),
    pub ramp_steps: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_corner_shift: 20.0,
            blur_kernel: 7,
            defocus_sigma_max: 3.0,
            brightness_delta: 0.3,
            contrast_delta: 0.5,
            saturation_delta: 1.0,
            rgb_offset_max: 0.1,
            noise_sigma_max: 0.02,
            crop_enabled: true,
            crop_area_range: (0.35, 1.0),
            crop_ratio_range: (0.75, 4.0 / 3.0),
            ramp_steps: 10_000,
        }
    }
}

impl PerturbConfig {
    /// Defaults with the corner shift scaled to `image_size`.
    pub fn for_image_size(image_size: usize) -> Self {
        Self {
            max_corner_shift: 20.0 * image_size as f64 / REFERENCE_SIDE,
            ..Self::default()
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (alo, ahi) = self.crop_area_range;
        let (rlo, rhi) = self.crop_ratio_range;
        let nonneg = [
            self.max_corner_shift,
            self.defocus_sigma_max,
            self.brightness_delta,
            self.contrast_delta,
            self.saturation_delta,
            self.rgb_offset_max,
            self.noise_sigma_max,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("perturbation maxima must be non-negative".into()));
        }
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return Err(Error::Config(format!("crop_area_range {:?} must satisfy 0 < min <= max <= 1", self.crop_area_range)));
        }
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("crop_ratio_range {:?} must satisfy 0 < min <= max", self.crop_ratio_range)));
        }
        if self.ramp_steps == 0 {
            return Err(Error::Config("ramp_steps must be at least 1".into()));
        }
        if self.blur_kernel == 0 {
            return Err(Error::Config("blur_kernel must be at least 1".into()));
        }
        if self.rgb_offset_max > 1.0 {
            return Err(Error::Config("rgb_offset_max must be at most 1".into()));
        }
        Ok(())
    }
}

/// Linear ramp from 0 at step 0 to 1 at `ramp_steps`, flat afterwards.
pub fn strength_schedule(step: u64, ramp_steps: u64) -> f64 {
    (step as f64 / ramp_steps.max(1) as f64).min(1.0)
}

// ---- colour ------------------------------------------------------------------

fn check_factors(factors: &[f64], what: &str) -> Result<()> {
    if let Some(f) = factors.iter().find(|f| !(**f >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} factor {f} must be >= 0")));
    }
    Ok(())
}

fn clamp01<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.clamp(x, T::zero(), T::one())
}

/// `clamp(f · img, 0, 1)` per sample.
pub fn brightness<T: Real>(tape: &mut Tape<T>, x: Var, factors: &[f64]) -> Result<Var> {
    check_factors(factors, "brightness")?;
    if factors.iter().all(|&f| f == 1.0) {
        return Ok(x);
    }
    let y = tape.scale_per_sample(x, factors.iter().map(|&f| T::of(f)).collect());
    Ok(clamp01(tape, y))
}

/// `clamp(μ + f·(img − μ), 0, 1)` with μ the mean luma of the sample.
pub fn contrast<T: Real>(tape: &mut Tape<T>, x: Var, factors: &[f64]) -> Result<Var> {
    check_factors(factors, "contrast")?;
    if factors.iter().all(|&f| f == 1.0) {
        return Ok(x);
    }
    let y = tape.contrast(x, factors.iter().map(|&f| T::of(f)).collect());
    Ok(clamp01(tape, y))
}

/// `clamp(G + f·(img − G), 0, 1)` with G the per-pixel luma.
pub fn saturation<T: Real>(tape: &mut Tape<T>, x: Var, factors: &[f64]) -> Result<Var> {
    check_factors(factors, "saturation")?;
    if factors.iter().all(|&f| f == 1.0) {
        return Ok(x);
    }
    let y = tape.saturation(x, factors.iter().map(|&f| T::of(f)).collect());
    Ok(clamp01(tape, y))
}

/// `clamp(img + o, 0, 1)` with one offset per channel and sample.
pub fn rgb_offset<T: Real>(tape: &mut Tape<T>, x: Var, offsets: &[[f64; 3]]) -> Result<Var> {
    if offsets.iter().flatten().any(|o| !(o.abs() <= 1.0)) {
        return Err(Error::InvalidArgument("rgb offsets must lie in [-1, 1]".into()));
    }
    if offsets.iter().flatten().all(|&o| o == 0.0) {
        return Ok(x);
    }
    let (n, c, h, w) = tape.value(x).dims4();
    let hw = h * w;
    let add = Tensor::from_fn(&[n, c, h, w], |i| {
        let b = i / (c * hw);
        let ch = (i / hw) % c;
        T::of(offsets[b][ch])
    });
    let y = tape.add_const(x, &add);
    Ok(clamp01(tape, y))
}

/// `clamp(img + ε, 0, 1)`, `ε ~ N(0, σ²)` i.i.d.; the noise is a constant
/// on the tape so the gradient passes straight through.
pub fn gaussian_noise<T: Real>(tape: &mut Tape<T>, x: Var, sigmas: &[f64], rng: &mut impl Rng) -> Result<Var> {
    let seeds: Vec<u64> = sigmas.iter().map(|_| rng.gen()).collect();
    gaussian_noise_seeded(tape, x, sigmas, &seeds)
}

fn gaussian_noise_seeded<T: Real>(tape: &mut Tape<T>, x: Var, sigmas: &[f64], seeds: &[u64]) -> Result<Var> {
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("noise sigma {s} must be >= 0")));
    }
    if sigmas.iter().all(|&s| s == 0.0) {
        return Ok(x);
    }
    let (n, c, h, w) = tape.value(x).dims4();
    let per = c * h * w;
    let mut noise = Tensor::zeros(&[n, c, h, w]);
    for (b, (&sigma, &seed)) in sigmas.iter().zip(seeds).enumerate() {
        if sigma == 0.0 {
            continue;
        }
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, sigma).expect("sigma checked non-negative");
        for v in &mut noise.data_mut()[b * per..(b + 1) * per] {
            *v = T::of(dist.sample(&mut r));
        }
    }
    let y = tape.add_const(x, &noise);
    Ok(clamp01(tape, y))
}

// ---- blur --------------------------------------------------------------------

/// Normalized Gaussian kernel with radius `⌈3σ⌉`; σ = 0 gives the identity.
pub fn gaussian_kernel<T: Real>(sigma: f64) -> Kernel<T> {
    if sigma <= 0.0 {
        return Kernel::identity();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let f: Vec<f64> = (-r..=r)
        .map(|u| (-((u * u) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = f.iter().sum();
    Kernel::separable(f.into_iter().map(|v| T::of(v / total)).collect())
}

/// Line of `length` unit-spaced points through the kernel centre at `angle`
/// (radians), splatted with bilinear weights and normalized.
pub fn motion_kernel<T: Real>(length: usize, angle: f64) -> Kernel<T> {
    if length <= 1 {
        return Kernel::identity();
    }
    let (s, c) = angle.sin_cos();
    let pts: Vec<(f64, f64)> = (0..length)
        .map(|i| {
            let t = i as f64 - (length as f64 - 1.0) / 2.0;
            (t * c, t * s)
        })
        .collect();
    let reach = pts
        .iter()
        .map(|&(x, y)| x.abs().max(y.abs()))
        .fold(0.0f64, f64::max);
    let r = reach.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut w = vec![0.0f64; size * size];
    for &(x, y) in &pts {
        let (gx, gy) = (x + r as f64, y + r as f64);
        let (x0, y0) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - x0, gy - y0);
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                let wt = wx * wy;
                if wt > 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                    w[yy as usize * size + xx as usize] += wt;
                }
            }
        }
    }
    let total: f64 = w.iter().sum();
    Kernel::new(size, w.into_iter().map(|v| T::of(v / total)).collect())
}

pub fn defocus_blur<T: Real>(tape: &mut Tape<T>, x: Var, sigmas: &[f64]) -> Result<Var> {
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("defocus sigma {s} must be >= 0")));
    }
    apply_kernels(tape, x, sigmas.iter().map(|&s| gaussian_kernel(s)).collect())
}

pub fn motion_blur<T: Real>(tape: &mut Tape<T>, x: Var, lengths: &[usize], angles: &[f64]) -> Result<Var> {
    if lengths.iter().any(|&l| l == 0) {
        return Err(Error::InvalidArgument("motion blur length must be >= 1".into()));
    }
    apply_kernels(
        tape,
        x,
        lengths
            .iter()
            .zip(angles)
            .map(|(&l, &a)| motion_kernel(l, a))
            .collect(),
    )
}

fn apply_kernels<T: Real>(tape: &mut Tape<T>, x: Var, kernels: Vec<Kernel<T>>) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).dims4();
    if kernels.iter().all(Kernel::is_identity) {
        return Ok(x);
    }
    if let Some(k) = kernels.iter().find(|k| k.radius() >= h.min(w)) {
        return Err(Error::InvalidArgument(format!(
            "blur kernel of size {} does not fit a {h}x{w} image",
            k.size
        )));
    }
    Ok(tape.filter2d(x, kernels))
}

// ---- geometry ----------------------------------------------------------------

/// Homography through four point correspondences (`src[i] ↦ dst[i]`), or
/// `None` for degenerate configurations.
pub fn homography_from_points(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a.set_row(2 * i, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(2 * i + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[2 * i] = u;
        b[2 * i + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    (m.iter().all(|v| v.is_finite()) && m.determinant().abs() > 1e-12).then_some(m)
}

fn is_convex(q: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

fn image_corners(h: usize, w: usize) -> [[f64; 2]; 4] {
    let (x1, y1) = (w as f64 - 0.5, h as f64 - 0.5);
    [[-0.5, -0.5], [x1, -0.5], [x1, y1], [-0.5, y1]]
}

/// Forward homography moving each image corner by `offsets[i]`.
pub fn homography_from_offsets(h: usize, w: usize, offsets: &[[f64; 2]; 4]) -> Option<Matrix3<f64>> {
    let src = image_corners(h, w);
    let mut dst = src;
    for (d, o) in dst.iter_mut().zip(offsets) {
        d[0] += o[0];
        d[1] += o[1];
    }
    if !is_convex(&dst) {
        return None;
    }
    homography_from_points(&src, &dst)
}

/// Warp each sample by its forward homography: `out(p) = in(H⁻¹ p)`, with
/// bilinear resampling and zero fill outside the source.
pub fn warp_homography<T: Real>(tape: &mut Tape<T>, x: Var, homographies: &[Matrix3<f64>]) -> Result<Var> {
    let (n, _, h, w) = tape.value(x).dims4();
    if homographies.len() != n {
        return Err(Error::Shape(format!("{} homographies for {} samples", homographies.len(), n)));
    }
    let mut grid = Tensor::zeros(&[n, h, w, 2]);
    for (b, hm) in homographies.iter().enumerate() {
        let inv = hm
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("homography is not invertible".into()))?;
        for i in 0..h {
            for j in 0..w {
                let p = inv * Vector3::new(j as f64, i as f64, 1.0);
                let o = ((b * h + i) * w + j) * 2;
                let (sx, sy) = if p[2].abs() < 1e-12 {
                    (f64::NAN, f64::NAN)
                } else {
                    (p[0] / p[2], p[1] / p[2])
                };
                grid.data_mut()[o] = T::of(sx);
                grid.data_mut()[o + 1] = T::of(sy);
            }
        }
    }
    let g = tape.constant(grid);
    Ok(tape.grid_sample(x, g))
}

/// Draw corner offsets uniformly in `[−max_shift, max_shift]²` until the
/// warped quadrilateral is non-degenerate.
pub fn sample_corner_offsets(h: usize, w: usize, max_shift: f64, rng: &mut impl Rng) -> Result<[[f64; 2]; 4]> {
    if !(max_shift >= 0.0 && max_shift < h.min(w) as f64 / 4.0) {
        return Err(Error::InvalidArgument(format!(
            "max corner shift {max_shift} must be below a quarter of the image side"
        )));
    }
    if max_shift == 0.0 {
        return Ok([[0.0; 2]; 4]);
    }
    for _ in 0..100 {
        let mut off = [[0.0; 2]; 4];
        for o in &mut off {
            o[0] = rng.gen_range(-max_shift..=max_shift);
            o[1] = rng.gen_range(-max_shift..=max_shift);
        }
        if homography_from_offsets(h, w, &off).is_some() {
            return Ok(off);
        }
    }
    Err(Error::InvalidArgument("could not draw a non-degenerate warp".into()))
}

/// Random perspective warp per sample; returns the forward homographies used.
pub fn perspective_warp<T: Real>(tape: &mut Tape<T>, x: Var, max_shift: f64, rng: &mut impl Rng) -> Result<(Var, Vec<Matrix3<f64>>)> {
    let (n, _, h, w) = tape.value(x).dims4();
    let offsets = (0..n)
        .map(|_| sample_corner_offsets(h, w, max_shift, rng))
        .collect::<Result<Vec<_>>>()?;
    warp_with_offsets(tape, x, &offsets)
}

fn warp_with_offsets<T: Real>(tape: &mut Tape<T>, x: Var, offsets: &[[[f64; 2]; 4]]) -> Result<(Var, Vec<Matrix3<f64>>)> {
    let (_, _, h, w) = tape.value(x).dims4();
    let homs = offsets
        .iter()
        .map(|o| {
            homography_from_offsets(h, w, o)
                .ok_or_else(|| Error::InvalidArgument("degenerate corner offsets".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    if offsets.iter().flatten().flatten().all(|&v| v == 0.0) {
        return Ok((x, homs));
    }
    Ok((warp_homography(tape, x, &homs)?, homs))
}

/// Axis-aligned crop rectangle in continuous pixel units (edges, not centres).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropRect {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            width: w as f64,
            height: h as f64,
        }
    }

    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        self.width * self.height / (h * w) as f64
    }

    pub fn aspect(&self) -> f64 {
        self.width / self.height
    }

    pub fn inside(&self, h: usize, w: usize) -> bool {
        let tol = 1e-9;
        self.x0 >= -tol
            && self.y0 >= -tol
            && self.x0 + self.width <= w as f64 + tol
            && self.y0 + self.height <= h as f64 + tol
    }
}

/// Bilinearly resample each sample's rectangle to `out_size = (H, W)`.
/// Source coordinates are clamped to the image, so no black fringe appears.
pub fn crop_resize<T: Real>(tape: &mut Tape<T>, x: Var, rects: &[CropRect], out_size: (usize, usize)) -> Result<Var> {
    let (n, _, h, w) = tape.value(x).dims4();
    if rects.len() != n {
        return Err(Error::Shape(format!("{} rects for {} samples", rects.len(), n)));
    }
    let (ho, wo) = out_size;
    if (ho, wo) == (h, w) && rects.iter().all(|r| *r == CropRect::full(h, w)) {
        return Ok(x);
    }
    let mut grid = Tensor::zeros(&[n, ho, wo, 2]);
    for (b, r) in rects.iter().enumerate() {
        for i in 0..ho {
            let sy = (r.y0 + (i as f64 + 0.5) * r.height / ho as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
            for j in 0..wo {
                let sx = (r.x0 + (j as f64 + 0.5) * r.width / wo as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
                let o = ((b * ho + i) * wo + j) * 2;
                grid.data_mut()[o] = T::of(sx);
                grid.data_mut()[o + 1] = T::of(sy);
            }
        }
    }
    let g = tape.constant(grid);
    Ok(tape.grid_sample(x, g))
}

/// Rectangle with area fraction in `area_range`, aspect (width/height) in
/// `ratio_range` and a uniformly random position. After ten rejected draws
/// the largest admissible centred rectangle is used.
pub fn sample_crop_rect(h: usize, w: usize, area_range: (f64, f64), ratio_range: (f64, f64), rng: &mut impl Rng) -> Result<CropRect> {
    let (alo, ahi) = area_range;
    let (rlo, rhi) = ratio_range;
    if !(alo > 0.0 && alo <= ahi && ahi <= 1.0 && rlo > 0.0 && rlo <= rhi) {
        return Err(Error::InvalidArgument(format!(
            "invalid crop ranges area {area_range:?} ratio {ratio_range:?}"
        )));
    }
    let (hf, wf) = (h as f64, w as f64);
    let total = hf * wf;
    for _ in 0..10 {
        let a = if alo < ahi { rng.gen_range(alo..=ahi) } else { alo };
        let r = if rlo < rhi { rng.gen_range(rlo..=rhi) } else { rlo };
        let cw = (a * total * r).sqrt();
        let ch = (a * total / r).sqrt();
        if cw <= wf + 1e-9 && ch <= hf + 1e-9 {
            let (cw, ch) = (cw.min(wf), ch.min(hf));
            let x0 = if wf - cw > 0.0 { rng.gen_range(0.0..=wf - cw) } else { 0.0 };
            let y0 = if hf - ch > 0.0 { rng.gen_range(0.0..=hf - ch) } else { 0.0 };
            return Ok(CropRect {
                x0,
                y0,
                width: cw,
                height: ch,
            });
        }
    }
    let r = (wf / hf).clamp(rlo, rhi);
    let fit = (wf * wf / (total * r)).min(hf * hf * r / total);
    let a = ahi.min(fit);
    if a < alo {
        return Err(Error::InvalidArgument(format!(
            "no rectangle with area {area_range:?} and ratio {ratio_range:?} fits {h}x{w}"
        )));
    }
    let cw = (a * total * r).sqrt().min(wf);
    let ch = (a * total / r).sqrt().min(hf);
    Ok(CropRect {
        x0: (wf - cw) / 2.0,
        y0: (hf - ch) / 2.0,
        width: cw,
        height: ch,
    })
}

/// Random crop per sample, resized to `out_size`.
pub fn random_crop_resize<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    area_range: (f64, f64),
    ratio_range: (f64, f64),
    out_size: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(Var, Vec<CropRect>)> {
    let (n, _, h, w) = tape.value(x).dims4();
    let rects = (0..n)
        .map(|_| sample_crop_rect(h, w, area_range, ratio_range, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((crop_resize(tape, x, &rects, out_size)?, rects))
}

// ---- pipeline ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlurDraw {
    Motion { length: usize, angle: f64 },
    Defocus { sigma: f64 },
}

/// Concrete perturbation parameters for one image at one strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbDraw {
    pub corner_offsets: [[f64; 2]; 4],
    pub blur: BlurDraw,
    pub rgb_offset: [f64; 3],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub crop: Option<CropRect>,
}

impl PerturbDraw {
    pub fn identity(h: usize, w: usize) -> Self {
        let _ = (h, w);
        Self {
            corner_offsets: [[0.0; 2]; 4],
            blur: BlurDraw::Defocus { sigma: 0.0 },
            rgb_offset: [0.0; 3],
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
            crop: None,
        }
    }
}

fn symmetric(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

fn upto(rng: &mut impl Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(0.0..=max)
    } else {
        0.0
    }
}

/// Sample one draw per image with every deviation from identity bounded by
/// `strength × configured maximum`.
pub fn sample_draw(h: usize, w: usize, strength: f64, cfg: &PerturbConfig, rng: &mut impl Rng) -> Result<PerturbDraw> {
    let s = strength.clamp(0.0, 1.0);
    let corner_offsets = sample_corner_offsets(h, w, s * cfg.max_corner_shift, rng)?;
    let blur = if rng.gen_bool(0.5) {
        let max_len = 1 + (s * (cfg.blur_kernel as f64 - 1.0)).round() as usize;
        BlurDraw::Motion {
            length: rng.gen_range(1..=max_len),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        }
    } else {
        BlurDraw::Defocus {
            sigma: upto(rng, s * cfg.defocus_sigma_max),
        }
    };
    let o = s * cfg.rgb_offset_max;
    let rgb_offset = [symmetric(rng, o), symmetric(rng, o), symmetric(rng, o)];
    let brightness = 1.0 + symmetric(rng, s * cfg.brightness_delta);
    let contrast = 1.0 + symmetric(rng, s * cfg.contrast_delta);
    let saturation = (1.0 + symmetric(rng, s * cfg.saturation_delta)).max(0.0);
    let noise_sigma = upto(rng, s * cfg.noise_sigma_max);
    let noise_seed = rng.gen();
    let crop = if cfg.crop_enabled && s > 0.0 {
        let (alo, ahi) = cfg.crop_area_range;
        let (rlo, rhi) = cfg.crop_ratio_range;
        let area = (1.0 - s * (1.0 - alo), ahi.max(1.0 - s * (1.0 - alo)));
        let ratio = (1.0 - s * (1.0 - rlo), 1.0 + s * (rhi - 1.0));
        Some(sample_crop_rect(h, w, area, ratio, rng)?)
    } else {
        None
    };
    Ok(PerturbDraw {
        corner_offsets,
        blur,
        rgb_offset,
        brightness: brightness.max(0.0),
        contrast: contrast.max(0.0),
        saturation,
        noise_sigma,
        noise_seed,
        crop,
    })
}

/// Apply fixed draws in the pipeline order: warp → blur → RGB offset →
/// brightness → contrast → saturation → noise → crop-resize.
pub fn apply_draws<T: Real>(tape: &mut Tape<T>, x: Var, draws: &[PerturbDraw]) -> Result<Var> {
    let (n, _, h, w) = tape.value(x).dims4();
    if draws.len() != n {
        return Err(Error::Shape(format!("{} draws for {} samples", draws.len(), n)));
    }
    let offsets: Vec<_> = draws.iter().map(|d| d.corner_offsets).collect();
    let (mut y, _) = warp_with_offsets(tape, x, &offsets)?;
    let kernels = draws
        .iter()
        .map(|d| match d.blur {
            BlurDraw::Motion { length, angle } => motion_kernel(length, angle),
            BlurDraw::Defocus { sigma } => gaussian_kernel(sigma),
        })
        .collect();
    y = apply_kernels(tape, y, kernels)?;
    y = rgb_offset(tape, y, &draws.iter().map(|d| d.rgb_offset).collect::<Vec<_>>())?;
    y = brightness(tape, y, &draws.iter().map(|d| d.brightness).collect::<Vec<_>>())?;
    y = contrast(tape, y, &draws.iter().map(|d| d.contrast).collect::<Vec<_>>())?;
    y = saturation(tape, y, &draws.iter().map(|d| d.saturation).collect::<Vec<_>>())?;
    y = gaussian_noise_seeded(
        tape,
        y,
        &draws.iter().map(|d| d.noise_sigma).collect::<Vec<_>>(),
        &draws.iter().map(|d| d.noise_seed).collect::<Vec<_>>(),
    )?;
    if draws.iter().any(|d| d.crop.is_some()) {
        let rects: Vec<CropRect> = draws
            .iter()
            .map(|d| d.crop.unwrap_or_else(|| CropRect::full(h, w)))
            .collect();
        y = crop_resize(tape, y, &rects, (h, w))?;
    }
    Ok(y)
}

/// Sample and apply the full pipeline at `strength`; returns the output and
/// the draws used.
pub fn perturb_pipeline<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    strength: f64,
    cfg: &PerturbConfig,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<PerturbDraw>)> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("strength {strength} outside [0, 1]")));
    }
    let (n, _, h, w) = tape.value(x).dims4();
    if !cfg.enabled {
        return Ok((x, vec![PerturbDraw::identity(h, w); n]));
    }
    let draws = (0..n)
        .map(|_| sample_draw(h, w, strength, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((apply_draws(tape, x, &draws)?, draws))
}
