//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! needed for the vector-Jacobian product. `backward` walks the tape once in
//! reverse. Nodes whose inputs carry no gradient are skipped entirely, so
//! constant images and perturbation draws cost nothing on the way back.

use super::conv;
use super::filter::{filter_plane, filter_plane_adjoint};
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Square, odd-sized filter kernel applied identically to every channel.
#[derive(Clone, Debug)]
pub struct Kernel<T> {
    pub size: usize,
    /// Row-major `size × size` weights.
    pub weights: Vec<T>,
    /// Set when `weights` is the outer product of this vector with itself;
    /// filtering then runs as two 1-D passes.
    pub factor: Option<Vec<T>>,
}

impl<T: Real> Kernel<T> {
    pub fn new(size: usize, weights: Vec<T>) -> Self {
        assert!(size % 2 == 1 && weights.len() == size * size, "kernel must be odd-sized and square");
        Self {
            size,
            weights,
            factor: None,
        }
    }

    pub fn separable(factor: Vec<T>) -> Self {
        let size = factor.len();
        assert!(size % 2 == 1, "kernel must be odd-sized");
        let weights = factor
            .iter()
            .flat_map(|&a| factor.iter().map(move |&b| a * b))
            .collect();
        Self {
            size,
            weights,
            factor: Some(factor),
        }
    }

    pub fn identity() -> Self {
        Self::new(1, vec![T::one()])
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn is_identity(&self) -> bool {
        self.size == 1 && self.weights[0] == T::one()
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Option<Vec<T>>,
    },
    UpsampleNearest(Var, usize),
    AvgPool2(Var),
    ConcatChannels(Var, Var),
    /// Output value is the normalized input; `inv_std` holds one entry per group.
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    ScalePerSample(Var, Vec<T>),
    Contrast(Var, Vec<T>),
    Saturation(Var, Vec<T>),
    Filter2d(Var, Vec<Kernel<T>>),
    GridSample {
        img: Var,
        grid: Var,
    },
    AffineGrid {
        theta: Var,
        h: usize,
        w: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every leaf reached by `backward`.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}


/// `(groups, group_len)` view used by instance norm: rank-2 input `[B, F]`
/// is treated as one channel of `F` positions per sample.
fn instance_groups(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 | 1 => (1, shape.iter().product()),
        2 => (shape[0], shape[1]),
        _ => (shape[0] * shape[1], shape[2..].iter().product()),
    }
}

/// `(batch, channels, spatial)` view used by batch norm.
fn batch_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Var {
        let out = self.value(a).zip_map(c, |x, y| x + y);
        self.push(out, Op::AddConst(a), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a), &[a])
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(out, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// Clamp to `[lo, hi]`; the gradient passes where the input lies in the
    /// closed interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshaped(shape)
            .expect("reshape element count");
        self.push(out, Op::Reshape(a), &[a])
    }

    // ---- layers ------------------------------------------------------------

    /// `x[B, in] · wᵀ + b` with `w[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (bsz, fin) = (xs.shape()[0], xs.shape()[1]);
        let fout = ws.shape()[0];
        assert_eq!(ws.shape()[1], fin, "linear: weight {:?} vs input {:?}", ws.shape(), xs.shape());
        let mut out = Tensor::zeros(&[bsz, fout]);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.data_mut().chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            bsz,
            fin,
            fout,
            T::one(),
            xs.data(),
            fin as isize,
            1,
            ws.data(),
            1,
            fin as isize,
            T::one(),
            out.data_mut(),
            fout as isize,
            1,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let bias = b.map(|b| self.value(b).data());
        let keep = self.needs_grad(w);
        let (out, cols) = conv::conv2d_forward(self.value(x), self.value(w), bias, stride, pad, keep);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &inputs,
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let dst = out.data_mut();
        for nc in 0..n * c {
            let s = &src[nc * h * w..(nc + 1) * h * w];
            let d = &mut dst[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..ho {
                let srow = &s[(i / factor) * w..(i / factor + 1) * w];
                let drow = &mut d[i * wo..(i + 1) * wo];
                for (j, v) in drow.iter_mut().enumerate() {
                    *v = srow[j / factor];
                }
            }
        }
        self.push(out, Op::UpsampleNearest(x, factor), &[x])
    }

    /// 2×2 average pooling with stride 2; spatial sides must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sides");
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let dst = out.data_mut();
        for nc in 0..n * c {
            let s = &src[nc * h * w..];
            for i in 0..ho {
                for j in 0..wo {
                    let a = s[2 * i * w + 2 * j];
                    let b = s[2 * i * w + 2 * j + 1];
                    let cc = s[(2 * i + 1) * w + 2 * j];
                    let d = s[(2 * i + 1) * w + 2 * j + 1];
                    dst[nc * ho * wo + i * wo + j] = (a + b + cc + d) * quarter;
                }
            }
        }
        self.push(out, Op::AvgPool2(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert!(n == nb && h == hb && w == wb, "concat_channels shape mismatch");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let dst = out.data_mut();
            for i in 0..n {
                let o = i * (ca + cb) * hw;
                dst[o..o + ca * hw].copy_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
                dst[o + ca * hw..o + (ca + cb) * hw]
                    .copy_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
            }
        }
        self.push(out, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Per-(sample, channel) standardization over spatial positions.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let xs = self.value(x);
        let (groups, len) = instance_groups(xs.shape());
        let mut out = xs.clone();
        let mut inv_std = Vec::with_capacity(groups);
        let n = T::of(len as f64);
        for g in out.data_mut().chunks_mut(len) {
            let mean = g.iter().copied().sum::<T>() / n;
            let var = g.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in g.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        debug_assert_eq!(inv_std.len(), groups);
        self.push(out, Op::InstanceNorm { x, inv_std }, &[x])
    }

    /// Training-mode batch normalization: per channel over `(batch, spatial)`.
    /// Returns the variable and the batch statistics `(mean, biased var)`.
    pub fn batch_norm_train(&mut self, x: Var, eps: T) -> (Var, Vec<T>, Vec<T>) {
        let xs = self.value(x);
        let (b, c, s) = batch_layout(xs.shape());
        let n = T::of((b * s) as f64);
        let src = xs.data();
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for i in 0..b {
                acc += src[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
            }
            let mean = acc / n;
            let mut v = T::zero();
            for i in 0..b {
                v += src[(i * c + ch) * s..(i * c + ch + 1) * s]
                    .iter()
                    .map(|&x| (x - mean) * (x - mean))
                    .sum::<T>();
            }
            means[ch] = mean;
            vars[ch] = v / n;
        }
        let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = xs.clone();
        for i in 0..b {
            for ch in 0..c {
                for v in &mut out.data_mut()[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    *v = (*v - means[ch]) * inv_std[ch];
                }
            }
        }
        let var = self.push(out, Op::BatchNorm { x, inv_std }, &[x]);
        (var, means, vars)
    }

    /// `gamma[c] * x + beta[c]` broadcast over batch and spatial axes.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (b, c, s) = batch_layout(self.value(x).shape());
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..b {
            for ch in 0..c {
                for v in &mut out.data_mut()[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    *v = *v * g[ch] + be[ch];
                }
            }
        }
        self.push(out, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    // ---- image operations ----------------------------------------------------

    /// Multiply sample `b` by the constant `factors[b]`.
    pub fn scale_per_sample(&mut self, x: Var, factors: Vec<T>) -> Var {
        let mut out = self.value(x).clone();
        let per = out.len() / factors.len();
        for (chunk, &f) in out.data_mut().chunks_mut(per).zip(&factors) {
            for v in chunk {
                *v *= f;
            }
        }
        self.push(out, Op::ScalePerSample(x, factors), &[x])
    }

    /// `μ + f·(x − μ)` with μ the mean luma of each sample.
    pub fn contrast(&mut self, x: Var, factors: Vec<T>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c, 3, "contrast expects RGB");
        let hw = h * w;
        let mut out = self.value(x).clone();
        for (b, &f) in factors.iter().enumerate().take(n) {
            let s = &mut out.data_mut()[b * 3 * hw..(b + 1) * 3 * hw];
            let mu = (0..3)
                .map(|ch| T::of(LUMA[ch]) * s[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>())
                .sum::<T>()
                / T::of(hw as f64);
            for v in s.iter_mut() {
                *v = mu + f * (*v - mu);
            }
        }
        self.push(out, Op::Contrast(x, factors), &[x])
    }

    /// `G + f·(x − G)` with G the per-pixel luma.
    pub fn saturation(&mut self, x: Var, factors: Vec<T>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c, 3, "saturation expects RGB");
        let hw = h * w;
        let (l0, l1, l2) = (T::of(LUMA[0]), T::of(LUMA[1]), T::of(LUMA[2]));
        let mut out = self.value(x).clone();
        for (b, &f) in factors.iter().enumerate().take(n) {
            let s = &mut out.data_mut()[b * 3 * hw..(b + 1) * 3 * hw];
            for p in 0..hw {
                let g = l0 * s[p] + l1 * s[hw + p] + l2 * s[2 * hw + p];
                for ch in 0..3 {
                    let v = &mut s[ch * hw + p];
                    *v = g + f * (*v - g);
                }
            }
        }
        self.push(out, Op::Saturation(x, factors), &[x])
    }

    /// Per-sample 2-D filtering with reflect padding, same kernel on every channel.
    pub fn filter2d(&mut self, x: Var, kernels: Vec<Kernel<T>>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(kernels.len(), n, "one kernel per sample");
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let dst = out.data_mut();
        for (b, k) in kernels.iter().enumerate() {
            let r = k.radius();
            assert!(r < h && r < w, "kernel radius {} too large for {}x{}", r, h, w);
            for ch in 0..c {
                let off = (b * c + ch) * h * w;
                filter_plane(&src[off..off + h * w], h, w, k, &mut dst[off..off + h * w]);
            }
        }
        self.push(out, Op::Filter2d(x, kernels), &[x])
    }

    /// Bilinear sampling of `img[B,C,H,W]` at pixel coordinates
    /// `grid[B,Ho,Wo,2]` (x then y, integer = pixel centre). Samples outside
    /// the image read zero.
    pub fn grid_sample(&mut self, img: Var, grid: Var) -> Var {
        let (n, c, h, w) = self.value(img).dims4();
        let gs = self.value(grid).shape().to_vec();
        assert!(gs.len() == 4 && gs[0] == n && gs[3] == 2, "grid shape {:?}", gs);
        let (ho, wo) = (gs[1], gs[2]);
        let src = self.value(img).data();
        let g = self.value(grid).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let dst = out.data_mut();
        for b in 0..n {
            for p in 0..ho * wo {
                let gx = g[(b * ho * wo + p) * 2];
                let gy = g[(b * ho * wo + p) * 2 + 1];
                let taps = bilinear_taps(gx, gy, h, w);
                for ch in 0..c {
                    let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let mut acc = T::zero();
                    for &(idx, wt) in taps.iter().flatten() {
                        acc += wt * plane[idx];
                    }
                    dst[(b * c + ch) * ho * wo + p] = acc;
                }
            }
        }
        self.push(out, Op::GridSample { img, grid }, &[img, grid])
    }

    /// Pixel-coordinate sampling grid of size `h×w` from normalized affine
    /// parameters `theta[B,6]` (row-major 2×3, coordinates in [-1, 1] with
    /// pixel centres at `(2j+1)/w − 1`).
    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Var {
        let th = self.value(theta);
        assert_eq!(th.shape()[1], 6, "theta must be [B, 6]");
        let n = th.shape()[0];
        let (hf, wf) = (T::of(h as f64), T::of(w as f64));
        let half = T::of(0.5);
        let two = T::of(2.0);
        let mut out = Tensor::zeros(&[n, h, w, 2]);
        let dst = out.data_mut();
        for b in 0..n {
            let t = &th.data()[b * 6..b * 6 + 6];
            for i in 0..h {
                let yn = (two * T::of(i as f64) + T::one()) / hf - T::one();
                for j in 0..w {
                    let xn = (two * T::of(j as f64) + T::one()) / wf - T::one();
                    let sx = t[0] * xn + t[1] * yn + t[2];
                    let sy = t[3] * xn + t[4] * yn + t[5];
                    let o = ((b * h + i) * w + j) * 2;
                    dst[o] = (sx + T::one()) * wf * half - half;
                    dst[o + 1] = (sy + T::one()) * hf * half - half;
                }
            }
        }
        self.push(out, Op::AffineGrid { theta, h, w }, &[theta])
    }

    // ---- reverse pass ----------------------------------------------------------

    /// Backpropagate from scalar `loss`, returning gradients of every leaf
    /// that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.zip_map(self.value(*b), |u, v| u * v));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.zip_map(self.value(*a), |u, v| u * v));
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                let gi = g.clone().reshaped(self.shape(*a)).expect("same element count");
                accumulate(&mut grads[a.0], gi);
            }
            Op::MulConst(a, c) => accumulate(&mut grads[a.0], g.zip_map(c, |u, v| u * v)),
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(&mut grads[a.0], g.map(|u| u * c));
            }
            Op::Exp(a) => accumulate(&mut grads[a.0], g.zip_map(y, |u, e| u * e)),
            Op::Sigmoid(a) => {
                accumulate(&mut grads[a.0], g.zip_map(y, |u, s| u * s * (T::one() - s)))
            }
            Op::Relu(a) => accumulate(
                &mut grads[a.0],
                g.zip_map(self.value(*a), |u, x| if x > T::zero() { u } else { T::zero() }),
            ),
            Op::Softplus(a) => {
                accumulate(&mut grads[a.0], g.zip_map(self.value(*a), |u, x| u * sigmoid(x)))
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                accumulate(&mut grads[a.0], g.zip_map(self.value(*a), |u, x| two * u * x));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                accumulate(
                    &mut grads[a.0],
                    g.zip_map(self.value(*a), |u, x| {
                        if x >= lo && x <= hi {
                            u
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Sum(a) => {
                accumulate(&mut grads[a.0], Tensor::full(self.shape(*a), g.data()[0]));
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                accumulate(&mut grads[a.0], Tensor::full(self.shape(*a), g.data()[0] / n));
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, g, grads),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (gx, gw, gb) = conv::conv2d_backward(
                    self.value(*x),
                    cols.as_deref(),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.wants(*x),
                    self.wants(*w),
                    b.map(|b| self.wants(b)).unwrap_or(false),
                );
                if let Some(gx) = gx {
                    accumulate(&mut grads[x.0], gx);
                }
                if let Some(gw) = gw {
                    accumulate(&mut grads[w.0], gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::UpsampleNearest(x, f) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h * f, w * f);
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = g.data();
                let dst = gx.data_mut();
                for nc in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            dst[nc * h * w + (i / f) * w + j / f] += gd[nc * ho * wo + i * wo + j];
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let gd = g.data();
                let dst = gx.data_mut();
                for nc in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            dst[nc * h * w + i * w + j] =
                                gd[nc * ho * wo + (i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let gd = g.data();
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(&[n, ca, h, w]);
                    for i in 0..n {
                        let o = i * (ca + cb) * hw;
                        ga.data_mut()[i * ca * hw..(i + 1) * ca * hw]
                            .copy_from_slice(&gd[o..o + ca * hw]);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(&[n, cb, h, w]);
                    for i in 0..n {
                        let o = i * (ca + cb) * hw + ca * hw;
                        gb.data_mut()[i * cb * hw..(i + 1) * cb * hw]
                            .copy_from_slice(&gd[o..o + cb * hw]);
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, len) = instance_groups(y.shape());
                let n = T::of(len as f64);
                let mut gx = Tensor::zeros(y.shape());
                for (((gxs, gs), ys), &is) in gx
                    .data_mut()
                    .chunks_mut(len)
                    .zip(g.data().chunks(len))
                    .zip(y.data().chunks(len))
                    .zip(inv_std)
                {
                    let sum_g = gs.iter().copied().sum::<T>();
                    let sum_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &gi), &yi) in gxs.iter_mut().zip(gs).zip(ys) {
                        *o = is / n * (n * gi - sum_g - yi * sum_gy);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::BatchNorm { x, inv_std } => {
                let (b, c, s) = batch_layout(y.shape());
                let n = T::of((b * s) as f64);
                let gd = g.data();
                let yd = y.data();
                let mut gx = Tensor::zeros(y.shape());
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gy = T::zero();
                    for i in 0..b {
                        for k in (i * c + ch) * s..(i * c + ch + 1) * s {
                            sum_g += gd[k];
                            sum_gy += gd[k] * yd[k];
                        }
                    }
                    let is = inv_std[ch];
                    for i in 0..b {
                        for k in (i * c + ch) * s..(i * c + ch + 1) * s {
                            gx.data_mut()[k] = is / n * (n * gd[k] - sum_g - yd[k] * sum_gy);
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (b, c, s) = batch_layout(y.shape());
                let gam = self.value(*gamma).data();
                let xd = self.value(*x).data();
                let gd = g.data();
                let mut gx = Tensor::zeros(y.shape());
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for i in 0..b {
                    for ch in 0..c {
                        for k in (i * c + ch) * s..(i * c + ch + 1) * s {
                            gx.data_mut()[k] = gd[k] * gam[ch];
                            gg.data_mut()[ch] += gd[k] * xd[k];
                            gb.data_mut()[ch] += gd[k];
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], gg);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], gb);
                }
            }
            Op::ScalePerSample(x, factors) => {
                let mut gx = g.clone();
                let per = gx.len() / factors.len();
                for (chunk, &f) in gx.data_mut().chunks_mut(per).zip(factors) {
                    for v in chunk {
                        *v *= f;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Contrast(x, factors) => {
                let (_, _, h, w) = y.dims4();
                let hw = h * w;
                let mut gx = g.clone();
                for (b, &f) in factors.iter().enumerate() {
                    let gs = &mut gx.data_mut()[b * 3 * hw..(b + 1) * 3 * hw];
                    let total = gs.iter().copied().sum::<T>();
                    let shared = (T::one() - f) * total / T::of(hw as f64);
                    for ch in 0..3 {
                        let add = shared * T::of(LUMA[ch]);
                        for v in &mut gs[ch * hw..(ch + 1) * hw] {
                            *v = f * *v + add;
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Saturation(x, factors) => {
                let (_, _, h, w) = y.dims4();
                let hw = h * w;
                let mut gx = g.clone();
                for (b, &f) in factors.iter().enumerate() {
                    let gs = &mut gx.data_mut()[b * 3 * hw..(b + 1) * 3 * hw];
                    for p in 0..hw {
                        let total = gs[p] + gs[hw + p] + gs[2 * hw + p];
                        for ch in 0..3 {
                            let v = &mut gs[ch * hw + p];
                            *v = f * *v + (T::one() - f) * T::of(LUMA[ch]) * total;
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Filter2d(x, kernels) => {
                let (n, c, h, w) = y.dims4();
                let gd = g.data();
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let dst = gx.data_mut();
                for (b, k) in kernels.iter().enumerate() {
                    for ch in 0..c {
                        let off = (b * c + ch) * h * w;
                        filter_plane_adjoint(&gd[off..off + h * w], h, w, k, &mut dst[off..off + h * w]);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::GridSample { img, grid } => self.backprop_grid_sample(*img, *grid, g, grads),
            Op::AffineGrid { theta, h, w } => {
                let n = self.value(*theta).shape()[0];
                let (hf, wf) = (T::of(*h as f64), T::of(*w as f64));
                let half = T::of(0.5);
                let two = T::of(2.0);
                let gd = g.data();
                let mut gt = Tensor::zeros(&[n, 6]);
                for b in 0..n {
                    let mut acc = [T::zero(); 6];
                    for i in 0..*h {
                        let yn = (two * T::of(i as f64) + T::one()) / hf - T::one();
                        for j in 0..*w {
                            let xn = (two * T::of(j as f64) + T::one()) / wf - T::one();
                            let o = ((b * h + i) * w + j) * 2;
                            let gxp = gd[o] * wf * half;
                            let gyp = gd[o + 1] * hf * half;
                            acc[0] += gxp * xn;
                            acc[1] += gxp * yn;
                            acc[2] += gxp;
                            acc[3] += gyp * xn;
                            acc[4] += gyp * yn;
                            acc[5] += gyp;
                        }
                    }
                    gt.data_mut()[b * 6..b * 6 + 6].copy_from_slice(&acc);
                }
                accumulate(&mut grads[theta.0], gt);
            }
        }
    }

    fn backprop_linear(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.value(x);
        let ws = self.value(w);
        let (bsz, fin) = (xs.shape()[0], xs.shape()[1]);
        let fout = ws.shape()[0];
        if self.wants(x) {
            let mut gx = Tensor::zeros(&[bsz, fin]);
            T::gemm(
                bsz,
                fout,
                fin,
                T::one(),
                g.data(),
                fout as isize,
                1,
                ws.data(),
                fin as isize,
                1,
                T::zero(),
                gx.data_mut(),
                fin as isize,
                1,
            );
            accumulate(&mut grads[x.0], gx);
        }
        if self.wants(w) {
            let mut gw = Tensor::zeros(&[fout, fin]);
            T::gemm(
                fout,
                bsz,
                fin,
                T::one(),
                g.data(),
                1,
                fout as isize,
                xs.data(),
                fin as isize,
                1,
                T::zero(),
                gw.data_mut(),
                fin as isize,
                1,
            );
            accumulate(&mut grads[w.0], gw);
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut gb = Tensor::zeros(&[fout]);
                for row in g.data().chunks(fout) {
                    for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[b.0], gb);
            }
        }
    }

    fn backprop_grid_sample(
        &self,
        img: Var,
        grid: Var,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, c, h, w) = self.value(img).dims4();
        let gshape = self.value(grid).shape();
        let (ho, wo) = (gshape[1], gshape[2]);
        let src = self.value(img).data();
        let gr = self.value(grid).data();
        let gd = g.data();
        let want_img = self.wants(img);
        let want_grid = self.wants(grid);
        let mut gimg = want_img.then(|| Tensor::zeros(&[n, c, h, w]));
        let mut ggrid = want_grid.then(|| Tensor::zeros(gshape));
        for b in 0..n {
            for p in 0..ho * wo {
                let gx = gr[(b * ho * wo + p) * 2];
                let gy = gr[(b * ho * wo + p) * 2 + 1];
                if let Some(gi) = gimg.as_mut() {
                    let taps = bilinear_taps(gx, gy, h, w);
                    for ch in 0..c {
                        let gv = gd[(b * c + ch) * ho * wo + p];
                        let plane = &mut gi.data_mut()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        for &(idx, wt) in taps.iter().flatten() {
                            plane[idx] += wt * gv;
                        }
                    }
                }
                if let Some(gg) = ggrid.as_mut() {
                    let x0 = gx.floor();
                    let y0 = gy.floor();
                    let fx = gx - x0;
                    let fy = gy - y0;
                    let (xi, yi) = (x0.to_isize().unwrap_or(isize::MIN / 2), y0.to_isize().unwrap_or(isize::MIN / 2));
                    let mut dx = T::zero();
                    let mut dy = T::zero();
                    for ch in 0..c {
                        let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        let at = |yy: isize, xx: isize| -> T {
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                T::zero()
                            } else {
                                plane[yy as usize * w + xx as usize]
                            }
                        };
                        let i00 = at(yi, xi);
                        let i10 = at(yi, xi + 1);
                        let i01 = at(yi + 1, xi);
                        let i11 = at(yi + 1, xi + 1);
                        let gv = gd[(b * c + ch) * ho * wo + p];
                        dx += gv * ((T::one() - fy) * (i10 - i00) + fy * (i11 - i01));
                        dy += gv * ((T::one() - fx) * (i01 - i00) + fx * (i11 - i10));
                    }
                    gg.data_mut()[(b * ho * wo + p) * 2] = dx;
                    gg.data_mut()[(b * ho * wo + p) * 2 + 1] = dy;
                }
            }
        }
        if let Some(gi) = gimg {
            accumulate(&mut grads[img.0], gi);
        }
        if let Some(gg) = ggrid {
            accumulate(&mut grads[grid.0], gg);
        }
    }
}

/// Up to four `(flat index, weight)` taps for bilinear sampling at `(x, y)`.
fn bilinear_taps<T: Real>(x: T, y: T, h: usize, w: usize) -> [Option<(usize, T)>; 4] {
    let mut taps = [None; 4];
    if !x.is_finite() || !y.is_finite() {
        return taps;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = match (x0.to_isize(), y0.to_isize()) {
        (Some(a), Some(b)) => (a, b),
        _ => return taps,
    };
    let corners = [
        (yi, xi, (T::one() - fx) * (T::one() - fy)),
        (yi, xi + 1, fx * (T::one() - fy)),
        (yi + 1, xi, (T::one() - fx) * fy),
        (yi + 1, xi + 1, fx * fy),
    ];
    for (slot, (yy, xx, wt)) in taps.iter_mut().zip(corners) {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && wt != T::zero() {
            *slot = Some((yy as usize * w + xx as usize, wt));
        }
    }
    taps
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_receive_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[3], 2.0));
        let b = tape.variable(Tensor::full(&[3], 5.0));
        let p = tape.mul(a, b);
        let s = tape.sum(p);
        let grads = tape.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(20.0f64) - 20.0).abs() < 1e-8);
        assert!(softplus(-800.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn grid_sample_identity_grid_copies() {
        let mut tape = Tape::<f64>::new();
        let img = Tensor::from_fn(&[1, 2, 3, 4], |i| i as f64 * 0.1);
        let grid = Tensor::from_fn(&[1, 3, 4, 2], |k| {
            let p = k / 2;
            if k % 2 == 0 {
                (p % 4) as f64
            } else {
                (p / 4) as f64
            }
        });
        let x = tape.constant(img.clone());
        let gv = tape.constant(grid);
        let y = tape.grid_sample(x, gv);
        assert_eq!(tape.value(y), &img);
    }
}
