//! 2-D convolution through im2col and GEMM.

use super::tensor::{Real, Tensor};

fn out_side(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output columns `oj` whose input column `oj·stride + kj − pad` lies in `[0, w)`.
fn valid_range(wo: usize, w: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    // smallest oj with oj·stride + kj >= pad
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    // largest oj with oj·stride + kj − pad <= w − 1
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one `[c, h, w]` sample into `[c·k·k, ho·wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let ho = out_side(h, k, stride, pad);
    let wo = out_side(w, k, stride, pad);
    let p = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(wo, w, kj, stride, pad);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[ii as usize * w..(ii as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if hi > lo {
                        let start = lo * stride + kj - pad;
                        if stride == 1 {
                            drow[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                        } else {
                            for (d, s) in drow[lo..hi].iter_mut().zip(srow[start..].iter().step_by(stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = out_side(h, k, stride, pad);
    let wo = out_side(w, k, stride, pad);
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(wo, w, kj, stride, pad);
                if hi <= lo {
                    continue;
                }
                let start = lo * stride + kj - pad;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let srow = &src[oi * wo + lo..oi * wo + hi];
                    if stride == 1 {
                        for (d, s) in prow[start..start + hi - lo].iter_mut().zip(srow) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in prow[start..].iter_mut().step_by(stride).zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// `x[n, cin, h, w] ⋆ w[cout, cin, k, k] + b` with zero padding. With
/// `keep_cols` the unfolded input of every sample is returned for reuse by
/// the backward pass.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> (Tensor<T>, Option<Vec<T>>) {
    let (n, cin, h, w) = x.dims4();
    let ws = weight.shape();
    assert!(
        ws.len() == 4 && ws[1] == cin && ws[2] == ws[3],
        "conv2d weight {:?} incompatible with input {:?}",
        ws,
        x.shape()
    );
    let (cout, k) = (ws[0], ws[2]);
    let ho = out_side(h, k, stride, pad);
    let wo = out_side(w, k, stride, pad);
    let p = ho * wo;
    let kk = cin * k * k;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let pointwise = is_pointwise(k, stride, pad);
    let keep = keep_cols && !pointwise;
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); if keep { n * kk * p } else { kk * p }]
    };
    for b in 0..n {
        let xb = x.sample(b);
        let ob = &mut out.data_mut()[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let colsb: &[T] = if pointwise {
            xb
        } else {
            let slot = if keep { &mut cols[b * kk * p..(b + 1) * kk * p] } else { &mut cols[..] };
            im2col(xb, cin, h, w, k, stride, pad, slot);
            slot
        };
        T::gemm(
            cout,
            kk,
            p,
            T::one(),
            weight.data(),
            kk as isize,
            1,
            colsb,
            p as isize,
            1,
            if bias.is_some() { T::one() } else { T::zero() },
            ob,
            p as isize,
            1,
        );
    }
    (out, keep.then_some(cols))
}

/// Gradients `(dx, dw, db)` of a convolution, computed only where requested.
/// `saved_cols` are the columns kept by the forward pass, if any.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    saved_cols: Option<&[T]>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, cin, h, w) = x.dims4();
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    let (_, _, ho, wo) = gout.dims4();
    let p = ho * wo;
    let kk = cin * k * k;
    let pointwise = is_pointwise(k, stride, pad);
    let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_w.then(|| Tensor::zeros(weight.shape()));
    let mut gb = want_b.then(|| Tensor::zeros(&[cout]));
    let mut cols = vec![T::zero(); if pointwise || saved_cols.is_some() { 0 } else { kk * p }];
    let mut gcols = vec![T::zero(); if want_x && !pointwise { kk * p } else { 0 }];
    for b in 0..n {
        let gb_slice = gout.sample(b);
        if let Some(gbias) = gb.as_mut() {
            for (co, chunk) in gb_slice.chunks(p).enumerate() {
                gbias.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let xb = x.sample(b);
            let colsb: &[T] = if pointwise {
                xb
            } else if let Some(saved) = saved_cols {
                &saved[b * kk * p..(b + 1) * kk * p]
            } else {
                im2col(xb, cin, h, w, k, stride, pad, &mut cols);
                &cols
            };
            // gw[cout, kk] += gout[cout, p] · colsᵀ[p, kk]
            T::gemm(
                cout,
                p,
                kk,
                T::one(),
                gb_slice,
                p as isize,
                1,
                colsb,
                1,
                p as isize,
                T::one(),
                gw.data_mut(),
                kk as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let per = cin * h * w;
            let gxb = &mut gx.data_mut()[b * per..(b + 1) * per];
            // gcols[kk, p] = wᵀ[kk, cout] · gout[cout, p]
            if pointwise {
                T::gemm(
                    kk,
                    cout,
                    p,
                    T::one(),
                    weight.data(),
                    1,
                    kk as isize,
                    gb_slice,
                    p as isize,
                    1,
                    T::zero(),
                    gxb,
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    kk,
                    cout,
                    p,
                    T::one(),
                    weight.data(),
                    1,
                    kk as isize,
                    gb_slice,
                    p as isize,
                    1,
                    T::zero(),
                    &mut gcols,
                    p as isize,
                    1,
                );
                col2im(&gcols, cin, h, w, k, stride, pad, gxb);
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(x: &Tensor<f64>, wt: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4();
        let (cout, k) = (wt.shape()[0], wt.shape()[2]);
        let ho = out_side(h, k, stride, pad);
        let wo = out_side(w, k, stride, pad);
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * cin + ci) * h + ii as usize) * w + jj as usize]
                                        * wt.data()[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * ho + oi) * wo + oj] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2)] {
            let wt = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
            let (fast, _) = conv2d_forward(&x, &wt, None, stride, pad, false);
            let (kept, cols) = conv2d_forward(&x, &wt, None, stride, pad, true);
            let slow = naive(&x, &wt, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={stride} p={pad}");
            assert_eq!(fast, kept);

            // Adjoint identities: <conv(x), g> = <x, dx> = <w, dw>.
            let g = Tensor::from_fn(slow.shape(), |i| ((i * 29 % 13) as f64 - 6.0) / 9.0);
            let lhs: f64 = slow.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            for saved in [None, cols.as_deref()] {
                let (gx, gw, _) = conv2d_backward(&x, saved, &wt, &g, stride, pad, true, true, false);
                let rx: f64 = x.data().iter().zip(gx.unwrap().data()).map(|(a, b)| a * b).sum();
                let rw: f64 = wt.data().iter().zip(gw.unwrap().data()).map(|(a, b)| a * b).sum();
                assert!((lhs - rx).abs() < 1e-9 && (lhs - rw).abs() < 1e-9, "k={k} s={stride} p={pad}");
            }
        }
    }
}
