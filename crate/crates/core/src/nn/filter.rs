//! Reflect-padded 2-D correlation of single planes and its adjoint.

use super::tape::Kernel;
use super::tensor::Real;

/// Mirror index without repeating the edge (`-1 → 1`, `n → n − 2`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

struct Taps<T> {
    ry: usize,
    rx: usize,
    taps: Vec<(usize, usize, T)>,
}

fn dense_taps<T: Real>(k: &Kernel<T>) -> Taps<T> {
    let taps = (0..k.size)
        .flat_map(|u| (0..k.size).map(move |v| (u, v)))
        .map(|(u, v)| (u, v, k.weights[u * k.size + v]))
        .filter(|t| t.2 != T::zero())
        .collect();
    Taps {
        ry: k.radius(),
        rx: k.radius(),
        taps,
    }
}

fn row_taps<T: Real>(f: &[T]) -> Taps<T> {
    Taps {
        ry: 0,
        rx: f.len() / 2,
        taps: f.iter().enumerate().map(|(v, &w)| (0, v, w)).collect(),
    }
}

fn col_taps<T: Real>(f: &[T]) -> Taps<T> {
    Taps {
        ry: f.len() / 2,
        rx: 0,
        taps: f.iter().enumerate().map(|(u, &w)| (u, 0, w)).collect(),
    }
}

fn pad<T: Real>(src: &[T], h: usize, w: usize, ry: usize, rx: usize) -> Vec<T> {
    let wp = w + 2 * rx;
    let mut out = vec![T::zero(); (h + 2 * ry) * wp];
    for pi in 0..h + 2 * ry {
        let si = reflect(pi as isize - ry as isize, h);
        let row = &src[si * w..(si + 1) * w];
        let dst = &mut out[pi * wp..(pi + 1) * wp];
        dst[rx..rx + w].copy_from_slice(row);
        for pj in (0..rx).chain(rx + w..wp) {
            dst[pj] = row[reflect(pj as isize - rx as isize, w)];
        }
    }
    out
}

fn correlate<T: Real>(src: &[T], h: usize, w: usize, t: &Taps<T>, dst: &mut [T]) {
    let p = pad(src, h, w, t.ry, t.rx);
    let wp = w + 2 * t.rx;
    dst.iter_mut().for_each(|v| *v = T::zero());
    for &(u, v, kw) in &t.taps {
        for i in 0..h {
            let s = &p[(i + u) * wp + v..(i + u) * wp + v + w];
            for (d, &x) in dst[i * w..(i + 1) * w].iter_mut().zip(s) {
                *d += kw * x;
            }
        }
    }
}

fn correlate_adjoint<T: Real>(g: &[T], h: usize, w: usize, t: &Taps<T>, dst: &mut [T]) {
    let wp = w + 2 * t.rx;
    let mut gp = vec![T::zero(); (h + 2 * t.ry) * wp];
    for &(u, v, kw) in &t.taps {
        for i in 0..h {
            let d = &mut gp[(i + u) * wp + v..(i + u) * wp + v + w];
            for (a, &x) in d.iter_mut().zip(&g[i * w..(i + 1) * w]) {
                *a += kw * x;
            }
        }
    }
    for pi in 0..h + 2 * t.ry {
        let si = reflect(pi as isize - t.ry as isize, h);
        for pj in 0..wp {
            let sj = reflect(pj as isize - t.rx as isize, w);
            dst[si * w + sj] += gp[pi * wp + pj];
        }
    }
}

/// `dst = k ⋆ src` with reflect padding.
pub(crate) fn filter_plane<T: Real>(src: &[T], h: usize, w: usize, k: &Kernel<T>, dst: &mut [T]) {
    if k.is_identity() {
        dst.copy_from_slice(src);
        return;
    }
    match &k.factor {
        Some(f) => {
            let mut tmp = vec![T::zero(); h * w];
            correlate(src, h, w, &row_taps(f), &mut tmp);
            correlate(&tmp, h, w, &col_taps(f), dst);
        }
        None => correlate(src, h, w, &dense_taps(k), dst),
    }
}

/// `dst += kᵀ g`, the adjoint of [`filter_plane`].
pub(crate) fn filter_plane_adjoint<T: Real>(g: &[T], h: usize, w: usize, k: &Kernel<T>, dst: &mut [T]) {
    if k.is_identity() {
        dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
        return;
    }
    match &k.factor {
        Some(f) => {
            let mut tmp = vec![T::zero(); h * w];
            correlate_adjoint(g, h, w, &col_taps(f), &mut tmp);
            correlate_adjoint(&tmp, h, w, &row_taps(f), dst);
        }
        None => correlate_adjoint(g, h, w, &dense_taps(k), dst),
    }
}
