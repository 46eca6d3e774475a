//! Forward and backward kernels on flat NCHW buffers.
//!
//! Convolution lowers row tiles of the output to an im2col panel and
//! multiplies it with the weight matrix. Tiles are independent, partial
//! weight gradients are reduced in tile order, so results are bitwise
//! identical for every thread count.

use rayon::prelude::*;

use super::{cast, gemm, Element, Strides};
use crate::error::{Error, Result};

/// Target element count of one im2col panel; small enough to stay in L2.
pub const PANEL_ELEMS: usize = 131072;

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, cin, h, w] = x_shape[..] else {
            return Err(Error::Shape(format!(
                "conv input must be 4-D, got {x_shape:?}"
            )));
        };
        let [cout, wcin, kh, kw] = w_shape[..] else {
            return Err(Error::Shape(format!(
                "conv weight must be 4-D, got {w_shape:?}"
            )));
        };
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "kernel {kh} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn tiles(&self) -> Vec<(usize, usize)> {
        let rows = (PANEL_ELEMS / (self.patch_len() * self.out_w)).max(1);
        (0..self.out_h)
            .step_by(rows)
            .map(|r0| (r0, (r0 + rows).min(self.out_h)))
            .collect()
    }

    /// For a 1x1, stride-1, unpadded kernel the input rows already form the
    /// im2col panel (row stride `h * w`).
    fn direct_panel<'a, T>(&self, x: &'a [T], r0: usize, _r1: usize) -> Option<&'a [T]> {
        (self.k == 1 && self.stride == 1 && self.pad == 0).then(|| &x[r0 * self.w..])
    }

    /// Input column range touched by kernel column `kx` for output columns
    /// `0..out_w` when the stride is 1, as `(first_ox, end_ox)`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let off = kx as isize - self.pad as isize;
        let lo = (-off).max(0) as usize;
        let hi = (self.w as isize - off).clamp(0, self.out_w as isize) as usize;
        (lo.min(hi), hi)
    }
}

/// Build the `patch_len x rows*out_w` panel for output rows `r0..r1`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, r0: usize, r1: usize, col: &mut [T]) {
    let n = (r1 - r0) * g.out_w;
    let zero = T::zero();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for (r, oy) in (r0..r1).enumerate() {
                    let d = &mut dst[r * g.out_w..(r + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(zero);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kx);
                        if lo == hi {
                            d.fill(zero);
                            continue;
                        }
                        for v in &mut d[..lo] {
                            *v = zero;
                        }
                        let s0 = (lo + kx) - g.pad;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        for v in &mut d[hi..] {
                            *v = zero;
                        }
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                zero
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a panel back onto the input gradient (transpose of im2col).
fn col2im<T: Element>(col: &[T], g: &ConvGeom, r0: usize, r1: usize, dx: &mut [T]) {
    let n = (r1 - r0) * g.out_w;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * n..(row + 1) * n];
                for (r, oy) in (r0..r1).enumerate() {
                    let s = &src[r * g.out_w..(r + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kx);
                        if lo == hi {
                            continue;
                        }
                        let d0 = (lo + kx) - g.pad;
                        for (d, &v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&s[lo..hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = w * x + b` over a batch of NCHW inputs.
pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let kk = g.patch_len();
    let op = g.out_plane();
    let tiles = g.tiles();
    let mut y = Vec::with_capacity(g.batch * g.cout * op);
    for _ in 0..g.batch {
        for co in 0..g.cout {
            let bv = bias.map_or(T::zero(), |b| b[co]);
            y.extend(std::iter::repeat_n(bv, op));
        }
    }
    for b in 0..g.batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let yb = &mut y[b * g.cout * op..(b + 1) * g.cout * op];
        let out = TilePtr(yb.as_mut_ptr());
        let out = &out;
        let per = tiles.len().div_ceil(rayon::current_num_threads().max(1));
        tiles.par_chunks(per).for_each(|group| {
            let mut col = Vec::new();
            for &(r0, r1) in group {
                let n = (r1 - r0) * g.out_w;
                let (panel, rs) = match g.direct_panel(xb, r0, r1) {
                    Some(p) => (p, g.h * g.w),
                    None => {
                        col.resize(kk * n, T::zero());
                        im2col(xb, g, r0, r1, &mut col);
                        (&col[..], n)
                    }
                };
                assert!(reach_of(kk, n, rs) <= panel.len() && w.len() >= g.cout * kk);
                // SAFETY: tile (r0, r1) writes only output columns r0*out_w..r1*out_w
                // of each channel row, ranges are disjoint across tiles and lie
                // inside `yb` (cout rows of length op).
                unsafe {
                    T::gemm_raw(
                        g.cout,
                        kk,
                        n,
                        T::one(),
                        w.as_ptr(),
                        kk as isize,
                        1,
                        panel.as_ptr(),
                        rs as isize,
                        1,
                        T::one(),
                        out.0.add(r0 * g.out_w),
                        op as isize,
                        1,
                    );
                }
            }
        });
    }
    y
}

/// Output base pointer shared by the tile workers.
struct TilePtr<T>(*mut T);
// SAFETY: workers write disjoint regions (see conv2d_forward).
unsafe impl<T: Send> Sync for TilePtr<T> {}

fn reach_of(rows: usize, cols: usize, rs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + cols
    }
}

/// Gradients of a convolution: `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let kk = g.patch_len();
    let op = g.out_plane();
    let tiles = g.tiles();
    let chunk = rayon::current_num_threads().max(1);
    let mut dw = vec![T::zero(); g.cout * kk];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * g.in_plane()]);
    // per-worker im2col and input-gradient panels, reused across groups
    let mut bufs: Vec<(Vec<T>, Vec<T>)> = (0..chunk).map(|_| (Vec::new(), Vec::new())).collect();
    for b in 0..g.batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let dyb = &dy[b * g.cout * op..(b + 1) * g.cout * op];
        for co in 0..g.cout {
            let mut s = 0.0f64;
            for &v in &dyb[co * op..(co + 1) * op] {
                s += v.to_f64().unwrap_or(0.0);
            }
            db[co] = db[co] + cast(s);
        }
        for group in tiles.chunks(chunk) {
            let parts: Vec<Vec<T>> = group
                .par_iter()
                .zip(bufs.par_iter_mut())
                .map(|(&(r0, r1), (col, dcol))| {
                    let n = (r1 - r0) * g.out_w;
                    let (panel, rs) = match g.direct_panel(xb, r0, r1) {
                        Some(p) => (p, g.h * g.w),
                        None => {
                            col.resize(kk * n, T::zero());
                            im2col(xb, g, r0, r1, col);
                            (&col[..], n)
                        }
                    };
                    let dy_t = &dyb[r0 * g.out_w..];
                    let mut part = vec![T::zero(); g.cout * kk];
                    gemm(
                        g.cout,
                        n,
                        kk,
                        T::one(),
                        dy_t,
                        Strides(op, 1),
                        panel,
                        Strides(1, rs),
                        T::zero(),
                        &mut part,
                        Strides(kk, 1),
                    );
                    if need_dx {
                        dcol.resize(kk * n, T::zero());
                        gemm(
                            kk,
                            g.cout,
                            n,
                            T::one(),
                            w,
                            Strides(1, kk),
                            dy_t,
                            Strides(op, 1),
                            T::zero(),
                            dcol,
                            Strides(n, 1),
                        );
                    }
                    part
                })
                .collect();
            for ((&(r0, r1), part), (_, dcol)) in group.iter().zip(parts).zip(&bufs) {
                for (d, p) in dw.iter_mut().zip(part) {
                    *d = *d + p;
                }
                if let Some(dx) = dx.as_mut() {
                    col2im(
                        dcol,
                        g,
                        r0,
                        r1,
                        &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()],
                    );
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns the output and, per output
/// element, the flat index of the winning input element (first max wins).
pub fn maxpool2_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Element>(dy: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] = dx[i as usize] + g;
    }
    dx
}

/// 2x bilinear interpolation along one axis (half-pixel centers, edge
/// clamp): `out[2i] = q1*src[i-1] + q3*src[i]`, `out[2i+1] = q3*src[i] +
/// q1*src[i+1]`. Source element `i` sits at stride `s`, outputs at `so`.
#[inline]
fn lerp2<T: Element>(src: &[T], s: usize, n: usize, dst: &mut [T], so: usize) {
    let q1: T = cast(0.25);
    let q3: T = cast(0.75);
    for i in 0..n {
        let c = src[i * s];
        let l = src[i.saturating_sub(1) * s];
        let r = src[(i + 1).min(n - 1) * s];
        dst[2 * i * so] = q1 * l + q3 * c;
        dst[(2 * i + 1) * so] = q3 * c + q1 * r;
    }
}

/// Transpose of [`lerp2`]: scatter-add `dy` back onto `dst`.
#[inline]
fn lerp2_adjoint<T: Element>(dy: &[T], so: usize, n: usize, dst: &mut [T], s: usize) {
    let q1: T = cast(0.25);
    let q3: T = cast(0.75);
    for i in 0..n {
        let (e, o) = (dy[2 * i * so], dy[(2 * i + 1) * so]);
        let l = i.saturating_sub(1) * s;
        let r = (i + 1).min(n - 1) * s;
        dst[l] = dst[l] + q1 * e;
        dst[i * s] = dst[i * s] + q3 * (e + o);
        dst[r] = dst[r] + q1 * o;
    }
}

pub fn upsample2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let q1: T = cast(0.25);
    let q3: T = cast(0.75);
    let mut y = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            lerp2(&src[r * w..], 1, w, &mut tmp[r * ow..], 1);
        }
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            let (c, l, r) = (i, i.saturating_sub(1), (i + 1).min(h - 1));
            let (rc, rl, rr) = (
                &tmp[c * ow..][..ow],
                &tmp[l * ow..][..ow],
                &tmp[r * ow..][..ow],
            );
            let (even, odd) = dst[2 * i * ow..(2 * i + 2) * ow].split_at_mut(ow);
            for x in 0..ow {
                even[x] = q1 * rl[x] + q3 * rc[x];
                odd[x] = q3 * rc[x] + q1 * rr[x];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        tmp.fill(T::zero());
        for x in 0..ow {
            lerp2_adjoint(&g[x..], ow, h, &mut tmp[x..], ow);
        }
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            lerp2_adjoint(&tmp[r * ow..], 1, w, &mut d[r * w..], 1);
        }
    }
    dx
}

const SUM_BLOCK: usize = 256;

/// Sum of `f(v)` with short runs accumulated in `T` (vectorizable) and the
/// run totals in `f64`.
#[inline]
fn block_sum<T: Element>(xs: &[T], f: impl Fn(T) -> T) -> f64 {
    xs.chunks(SUM_BLOCK)
        .map(|c| {
            let mut lanes = [T::zero(); 8];
            let mut it = c.chunks_exact(8);
            for ch in &mut it {
                for (l, &v) in lanes.iter_mut().zip(ch) {
                    *l = *l + f(v);
                }
            }
            let tail: T = it
                .remainder()
                .iter()
                .map(|&v| f(v))
                .fold(T::zero(), |a, b| a + b);
            lanes
                .iter()
                .fold(tail, |a, &b| a + b)
                .to_f64()
                .unwrap_or(f64::NAN)
        })
        .sum()
}

#[inline]
fn block_sum_pair<T: Element>(xs: &[T], ys: &[T], f: impl Fn(T, T) -> T) -> f64 {
    xs.chunks(SUM_BLOCK)
        .zip(ys.chunks(SUM_BLOCK))
        .map(|(a, b)| {
            let mut lanes = [T::zero(); 8];
            let mut ia = a.chunks_exact(8);
            let mut ib = b.chunks_exact(8);
            for (ca, cb) in (&mut ia).zip(&mut ib) {
                for ((l, &u), &v) in lanes.iter_mut().zip(ca).zip(cb) {
                    *l = *l + f(u, v);
                }
            }
            let tail: T = ia
                .remainder()
                .iter()
                .zip(ib.remainder())
                .map(|(&u, &v)| f(u, v))
                .fold(T::zero(), |acc, t| acc + t);
            lanes
                .iter()
                .fold(tail, |acc, &t| acc + t)
                .to_f64()
                .unwrap_or(f64::NAN)
        })
        .sum()
}

/// Saved state of an instance-norm forward pass.
#[derive(Debug, Clone, Default)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-(sample, channel) normalization over the spatial plane, then a
/// per-channel affine map.
pub fn instance_norm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f64,
) -> (Vec<T>, NormCache<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(batch * channels);
    for b in 0..batch {
        for c in 0..channels {
            let o = (b * channels + c) * plane;
            let xs = &x[o..o + plane];
            let mean = block_sum(xs, |v| v) / plane as f64;
            let m: T = cast(mean);
            let var = block_sum(xs, |v| (v - m) * (v - m)) / plane as f64;
            let s: T = cast(1.0 / (var + eps).sqrt());
            let (gc, bc) = (gamma[c], beta[c]);
            for ((h, yv), &v) in xhat[o..o + plane]
                .iter_mut()
                .zip(&mut y[o..o + plane])
                .zip(xs)
            {
                *h = (v - m) * s;
                *yv = gc * *h + bc;
            }
            inv_std.push(s);
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<T: Element>(
    dy: &[T],
    cache: &NormCache<T>,
    gamma: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![0.0f64; channels];
    let mut dbeta = vec![0.0f64; channels];
    let n = plane as f64;
    for b in 0..batch {
        for c in 0..channels {
            let o = (b * channels + c) * plane;
            let (g, h) = (&dy[o..o + plane], &cache.xhat[o..o + plane]);
            let sum_g = block_sum(g, |v| v);
            let sum_gh = block_sum_pair(g, h, |a, b| a * b);
            dbeta[c] += sum_g;
            dgamma[c] += sum_gh;
            let gm = gamma[c];
            let is = cache.inv_std[b * channels + c];
            let mean_g: T = cast(sum_g / n);
            let mean_gh: T = cast(sum_gh / n);
            // d xhat = dy * gamma; both sums scale by gamma as well
            let k = gm * is;
            for ((d, &gi), &hi) in dx[o..o + plane].iter_mut().zip(g).zip(h) {
                *d = k * (gi - mean_g - hi * mean_gh);
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(cast).collect(),
        dbeta.into_iter().map(cast).collect(),
    )
}
