//! Stride-1 2-D convolution (cross-correlation) via im2col + GEMM, in
//! standard, grouped, pointwise and parallel (grouped 3x3 + pointwise 1x1,
//! summed) flavours.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::ops::Range;

use super::element::{gemm, gemm_ld, MatRef};
use super::{Element, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate counter for convolution forward passes executed on
/// the current thread. Work fanned out to other threads is tallied back to
/// the calling thread.
pub struct MacCounter;

impl MacCounter {
    pub fn reset() {
        MACS.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        MACS.with(|c| c.get())
    }

    fn add(n: u64) {
        MACS.with(|c| c.set(c.get() + n));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Standard,
    Grouped,
    Pointwise,
    Parallel,
}

/// Hyperparameters of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kind: ConvKind,
    /// Kernel size `K` (square).
    pub d_k: usize,
    /// Input channels `M`.
    pub d_m: usize,
    /// Output channels `N`.
    pub d_n: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvLayerSpec {
    fn with(kind: ConvKind, d_k: usize, d_m: usize, d_n: usize, groups: usize) -> Self {
        Self {
            kind,
            d_k,
            d_m,
            d_n,
            groups,
            stride: 1,
            padding: d_k.saturating_sub(1) / 2,
            bias: true,
        }
    }

    pub fn standard(d_m: usize, d_n: usize, d_k: usize) -> Self {
        Self::with(ConvKind::Standard, d_k, d_m, d_n, 1)
    }

    pub fn grouped(d_m: usize, d_n: usize, d_k: usize, groups: usize) -> Self {
        Self::with(ConvKind::Grouped, d_k, d_m, d_n, groups)
    }

    pub fn pointwise(d_m: usize, d_n: usize) -> Self {
        Self::with(ConvKind::Pointwise, 1, d_m, d_n, 1)
    }

    pub fn parallel(d_m: usize, d_n: usize, d_k: usize, groups: usize) -> Self {
        Self::with(ConvKind::Parallel, d_k, d_m, d_n, groups)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_m == 0 || self.d_n == 0 || self.groups == 0 {
            return Err(Error::Shape(format!("zero-sized dimension in {self:?}")));
        }
        if self.stride != 1 {
            return Err(Error::Shape(format!(
                "only stride 1 is supported, got {}",
                self.stride
            )));
        }
        if self.d_k % 2 == 0 || self.padding != (self.d_k - 1) / 2 {
            return Err(Error::Shape(format!(
                "same padding needs an odd kernel and padding (K-1)/2, got K={} padding={}",
                self.d_k, self.padding
            )));
        }
        match self.kind {
            ConvKind::Standard if self.groups != 1 => Err(Error::Group(format!(
                "standard convolution needs g = 1, got {}",
                self.groups
            ))),
            ConvKind::Pointwise if self.d_k != 1 || self.groups != 1 => Err(Error::Shape(format!(
                "pointwise convolution needs K = 1 and g = 1, got K={} g={}",
                self.d_k, self.groups
            ))),
            ConvKind::Grouped | ConvKind::Parallel
                if self.d_m % self.groups != 0 || self.d_n % self.groups != 0 =>
            {
                Err(Error::Group(format!(
                    "g = {} must divide both input channels {} and output channels {}",
                    self.groups, self.d_m, self.d_n
                )))
            }
            _ => Ok(()),
        }
    }

    /// Shape of the (grouped) spatial kernel.
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.d_n, self.d_m / self.groups, self.d_k, self.d_k]
    }

    /// Shape of the 1x1 branch of a parallel layer.
    pub fn pointwise_shape(&self) -> [usize; 4] {
        [self.d_n, self.d_m, 1, 1]
    }
}

fn check_conv_shapes<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    groups: usize,
    padding: usize,
) -> Result<[usize; 8]> {
    let [n, c, h, wd] = x.dims4()?;
    let [o, cg, kh, kw] = w.dims4()?;
    if groups == 0 || c % groups != 0 || o % groups != 0 {
        return Err(Error::Group(format!(
            "g = {groups} must divide input channels {c} and output channels {o}"
        )));
    }
    if cg != c / groups {
        return Err(Error::Shape(format!(
            "weight expects {cg} input channels per group, input provides {} ({c} / {groups})",
            c / groups
        )));
    }
    if kh != kw {
        return Err(Error::Shape(format!(
            "kernel must be square, got {kh}x{kw}"
        )));
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {h}x{wd}"
        )));
    }
    let oh = h + 2 * padding - kh + 1;
    let ow = wd + 2 * padding - kw + 1;
    Ok([n, c, h, wd, o, kh, oh, ow])
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    cg: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn plane_len(&self) -> usize {
        self.cg * self.h * self.w
    }

    /// Output columns `ox` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.ow);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.ow).max(lo);
        (lo, hi)
    }
}

/// Unfolds output rows `rows` of `cg` input planes of one sample into a
/// column matrix with leading dimension `ld`; row `(c*K + ki)*K + kj` holds
/// `rows.len() * OW` values.
fn im2col<T: Element>(x: &[T], g: &Geom, col: &mut [T], ld: usize, rows: Range<usize>) {
    let (k, span) = (g.k, rows.len() * g.ow);
    for c in 0..g.cg {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ld..row * ld + span];
                let (lo, hi) = g.valid_cols(kj);
                for (r, oy) in rows.clone().enumerate() {
                    let out_row = &mut dst[r * g.ow..(r + 1) * g.ow];
                    let iy = (oy + ki).wrapping_sub(g.pad);
                    if iy >= g.h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if hi == lo {
                        continue;
                    }
                    let src0 = iy * g.w + lo + kj - g.pad;
                    out_row[lo..hi].copy_from_slice(&plane[src0..src0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds column rows back onto `cg`
/// input planes.
fn col2im<T: Element>(col: &[T], g: &Geom, ld: usize, x: &mut [T], rows: Range<usize>) {
    let (k, span) = (g.k, rows.len() * g.ow);
    for c in 0..g.cg {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ld..row * ld + span];
                let (lo, hi) = g.valid_cols(kj);
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy + ki).wrapping_sub(g.pad);
                    if iy >= g.h || hi == lo {
                        continue;
                    }
                    let d0 = iy * g.w + lo + kj - g.pad;
                    let dst = &mut plane[d0..d0 + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[r * g.ow + lo..r * g.ow + hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

// Single-sample unfolds of large maps are done a few output rows at a time
// so the column tile (about this many elements) stays in cache.
const TILE_ELEMS: usize = 128 * 1024;

fn tile_rows(g: &Geom) -> usize {
    let oh = g.oh.max(1);
    let max_rows = (TILE_ELEMS / (g.cg * g.k * g.k * g.ow).max(1)).clamp(1, oh);
    oh.div_ceil(oh.div_ceil(max_rows))
}

fn row_tiles(g: &Geom) -> impl Iterator<Item = Range<usize>> {
    let (oh, tr) = (g.oh, tile_rows(g));
    (0..oh).step_by(tr).map(move |r| r..(r + tr).min(oh))
}

// Small feature maps are batched across samples so each GEMM sees at least
// this many columns. The chunking depends only on the shapes, never on the
// thread count, so reductions over chunks are reproducible.
const CHUNK_COLS: usize = 4096;

fn samples_per_chunk(ohw: usize, n: usize) -> usize {
    CHUNK_COLS.div_ceil(ohw.max(1)).clamp(1, n.max(1))
}

/// Fills `col` with the column matrix for group `gi` of `bs` consecutive
/// samples, laid out side by side.
fn gather_cols<T: Element>(
    xs: &[T],
    in_len: usize,
    bs: usize,
    gi: usize,
    geo: &Geom,
    direct: bool,
    col: &mut [T],
) {
    let cols = bs * geo.ohw();
    for b in 0..bs {
        let xg = &xs[b * in_len + gi * geo.plane_len()..][..geo.plane_len()];
        if direct {
            for ci in 0..geo.cg {
                col[ci * cols + b * geo.ohw()..][..geo.ohw()]
                    .copy_from_slice(&xg[ci * geo.ohw()..][..geo.ohw()]);
            }
        } else {
            im2col(xg, geo, &mut col[b * geo.ohw()..], cols, 0..geo.oh);
        }
    }
}

/// Grouped stride-1 convolution; `groups == 1` is a standard convolution.
pub(crate) fn conv2d_raw<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    groups: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, _, _, _, o, _, oh, ow] = check_conv_shapes(x, w, groups, padding)?;
    let mut out = vec![T::zero(); n * o * oh * ow];
    conv2d_accumulate(x, w, groups, padding, &mut out)?;
    Ok(Tensor::from_parts(vec![n, o, oh, ow], out))
}

/// Adds the grouped convolution of `x` onto `out`, which must already hold
/// `N x O x OH x OW` values.
pub(crate) fn conv2d_accumulate<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    groups: usize,
    padding: usize,
    out: &mut [T],
) -> Result<()> {
    let [n, c, h, wd, o, k, oh, ow] = check_conv_shapes(x, w, groups, padding)?;
    if out.len() != n * o * oh * ow {
        return Err(Error::Shape(format!(
            "output buffer of {} for shape {:?}",
            out.len(),
            [n, o, oh, ow]
        )));
    }
    let geo = Geom {
        cg: c / groups,
        h,
        w: wd,
        k,
        pad: padding,
        oh,
        ow,
    };
    let og = o / groups;
    let ckk = geo.cg * k * k;
    let ohw = geo.ohw();
    let direct = k == 1 && padding == 0;
    let in_len = c * h * wd;
    let out_len = o * ohw;
    let cb = samples_per_chunk(ohw, n);

    let macs: u64 = out
        .par_chunks_mut((cb * out_len).max(1))
        .zip(x.data().par_chunks((cb * in_len).max(1)))
        .map(|(ys, xs)| {
            let bs = ys.len() / out_len;
            let cols = bs * ohw;
            let borrow_input = direct && bs == 1;
            let mut macs = 0;
            if bs == 1 && !direct {
                let mut col = vec![T::zero(); ckk * tile_rows(&geo) * ow];
                for b in 0..bs {
                    for gi in 0..groups {
                        let xg = &xs[b * in_len + gi * geo.plane_len()..][..geo.plane_len()];
                        let wg =
                            MatRef::new(&w.data()[gi * og * ckk..(gi + 1) * og * ckk], og, ckk);
                        for rows in row_tiles(&geo) {
                            let span = rows.len() * ow;
                            im2col(xg, &geo, &mut col, span, rows.clone());
                            let yg = &mut ys[b * out_len + gi * og * ohw + rows.start * ow..];
                            macs += gemm_ld(wg, MatRef::new(&col, ckk, span), T::one(), yg, ohw);
                        }
                    }
                }
                return macs;
            }
            let mut col = vec![T::zero(); if borrow_input { 0 } else { ckk * cols }];
            let mut tmp = vec![T::zero(); if bs == 1 { 0 } else { og * cols }];
            for gi in 0..groups {
                let colv: &[T] = if borrow_input {
                    &xs[gi * geo.plane_len()..][..geo.plane_len()]
                } else {
                    gather_cols(xs, in_len, bs, gi, &geo, direct, &mut col);
                    &col
                };
                let wg = MatRef::new(&w.data()[gi * og * ckk..(gi + 1) * og * ckk], og, ckk);
                if bs == 1 {
                    macs += gemm(
                        wg,
                        MatRef::new(colv, ckk, cols),
                        T::one(),
                        &mut ys[gi * og * ohw..(gi + 1) * og * ohw],
                    );
                } else {
                    macs += gemm(wg, MatRef::new(colv, ckk, cols), T::zero(), &mut tmp);
                    for oc in 0..og {
                        for b in 0..bs {
                            let dst = &mut ys[b * out_len + (gi * og + oc) * ohw..][..ohw];
                            for (d, &s) in dst.iter_mut().zip(&tmp[oc * cols + b * ohw..][..ohw]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
            macs
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    MacCounter::add(macs);
    Ok(())
}

/// `relu(conv(x, w) + conv1x1(x, pw) + b)` with the pointwise branch and
/// bias accumulated in place.
pub(crate) fn conv_block_raw<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pw: Option<&Tensor<T>>,
    b: Option<&Tensor<T>>,
    groups: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let mut y = conv2d_raw(x, w, groups, padding)?;
    if let Some(pw) = pw {
        if y.shape()[2..] != x.shape()[2..] {
            return Err(Error::Shape(format!(
                "pointwise branch keeps {:?} but the main branch gives {:?}",
                &x.shape()[2..],
                &y.shape()[2..]
            )));
        }
        conv2d_accumulate(x, pw, 1, 0, y.data_mut())?;
    }
    if let Some(b) = b {
        add_channel_bias(&mut y, b)?;
    }
    y.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    });
    Ok(y)
}

/// Gradients of a grouped convolution with respect to its input (skipped
/// when `need_dx` is false) and weights.
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    groups: usize,
    padding: usize,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let [n, c, h, wd, o, k, oh, ow] = check_conv_shapes(x, w, groups, padding)?;
    if dy.shape() != [n, o, oh, ow] {
        return Err(Error::Shape(format!(
            "output gradient shape {:?} does not match {:?}",
            dy.shape(),
            [n, o, oh, ow]
        )));
    }
    let geo = Geom {
        cg: c / groups,
        h,
        w: wd,
        k,
        pad: padding,
        oh,
        ow,
    };
    let og = o / groups;
    let ckk = geo.cg * k * k;
    let ohw = geo.ohw();
    let direct = k == 1 && padding == 0;
    let in_len = c * h * wd;
    let out_len = o * ohw;
    let cb = samples_per_chunk(ohw, n);
    let n_chunks = n.div_ceil(cb);

    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let b0 = ci * cb;
            let bs = cb.min(n - b0);
            let cols = bs * ohw;
            let xs = &x.data()[b0 * in_len..(b0 + bs) * in_len];
            let dys = &dy.data()[b0 * out_len..(b0 + bs) * out_len];
            let borrow_input = direct && bs == 1;
            let mut dw = vec![T::zero(); w.len()];
            let mut dxc = vec![T::zero(); if need_dx { bs * in_len } else { 0 }];
            if bs == 1 && !direct {
                let tile = tile_rows(&geo) * ow;
                let mut col = vec![T::zero(); ckk * tile];
                let mut dcol = vec![T::zero(); if need_dx { ckk * tile } else { 0 }];
                for b in 0..bs {
                    for gi in 0..groups {
                        let off = b * in_len + gi * geo.plane_len();
                        let xg = &xs[off..][..geo.plane_len()];
                        let wg =
                            MatRef::new(&w.data()[gi * og * ckk..(gi + 1) * og * ckk], og, ckk);
                        let dwg = &mut dw[gi * og * ckk..(gi + 1) * og * ckk];
                        for rows in row_tiles(&geo) {
                            let span = rows.len() * ow;
                            im2col(xg, &geo, &mut col, span, rows.clone());
                            let dyt = MatRef::strided(
                                &dys[b * out_len + gi * og * ohw + rows.start * ow..],
                                og,
                                span,
                                ohw,
                            );
                            gemm(dyt, MatRef::new(&col, ckk, span).t(), T::one(), dwg);
                            if need_dx {
                                gemm(wg.t(), dyt, T::zero(), &mut dcol);
                                col2im(&dcol, &geo, span, &mut dxc[off..][..geo.plane_len()], rows);
                            }
                        }
                    }
                }
                return (dw, dxc);
            }
            let mut col = vec![T::zero(); if borrow_input { 0 } else { ckk * cols }];
            let mut dyc = vec![T::zero(); if bs == 1 { 0 } else { og * cols }];
            let mut dcol = vec![
                T::zero();
                if need_dx && !borrow_input {
                    ckk * cols
                } else {
                    0
                }
            ];
            for gi in 0..groups {
                let colv: &[T] = if borrow_input {
                    &xs[gi * geo.plane_len()..][..geo.plane_len()]
                } else {
                    gather_cols(xs, in_len, bs, gi, &geo, direct, &mut col);
                    &col
                };
                let dyv: &[T] = if bs == 1 {
                    &dys[gi * og * ohw..(gi + 1) * og * ohw]
                } else {
                    for oc in 0..og {
                        for b in 0..bs {
                            dyc[oc * cols + b * ohw..][..ohw]
                                .copy_from_slice(&dys[b * out_len + (gi * og + oc) * ohw..][..ohw]);
                        }
                    }
                    &dyc
                };
                let wg = &w.data()[gi * og * ckk..(gi + 1) * og * ckk];
                gemm(
                    MatRef::new(dyv, og, cols),
                    MatRef::new(colv, ckk, cols).t(),
                    T::zero(),
                    &mut dw[gi * og * ckk..(gi + 1) * og * ckk],
                );
                if !need_dx {
                    continue;
                }
                if borrow_input {
                    let dxg = &mut dxc[gi * geo.plane_len()..][..geo.plane_len()];
                    gemm(
                        MatRef::new(wg, og, ckk).t(),
                        MatRef::new(dyv, og, cols),
                        T::zero(),
                        dxg,
                    );
                    continue;
                }
                gemm(
                    MatRef::new(wg, og, ckk).t(),
                    MatRef::new(dyv, og, cols),
                    T::zero(),
                    &mut dcol,
                );
                for b in 0..bs {
                    let dxg = &mut dxc[b * in_len + gi * geo.plane_len()..][..geo.plane_len()];
                    if direct {
                        for ch in 0..geo.cg {
                            dxg[ch * ohw..][..ohw]
                                .copy_from_slice(&dcol[ch * cols + b * ohw..][..ohw]);
                        }
                    } else {
                        col2im(&dcol[b * ohw..], &geo, cols, dxg, 0..geo.oh);
                    }
                }
            }
            (dw, dxc)
        })
        .collect();

    let mut dw = vec![T::zero(); w.len()];
    let mut dx = Vec::with_capacity(if need_dx { n * in_len } else { 0 });
    for (pdw, pdx) in parts {
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a = *a + b;
        }
        dx.extend(pdx);
    }
    Ok((
        need_dx.then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
        Tensor::from_parts(w.shape().to_vec(), dw),
    ))
}

pub(crate) fn add_channel_bias<T: Element>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 || bias.len() != shape[1] {
        return Err(Error::Shape(format!(
            "bias of length {} for input {shape:?}",
            bias.len()
        )));
    }
    let inner: usize = shape[2..].iter().product();
    let c = shape[1];
    for (i, chunk) in x.data_mut().chunks_mut(inner.max(1)).enumerate() {
        let b = bias.data()[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(())
}

fn check_spec_kernel<T: Element>(w: &Tensor<T>, expected: [usize; 4], what: &str) -> Result<()> {
    if w.shape() != expected {
        return Err(Error::Shape(format!(
            "{what} weight shape {:?}, expected {expected:?}",
            w.shape()
        )));
    }
    Ok(())
}

fn check_input_channels<T: Element>(x: &Tensor<T>, spec: &ConvLayerSpec) -> Result<()> {
    let [_, c, _, _] = x.dims4()?;
    if c != spec.d_m {
        return Err(Error::Shape(format!(
            "input has {c} channels, layer expects {}",
            spec.d_m
        )));
    }
    Ok(())
}

/// Standard convolution: every output channel sees every input channel.
pub fn conv2d_standard<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvLayerSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.groups != 1 {
        return Err(Error::Group(format!(
            "standard convolution needs g = 1, got {}",
            spec.groups
        )));
    }
    check_input_channels(x, spec)?;
    check_spec_kernel(w, spec.kernel_shape(), "standard")?;
    conv2d_raw(x, w, 1, spec.padding)
}

/// Grouped convolution: input and output channels are split into `g`
/// contiguous groups and group `i` of the output only sees group `i` of
/// the input.
pub fn conv2d_grouped<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvLayerSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    check_input_channels(x, spec)?;
    check_spec_kernel(w, spec.kernel_shape(), "grouped")?;
    conv2d_raw(x, w, spec.groups, spec.padding)
}

/// 1x1 convolution: a per-pixel linear map across channels.
pub fn conv2d_pointwise<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let [o, _, kh, kw] = w.dims4()?;
    if kh != 1 || kw != 1 {
        return Err(Error::Shape(format!(
            "pointwise kernel must be 1x1, got {kh}x{kw}"
        )));
    }
    let _ = o;
    conv2d_raw(x, w, 1, 0)
}

/// Parallel block: grouped `K x K` branch plus pointwise branch, summed,
/// then the optional per-channel bias.
pub fn parallel_conv<T: Element>(
    x: &Tensor<T>,
    w_spatial: &Tensor<T>,
    w_pointwise: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvLayerSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.kind != ConvKind::Parallel {
        return Err(Error::Shape(format!(
            "parallel_conv called with a {:?} layer",
            spec.kind
        )));
    }
    check_input_channels(x, spec)?;
    check_spec_kernel(w_spatial, spec.kernel_shape(), "spatial branch")?;
    check_spec_kernel(w_pointwise, spec.pointwise_shape(), "pointwise branch")?;
    let spatial = conv2d_raw(x, w_spatial, spec.groups, spec.padding)?;
    let point = conv2d_raw(x, w_pointwise, 1, 0)?;
    let mut out = spatial.add(&point)?;
    if let Some(b) = bias {
        add_channel_bias(&mut out, b)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_ones_hand_count() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let y = conv2d_standard(&x, &w, &ConvLayerSpec::standard(1, 1, 3)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform([2, 1, 5, 4], -1.0, 1.0, &mut rng);
        let mut w = Tensor::<f64>::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d_standard(&x, &w, &ConvLayerSpec::standard(1, 1, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn pointwise_identity_and_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let eye = Tensor::<f64>::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(conv2d_pointwise(&x, &eye).unwrap(), x);

        let x2 = Tensor::<f64>::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let ones = Tensor::<f64>::full([1, 2, 1, 1], 1.0);
        let y = conv2d_pointwise(&x2, &ones).unwrap();
        for i in 0..9 {
            assert!((y.data()[i] - (x2.data()[i] + x2.data()[9 + i])).abs() < 1e-15);
        }
    }

    #[test]
    fn group_errors() {
        let x = Tensor::<f32>::zeros([1, 4, 4, 4]);
        let w = Tensor::<f32>::zeros([6, 2, 3, 3]);
        let err = conv2d_grouped(&x, &w, &ConvLayerSpec::grouped(4, 6, 3, 3)).unwrap_err();
        assert!(matches!(err, Error::Group(_)));
        let err = conv2d_raw(&x, &w, 3, 1).unwrap_err();
        assert!(matches!(err, Error::Group(_)));
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 2, 3, 3]);
        assert!(matches!(
            conv2d_standard(&x, &w, &ConvLayerSpec::standard(3, 2, 3)),
            Err(Error::Shape(_))
        ));
        let flat = Tensor::<f32>::zeros([3, 4]);
        assert!(matches!(
            conv2d_pointwise(&flat, &Tensor::zeros([2, 3, 1, 1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(ConvLayerSpec::parallel(64, 128, 3, 4).validate().is_ok());
        assert!(matches!(
            ConvLayerSpec::parallel(64, 130, 3, 4).validate(),
            Err(Error::Group(_))
        ));
        let mut pw = ConvLayerSpec::pointwise(4, 4);
        pw.d_k = 3;
        pw.padding = 1;
        assert!(pw.validate().is_err());
        assert!(ConvLayerSpec::grouped(8, 8, 3, 8).validate().is_ok());
    }

    // Nested-loop grouped convolution and its adjoints.
    fn reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        dy: &Tensor<f64>,
        groups: usize,
        pad: usize,
    ) -> [Vec<f64>; 3] {
        let [n, c, h, wd] = x.dims4().unwrap();
        let [o, cg, k, _] = w.dims4().unwrap();
        let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let og = o / groups;
        let (mut y, mut dx, mut dw) = (
            vec![0.0; n * o * oh * ow],
            vec![0.0; x.len()],
            vec![0.0; w.len()],
        );
        for b in 0..n {
            for oc in 0..o {
                for ci in 0..cg {
                    let ic = oc / og * cg + ci;
                    for ki in 0..k {
                        for kj in 0..k {
                            let wi = ((oc * cg + ci) * k + ki) * k + kj;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let (iy, ix) =
                                        ((oy + ki).wrapping_sub(pad), (ox + kj).wrapping_sub(pad));
                                    if iy >= h || ix >= wd {
                                        continue;
                                    }
                                    let xi = ((b * c + ic) * h + iy) * wd + ix;
                                    let yi = ((b * o + oc) * oh + oy) * ow + ox;
                                    y[yi] += w.data()[wi] * x.data()[xi];
                                    dx[xi] += w.data()[wi] * dy.data()[yi];
                                    dw[wi] += x.data()[xi] * dy.data()[yi];
                                }
                            }
                        }
                    }
                }
            }
        }
        [y, dx, dw]
    }

    #[test]
    fn row_tiled_path_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform([2, 64, 70, 70], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([4, 32, 3, 3], -1.0, 1.0, &mut rng);
        let dy = Tensor::<f64>::uniform([2, 4, 70, 70], -1.0, 1.0, &mut rng);
        let geo = Geom {
            cg: 32,
            h: 70,
            w: 70,
            k: 3,
            pad: 1,
            oh: 70,
            ow: 70,
        };
        assert!(row_tiles(&geo).count() > 2 && 70 % tile_rows(&geo) != 0);
        assert_eq!(samples_per_chunk(70 * 70, 2), 1);

        let [y_ref, dx_ref, dw_ref] = reference(&x, &w, &dy, 2, 1);
        let y = conv2d_raw(&x, &w, 2, 1).unwrap();
        let (dx, dw) = conv2d_backward(&x, &w, &dy, 2, 1, true).unwrap();
        let close = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .all(|(p, q)| (p - q).abs() < 1e-9 * (1.0 + q.abs()))
        };
        assert!(close(y.data(), &y_ref));
        assert!(close(dx.unwrap().data(), &dx_ref));
        assert!(close(dw.data(), &dw_ref));
    }

    #[test]
    fn mac_counter_counts_forward_only_on_this_thread() {
        MacCounter::reset();
        let x = Tensor::<f32>::zeros([2, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([3, 2, 3, 3]);
        conv2d_raw(&x, &w, 1, 1).unwrap();
        assert_eq!(MacCounter::get(), 2 * 4 * 4 * 9 * 2 * 3);
    }
}
