//! Non-convolutional primitives and their gradients.

use super::element::{gemm, MatRef};
use super::{Element, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Element>(x: &Tensor<T>, dy: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

fn even_dims<T: Element>(x: &Tensor<T>) -> Result<[usize; 4]> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2x2 average pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok([n, c, h, w])
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = even_dims(x)?;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in src.chunks(h * w) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn avg_pool2_backward<T: Element>(x_shape: &[usize], dy: &[T]) -> Vec<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    for (plane, dplane) in dx.chunks_mut(h * w).zip(dy.chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dplane[oy * ow + ox] * quarter;
                plane[2 * oy * w + 2 * ox] = g;
                plane[2 * oy * w + 2 * ox + 1] = g;
                plane[(2 * oy + 1) * w + 2 * ox] = g;
                plane[(2 * oy + 1) * w + 2 * ox + 1] = g;
            }
        }
    }
    dx
}

/// `N x C x H x W -> N x C` spatial mean.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let inv = T::from_f64_lossy(1.0 / (h * w) as f64);
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn global_avg_pool_backward<T: Element>(x_shape: &[usize], dy: &[T]) -> Vec<T> {
    let hw = x_shape[2] * x_shape[3];
    let inv = T::from_f64_lossy(1.0 / hw as f64);
    dy.iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect()
}

/// `y = x W^T + b` with `x: N x I`, `W: O x I`, `b: O`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, i] = x.dims2()?;
    let [o, wi] = w.dims2()?;
    if wi != i {
        return Err(Error::Shape(format!(
            "linear weight expects {wi} inputs, got {i}"
        )));
    }
    let mut out = vec![T::zero(); n * o];
    gemm(
        MatRef::new(x.data(), n, i),
        MatRef::new(w.data(), o, i).t(),
        T::zero(),
        &mut out,
    );
    if let Some(b) = b {
        if b.len() != o {
            return Err(Error::Shape(format!(
                "linear bias has {} entries, expected {o}",
                b.len()
            )));
        }
        for row in out.chunks_mut(o) {
            row.iter_mut()
                .zip(b.data())
                .for_each(|(v, &bb)| *v = *v + bb);
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

/// Returns `(dx, dw, db)`.
pub(crate) fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut dx = vec![T::zero(); n * i];
    gemm(
        MatRef::new(dy, n, o),
        MatRef::new(w.data(), o, i),
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); o * i];
    gemm(
        MatRef::new(dy, n, o).t(),
        MatRef::new(x.data(), n, i),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); o];
    for row in dy.chunks(o) {
        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
    }
    (dx, dw, db)
}

/// Row-wise softmax of `N x C` logits.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c] = logits.dims2()?;
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Mean over the batch of `-log softmax(logits)[label]`. Returns the loss and
/// the softmax probabilities (reused by the backward pass).
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [n, c] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label(format!(
            "label index {bad} out of range for {c} classes"
        )));
    }
    let probs = softmax(logits)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total = total + (lse - row[label]);
    }
    Ok((total / T::from_f64_lossy(n as f64), probs))
}

pub(crate) fn softmax_cross_entropy_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Vec<T> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream / T::from_f64_lossy(n as f64);
    let mut d = probs.data().to_vec();
    for (row, &label) in d.chunks_mut(c).zip(labels) {
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|v| *v = *v * scale);
    }
    d
}
