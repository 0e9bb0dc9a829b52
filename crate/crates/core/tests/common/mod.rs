#![allow(dead_code)]

use num_complex::Complex64;
use parconv_core::tensor::{Element, Graph, Var};
use parconv_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Direct 7-loop cross-correlation with zero padding, stride 1.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, groups: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [o, cg, k, _] = w.dims4().unwrap();
    assert_eq!(cg * groups, c);
    let og = o / groups;
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut y = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = oy as isize + ki as isize - pad as isize;
                                let ix = ox as isize + kj as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * cg + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], y).unwrap()
}

/// 1x1 convolution written as a per-pixel matrix product.
pub fn per_pixel_matmul(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let o = w.shape()[0];
    let mut y = vec![0.0; n * o * h * wd];
    for b in 0..n {
        for p in 0..h * wd {
            for oc in 0..o {
                y[(b * o + oc) * h * wd + p] = (0..c)
                    .map(|ic| w.data()[oc * c + ic] * x.data()[(b * c + ic) * h * wd + p])
                    .sum();
            }
        }
    }
    Tensor::new(vec![n, o, h, wd], y).unwrap()
}

pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| {
                    v * Complex64::from_polar(
                        1.0,
                        -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64,
                    )
                })
                .sum()
        })
        .collect()
}

/// Relative L2 error between an analytic gradient and central differences
/// of `f` around `x`.
pub fn fd_rel_error(x: &[f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    let mut num = 0.0;
    let mut den_a = 0.0;
    let mut den_n = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let g = (fp - fm) / (2.0 * h);
        num += (g - analytic[i]).powi(2);
        den_a += analytic[i].powi(2);
        den_n += g.powi(2);
    }
    num.sqrt() / den_a.sqrt().max(den_n.sqrt()).max(1e-12)
}

/// Builds `loss = sum(weights * op(leaves))` and returns the loss value and
/// the gradient with respect to every leaf.
pub fn eval_with_grads(
    leaves: &[Tensor<f64>],
    weights: &[f64],
    op: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, &vars);
    let loss = if g.value(y).len() == 1 {
        y
    } else {
        g.weighted_sum(y, weights).unwrap()
    };
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss).unwrap();
    (
        value,
        vars.iter()
            .map(|&v| grads.get(v).unwrap().data().to_vec())
            .collect(),
    )
}

pub fn loss_only(
    leaves: &[Tensor<f64>],
    weights: &[f64],
    op: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, &vars);
    if g.value(y).len() == 1 {
        g.value(y).data()[0]
    } else {
        g.value(y)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Worst relative finite-difference error over every leaf of `op`.
pub fn check_op(
    leaves: &[Tensor<f64>],
    out_len: usize,
    seed: u64,
    op: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(seed);
    let weights: Vec<f64> = rand_tensor::<f64>(&[out_len], &mut r).into_data();
    let (_, grads) = eval_with_grads(leaves, &weights, op);
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let err = fd_rel_error(leaf.data(), &grads[li], 1e-3, |xp| {
            let mut ls = leaves.to_vec();
            ls[li] = Tensor::new(leaf.shape().to_vec(), xp.to_vec()).unwrap();
            loss_only(&ls, &weights, op)
        });
        worst = worst.max(err);
    }
    worst
}
