mod common;

use common::*;
use parconv_core::tensor::{Graph, Var};
use parconv_core::Tensor;
use rand::Rng;

const TOL: f64 = 1e-4;
const DRAWS: u64 = 10;

type Op = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var;

fn run(
    name: &str,
    make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor<f64>>, usize, Box<Op>),
) {
    for seed in 0..DRAWS {
        let mut r = rng(seed * 7919 + name.len() as u64);
        let (leaves, out_len, op) = make(&mut r);
        let err = check_op(&leaves, out_len, seed, op.as_ref());
        assert!(err < TOL, "{name} draw {seed}: relative error {err:e}");
    }
}

fn away_from_zero(mut t: Tensor<f64>) -> Tensor<f64> {
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    t
}

#[test]
fn standard_conv() {
    run("conv", |r| {
        let (m, n) = (r.random_range(1..4), r.random_range(1..4));
        let x = rand_tensor(&[2, m, 5, 4], r);
        let w = rand_tensor(&[n, m, 3, 3], r);
        (
            vec![x, w],
            2 * n * 20,
            Box::new(|g, v| g.conv2d(v[0], v[1], 1, 1).unwrap()),
        )
    });
}

#[test]
fn grouped_conv() {
    run("grouped", |r| {
        let (m, n) = (2 * r.random_range(1..3), 2 * r.random_range(1..3));
        let x = rand_tensor(&[2, m, 4, 4], r);
        let w = rand_tensor(&[n, m / 2, 3, 3], r);
        (
            vec![x, w],
            2 * n * 16,
            Box::new(|g, v| g.conv2d(v[0], v[1], 2, 1).unwrap()),
        )
    });
}

#[test]
fn pointwise_conv() {
    run("pointwise", |r| {
        let (m, n) = (r.random_range(1..5), r.random_range(1..5));
        let x = rand_tensor(&[3, m, 3, 3], r);
        let w = rand_tensor(&[n, m, 1, 1], r);
        (
            vec![x, w],
            3 * n * 9,
            Box::new(|g, v| g.conv2d(v[0], v[1], 1, 0).unwrap()),
        )
    });
}

#[test]
fn parallel_block() {
    run("parallel", |r| {
        let x = rand_tensor(&[2, 4, 4, 4], r);
        let ws = rand_tensor(&[6, 2, 3, 3], r);
        let wp = rand_tensor(&[6, 4, 1, 1], r);
        let b = rand_tensor(&[6], r);
        (
            vec![x, ws, wp, b],
            2 * 6 * 16,
            Box::new(|g, v| {
                let a = g.conv2d(v[0], v[1], 2, 1).unwrap();
                let p = g.conv2d(v[0], v[2], 1, 0).unwrap();
                let s = g.add(a, p).unwrap();
                g.bias_add(s, v[3]).unwrap()
            }),
        )
    });
}

#[test]
fn relu_off_kink() {
    run("relu", |r| {
        let x = away_from_zero(rand_tensor(&[2, 3, 4, 4], r));
        (vec![x], 96, Box::new(|g, v| g.relu(v[0]).unwrap()))
    });
}

#[test]
fn avg_pool() {
    run("avg_pool2", |r| {
        let x = rand_tensor(&[2, 3, 4, 6], r);
        (
            vec![x],
            2 * 3 * 6,
            Box::new(|g, v| g.avg_pool2(v[0]).unwrap()),
        )
    });
}

#[test]
fn global_avg_pool() {
    run("gap", |r| {
        let x = rand_tensor(&[3, 4, 3, 5], r);
        (
            vec![x],
            12,
            Box::new(|g, v| g.global_avg_pool(v[0]).unwrap()),
        )
    });
}

#[test]
fn linear_layer() {
    run("linear", |r| {
        let x = rand_tensor(&[3, 5], r);
        let w = rand_tensor(&[4, 5], r);
        let b = rand_tensor(&[4], r);
        (
            vec![x, w, b],
            12,
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()),
        )
    });
}

#[test]
fn softmax_cross_entropy() {
    run("softmax_ce", |r| {
        let x = rand_tensor(&[4, 7], r).scale(3.0);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..7)).collect();
        (
            vec![x],
            1,
            Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap()),
        )
    });
}

#[test]
fn bias_add_and_add() {
    run("bias_add", |r| {
        let x = rand_tensor(&[2, 3, 2, 2], r);
        let y = rand_tensor(&[2, 3, 2, 2], r);
        let b = rand_tensor(&[3], r);
        (
            vec![x, y, b],
            24,
            Box::new(|g, v| {
                let s = g.add(v[0], v[1]).unwrap();
                g.bias_add(s, v[2]).unwrap()
            }),
        )
    });
}

#[test]
fn small_network_end_to_end() {
    run("network", |r| {
        let x = rand_tensor(&[2, 2, 4, 4], r);
        let w1 = rand_tensor(&[4, 1, 3, 3], r);
        let p1 = rand_tensor(&[4, 2, 1, 1], r);
        let fc = rand_tensor(&[3, 4], r);
        let fb = rand_tensor(&[3], r);
        (
            vec![x, w1, p1, fc, fb],
            1,
            Box::new(|g, v| {
                let a = g.conv2d(v[0], v[1], 2, 1).unwrap();
                let p = g.conv2d(v[0], v[2], 1, 0).unwrap();
                let s = g.add(a, p).unwrap();
                let pooled = g.avg_pool2(s).unwrap();
                let gap = g.global_avg_pool(pooled).unwrap();
                let logits = g.linear(gap, v[3], Some(v[4])).unwrap();
                g.softmax_cross_entropy(logits, &[0, 2]).unwrap()
            }),
        )
    });
}

#[test]
fn fused_conv_block() {
    // Redraw until every pre-activation sits clear of the ReLU kink.
    run("conv_block", |r| loop {
        let x = rand_tensor(&[2, 4, 4, 4], r);
        let ws = rand_tensor(&[6, 2, 3, 3], r);
        let wp = rand_tensor(&[6, 4, 1, 1], r);
        let b = rand_tensor::<f64>(&[6], r);
        let a = naive_conv(&x, &ws, 2, 1);
        let p = per_pixel_matmul(&x, &wp);
        let clear = a
            .data()
            .iter()
            .zip(p.data())
            .enumerate()
            .all(|(i, (u, v))| (u + v + b.data()[i / 16 % 6]).abs() > 0.05);
        if !clear {
            continue;
        }
        break (
            vec![x, ws, wp, b],
            2 * 6 * 16,
            Box::new(|g: &mut Graph<'_, f64>, v: &[Var]| {
                g.conv_block(v[0], v[1], Some(v[2]), Some(v[3]), 2, 1)
                    .unwrap()
            }) as Box<Op>,
        );
    });
}
