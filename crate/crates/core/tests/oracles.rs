mod common;

use common::*;
use num_complex::Complex64;
use parconv_core::audio::{hz_to_mel, mel_filterbank, stft, AudioBuffer, MelConfig, StftConfig};
use parconv_core::tensor::{
    conv2d_grouped, conv2d_pointwise, conv2d_standard, parallel_conv, Graph,
};
use parconv_core::{ConvLayerSpec, Tensor};
use rand::Rng;

#[test]
fn standard_conv_matches_direct_loops() {
    let mut r = rng(1);
    for _ in 0..10 {
        let (m, n, k) = (
            r.random_range(1..5),
            r.random_range(1..5),
            [1, 3, 5][r.random_range(0..3)],
        );
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let spec = ConvLayerSpec::standard(m, n, k);
        let x = rand_tensor::<f64>(&[2, m, h, w], &mut r);
        let wt = rand_tensor::<f64>(&spec.kernel_shape(), &mut r);
        let y = conv2d_standard(&x, &wt, &spec).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &wt, 1, spec.padding)) < 1e-12);
    }
}

#[test]
fn grouped_conv_matches_direct_loops() {
    let mut r = rng(2);
    for g in [2, 4] {
        for _ in 0..5 {
            let (m, n) = (g * r.random_range(1..4), g * r.random_range(1..4));
            let spec = ConvLayerSpec::grouped(m, n, 3, g);
            let x = rand_tensor::<f64>(&[3, m, 6, 5], &mut r);
            let wt = rand_tensor::<f64>(&spec.kernel_shape(), &mut r);
            let y = conv2d_grouped(&x, &wt, &spec).unwrap();
            assert!(y.max_abs_diff(&naive_conv(&x, &wt, g, 1)) < 1e-12);
        }
    }
}

#[test]
fn grouped_with_one_group_equals_standard() {
    let mut r = rng(3);
    for _ in 0..20 {
        let (m, n) = (r.random_range(1..9), r.random_range(1..9));
        let x = rand_tensor::<f32>(&[2, m, 7, 7], &mut r);
        let wt = rand_tensor::<f32>(&[n, m, 3, 3], &mut r);
        let a = conv2d_grouped(&x, &wt, &ConvLayerSpec::grouped(m, n, 3, 1)).unwrap();
        let b = conv2d_standard(&x, &wt, &ConvLayerSpec::standard(m, n, 3)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}

#[test]
fn pointwise_equals_per_pixel_matmul_and_k1_standard() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (m, n) = (r.random_range(1..9), r.random_range(1..9));
        let x = rand_tensor::<f64>(&[2, m, 5, 6], &mut r);
        let wt = rand_tensor::<f64>(&[n, m, 1, 1], &mut r);
        let p = conv2d_pointwise(&x, &wt).unwrap();
        assert!(p.max_abs_diff(&per_pixel_matmul(&x, &wt)) < 1e-12);
        let s = conv2d_standard(&x, &wt, &ConvLayerSpec::standard(m, n, 1)).unwrap();
        assert!(p.max_abs_diff(&s) < 1e-12);
    }
}

#[test]
fn parallel_block_is_branch_sum_plus_bias() {
    let mut r = rng(5);
    for _ in 0..20 {
        let g = [1, 2, 4][r.random_range(0..3)];
        let (m, n) = (g * r.random_range(1..4), g * r.random_range(1..4));
        let spec = ConvLayerSpec::parallel(m, n, 3, g);
        let x = rand_tensor::<f64>(&[2, m, 6, 6], &mut r);
        let ws = rand_tensor::<f64>(&spec.kernel_shape(), &mut r);
        let wp = rand_tensor::<f64>(&spec.pointwise_shape(), &mut r);
        let b = rand_tensor::<f64>(&[n], &mut r);
        let y = parallel_conv(&x, &ws, &wp, Some(&b), &spec).unwrap();
        let spatial = naive_conv(&x, &ws, g, 1);
        let point = per_pixel_matmul(&x, &wp);
        let hw = 36;
        let expect = Tensor::from_fn(y.shape().to_vec(), |i| {
            spatial.data()[i] + point.data()[i] + b.data()[(i / hw) % n]
        });
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn depthwise_channels_are_independent() {
    let mut r = rng(6);
    let spec = ConvLayerSpec::grouped(4, 4, 3, 4);
    let x = rand_tensor::<f64>(&[1, 4, 5, 5], &mut r);
    let wt = rand_tensor::<f64>(&spec.kernel_shape(), &mut r);
    let y = conv2d_grouped(&x, &wt, &spec).unwrap();
    for zeroed in 0..4 {
        let mut xz = x.clone();
        xz.data_mut()[zeroed * 25..(zeroed + 1) * 25].fill(0.0);
        let yz = conv2d_grouped(&xz, &wt, &spec).unwrap();
        for ch in (0..4).filter(|&c| c != zeroed) {
            assert_eq!(
                &y.data()[ch * 25..(ch + 1) * 25],
                &yz.data()[ch * 25..(ch + 1) * 25]
            );
        }
    }
}

// Small maps are batched across samples inside the kernels; results must not
// depend on how many samples share a call.
#[test]
fn batched_forward_and_weight_gradient_match_per_sample() {
    let mut r = rng(7);
    let x = rand_tensor::<f64>(&[5, 4, 4, 4], &mut r);
    let w = rand_tensor::<f64>(&[6, 2, 3, 3], &mut r);
    let grad_w = |xs: Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.input(xs);
        let wv = g.input(w.clone());
        let y = g.conv2d(xv, wv, 2, 1).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        (
            g.value(y).clone(),
            grads.get(wv).unwrap().clone(),
            grads.get(xv).unwrap().clone(),
        )
    };
    let (y_all, dw_all, dx_all) = grad_w(x.clone());
    let mut dw_sum = Tensor::zeros(w.shape().to_vec());
    for b in 0..5 {
        let xb = Tensor::new(vec![1, 4, 4, 4], x.data()[b * 64..(b + 1) * 64].to_vec()).unwrap();
        let (yb, dwb, dxb) = grad_w(xb);
        let y_slice = &y_all.data()[b * 96..(b + 1) * 96];
        assert!(yb
            .data()
            .iter()
            .zip(y_slice)
            .all(|(a, c)| (a - c).abs() < 1e-12));
        assert!(dxb
            .data()
            .iter()
            .zip(&dx_all.data()[b * 64..(b + 1) * 64])
            .all(|(a, c)| (a - c).abs() < 1e-12));
        dw_sum = dw_sum.add(&dwb).unwrap();
    }
    assert!(dw_sum.max_abs_diff(&dw_all) < 1e-10);
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= len as isize { period - m } else { m }) as usize
}

#[test]
fn stft_matches_direct_dft() {
    let mut r = rng(8);
    for n_fft in [64, 256, 512] {
        let samples: Vec<f64> = (0..1500).map(|_| r.random_range(-1.0..1.0)).collect();
        let audio = AudioBuffer::new(samples.clone(), 16000);
        let cfg = StftConfig {
            window_size: n_fft,
            hop_length: n_fft / 4,
            ..StftConfig::default()
        };
        let spec = stft(&audio, &cfg).unwrap();
        let win = periodic_hann(n_fft);
        for t in 0..spec.ncols() {
            let start = (t * cfg.hop_length) as isize - (n_fft / 2) as isize;
            let frame: Vec<Complex64> = (0..n_fft)
                .map(|i| {
                    Complex64::new(
                        samples[reflect(start + i as isize, samples.len())] * win[i],
                        0.0,
                    )
                })
                .collect();
            let expect = dft(&frame);
            for k in 0..=n_fft / 2 {
                assert!(
                    (spec[[k, t]] - expect[k]).norm() < 1e-9,
                    "n_fft {n_fft} frame {t} bin {k}"
                );
            }
        }
    }
}

#[test]
fn mel_centers_equally_spaced() {
    let fb = mel_filterbank(44100, 2048, &MelConfig::default()).unwrap();
    assert_eq!(fb.weights.dim(), (128, 1025));
    let mels: Vec<f64> = fb
        .center_frequencies()
        .iter()
        .map(|&f| 2595.0 * (1.0 + f / 700.0).log10())
        .collect();
    let step = (hz_to_mel(20000.0) - hz_to_mel(20.0)) / 129.0;
    for w in mels.windows(2) {
        assert!(w[1] > w[0]);
        assert!(((w[1] - w[0]) - step).abs() <= 1e-9 * step);
    }
}
