mod common;

use common::*;
use num_complex::Complex64;
use num_rational::Ratio;
use parconv_core::audio::Radix2Fft;
use parconv_core::fog::{simulate, DeviceProfile, TaskSpec, Tier};
use parconv_core::net::{
    decode_model, encode_model, flops_parallel, flops_standard, reduction_ratio,
};
use parconv_core::tensor::conv2d_grouped;
use parconv_core::{ConvKind, ConvLayerSpec, Model, NetworkSpec, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reduction_ratio_is_exact(gi in 0usize..4, k in prop::sample::select(vec![1usize, 3, 5, 7]), mm in 1usize..9, nn in 1usize..9, h in 1usize..20, w in 1usize..20) {
        let g = [1, 2, 4, 8][gi];
        let spec = ConvLayerSpec::parallel(mm * g, nn * g, k, g);
        let ratio = Ratio::new(flops_parallel(&spec, h, w).unwrap(), flops_standard(&spec, h, w));
        prop_assert_eq!(ratio, Ratio::new(1, g as u64) + Ratio::new(1, (k * k) as u64));
        prop_assert_eq!(reduction_ratio(&spec), ratio);
    }

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let spec = ConvLayerSpec::grouped(4, 6, 3, 2);
        let x1 = rand_tensor::<f64>(&[2, 4, 5, 5], &mut r);
        let x2 = rand_tensor::<f64>(&[2, 4, 5, 5], &mut r);
        let w = rand_tensor::<f64>(&spec.kernel_shape(), &mut r);
        let mix = x1.scale(a).add(&x2.scale(b)).unwrap();
        let lhs = conv2d_grouped(&mix, &w, &spec).unwrap();
        let rhs = conv2d_grouped(&x1, &w, &spec).unwrap().scale(a).add(&conv2d_grouped(&x2, &w, &spec).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn fft_preserves_energy(seed in any::<u64>(), log_n in 1u32..11) {
        let n = 1usize << log_n;
        let mut r = rng(seed);
        let x: Vec<Complex64> = rand_tensor::<f64>(&[2 * n], &mut r).data().chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
        let mut y = x.clone();
        Radix2Fft::new(n).process(&mut y);
        let ex: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ey: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
        prop_assert!((ex - ey).abs() < 1e-9 * ex.max(1.0));
    }

    #[test]
    fn sim_total_is_exact_sum(mean in 0.0f64..1000.0, jitter_frac in 0.0f64..1.0, c in 0.001f64..50.0, frames in 1u32..500, seed in any::<u64>()) {
        let p = DeviceProfile { id: "d".into(), tier: Tier::Cloud, t_time_mean_ms: mean, t_time_jitter_ms: mean * jitter_frac, c_time_per_frame_ms: c };
        let r = simulate(&p, &TaskSpec::new(frames).unwrap(), seed).unwrap();
        prop_assert_eq!(r.total_ns, r.t_time_ns + r.c_time_ns);
        prop_assert!(r.total_ms() >= mean * (1.0 - jitter_frac) - 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // With zero biases the network is positively homogeneous: scaling the
    // input scales the logits.
    #[test]
    fn fresh_network_is_scale_equivariant(seed in any::<u64>(), alpha in 0.1f32..10.0) {
        let spec = NetworkSpec::from_stages(&[&[4], &[8]], ConvKind::Parallel, 2, [1, 8, 8], 7).unwrap();
        let model = Model::build(&spec, seed).unwrap();
        let x: Tensor<f32> = rand_tensor(&[2, 1, 8, 8], &mut rng(seed));
        let y = model.predict(&x).unwrap();
        let ys = model.predict(&x.scale(alpha)).unwrap();
        let scale = y.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
        prop_assert!(ys.max_abs_diff(&y.scale(alpha)) < 1e-4 * alpha * scale);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), g in prop::sample::select(vec![1usize, 2, 4])) {
        let spec = NetworkSpec::from_stages(&[&[4, 8], &[8]], ConvKind::Parallel, g, [1, 8, 8], 7).unwrap();
        let model = Model::build(&spec, seed).unwrap();
        prop_assert_eq!(decode_model(&encode_model(&model)).unwrap(), model);
    }
}
