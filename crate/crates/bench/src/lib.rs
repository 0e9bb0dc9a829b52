//! Shared fixtures for the criterion benches.

use parconv_core::tensor::Element;
use parconv_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor from a fixed seed.
pub fn seeded_tensor<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::uniform(
        shape.to_vec(),
        -1.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// `(d_m, d_n, side)` of representative 3x3 layers of the 128x128 network,
/// one per resolution.
pub const LAYER_SHAPES: [(usize, usize, usize); 4] = [
    (64, 64, 128),
    (128, 128, 64),
    (256, 256, 32),
    (512, 512, 16),
];

/// One second of seeded white noise at 44.1 kHz.
pub fn noise_clip(seed: u64) -> parconv_core::audio::AudioBuffer {
    let t: Tensor<f64> = seeded_tensor(&[44100], seed);
    parconv_core::audio::AudioBuffer::new(t.into_data(), 44100)
}
