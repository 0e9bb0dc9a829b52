//! Iterative radix-2 FFT.

use num_complex::Complex64;
use std::f64::consts::PI;

/// Precomputed twiddles and bit-reversal table for one power-of-two size.
#[derive(Debug, Clone)]
pub struct Radix2Fft {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Radix2Fft {
    /// Panics unless `n` is a power of two.
    pub fn new(n: usize) -> Self {
        assert!(
            n.is_power_of_two(),
            "FFT size must be a power of two, got {n}"
        );
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Self {
            n,
            twiddles,
            bitrev,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform in place: `X[k] = sum_n x[n] exp(-2 pi i k n / N)`.
    pub fn process(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n);
        for i in 0..self.n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= self.n {
            let half = len / 2;
            let stride = self.n / len;
            for start in (0..self.n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}
