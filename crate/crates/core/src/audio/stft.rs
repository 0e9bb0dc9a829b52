use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{AudioBuffer, Radix2Fft};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop_length: usize,
    pub window_kind: WindowKind,
    pub centered: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_size: 2048,
            hop_length: 512,
            window_kind: WindowKind::Hann,
            centered: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || !self.window_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "window size must be a power of two, got {}",
                self.window_size
            )));
        }
        if self.hop_length == 0 {
            return Err(Error::InvalidConfig("hop length must be positive".into()));
        }
        if self.hop_length > self.window_size {
            return Err(Error::InvalidConfig(format!(
                "hop length {} exceeds window size {}",
                self.hop_length, self.window_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.centered {
            1 + len / self.hop_length
        } else if len < self.window_size {
            0
        } else {
            1 + (len - self.window_size) / self.hop_length
        }
    }
}

/// Periodic Hann window, `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror index into `0..len` without repeating the edge sample.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Short-time Fourier transform. Output is `(window_size / 2 + 1, n_frames)`.
pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<Array2<Complex64>> {
    audio.validate()?;
    cfg.validate()?;
    let n = cfg.window_size;
    let len = audio.samples.len();
    let n_frames = cfg.n_frames(len);
    if n_frames == 0 {
        return Err(Error::InvalidConfig(format!(
            "non-centered STFT needs at least {n} samples, got {len}"
        )));
    }
    let pad = if cfg.centered { (n / 2) as isize } else { 0 };
    let window = match cfg.window_kind {
        WindowKind::Hann => hann_window(n),
    };
    let fft = Radix2Fft::new(n);

    let mut out = Array2::<Complex64>::zeros((cfg.n_bins(), n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for frame in 0..n_frames {
        let origin = (frame * cfg.hop_length) as isize - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(origin + k as isize, len);
            *slot = Complex64::new(audio.samples[idx] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (bin, value) in buf[..cfg.n_bins()].iter().enumerate() {
            out[[bin, frame]] = *value;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_centered() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_frames(5120), 11);
        assert_eq!(cfg.n_frames(44100), 87);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn zeros_give_zero_stft() {
        let audio = AudioBuffer::new(vec![0.0; 3000], 44100);
        let x = stft(&audio, &StftConfig::default()).unwrap();
        assert_eq!(x.dim(), (1025, 1 + 3000 / 512));
        assert!(x.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn errors() {
        let empty = AudioBuffer::new(vec![], 44100);
        assert!(matches!(
            stft(&empty, &StftConfig::default()),
            Err(Error::EmptyAudio)
        ));
        let audio = AudioBuffer::new(vec![0.1; 4096], 44100);
        let bad = StftConfig {
            hop_length: 4096,
            window_size: 2048,
            ..Default::default()
        };
        assert!(matches!(stft(&audio, &bad), Err(Error::InvalidConfig(_))));
        let not_pow2 = StftConfig {
            window_size: 1000,
            hop_length: 100,
            ..Default::default()
        };
        assert!(matches!(
            stft(&audio, &not_pow2),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn very_short_signal_still_centered() {
        let audio = AudioBuffer::new(vec![0.3], 8000);
        let x = stft(
            &audio,
            &StftConfig {
                window_size: 8,
                hop_length: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(x.dim(), (5, 1));
    }
}
