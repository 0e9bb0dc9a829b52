//! Audio front-end: WAV I/O, STFT, Mel filterbank and the Mel power
//! spectrogram fed to the network.

mod fft;
mod mel;
mod spectrogram;
mod stft;
pub mod wav;

pub use fft::Radix2Fft;
pub use mel::{
    hz_to_mel, mel_filterbank, mel_to_hz, MelConfig, MelFilterbank, MelNormalization, MelScale,
};
pub use spectrogram::{
    fit_frames, load_spectrogram, mel_power_spectrogram, save_spectrogram, Spectrogram,
    SpectrogramSidecar,
};
pub use stft::{hann_window, stft, StftConfig, WindowKind};

use crate::error::{Error, Result};

/// Mono PCM audio with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig(
                "audio contains non-finite samples".into(),
            ));
        }
        Ok(())
    }
}
