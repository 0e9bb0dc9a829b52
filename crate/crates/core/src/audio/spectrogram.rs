use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::{mel_filterbank, stft, AudioBuffer, MelConfig, StftConfig};
use crate::error::{Error, Result};

/// Mel-pooled power spectrogram, `(n_mels, n_frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<f64>,
    pub sample_rate_hz: u32,
    pub stft: StftConfig,
    pub mel: MelConfig,
}

impl Spectrogram {
    pub fn n_mels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    /// Row-major `f32` copy scaled so the largest entry is 1. An all-zero
    /// spectrogram is returned unchanged.
    pub fn to_normalized_f32(&self) -> Vec<f32> {
        let max = self.data.iter().cloned().fold(0.0f64, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
        self.data.iter().map(|&v| (v * scale) as f32).collect()
    }

    pub fn sidecar(&self) -> SpectrogramSidecar {
        SpectrogramSidecar {
            shape: [self.n_mels(), self.n_frames()],
            sample_rate: self.sample_rate_hz,
            dtype: "f32le".into(),
            layout: "row-major (n_mels, n_frames)".into(),
            stft: self.stft,
            mel: self.mel,
        }
    }
}

/// JSON written next to a spectrogram binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramSidecar {
    pub shape: [usize; 2],
    pub sample_rate: u32,
    pub dtype: String,
    pub layout: String,
    pub stft: StftConfig,
    pub mel: MelConfig,
}

/// `filterbank . |STFT|^2`, optionally log-compressed.
pub fn mel_power_spectrogram(
    audio: &AudioBuffer,
    stft_cfg: &StftConfig,
    mel_cfg: &MelConfig,
) -> Result<Spectrogram> {
    mel_cfg.validate(audio.sample_rate_hz)?;
    let spectrum = stft(audio, stft_cfg)?;
    let fb = mel_filterbank(audio.sample_rate_hz, stft_cfg.window_size, mel_cfg)?;
    let power = spectrum.mapv(|c| c.norm_sqr());
    let mut data = fb.weights.dot(&power);
    if mel_cfg.log_compression {
        data.mapv_inplace(f64::ln_1p);
    }
    Ok(Spectrogram {
        data,
        sample_rate_hz: audio.sample_rate_hz,
        stft: *stft_cfg,
        mel: *mel_cfg,
    })
}

/// Center-crops or symmetrically zero-pads along time to `target_frames`.
/// When padding an odd number of columns the extra one goes on the right.
pub fn fit_frames(spec: &Spectrogram, target_frames: usize) -> Spectrogram {
    assert!(target_frames > 0, "target_frames must be positive");
    let n = spec.n_frames();
    let data = if n >= target_frames {
        let start = (n - target_frames) / 2;
        spec.data
            .slice(s![.., start..start + target_frames])
            .to_owned()
    } else {
        let left = (target_frames - n) / 2;
        let mut out = Array2::zeros((spec.n_mels(), target_frames));
        out.slice_mut(s![.., left..left + n]).assign(&spec.data);
        out
    };
    Spectrogram {
        data,
        ..spec.clone()
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `path` (little-endian f32, row-major) and `path.json` (sidecar).
/// Returns the sidecar path.
pub fn save_spectrogram(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(spec.data.len() * 4);
    for &v in spec.data.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&spec.sidecar())?;
    std::fs::write(&side, json).map_err(|e| Error::io(format!("writing {}", side.display()), e))?;
    Ok(side)
}

pub fn load_spectrogram(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::io(format!("reading {}", side.display()), e))?;
    let meta: SpectrogramSidecar = serde_json::from_str(&text)?;
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let [rows, cols] = meta.shape;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "expected {} bytes for shape {:?}, found {}",
            rows * cols * 4,
            meta.shape,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let data =
        Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Spectrogram {
        data,
        sample_rate_hz: meta.sample_rate,
        stft: meta.stft,
        mel: meta.mel,
    })
}
