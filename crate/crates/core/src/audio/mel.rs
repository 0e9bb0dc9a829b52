use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    /// `mel(f) = 2595 log10(1 + f / 700)`
    Htk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelNormalization {
    /// Each triangle is scaled by `2 / (f_hi - f_lo)` so it has unit area in Hz.
    Area,
    /// Peak weight of 1.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub mel_scale: MelScale,
    pub normalization: MelNormalization,
    /// Apply `ln(1 + x)` to the pooled power. Off by default.
    #[serde(default)]
    pub log_compression: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            f_min_hz: 20.0,
            f_max_hz: 20000.0,
            mel_scale: MelScale::Htk,
            normalization: MelNormalization::Area,
            log_compression: false,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::InvalidConfig("n_mels must be positive".into()));
        }
        if !(self.f_min_hz >= 0.0) || !(self.f_max_hz > self.f_min_hz) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= f_min < f_max, got f_min={} f_max={}",
                self.f_min_hz, self.f_max_hz
            )));
        }
        let nyquist = sample_rate_hz as f64 / 2.0;
        if self.f_max_hz > nyquist {
            return Err(Error::InvalidConfig(format!(
                "f_max {} Hz exceeds the Nyquist frequency {} Hz of {} Hz audio",
                self.f_max_hz, nyquist, sample_rate_hz
            )));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over the non-negative FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `(n_mels, n_fft / 2 + 1)`
    pub weights: Array2<f64>,
    /// Band edges in Hz, `n_mels + 2` points equally spaced in Mel.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    /// Peak (center) frequency of every band.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }
}

pub fn mel_filterbank(sample_rate_hz: u32, n_fft: usize, cfg: &MelConfig) -> Result<MelFilterbank> {
    cfg.validate(sample_rate_hz)?;
    if n_fft < 2 {
        return Err(Error::InvalidConfig(format!(
            "n_fft must be at least 2, got {n_fft}"
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let sr = sample_rate_hz as f64;

    let mel_lo = hz_to_mel(cfg.f_min_hz);
    let mel_hi = hz_to_mel(cfg.f_max_hz);
    let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
    let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();

    let mut weights = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for band in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges_hz[band], edges_hz[band + 1], edges_hz[band + 2]);
        let scale = match cfg.normalization {
            MelNormalization::Area => 2.0 / (hi - lo),
            MelNormalization::None => 1.0,
        };
        for bin in 0..n_bins {
            let f = bin as f64 * sr / n_fft as f64;
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            let w = rising.min(falling).max(0.0);
            weights[[band, bin]] = w * scale;
        }
    }
    Ok(MelFilterbank { weights, edges_hz })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let fb = mel_filterbank(44100, 2048, &MelConfig::default()).unwrap();
        assert_eq!(fb.weights.dim(), (128, 1025));
        assert_eq!(fb.center_frequencies().len(), 128);
    }

    #[test]
    fn rejects_f_max_above_nyquist() {
        let err = mel_filterbank(22050, 2048, &MelConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn rows_are_unimodal_and_nonnegative() {
        let fb = mel_filterbank(44100, 2048, &MelConfig::default()).unwrap();
        for row in fb.weights.rows() {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0));
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            for i in 1..=peak {
                assert!(row[i] >= row[i - 1]);
            }
            for i in peak + 1..row.len() {
                assert!(row[i] <= row[i - 1]);
            }
        }
    }

    #[test]
    fn centers_equally_spaced_in_mel() {
        let fb = mel_filterbank(44100, 2048, &MelConfig::default()).unwrap();
        let mels: Vec<f64> = fb
            .center_frequencies()
            .iter()
            .map(|&f| hz_to_mel(f))
            .collect();
        let d0 = mels[1] - mels[0];
        for w in mels.windows(2) {
            assert!(w[1] > w[0]);
            assert!(((w[1] - w[0]) - d0).abs() / d0 < 1e-9);
        }
    }

    #[test]
    fn no_spectral_holes_inside_range() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(44100, 2048, &cfg).unwrap();
        for bin in 0..1025 {
            let f = bin as f64 * 44100.0 / 2048.0;
            if f > cfg.f_min_hz && f < cfg.f_max_hz {
                assert!(
                    fb.weights.column(bin).iter().any(|&w| w > 0.0),
                    "hole at {f} Hz"
                );
            }
        }
    }

    #[test]
    fn area_normalized_rows_have_unit_area_on_fine_grid() {
        // With a fine FFT grid the Riemann sum approaches the continuous area.
        let cfg = MelConfig {
            n_mels: 40,
            ..Default::default()
        };
        let n_fft = 1 << 16;
        let fb = mel_filterbank(44100, n_fft, &cfg).unwrap();
        let df = 44100.0 / n_fft as f64;
        for row in fb.weights.rows() {
            let area: f64 = row.sum() * df;
            assert!((area - 1.0).abs() < 1e-2, "area {area}");
        }
    }
}
