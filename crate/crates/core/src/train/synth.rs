//! Seeded synthetic drum kit used as a desk-scale stand-in for a recorded
//! drum-sample collection. Each class has its own spectral and temporal
//! signature; instances vary pitch, decay, onset time and band position.
//! A dataset clip is a short one-instrument pattern: a few strikes of the
//! same drum at varying velocity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use super::dataset::{DatasetManifest, ManifestEntry, Split};
use super::DrumClass;
use crate::audio::{wav, AudioBuffer, Radix2Fft};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Clips per class; even-numbered instances go to train, odd to val.
    pub n_per_class: usize,
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub duration_secs: f64,
    /// Inclusive range of strikes per dataset clip.
    pub strikes: (usize, usize),
}

impl SynthConfig {
    /// 1.5 s clips fill the 128-frame network input at hop 512.
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            seed,
            sample_rate_hz: 44100,
            duration_secs: 1.5,
            strikes: (3, 6),
        }
    }

    fn len(&self) -> usize {
        (self.duration_secs * self.sample_rate_hz as f64).round() as usize
    }
}

/// RBJ band-pass biquad (0 dB peak gain).
struct BandPass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl BandPass {
    fn new(center_hz: f64, q: f64, sr: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / sr;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn band_noise(len: usize, center: f64, q: f64, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // two cascaded sections for a steeper skirt
    let mut f1 = BandPass::new(center, q, sr);
    let mut f2 = BandPass::new(center, q, sr);
    (0..len)
        .map(|_| f2.process(f1.process(rng.random_range(-1.0..1.0))))
        .collect()
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

fn finish(mut samples: Vec<f64>, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let peak = rng.random_range(0.5..0.9);
    normalize_peak(&mut samples, peak);
    for s in samples.iter_mut() {
        *s += rng.random_range(-1e-4..1e-4);
    }
    AudioBuffer::new(samples, cfg.sample_rate_hz)
}

/// One hit of `class` starting at a random onset.
pub fn synthesize_hit(class: DrumClass, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let len = cfg.len();
    let onset = ((rng.random_range(0.0..0.15) * cfg.sample_rate_hz as f64) as usize).min(len);
    let body = voice(class, len - onset, cfg.sample_rate_hz as f64, rng);
    let mut samples = vec![0.0; len];
    samples[onset..].copy_from_slice(&body);
    finish(samples, cfg, rng)
}

/// A pattern of `cfg.strikes` hits of one drum: one strike per equal slot,
/// placed early in the slot, each with its own velocity.
pub fn synthesize_clip(class: DrumClass, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let len = cfg.len();
    let (lo, hi) = cfg.strikes;
    let k = rng.random_range(lo.max(1)..=hi.max(lo.max(1)));
    let body = voice(class, len, cfg.sample_rate_hz as f64, rng);
    let slot = len / k;
    let mut samples = vec![0.0; len];
    for j in 0..k {
        let start = j * slot + rng.random_range(0..slot / 3 + 1);
        let gain = rng.random_range(0.6..1.0);
        for (s, b) in samples[start.min(len)..].iter_mut().zip(&body) {
            *s += gain * b;
        }
    }
    finish(samples, cfg, rng)
}

fn voice(class: DrumClass, body_len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = |i: usize| i as f64 / sr;
    let env = |i: usize, tau: f64| (-t(i) / tau).exp();

    match class {
        DrumClass::Kick => {
            let f_start = rng.random_range(140.0..180.0);
            let f_end = rng.random_range(45.0..65.0);
            let tau = rng.random_range(0.12..0.22);
            let click = band_noise(body_len, 3000.0, 0.8, sr, rng);
            let mut phase = 0.0;
            (0..body_len)
                .map(|i| {
                    let f = f_end + (f_start - f_end) * (-t(i) / 0.03).exp();
                    phase += 2.0 * PI * f / sr;
                    phase.sin() * env(i, tau) + 0.15 * click[i] * env(i, 0.003)
                })
                .collect()
        }
        DrumClass::Tom => {
            let f0 = rng.random_range(200.0..320.0);
            let tau = rng.random_range(0.25..0.4);
            let noise = band_noise(body_len, 1.5 * f0, 2.0, sr, rng);
            let mut phase = 0.0;
            (0..body_len)
                .map(|i| {
                    let f = f0 * (1.0 + 0.1 * (-t(i) / 0.05).exp());
                    phase += 2.0 * PI * f / sr;
                    (phase.sin() + 0.3 * (1.5 * phase).sin()) * env(i, tau)
                        + 0.1 * noise[i] * env(i, 0.05)
                })
                .collect()
        }
        DrumClass::Snare => {
            let center = rng.random_range(2500.0..3500.0);
            let tau = rng.random_range(0.1..0.18);
            let f_tone = rng.random_range(330.0..400.0);
            let mut noise = band_noise(body_len, center, 0.7, sr, rng);
            normalize_peak(&mut noise, 1.0);
            (0..body_len)
                .map(|i| {
                    noise[i] * env(i, tau) + 0.5 * (2.0 * PI * f_tone * t(i)).sin() * env(i, 0.05)
                })
                .collect()
        }
        DrumClass::ClosedHat | DrumClass::OpenHat => {
            let center = rng.random_range(9000.0..11000.0);
            let tau = if class == DrumClass::ClosedHat {
                rng.random_range(0.02..0.045)
            } else {
                rng.random_range(0.3..0.5)
            };
            let noise = band_noise(body_len, center, 1.5, sr, rng);
            (0..body_len).map(|i| noise[i] * env(i, tau)).collect()
        }
        DrumClass::Ride => {
            let tau = rng.random_range(0.8..1.2);
            let base = rng.random_range(2500.0..3200.0);
            let ratios = [1.0, 1.19, 1.37, 1.53, 1.71, 1.92];
            let phases: Vec<f64> = ratios
                .iter()
                .map(|_| rng.random_range(0.0..2.0 * PI))
                .collect();
            let noise = band_noise(body_len, 5000.0, 1.0, sr, rng);
            (0..body_len)
                .map(|i| {
                    let tone: f64 = ratios
                        .iter()
                        .zip(&phases)
                        .map(|(r, p)| (2.0 * PI * base * r * t(i) + p).sin())
                        .sum::<f64>()
                        / ratios.len() as f64;
                    (tone + 0.2 * noise[i]) * env(i, tau)
                })
                .collect()
        }
        DrumClass::Crash => {
            let center = rng.random_range(6000.0..7000.0);
            let tau = rng.random_range(0.7..1.0);
            let noise = band_noise(body_len, center, 0.5, sr, rng);
            (0..body_len)
                .map(|i| noise[i] * (env(i, tau) + env(i, 0.02)))
                .collect()
        }
    }
}

/// Writes `n_per_class` clips per class under `out_dir/{train,val}/` plus
/// `out_dir/manifest.jsonl`. Output is a pure function of the config.
pub fn synthesize_toy_dataset(
    cfg: &SynthConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if cfg.n_per_class == 0 {
        return Err(Error::InvalidConfig(
            "n_per_class must be at least 1".into(),
        ));
    }
    if cfg.strikes.0 == 0 || cfg.strikes.0 > cfg.strikes.1 {
        return Err(Error::InvalidConfig(format!(
            "strikes range {:?} must be non-empty and start at 1 or more",
            cfg.strikes
        )));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["train", "val"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d)
            .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut entries = Vec::new();
    for class in DrumClass::ALL {
        for i in 0..cfg.n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((class.index() * 1_000_000 + i) as u64);
            let audio = synthesize_clip(class, cfg, &mut rng);
            let split = if i % 2 == 0 { Split::Train } else { Split::Val };
            let sub = if split == Split::Train {
                "train"
            } else {
                "val"
            };
            let path: PathBuf = out_dir
                .join(sub)
                .join(format!("{}_{i:03}.wav", class.name()));
            wav::write_wav(&path, &audio, wav::SampleFormat::Pcm16)?;
            entries.push(ManifestEntry {
                wav_path: path,
                label: class,
                split,
            });
        }
    }
    let manifest = DatasetManifest { entries };
    let manifest_path = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest_path, manifest.to_jsonl(out_dir))
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(manifest)
}

/// Magnitude-weighted mean frequency of the whole clip.
pub fn spectral_centroid(audio: &AudioBuffer) -> f64 {
    let n = audio.samples.len().next_power_of_two();
    let mut buf: Vec<num_complex::Complex64> = audio
        .samples
        .iter()
        .map(|&s| num_complex::Complex64::new(s, 0.0))
        .chain(std::iter::repeat(num_complex::Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    Radix2Fft::new(n).process(&mut buf);
    let sr = audio.sample_rate_hz as f64;
    let (num, den) = buf[..n / 2 + 1]
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(a, b), (k, c)| {
            let m = c.norm();
            (a + m * k as f64 * sr / n as f64, b + m)
        });
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}
