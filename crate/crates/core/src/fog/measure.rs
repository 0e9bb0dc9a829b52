use serde::{Deserialize, Serialize};
use std::time::Instant;

use super::profile::{DeviceProfile, Tier};
use crate::error::{Error, Result};
use crate::net::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub repeats: usize,
    pub mean_ms: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std_ms: f64,
    pub runs_ms: Vec<f64>,
}

impl Measurement {
    pub fn from_runs(runs_ms: Vec<f64>) -> Self {
        let n = runs_ms.len() as f64;
        let mean_ms = runs_ms.iter().sum::<f64>() / n;
        let var = if runs_ms.len() > 1 {
            runs_ms.iter().map(|r| (r - mean_ms).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            repeats: runs_ms.len(),
            mean_ms,
            std_ms: var.sqrt(),
            runs_ms,
        }
    }

    /// A fog profile whose per-frame compute time is the measured mean
    /// divided by the number of frames in the measured input.
    pub fn to_profile(&self, id: impl Into<String>, n_frames: u32) -> Result<DeviceProfile> {
        if n_frames == 0 {
            return Err(Error::InvalidConfig("n_frames must be at least 1".into()));
        }
        let p = DeviceProfile {
            id: id.into(),
            tier: Tier::Fog,
            t_time_mean_ms: 0.0,
            t_time_jitter_ms: 0.0,
            c_time_per_frame_ms: self.mean_ms / n_frames as f64,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Runs `f` once untimed, then `repeats` timed times.
pub fn time_runs(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Measurement> {
    if repeats < 3 {
        return Err(Error::InvalidConfig(format!(
            "repeats must be at least 3, got {repeats}"
        )));
    }
    f()?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        runs.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Measurement::from_runs(runs))
}

/// Wall-clock statistics of `model.predict` on one input.
pub fn measure_local(model: &Model, input: &Tensor, repeats: usize) -> Result<Measurement> {
    time_runs(repeats, || model.predict(input).map(|_| ()))
}
