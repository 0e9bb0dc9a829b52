use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Bundled pack of the four reference devices.
pub const DEFAULT_PROFILE_PACK: &str = include_str!("../../profiles/fog_devices.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Cloud,
    Fog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    pub tier: Tier,
    pub t_time_mean_ms: f64,
    /// Half-width of the uniform transmission-time spread.
    pub t_time_jitter_ms: f64,
    pub c_time_per_frame_ms: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("profile {:?}: {m}", self.id)));
        if self.id.is_empty() {
            return bad("id must not be empty".into());
        }
        for (name, v) in [
            ("t_time_mean_ms", self.t_time_mean_ms),
            ("t_time_jitter_ms", self.t_time_jitter_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.c_time_per_frame_ms.is_finite() && self.c_time_per_frame_ms > 0.0) {
            return bad(format!(
                "c_time_per_frame_ms must be > 0, got {}",
                self.c_time_per_frame_ms
            ));
        }
        if self.t_time_jitter_ms > self.t_time_mean_ms {
            return bad("t_time_jitter_ms exceeds t_time_mean_ms".into());
        }
        if self.tier == Tier::Fog && (self.t_time_mean_ms != 0.0 || self.t_time_jitter_ms != 0.0) {
            return bad("fog devices have no transmission time".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_frames: u32,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { n_frames: 10 }
    }
}

impl TaskSpec {
    pub fn new(n_frames: u32) -> Result<Self> {
        let t = Self { n_frames };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::InvalidConfig("n_frames must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn parse_profiles(text: &str) -> Result<Vec<DeviceProfile>> {
    let profiles: Vec<DeviceProfile> = serde_json::from_str(text)?;
    for p in &profiles {
        p.validate()?;
    }
    let mut ids: Vec<&str> = profiles.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(format!(
            "duplicate profile id {:?}",
            w[0]
        )));
    }
    Ok(profiles)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<DeviceProfile>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_profiles(&text)
}

pub fn default_profiles() -> Vec<DeviceProfile> {
    parse_profiles(DEFAULT_PROFILE_PACK).expect("bundled profile pack is valid")
}
