//! Times are kept in integer nanoseconds so totals compose exactly; the
//! millisecond accessors divide once at the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::profile::{DeviceProfile, TaskSpec, Tier};
use crate::error::{Error, Result};

fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResult {
    pub device_id: String,
    pub t_time_ns: u64,
    pub c_time_ns: u64,
    pub total_ns: u64,
}

impl SimResult {
    pub fn t_time_ms(&self) -> f64 {
        ns_to_ms(self.t_time_ns)
    }
    pub fn c_time_ms(&self) -> f64 {
        ns_to_ms(self.c_time_ns)
    }
    pub fn total_ms(&self) -> f64 {
        ns_to_ms(self.total_ns)
    }
}

// FNV-1a, so a device's random stream depends on its id rather than its
// position in the pack.
fn stream_for(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn device_rng(profile: &DeviceProfile, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_for(&profile.id));
    rng
}

fn one_trial(profile: &DeviceProfile, task: &TaskSpec, rng: &mut ChaCha8Rng) -> SimResult {
    let mean = ms_to_ns(profile.t_time_mean_ms);
    let jitter = ms_to_ns(profile.t_time_jitter_ms);
    let t = if jitter == 0 {
        mean
    } else {
        rng.random_range(mean - jitter..=mean + jitter)
    };
    let c = ms_to_ns(profile.c_time_per_frame_ms) * task.n_frames as u64;
    SimResult {
        device_id: profile.id.clone(),
        t_time_ns: t,
        c_time_ns: c,
        total_ns: t + c,
    }
}

/// One seeded draw of the task's latency on `profile`.
pub fn simulate(profile: &DeviceProfile, task: &TaskSpec, seed: u64) -> Result<SimResult> {
    Ok(simulate_trials(profile, task, seed, 1)?.remove(0))
}

pub fn simulate_trials(
    profile: &DeviceProfile,
    task: &TaskSpec,
    seed: u64,
    trials: usize,
) -> Result<Vec<SimResult>> {
    profile.validate()?;
    task.validate()?;
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mut rng = device_rng(profile, seed);
    Ok((0..trials)
        .map(|_| one_trial(profile, task, &mut rng))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub device_id: String,
    pub tier: Tier,
    pub mean_total_ms: f64,
    pub min_total_ms: f64,
    pub max_total_ms: f64,
}

/// Devices ordered by Monte-Carlo mean total time, fastest first. Ties keep
/// the input order.
pub fn rank_placements(
    profiles: &[DeviceProfile],
    task: &TaskSpec,
    seed: u64,
    trials: usize,
) -> Result<Vec<Placement>> {
    if profiles.is_empty() {
        return Err(Error::InvalidConfig("no device profiles to rank".into()));
    }
    let mut scored = Vec::with_capacity(profiles.len());
    for p in profiles {
        let runs = simulate_trials(p, task, seed, trials)?;
        let sum: u128 = runs.iter().map(|r| r.total_ns as u128).sum();
        let min = runs.iter().map(|r| r.total_ns).min().unwrap();
        let max = runs.iter().map(|r| r.total_ns).max().unwrap();
        scored.push((
            sum,
            Placement {
                device_id: p.id.clone(),
                tier: p.tier,
                mean_total_ms: sum as f64 / trials as f64 / 1e6,
                min_total_ms: ns_to_ms(min),
                max_total_ms: ns_to_ms(max),
            },
        ));
    }
    scored.sort_by_key(|(s, _)| *s);
    Ok(scored.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub device_id: String,
    pub tier: Tier,
    /// Mean total per entry of [`FrameSweep::frames`].
    pub mean_total_ms: Vec<f64>,
    pub c_time_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSweep {
    pub frames: Vec<u32>,
    pub trials: usize,
    pub rows: Vec<SweepRow>,
}

impl FrameSweep {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16}", "device \\ frames");
        for f in &self.frames {
            out += &format!("{f:>12}");
        }
        out.push('\n');
        for r in &self.rows {
            out += &format!("{:<16}", r.device_id);
            for t in &r.mean_total_ms {
                out += &format!("{t:>12.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// Mean total per device for each frame count. Every frame count reuses the
/// same transmission draws, so each row is nondecreasing in frames.
pub fn sweep_frames(
    profiles: &[DeviceProfile],
    frames: &[u32],
    seed: u64,
    trials: usize,
) -> Result<FrameSweep> {
    if frames.is_empty() {
        return Err(Error::InvalidConfig("frame list is empty".into()));
    }
    let mut rows = Vec::with_capacity(profiles.len());
    for p in profiles {
        let mut mean_total_ms = Vec::new();
        let mut c_time_ms = Vec::new();
        for &n in frames {
            let runs = simulate_trials(p, &TaskSpec::new(n)?, seed, trials)?;
            let sum: u128 = runs.iter().map(|r| r.total_ns as u128).sum();
            mean_total_ms.push(sum as f64 / trials as f64 / 1e6);
            c_time_ms.push(runs[0].c_time_ms());
        }
        rows.push(SweepRow {
            device_id: p.id.clone(),
            tier: p.tier,
            mean_total_ms,
            c_time_ms,
        });
    }
    Ok(FrameSweep {
        frames: frames.to_vec(),
        trials,
        rows,
    })
}
