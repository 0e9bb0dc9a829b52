//! Latency model for placing an inference task on cloud or fog hardware.

mod measure;
mod profile;
mod sim;

pub use measure::{measure_local, time_runs, Measurement};
pub use profile::{
    default_profiles, load_profiles, parse_profiles, DeviceProfile, TaskSpec, Tier,
    DEFAULT_PROFILE_PACK,
};
pub use sim::{
    rank_placements, simulate, simulate_trials, sweep_frames, FrameSweep, Placement, SimResult,
    SweepRow,
};
