use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// The seven drum classes, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrumClass {
    Tom,
    Kick,
    Snare,
    ClosedHat,
    Ride,
    Crash,
    OpenHat,
}

impl DrumClass {
    pub const ALL: [DrumClass; 7] = [
        DrumClass::Tom,
        DrumClass::Kick,
        DrumClass::Snare,
        DrumClass::ClosedHat,
        DrumClass::Ride,
        DrumClass::Crash,
        DrumClass::OpenHat,
    ];

    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DrumClass::Tom => "tom",
            DrumClass::Kick => "kick",
            DrumClass::Snare => "snare",
            DrumClass::ClosedHat => "closed_hat",
            DrumClass::Ride => "ride",
            DrumClass::Crash => "crash",
            DrumClass::OpenHat => "open_hat",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for DrumClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DrumClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::Label(format!(
                    "unknown label {s:?}; valid labels are {}",
                    Self::valid_names()
                ))
            })
    }
}
