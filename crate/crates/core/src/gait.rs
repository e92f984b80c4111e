use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const N_GAITS: usize = 3;

/// Gait command classes. Walking and running share one class; they differ
/// only in the commanded speed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gait {
    WalkRun,
    HighKnees,
    Squat,
}

impl Gait {
    pub const ALL: [Gait; N_GAITS] = [Gait::WalkRun, Gait::HighKnees, Gait::Squat];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Gait> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gait::WalkRun => "walk_run",
            Gait::HighKnees => "high_knees",
            Gait::Squat => "squat",
        }
    }

    pub fn one_hot(self) -> Vec<f64> {
        crate::env::one_hot(self.index(), N_GAITS)
    }
}

impl fmt::Display for Gait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "walk_run" | "walk" | "run" => Ok(Gait::WalkRun),
            "high_knees" => Ok(Gait::HighKnees),
            "squat" => Ok(Gait::Squat),
            other => Err(Error::InvalidArgument(format!("unknown gait {other:?}"))),
        }
    }
}
