//! Per-step episode traces written as JSONL.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BipedState, Termination, N_JOINTS};
use crate::error::{Error, Result};
use crate::rewards::{RewardBreakdown, Term};

pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub format_version: u32,
    pub step: u64,
    pub time: f64,
    pub base: [f64; 2],
    pub base_vel: [f64; 2],
    /// Forward progress from the spawn point.
    pub distance: f64,
    pub pitch: f64,
    pub base_height: f64,
    pub knee_height: [f64; 2],
    pub foot_contact: [bool; 2],
    pub joint_pos: [f64; N_JOINTS],
    pub action: [f64; N_JOINTS],
    pub rewards: Vec<(String, f64)>,
    pub reward_total: f64,
    pub termination: Termination,
}

impl TraceRecord {
    pub fn new(
        state: &BipedState,
        distance: f64,
        action: &[f64; N_JOINTS],
        rewards: &RewardBreakdown,
        termination: Termination,
    ) -> Self {
        Self {
            format_version: TRACE_VERSION,
            step: state.step_count,
            time: state.time,
            base: state.base,
            base_vel: state.base_vel,
            distance,
            pitch: state.pitch,
            base_height: state.base_height,
            knee_height: state.knee_height,
            foot_contact: state.foot_contact,
            joint_pos: state.joint_pos,
            action: *action,
            rewards: Term::ALL
                .iter()
                .map(|t| (t.name().to_string(), rewards.weighted(*t)))
                .collect(),
            reward_total: rewards.total,
            termination,
        }
    }
}

pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            let record: TraceRecord = serde_json::from_str(&line)?;
            if record.format_version != TRACE_VERSION {
                return Err(Error::FormatVersion {
                    found: record.format_version,
                    expected: TRACE_VERSION,
                });
            }
            records.push(record);
        }
    }
    Ok(records)
}
