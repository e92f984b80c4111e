//! Procedural 1-D heightfields for training curricula and benchmark tracks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEIGHTFIELD_VERSION: u32 = 1;

/// Depth below the rim reported by sensors over void cells.
pub const VOID_DEPTH: f64 = 1.0;

pub const GAP_RANGE: (f64, f64) = (0.05, 0.45);
pub const STEP_RANGE: (f64, f64) = (0.05, 0.30);
pub const STAIR_RANGE: (f64, f64) = (0.05, 0.15);
pub const ROUGH_RANGE: (f64, f64) = (0.01, 0.05);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Flat,
    Rough,
    Gap,
    Step,
    Stair,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 5] = [
        TerrainKind::Flat,
        TerrainKind::Rough,
        TerrainKind::Gap,
        TerrainKind::Step,
        TerrainKind::Stair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerrainKind::Flat => "flat",
            TerrainKind::Rough => "rough",
            TerrainKind::Gap => "gap",
            TerrainKind::Step => "step",
            TerrainKind::Stair => "stair",
        }
    }

    /// Obstacle parameter range swept by the curriculum difficulty.
    pub fn curriculum_range(self) -> (f64, f64) {
        match self {
            TerrainKind::Flat => (0.0, 0.0),
            TerrainKind::Rough => ROUGH_RANGE,
            TerrainKind::Gap => GAP_RANGE,
            TerrainKind::Step => STEP_RANGE,
            TerrainKind::Stair => STAIR_RANGE,
        }
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TerrainKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownTerrain(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    Easy,
    Hard,
}

impl FromStr for BenchmarkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(BenchmarkMode::Easy),
            "hard" => Ok(BenchmarkMode::Hard),
            other => Err(Error::InvalidArgument(format!("unknown benchmark mode `{other}`"))),
        }
    }
}

impl fmt::Display for BenchmarkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchmarkMode::Easy => "easy",
            BenchmarkMode::Hard => "hard",
        })
    }
}

/// Obstacle parameter range for a benchmark cell.
pub fn benchmark_range(obstacle: TerrainKind, mode: BenchmarkMode) -> Result<(f64, f64)> {
    use BenchmarkMode::*;
    use TerrainKind::*;
    match (obstacle, mode) {
        (Gap, Easy) => Ok((0.25, 0.40)),
        (Gap, Hard) => Ok((0.40, 0.60)),
        (Step, Easy) => Ok((0.15, 0.25)),
        (Step, Hard) => Ok((0.25, 0.35)),
        (Stair, Easy) => Ok((0.05, 0.15)),
        (Stair, Hard) => Ok((0.15, 0.25)),
        (Flat, _) => Ok((0.0, 0.0)),
        (Rough, _) => Err(Error::InvalidArgument("rough is not a benchmark obstacle".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub kind: TerrainKind,
    /// Gap width, step height, stair riser or roughness amplitude, in meters.
    pub value: f64,
    /// Covered cells, `start..end`.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heightfield {
    pub format_version: u32,
    pub cell_size: f64,
    /// Surface height per cell. Void cells carry the height of the surrounding rim.
    pub heights: Vec<f64>,
    pub void: Vec<bool>,
    pub obstacles: Vec<Obstacle>,
    /// Goal distance along the track; cells continue past it as run-out.
    pub track_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerrainConfig {
    pub cell_size: f64,
    /// Length of the curriculum tracks.
    pub track_length: f64,
    /// Flat run-out appended after the goal.
    pub runout: f64,
    /// Obstacle-free zone at the start, containing the spawn point.
    pub start_zone: f64,
    pub spawn_x: f64,
    /// Flat ground between consecutive obstacles, `[min, max]`.
    pub spacing: (f64, f64),
    pub step_platform: (f64, f64),
    pub stair_tread: f64,
    pub stair_count: usize,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.01,
            track_length: 8.0,
            runout: 2.0,
            start_zone: 1.5,
            spawn_x: 0.5,
            spacing: (1.2, 1.8),
            step_platform: (1.0, 1.4),
            stair_tread: 0.35,
            stair_count: 3,
        }
    }
}

impl Heightfield {
    pub fn flat(cell_size: f64, track_length: f64, runout: f64) -> Self {
        let n = ((track_length + runout) / cell_size).round() as usize;
        Self {
            format_version: HEIGHTFIELD_VERSION,
            cell_size,
            heights: vec![0.0; n],
            void: vec![false; n],
            obstacles: Vec::new(),
            track_length,
        }
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn extent(&self) -> f64 {
        self.heights.len() as f64 * self.cell_size
    }

    #[inline]
    pub fn cell(&self, x: f64) -> usize {
        if x <= 0.0 {
            return 0;
        }
        ((x / self.cell_size) as usize).min(self.heights.len() - 1)
    }

    pub fn cell_start(&self, i: usize) -> f64 {
        i as f64 * self.cell_size
    }

    /// Surface (or rim, over void) height at `x`; clamps outside the field.
    #[inline]
    pub fn height_at(&self, x: f64) -> f64 {
        self.heights[self.cell(x)]
    }

    #[inline]
    pub fn is_void(&self, x: f64) -> bool {
        self.void[self.cell(x)]
    }

    /// Height a range sensor would observe: void cells read `VOID_DEPTH` below the rim.
    #[inline]
    pub fn sensed_height(&self, x: f64) -> f64 {
        let i = self.cell(x);
        if self.void[i] {
            self.heights[i] - VOID_DEPTH
        } else {
            self.heights[i]
        }
    }

    fn fill(&mut self, start: f64, end: f64, height: f64) -> (usize, usize) {
        let a = ((start / self.cell_size).round() as usize).min(self.len());
        let b = ((end / self.cell_size).round() as usize).min(self.len());
        for h in &mut self.heights[a..b] {
            *h = height;
        }
        (a, b)
    }

    fn carve_void(&mut self, start: f64, width: f64) -> (usize, usize) {
        let a = ((start / self.cell_size).round() as usize).min(self.len());
        let b = (a + (width / self.cell_size).round() as usize).min(self.len());
        for v in &mut self.void[a..b] {
            *v = true;
        }
        (a, b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let hf: Heightfield = serde_json::from_str(text)?;
        if hf.format_version != HEIGHTFIELD_VERSION {
            return Err(Error::FormatVersion {
                found: hf.format_version,
                expected: HEIGHTFIELD_VERSION,
            });
        }
        if hf.heights.len() != hf.void.len() || hf.heights.is_empty() {
            return Err(Error::InvalidArgument("heightfield arrays disagree".into()));
        }
        Ok(hf)
    }
}

/// Layout driver shared by curriculum terrains and benchmark tracks: drops
/// obstacles along the track, each with its own parameter from `param`.
fn lay_out<F: FnMut(&mut ChaCha8Rng) -> f64>(
    kind: TerrainKind,
    track_length: f64,
    cfg: &TerrainConfig,
    rng: &mut ChaCha8Rng,
    mut param: F,
) -> Heightfield {
    let mut hf = Heightfield::flat(cfg.cell_size, track_length, cfg.runout);
    match kind {
        TerrainKind::Flat => {}
        TerrainKind::Rough => {
            let amp = param(rng);
            let (a, b) = (
                (cfg.start_zone / cfg.cell_size).round() as usize,
                (track_length / cfg.cell_size).round() as usize,
            );
            // Piecewise-constant bumps 0.1 m wide.
            let block = ((0.1 / cfg.cell_size).round() as usize).max(1);
            let mut i = a;
            while i < b {
                let h = rng.random_range(0.0..amp);
                let end = (i + block).min(b);
                for v in &mut hf.heights[i..end] {
                    *v = h;
                }
                i = end;
            }
            hf.obstacles.push(Obstacle { kind, value: amp, start: a, end: b });
        }
        TerrainKind::Gap => {
            let mut x = cfg.start_zone;
            loop {
                let w = param(rng);
                if x + w > track_length - 0.5 {
                    break;
                }
                let (a, b) = hf.carve_void(x, w);
                hf.obstacles.push(Obstacle { kind, value: w, start: a, end: b });
                x += w + rng.random_range(cfg.spacing.0..cfg.spacing.1);
            }
        }
        TerrainKind::Step => {
            let mut x = cfg.start_zone;
            loop {
                let h = param(rng);
                let len = rng.random_range(cfg.step_platform.0..cfg.step_platform.1);
                if x + len > track_length - 0.5 {
                    break;
                }
                let (a, b) = hf.fill(x, x + len, h);
                hf.obstacles.push(Obstacle { kind, value: h, start: a, end: b });
                x += len + rng.random_range(cfg.spacing.0..cfg.spacing.1);
            }
        }
        TerrainKind::Stair => {
            let mut x = cfg.start_zone;
            let n = cfg.stair_count;
            'flights: loop {
                let h = param(rng);
                let landing = rng.random_range(cfg.spacing.0..cfg.spacing.1);
                let flight = 2.0 * n as f64 * cfg.stair_tread + landing;
                if x + flight > track_length - 0.5 {
                    break 'flights;
                }
                let first = (x / cfg.cell_size).round() as usize;
                for k in 0..n {
                    let x0 = x + k as f64 * cfg.stair_tread;
                    hf.fill(x0, x0 + cfg.stair_tread, (k + 1) as f64 * h);
                }
                let top = x + n as f64 * cfg.stair_tread;
                hf.fill(top, top + landing, n as f64 * h);
                let down = top + landing;
                for k in 0..n {
                    let x0 = down + k as f64 * cfg.stair_tread;
                    hf.fill(x0, x0 + cfg.stair_tread, (n - k - 1) as f64 * h);
                }
                let endx = down + n as f64 * cfg.stair_tread;
                let last = (endx / cfg.cell_size).round() as usize;
                hf.obstacles.push(Obstacle { kind, value: h, start: first, end: last });
                x = endx + rng.random_range(cfg.spacing.0..cfg.spacing.1);
            }
        }
    }
    hf
}

/// Curriculum terrain whose obstacle parameter interpolates linearly over the
/// kind's range: gap 0.05..0.45 m, step 0.05..0.30 m, stair 0.05..0.15 m.
pub fn generate_terrain(kind: TerrainKind, difficulty: f64, seed: u64, cfg: &TerrainConfig) -> Result<Heightfield> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::InvalidArgument(format!("difficulty {difficulty} outside [0, 1]")));
    }
    let (lo, hi) = kind.curriculum_range();
    let value = lo + (hi - lo) * difficulty;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(lay_out(kind, cfg.track_length, cfg, &mut rng, |_| value))
}

/// Parses the kind name first, so unknown names surface as `UnknownTerrain`.
pub fn generate_terrain_named(kind: &str, difficulty: f64, seed: u64, cfg: &TerrainConfig) -> Result<Heightfield> {
    generate_terrain(kind.parse()?, difficulty, seed, cfg)
}

pub const BENCHMARK_LENGTH: f64 = 14.0;

/// 14 m evaluation track; every obstacle parameter is drawn uniformly from
/// the (obstacle, mode) range.
pub fn build_benchmark_track(
    obstacle: TerrainKind,
    mode: BenchmarkMode,
    seed: u64,
    cfg: &TerrainConfig,
) -> Result<Heightfield> {
    let (lo, hi) = benchmark_range(obstacle, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(lay_out(obstacle, BENCHMARK_LENGTH, cfg, &mut rng, |r| {
        if hi > lo {
            r.random_range(lo..=hi)
        } else {
            lo
        }
    }))
}
