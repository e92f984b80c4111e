//! Succ./Dist. benchmark on 14 m obstacle tracks and the gait-reward
//! modulation measurement.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::env::trace::{TraceRecord, TraceWriter};
use crate::env::{
    build_benchmark_track, BenchmarkMode, CommandState, DrConfig, Env, EnvConfig, Termination, TerrainKind, N_JOINTS,
};
use crate::error::{Error, Result};
use crate::gait::{Gait, N_GAITS};
use crate::policy::{Policy, PolicyDims};
use crate::rewards::{compute_rewards, RewardConfig, Stage};
use crate::trainer::derive_seed;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub success: bool,
    /// Progress at episode end, clamped to `[0, goal]`.
    pub distance: f64,
    pub steps: u64,
    pub termination: Termination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: String,
    pub gait: String,
    pub obstacle: TerrainKind,
    pub mode: BenchmarkMode,
    pub succ: f64,
    pub dist: f64,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub outcomes: Vec<TrialOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub goal: f64,
    pub timeout: f64,
    pub cells: Vec<CellReport>,
}

impl BenchmarkReport {
    pub fn cell(&self, obstacle: TerrainKind, mode: BenchmarkMode) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.obstacle == obstacle && c.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.format_version != REPORT_VERSION {
            return Err(Error::FormatVersion {
                found: r.format_version,
                expected: REPORT_VERSION,
            });
        }
        Ok(r)
    }

    /// Aligned text table, one row per cell.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<10} {:<8} {:<5} {:>6} {:>6} {:>6}",
            "Method", "Gait", "Obstacle", "Mode", "Succ.", "Dist.", "Trials"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<12} {:<10} {:<8} {:<5} {:>6.3} {:>6.2} {:>6}",
                c.method,
                c.gait,
                c.obstacle.as_str(),
                c.mode.to_string(),
                c.succ,
                c.dist,
                c.trials
            );
        }
        let _ = writeln!(s, "config {}  seed {}", self.config_hash, self.seed);
        s
    }
}

/// Succ. and Dist. over a set of trials.
pub fn summarize(outcomes: &[TrialOutcome]) -> (f64, f64) {
    if outcomes.is_empty() {
        return (0.0, 0.0);
    }
    let n = outcomes.len() as f64;
    let succ = outcomes.iter().filter(|o| o.success).count() as f64 / n;
    let dist = outcomes.iter().map(|o| o.distance).sum::<f64>() / n;
    (succ, dist)
}

/// Rebuilds a trial outcome from its trace.
pub fn outcome_from_trace(records: &[TraceRecord], seed: u64, goal: f64) -> Result<TrialOutcome> {
    let last = records
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty trace".into()))?;
    Ok(TrialOutcome {
        seed,
        success: last.termination == Termination::None && last.distance >= goal,
        distance: last.distance.clamp(0.0, goal),
        steps: last.step,
        termination: last.termination,
    })
}

pub fn check_dims(policy: &Policy, env: &EnvConfig) -> Result<()> {
    let want = PolicyDims::from_env(env, N_GAITS);
    if policy.dims != want {
        return Err(Error::DimensionMismatch {
            context: "policy actor input vs environment",
            expected: want.actor_input(),
            got: policy.dims.actor_input(),
        });
    }
    Ok(())
}

fn trial_env(env: &EnvConfig, bench: &BenchConfig) -> EnvConfig {
    let mut cfg = env.clone();
    cfg.episode_length = bench.timeout;
    cfg.push.enabled = false;
    cfg
}

/// One benchmark episode. Success means covering `goal` meters before the
/// timeout without any termination.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    policy: &Policy,
    env_config: &EnvConfig,
    rewards: &RewardConfig,
    bench: &BenchConfig,
    obstacle: TerrainKind,
    mode: BenchmarkMode,
    gait: usize,
    seed: u64,
    trace: Option<&Path>,
) -> Result<TrialOutcome> {
    let cfg = trial_env(env_config, bench);
    let terrain = build_benchmark_track(obstacle, mode, seed, &cfg.terrain)?;
    let mut env = Env::new(cfg.clone());
    let command = CommandState::new(bench.lin_vel, 0.0, gait, N_GAITS);
    let mut obs = env.reset(terrain, DrConfig::identity(), command, derive_seed(seed, 4, 0))?;
    let mut writer = trace.map(TraceWriter::create).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5, 0));
    loop {
        let out = if bench.deterministic {
            policy.act(&obs, None::<&mut ChaCha8Rng>)?
        } else {
            policy.act(&obs, Some(&mut rng))?
        };
        let result = env.step(&out.action)?;
        let distance = env.distance();
        if let Some(w) = writer.as_mut() {
            let breakdown = compute_rewards(
                env.state(),
                env.commands(),
                env.action_history(),
                &cfg.robot,
                0.0,
                rewards,
                Stage::Full,
            );
            let mut action = [0.0; N_JOINTS];
            action.copy_from_slice(&out.action);
            w.write(&TraceRecord::new(env.state(), distance, &action, &breakdown, result.termination))?;
        }
        let done = result.termination.is_done();
        if done || distance >= bench.goal {
            if let Some(w) = writer {
                w.finish()?;
            }
            return Ok(TrialOutcome {
                seed,
                success: !done,
                distance: distance.clamp(0.0, bench.goal),
                steps: env.state().step_count,
                termination: result.termination,
            });
        }
        obs = result.observation;
    }
}

pub fn trace_path(dir: &Path, method: &str, obstacle: TerrainKind, mode: BenchmarkMode, gait: usize, seed: u64) -> PathBuf {
    dir.join(format!("{method}_{}_{mode}_g{gait}_{seed}.jsonl", obstacle.as_str()))
}

/// Runs every suite entry for each configured gait, sequentially.
pub fn run_benchmark(
    policy: &Policy,
    env_config: &EnvConfig,
    rewards: &RewardConfig,
    bench: &BenchConfig,
    method: &str,
    config_hash: &str,
    seed: u64,
    trace_dir: Option<&Path>,
) -> Result<BenchmarkReport> {
    check_dims(policy, env_config)?;
    if let Some(dir) = trace_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut cells = Vec::new();
    for entry in &bench.suite {
        for &gait in &bench.gaits {
            let seeds: Vec<u64> = (0..entry.trials as u64)
                .map(|i| derive_seed(seed, entry.seed_base, i))
                .collect();
            let mut outcomes = Vec::with_capacity(seeds.len());
            for &s in &seeds {
                let path = trace_dir.map(|d| trace_path(d, method, entry.obstacle, entry.mode, gait, s));
                outcomes.push(run_trial(
                    policy,
                    env_config,
                    rewards,
                    bench,
                    entry.obstacle,
                    entry.mode,
                    gait,
                    s,
                    path.as_deref(),
                )?);
            }
            let (succ, dist) = summarize(&outcomes);
            cells.push(CellReport {
                method: method.to_string(),
                gait: Gait::from_index(gait).map_or_else(|| gait.to_string(), |g| g.to_string()),
                obstacle: entry.obstacle,
                mode: entry.mode,
                succ,
                dist,
                trials: outcomes.len(),
                seeds,
                outcomes,
            });
        }
    }
    Ok(BenchmarkReport {
        format_version: REPORT_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        goal: bench.goal,
        timeout: bench.timeout,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationRow {
    pub attribute: String,
    pub reference: f64,
    pub target: f64,
    pub mean: f64,
    pub std: f64,
    pub rollouts: usize,
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.max(0.0).sqrt())
}

/// Per-rollout mean of the gait attribute (base height while squatting,
/// higher-knee height for high knees) on flat ground.
#[allow(clippy::too_many_arguments)]
pub fn measure_gait_attribute(
    policy: &Policy,
    env_config: &EnvConfig,
    gait: Gait,
    lin_vel: f64,
    rollouts: usize,
    steps: usize,
    settle: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut cfg = env_config.clone();
    cfg.push.enabled = false;
    cfg.episode_length = cfg.episode_length.max((steps as f64 + 1.0) * cfg.control_dt);
    let mut values = Vec::with_capacity(rollouts);
    for r in 0..rollouts as u64 {
        let s = derive_seed(seed, 6, r);
        let terrain = crate::env::generate_terrain(TerrainKind::Flat, 0.0, s, &cfg.terrain)?;
        let mut env = Env::new(cfg.clone());
        let command = CommandState::new(lin_vel, 0.0, gait.index(), N_GAITS);
        let mut obs = env.reset(terrain, DrConfig::identity(), command, s)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..steps {
            let out = policy.act(&obs, None::<&mut ChaCha8Rng>)?;
            let result = env.step(&out.action)?;
            if t >= settle {
                let st = env.state();
                sum += match gait {
                    Gait::Squat => st.base_height,
                    _ => st.knee_height[0].max(st.knee_height[1]),
                };
                count += 1;
            }
            if result.termination.is_done() {
                break;
            }
            obs = result.observation;
        }
        if count > 0 {
            values.push(sum / count as f64);
        }
    }
    Ok(values)
}

pub fn modulation_text(rows: &[ModulationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>9} {:>8} {:>18}", "Attribute", "Reference", "Target", "Achieved");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:>9.3} {:>8.3} {:>10.3} ± {:.3}",
            r.attribute, r.reference, r.target, r.mean, r.std
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(success: bool, distance: f64) -> TrialOutcome {
        TrialOutcome {
            seed: 0,
            success,
            distance,
            steps: 1,
            termination: Termination::None,
        }
    }

    #[test]
    fn summary_counts_failures_in_distance() {
        let (s, d) = summarize(&[outcome(true, 14.0), outcome(false, 2.0)]);
        assert_eq!(s, 0.5);
        assert_eq!(d, 8.0);
    }

    #[test]
    fn std_nonnegative() {
        let (m, s) = mean_std(&[0.6, 0.6, 0.6]);
        assert!((m - 0.6).abs() < 1e-15);
        assert!(s >= 0.0);
    }
}
