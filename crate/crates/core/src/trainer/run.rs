//! Stage drivers, JSONL metrics logs and resumable training checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, IterationMetrics, PolicyOptimizer, Trainer};
use crate::amp::{AmpState, DiscriminatorStats};
use crate::checkpoint::{self, Archive};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gait::N_GAITS;
use crate::policy::{Policy, PolicyDims};
use crate::rewards::Stage;

pub const METRICS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub format_version: u32,
    #[serde(flatten)]
    pub metrics: IterationMetrics,
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, metrics: &IterationMetrics) -> Result<()> {
        let record = MetricsRecord {
            format_version: METRICS_VERSION,
            metrics: metrics.clone(),
        };
        serde_json::to_writer(&mut self.out, &record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<IterationMetrics>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord = serde_json::from_str(&line)?;
        if r.format_version != METRICS_VERSION {
            return Err(Error::FormatVersion {
                found: r.format_version,
                expected: METRICS_VERSION,
            });
        }
        out.push(r.metrics);
    }
    Ok(out)
}

/// Fresh stage-1 trainer.
pub fn stage1_trainer(cfg: &RunConfig, seed: u64) -> Result<Trainer> {
    cfg.validate()?;
    let mut t = Trainer::stage1(cfg.train.clone(), seed)?;
    t.policy.mode.blind = cfg.stage2.blind;
    Ok(t)
}

/// Stage-2 trainer: attaches the residual module to `base` (or, for the
/// one-stage variant, to a freshly initialized policy).
pub fn stage2_trainer(cfg: &RunConfig, base: Option<Policy>, seed: u64) -> Result<Trainer> {
    cfg.validate()?;
    let s2 = &cfg.stage2;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 8, 0));
    let mut policy = match (s2.one_stage, base) {
        (true, _) => {
            let dims = PolicyDims::from_env(&cfg.train.env, N_GAITS);
            let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
            Policy::new(dims, cfg.train.policy.clone(), &mut init)
        }
        (false, Some(p)) => p,
        (false, None) => return Err(Error::ModeMismatch("stage 2 needs a stage-1 policy".into())),
    };
    if policy.config.d_z != cfg.train.policy.d_z {
        return Err(Error::DimensionMismatch {
            context: "stage-1 latent width vs configured d_z",
            expected: cfg.train.policy.d_z,
            got: policy.config.d_z,
        });
    }
    let want = PolicyDims::from_env(&cfg.train.env, N_GAITS);
    if policy.dims != want {
        return Err(Error::DimensionMismatch {
            context: "stage-1 actor input vs environment",
            expected: want.actor_input(),
            got: policy.dims.actor_input(),
        });
    }
    policy.attach_residual(s2.fusion, s2.n_experts, &mut rng)?;
    policy.mode.one_stage = s2.one_stage;
    policy.mode.blind |= s2.blind;
    let optimizer = PolicyOptimizer::new(&mut policy, cfg.train.ppo.learning_rate);
    let amp = AmpState::new(cfg.amp.clone(), &cfg.train.env.robot, seed, &mut rng)?;
    Trainer::with_policy(cfg.train.clone(), policy, optimizer, Some(amp), Stage::Full, seed)
}

/// Trains the discriminators on rollouts of the current (zero-residual)
/// policy so the style reward starts from a discriminator that already
/// separates reference from policy motion.
pub fn warmup_discriminators(trainer: &mut Trainer) -> Result<Vec<DiscriminatorStats>> {
    let Some(cfg) = trainer.amp.as_ref().map(|a| a.config.clone()) else {
        return Ok(Vec::new());
    };
    if cfg.warmup_updates == 0 {
        return Ok(Vec::new());
    }
    for _ in 0..cfg.warmup_rollouts.max(1) {
        let rollout = trainer.collect()?;
        if let Some(amp) = trainer.amp.as_mut() {
            amp.push_windows(&rollout.policy_windows);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(trainer.seed, 9, 0));
    match trainer.amp.as_mut() {
        Some(amp) => amp.train(cfg.warmup_updates, &mut rng),
        None => Ok(Vec::new()),
    }
}

/// Runs `iterations` training iterations, logging each and checkpointing
/// every `checkpoint_every` iterations (and at the end) when `out` is set.
pub fn run_iterations(
    trainer: &mut Trainer,
    cfg: &RunConfig,
    iterations: usize,
    out: Option<&Path>,
    checkpoint_every: usize,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<Vec<IterationMetrics>> {
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsLog::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut all = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let m = trainer.iterate()?;
        if let Some(log) = log.as_mut() {
            log.write(&m)?;
        }
        on_iteration(&m);
        all.push(m);
        if let Some(dir) = out {
            if checkpoint_every > 0 && (i + 1) % checkpoint_every == 0 && i + 1 < iterations {
                save_trainer(dir.join("checkpoint"), trainer, cfg)?;
            }
        }
    }
    if let Some(dir) = out {
        save_trainer(dir.join("checkpoint"), trainer, cfg)?;
    }
    Ok(all)
}

/// Policy, optimizer state, discriminators and curriculum in one archive.
pub fn save_trainer(dir: impl AsRef<Path>, trainer: &Trainer, cfg: &RunConfig) -> Result<()> {
    let meta = serde_json::json!({
        "config": serde_json::to_value(cfg)?,
        "config_hash": cfg.hash(),
        "iteration": trainer.iteration,
        "seed": trainer.seed,
        "stage": if trainer.stage == Stage::Full { 2 } else { 1 },
    });
    let mut archive = Archive::new("training", meta);
    checkpoint::write_policy(&mut archive, "", &trainer.policy)?;
    checkpoint::write_optimizer(&mut archive, &trainer.optimizer)?;
    if let Some(amp) = &trainer.amp {
        checkpoint::write_amp(&mut archive, amp)?;
    }
    checkpoint::write_curriculum(&mut archive, &trainer.curriculum)?;
    archive.save(dir)
}

/// Rebuilds a trainer from `save_trainer` output. Environments restart
/// fresh episodes; weights, optimizer moments, discriminators, curriculum
/// levels and the iteration counter carry over.
pub fn load_trainer(dir: impl AsRef<Path>) -> Result<(Trainer, RunConfig)> {
    let archive = Archive::load(dir)?;
    if archive.kind != "training" {
        return Err(Error::ModeMismatch(format!("expected a training checkpoint, found `{}`", archive.kind)));
    }
    let cfg: RunConfig = serde_json::from_value(archive.meta["config"].clone())?;
    let seed = archive.meta["seed"].as_u64().unwrap_or(0);
    let iteration = archive.meta["iteration"].as_u64().unwrap_or(0) as usize;
    let stage = if archive.meta["stage"].as_u64() == Some(2) {
        Stage::Full
    } else {
        Stage::Locomotion
    };
    let policy = checkpoint::read_policy(&archive, "")?;
    let optimizer = checkpoint::read_optimizer(&archive)?;
    let amp = if archive.contains("amp.disc.0") {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 8, 0));
        let mut amp = AmpState::new(cfg.amp.clone(), &cfg.train.env.robot, seed, &mut rng)?;
        checkpoint::read_amp_into(&archive, &mut amp)?;
        Some(amp)
    } else {
        None
    };
    let mut t = Trainer::with_policy(cfg.train.clone(), policy, optimizer, amp, stage, seed)?;
    if let Some(c) = checkpoint::read_curriculum(&archive)? {
        if c.levels.len() == t.curriculum.levels.len() {
            t.curriculum = c;
        }
    }
    t.iteration = iteration;
    Ok((t, cfg))
}
