//! Two-stage training: stage 1 learns locomotion from r^l only; stage 2
//! attaches the residual module and adds style and gait rewards.

pub mod curriculum;
pub mod eval;
pub mod ppo;
pub mod run;

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    generate_terrain, sample_dr, CommandState, DrRanges, Env, EnvConfig, ObservationBundle, N_JOINTS,
};
use crate::error::{Error, Result};
use crate::gait::N_GAITS;
use crate::policy::{raw_actor_input, raw_critic_input, Policy, PolicyConfig, PolicyDims};
use crate::rewards::{compute_rewards, RewardConfig, Stage, Term};

pub use curriculum::{schedule_gait, update_level, CurriculumConfig, CurriculumState, GaitSchedule};
pub use eval::{evaluate, EvalSpec, EvalStats};
pub use run::{
    load_trainer, read_metrics, run_iterations, save_trainer, stage1_trainer, stage2_trainer, warmup_discriminators,
    MetricsLog,
};
pub use ppo::{
    clipped_surrogate, compute_gae, minibatch_loss, normalize_advantages, ppo_update, FreezeMask, LossMetrics, MinibatchLoss,
    PolicyOptimizer, PpoConfig, RolloutBuffer, Transition,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommandConfig {
    pub lin_vel: (f64, f64),
    pub yaw_rate: (f64, f64),
}

impl Default for CommandConfig {
    fn default() -> Self {
        Self {
            lin_vel: (0.3, 0.8),
            yaw_rate: (0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceGuard {
    /// Mean per-step tracking reward below which an iteration counts as stalled.
    pub tracking_floor: f64,
    /// Consecutive stalled iterations (after `warmup`) that abort training.
    pub patience: usize,
    pub warmup: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self {
            tracking_floor: 0.05,
            patience: 100,
            warmup: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub dr: DrRanges,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub rewards: RewardConfig,
    pub curriculum: CurriculumConfig,
    pub commands: CommandConfig,
    pub gait: GaitSchedule,
    pub iterations: usize,
    pub update_normalizer: bool,
    pub divergence: DivergenceGuard,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            dr: DrRanges::default(),
            policy: PolicyConfig::default(),
            ppo: PpoConfig::default(),
            rewards: RewardConfig::default(),
            curriculum: CurriculumConfig::default(),
            commands: CommandConfig::default(),
            gait: GaitSchedule::default(),
            iterations: 300,
            update_normalizer: true,
            divergence: DivergenceGuard::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.curriculum.validate()?;
        if self.gait.distribution.len() != N_GAITS {
            return Err(Error::InvalidArgument(format!(
                "gait distribution needs {N_GAITS} weights, got {}",
                self.gait.distribution.len()
            )));
        }
        Ok(())
    }
}

/// Per-iteration training log record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub stage: u8,
    pub steps: usize,
    pub mean_reward: f64,
    /// Mean weighted value per step of every reward term.
    pub terms: BTreeMap<String, f64>,
    pub episodes: usize,
    pub mean_episode_length: f64,
    pub mean_distance: f64,
    pub curriculum: BTreeMap<String, f64>,
    pub losses: LossMetrics,
    /// Mean pre-weight style reward per gait (`None` when the gait was not commanded).
    pub style_per_gait: Vec<Option<f64>>,
    pub discriminators: Vec<crate::amp::DiscriminatorStats>,
    pub gate_entropy: Option<f64>,
    pub gate_mean: Vec<f64>,
}

impl IterationMetrics {
    pub fn term(&self, term: Term) -> f64 {
        self.terms.get(term.name()).copied().unwrap_or(0.0)
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

#[derive(Clone, Debug)]
struct Slot {
    env: Env,
    obs: ObservationBundle,
    episode: u64,
    steps: usize,
    /// Joint-angle frames for AMP windows, reset when the gait changes.
    frames: VecDeque<[f64; N_JOINTS]>,
}

/// Samples and statistics from one `Trainer::collect` call.
pub struct Rollout {
    pub buffer: RolloutBuffer,
    raw_actor: Vec<Vec<f64>>,
    raw_critic: Vec<Vec<f64>>,
    term_sums: [f64; crate::rewards::N_TERMS],
    style_sum: Vec<f64>,
    style_count: Vec<usize>,
    /// AMP windows per commanded gait, excluding windows that span a command change.
    pub policy_windows: Vec<Vec<Vec<f64>>>,
    gate_sum: Vec<f64>,
    gate_entropy: f64,
    gate_count: usize,
    episodes: usize,
    ep_len_sum: f64,
    distance_sum: f64,
    reward_sum: f64,
    steps: usize,
}

/// Rollout/update driver shared by both stages.
pub struct Trainer {
    pub config: TrainConfig,
    pub policy: Policy,
    pub optimizer: PolicyOptimizer,
    pub curriculum: CurriculumState,
    pub amp: Option<crate::amp::AmpState>,
    pub stage: Stage,
    pub iteration: usize,
    pub seed: u64,
    rng: ChaCha8Rng,
    slots: Vec<Slot>,
    stalled: usize,
}

impl Trainer {
    /// Fresh stage-1 trainer with a randomly initialized policy.
    pub fn stage1(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
        let dims = PolicyDims::from_env(&config.env, N_GAITS);
        let mut policy = Policy::new(dims, config.policy.clone(), &mut init_rng);
        let optimizer = PolicyOptimizer::new(&mut policy, config.ppo.learning_rate);
        Self::with_policy(config, policy, optimizer, None, Stage::Locomotion, seed)
    }

    pub fn with_policy(
        config: TrainConfig,
        policy: Policy,
        optimizer: PolicyOptimizer,
        amp: Option<crate::amp::AmpState>,
        stage: Stage,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.ppo.n_envs;
        let curriculum = CurriculumState::new(n, &config.curriculum);
        let mut t = Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0)),
            slots: Vec::with_capacity(n),
            curriculum,
            policy,
            optimizer,
            amp,
            stage,
            iteration: 0,
            seed,
            stalled: 0,
            config,
        };
        for e in 0..n {
            let env = Env::new(t.config.env.clone());
            let obs = env.observe();
            t.slots.push(Slot {
                env,
                obs,
                episode: 0,
                steps: 0,
                frames: VecDeque::new(),
            });
            t.reset_env(e)?;
        }
        Ok(t)
    }

    fn sample_command(&mut self, gait: usize) -> CommandState {
        let (lo, hi) = self.config.commands.lin_vel;
        let lin = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
        let (lo, hi) = self.config.commands.yaw_rate;
        let yaw = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
        CommandState::new(lin, yaw, gait, N_GAITS)
    }

    fn draw_gait(&mut self) -> usize {
        if self.stage == Stage::Full {
            schedule_gait(&self.config.gait, &mut self.rng)
        } else {
            0
        }
    }

    fn reset_env(&mut self, e: usize) -> Result<()> {
        let kind = self.curriculum.kinds[e];
        let difficulty = self.curriculum.difficulty(e);
        let episode = self.slots[e].episode;
        let terrain_seed = derive_seed(self.seed, 100 + e as u64, episode);
        let terrain = generate_terrain(kind, difficulty, terrain_seed, &self.config.env.terrain)?;
        let dr = sample_dr(&mut self.rng, &self.config.dr, self.config.env.control_dt);
        let gait = self.draw_gait();
        let command = self.sample_command(gait);
        let env_seed = derive_seed(self.seed, 10_000 + e as u64, episode);
        let slot = &mut self.slots[e];
        slot.obs = slot.env.reset(terrain, dr, command, env_seed)?;
        slot.env.set_terrain_level(difficulty);
        slot.steps = 0;
        slot.frames.clear();
        slot.frames.push_back(slot.env.state().joint_pos);
        Ok(())
    }

    pub fn envs(&self) -> impl Iterator<Item = &Env> {
        self.slots.iter().map(|s| &s.env)
    }

    /// One rollout of `horizon` steps on every environment followed by PPO
    /// (and, in stage 2, discriminator) updates.
    pub fn iterate(&mut self) -> Result<IterationMetrics> {
        let rollout = self.collect()?;
        self.learn(rollout)
    }

    /// Steps every environment `horizon` times with the sampling policy.
    pub fn collect(&mut self) -> Result<Rollout> {
        let n = self.slots.len();
        let horizon = self.config.ppo.horizon;
        let dt = self.config.env.control_dt;
        let gamma = self.config.ppo.gamma;
        let mut buffer = RolloutBuffer::new(n);
        buffer.log_std = self.policy.log_std();
        let mut raw_actor = Vec::with_capacity(n * horizon);
        let mut raw_critic = Vec::with_capacity(n * horizon);
        let mut term_sums = [0.0; crate::rewards::N_TERMS];
        let mut style_sum = vec![0.0; N_GAITS];
        let mut style_count = vec![0usize; N_GAITS];
        let mut policy_windows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); N_GAITS];
        let mut gate_sum: Vec<f64> = Vec::new();
        let mut gate_entropy = 0.0;
        let mut gate_count = 0usize;
        let mut episodes = 0usize;
        let mut ep_len_sum = 0.0;
        let mut distance_sum = 0.0;
        let mut reward_sum = 0.0;
        let window_len = self.amp.as_ref().map(|a| a.config.window).unwrap_or(0);

        for _ in 0..horizon {
            for e in 0..n {
                if self.stage == Stage::Full && self.config.gait.due(self.slots[e].env.state().step_count, dt) {
                    let gait = schedule_gait(&self.config.gait, &mut self.rng);
                    let command = self.sample_command(gait);
                    let slot = &mut self.slots[e];
                    if command.gait_index() != slot.env.commands().gait_index() {
                        slot.frames.clear();
                        slot.frames.push_back(slot.env.state().joint_pos);
                    }
                    slot.env.set_commands(command);
                    slot.obs = slot.env.observe();
                }
                let slot = &self.slots[e];
                let gait = slot.obs.gait.clone();
                let ra = raw_actor_input(&slot.obs);
                let rc = raw_critic_input(&slot.obs);
                let x = self.policy.normalize_actor(&ra);
                let xc = self.policy.normalize_critic(&rc, &gait);
                let out = self.policy.act_normalized(&x, &gait, Some(&mut self.rng))?;
                let value = self.policy.critic.net.infer(&xc)?[0];
                if !out.gate.is_empty() {
                    if gate_sum.is_empty() {
                        gate_sum = vec![0.0; out.gate.len()];
                    }
                    for (s, g) in gate_sum.iter_mut().zip(&out.gate) {
                        *s += g;
                    }
                    gate_entropy -= out.gate.iter().filter(|g| **g > 0.0).map(|g| g * g.ln()).sum::<f64>();
                    gate_count += 1;
                }
                if self.config.update_normalizer {
                    raw_actor.push(ra);
                    raw_critic.push(rc);
                }

                let slot = &mut self.slots[e];
                let result = slot.env.step(&out.action)?;
                slot.steps += 1;
                slot.frames.push_back(slot.env.state().joint_pos);
                while slot.frames.len() > window_len.max(1) {
                    slot.frames.pop_front();
                }
                let gait_idx = slot.env.commands().gait_index();
                let mut style = 0.0;
                if let Some(amp) = &self.amp {
                    if slot.frames.len() == window_len {
                        let window: Vec<f64> = slot.frames.iter().flatten().copied().collect();
                        style = amp.style_reward(&window, &slot.env.commands().gait)?;
                        style_sum[gait_idx] += style;
                        style_count[gait_idx] += 1;
                        policy_windows[gait_idx].push(window);
                    }
                }
                let breakdown = compute_rewards(
                    slot.env.state(),
                    slot.env.commands(),
                    slot.env.action_history(),
                    &self.config.env.robot,
                    style,
                    &self.config.rewards,
                    self.stage,
                );
                for (s, v) in term_sums.iter_mut().zip(&breakdown.weighted) {
                    *s += v;
                }
                reward_sum += breakdown.total;
                let mut reward = breakdown.total;
                let done = result.termination.is_done();
                if done && !result.termination.is_failure() {
                    let xc = self
                        .policy
                        .normalize_critic(&raw_critic_input(&result.observation), &result.observation.gait);
                    reward += gamma * self.policy.critic.net.infer(&xc)?[0];
                }
                buffer.steps[e].push(Transition {
                    actor_input: x,
                    critic_input: xc,
                    gait,
                    action: out.action,
                    log_prob: out.log_prob,
                    mean: out.mean,
                    value,
                    reward,
                    done,
                });
                if done {
                    episodes += 1;
                    ep_len_sum += slot.steps as f64;
                    let distance = result.stats.distance;
                    distance_sum += distance;
                    let track = (self.config.env.terrain.track_length - self.config.env.terrain.spawn_x).max(1e-9);
                    self.curriculum.update(e, distance / track, &self.config.curriculum);
                    self.slots[e].episode += 1;
                    self.reset_env(e)?;
                } else {
                    slot.obs = result.observation;
                }
            }
        }
        for (e, slot) in self.slots.iter().enumerate() {
            let xc = self
                .policy
                .normalize_critic(&raw_critic_input(&slot.obs), &slot.obs.gait);
            buffer.last_values[e] = self.policy.critic.net.infer(&xc)?[0];
        }
        Ok(Rollout {
            buffer,
            raw_actor,
            raw_critic,
            term_sums,
            style_sum,
            style_count,
            policy_windows,
            gate_sum,
            gate_entropy,
            gate_count,
            episodes,
            ep_len_sum,
            distance_sum,
            reward_sum,
            steps: n * horizon,
        })
    }

    /// PPO, discriminator and normalizer updates from one rollout.
    pub fn learn(&mut self, rollout: Rollout) -> Result<IterationMetrics> {
        let Rollout {
            buffer,
            raw_actor,
            raw_critic,
            term_sums,
            style_sum,
            style_count,
            policy_windows,
            gate_sum,
            gate_entropy,
            gate_count,
            episodes,
            ep_len_sum,
            distance_sum,
            reward_sum,
            steps,
        } = rollout;
        let mut update_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 3, self.iteration as u64));
        let losses = ppo_update(&mut self.policy, &mut self.optimizer, &buffer, &self.config.ppo, &mut update_rng)?;
        let discriminators = match &mut self.amp {
            Some(amp) => amp.update(&policy_windows, &mut update_rng)?,
            None => Vec::new(),
        };
        if self.config.update_normalizer {
            self.policy.actor_norm.update(&raw_actor);
            self.policy.critic_norm.update(&raw_critic);
        }

        let mut terms = BTreeMap::new();
        for t in Term::ALL {
            terms.insert(t.name().to_string(), term_sums[t.index()] / steps as f64);
        }
        let mut curriculum = BTreeMap::new();
        for kind in &self.config.curriculum.terrains {
            if let Some(d) = self.curriculum.mean_difficulty(*kind) {
                curriculum.insert(kind.to_string(), d);
            }
        }
        let metrics = IterationMetrics {
            iteration: self.iteration,
            stage: if self.stage == Stage::Full { 2 } else { 1 },
            steps,
            mean_reward: reward_sum / steps as f64,
            terms,
            episodes,
            mean_episode_length: if episodes > 0 { ep_len_sum / episodes as f64 } else { 0.0 },
            mean_distance: if episodes > 0 { distance_sum / episodes as f64 } else { 0.0 },
            curriculum,
            losses,
            style_per_gait: style_sum
                .iter()
                .zip(&style_count)
                .map(|(s, c)| (*c > 0).then(|| s / *c as f64))
                .collect(),
            discriminators,
            gate_entropy: (gate_count > 0).then(|| gate_entropy / gate_count as f64),
            gate_mean: gate_sum.iter().map(|s| s / gate_count.max(1) as f64).collect(),
        };
        self.iteration += 1;
        self.check_divergence(&metrics)?;
        Ok(metrics)
    }

    fn check_divergence(&mut self, m: &IterationMetrics) -> Result<()> {
        if !m.mean_reward.is_finite() || !self.policy.actor.trunk.is_finite() {
            return Err(Error::Diverged(format!("non-finite state at iteration {}", m.iteration)));
        }
        let g = &self.config.divergence;
        let tracking = m.term(Term::TrackLinVel);
        if m.iteration >= g.warmup && tracking < g.tracking_floor {
            self.stalled += 1;
        } else {
            self.stalled = 0;
        }
        if g.patience > 0 && self.stalled >= g.patience {
            return Err(Error::Diverged(format!(
                "tracking reward {tracking:.4} below floor {} for {} iterations (iteration {})",
                g.tracking_floor, self.stalled, m.iteration
            )));
        }
        Ok(())
    }
}
