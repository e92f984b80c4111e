//! PPO with GAE: rollout storage, advantage estimation and the clipped update.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{clip_grad_norm, Adam, AdamConfig};
use crate::policy::{gaussian_entropy, gaussian_log_prob, ActorGrads, ParamGroup, Policy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    /// Stage-2 learning-rate multiplier for parameters inherited from stage 1
    /// (0 freezes them).
    pub base_lr_scale: f64,
    pub horizon: usize,
    pub n_envs: usize,
    pub max_grad_norm: f64,
    /// Adaptive learning rate target; `None` keeps the rate fixed.
    pub desired_kl: Option<f64>,
    pub lr_bounds: (f64, f64),
    pub clip_value: bool,
    /// Stage-2 freeze mask over the inherited actor parts.
    pub freeze: FreezeMask,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezeMask {
    pub scan_encoder: bool,
    pub history_encoder: bool,
    pub trunk: bool,
    pub head: bool,
    pub log_std: bool,
}

impl FreezeMask {
    /// Whether actor slice `i` (in `Policy::actor_slices_mut` order) is frozen.
    pub fn frozen(&self, i: usize) -> bool {
        [self.scan_encoder, self.history_encoder, self.trunk, self.head, self.log_std]
            .get(i)
            .copied()
            .unwrap_or(false)
    }
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatches: 4,
            value_coef: 1.0,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            base_lr_scale: 0.1,
            horizon: 64,
            n_envs: 64,
            max_grad_norm: 1.0,
            desired_kl: Some(0.01),
            lr_bounds: (1e-5, 1e-2),
            clip_value: true,
            freeze: FreezeMask::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::InvalidArgument(format!("clip {} must be positive", self.clip)));
        }
        if self.horizon == 0 || self.n_envs == 0 || self.minibatches == 0 {
            return Err(Error::InvalidArgument("horizon, n_envs and minibatches must be positive".into()));
        }
        Ok(())
    }
}

/// Standard GAE over one trajectory. `dones[t]` marks that the episode ended
/// after step t (no bootstrapping across it); `last_value` bootstraps the
/// horizon end.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * mask - values[t];
        running = delta + gamma * lambda * mask * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Per-sample clipped surrogate `-min(r A, clip(r) A)` and its derivative
/// with respect to the log-probability.
pub fn clipped_surrogate(log_ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let ratio = log_ratio.exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (-unclipped, -unclipped)
    } else {
        (-clipped, 0.0)
    }
}

/// One transition, with inputs already normalized as the policy saw them.
#[derive(Clone, Debug)]
pub struct Transition {
    pub actor_input: Vec<f64>,
    pub critic_input: Vec<f64>,
    pub gait: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub mean: Vec<f64>,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// Rollout storage indexed `[env][step]`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<Vec<Transition>>,
    pub last_values: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(n_envs: usize) -> Self {
        Self {
            steps: vec![Vec::new(); n_envs],
            last_values: vec![0.0; n_envs],
            log_std: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened (transition, advantage, return) triples, in env-major order.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let mut adv = Vec::with_capacity(self.len());
        let mut ret = Vec::with_capacity(self.len());
        for (env, traj) in self.steps.iter().enumerate() {
            let r: Vec<f64> = traj.iter().map(|t| t.reward).collect();
            let v: Vec<f64> = traj.iter().map(|t| t.value).collect();
            let d: Vec<bool> = traj.iter().map(|t| t.done).collect();
            let (a, g) = compute_gae(&r, &v, &d, self.last_values[env], gamma, lambda);
            adv.extend(a);
            ret.extend(g);
        }
        (adv, ret)
    }

    pub fn flat(&self) -> Vec<&Transition> {
        self.steps.iter().flatten().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOptimizer {
    pub actor: Vec<Adam>,
    pub critic: Adam,
    pub learning_rate: f64,
}

impl PolicyOptimizer {
    pub fn new(policy: &mut Policy, learning_rate: f64) -> Self {
        let config = AdamConfig {
            lr: learning_rate,
            ..AdamConfig::default()
        };
        let actor = policy
            .actor_slices_mut()
            .iter()
            .map(|(_, s)| Adam::new(s.len(), config))
            .collect();
        let critic = Adam::new(policy.critic.net.param_count(), config);
        Self {
            actor,
            critic,
            learning_rate,
        }
    }

    /// Re-binds optimizer state after the policy gained parameters (e.g. a
    /// residual module or widened critic), keeping state where shapes agree.
    pub fn resize(&mut self, policy: &mut Policy) {
        let config = self.critic.config;
        let slices = policy.actor_slices_mut();
        let mut actor = Vec::with_capacity(slices.len());
        for (i, (_, s)) in slices.iter().enumerate() {
            match self.actor.get(i) {
                Some(a) if a.m.len() == s.len() && i < 5 => actor.push(a.clone()),
                _ => actor.push(Adam::new(s.len(), config)),
            }
        }
        self.actor = actor;
        if self.critic.m.len() != policy.critic.net.param_count() {
            self.critic = Adam::new(policy.critic.net.param_count(), config);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub learning_rate: f64,
    pub clip_fraction: f64,
    pub updates: usize,
    pub skipped: usize,
}

fn group_lr(group: ParamGroup, lr: f64, stage2: bool, base_scale: f64) -> f64 {
    match (group, stage2) {
        (ParamGroup::Base, true) => lr * base_scale,
        _ => lr,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MinibatchLoss {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// `policy_loss + value_coef * value_loss - entropy_coef * entropy`.
    pub total: f64,
    pub kl: f64,
    pub clipped: usize,
}

/// PPO objective over one minibatch and its gradients with respect to the
/// actor and critic parameters. `old_log_std` is the behavior policy's.
pub fn minibatch_loss(
    policy: &Policy,
    batch: &[&Transition],
    adv: &[f64],
    returns: &[f64],
    old_log_std: &[f64],
    config: &PpoConfig,
) -> Result<(MinibatchLoss, ActorGrads, Vec<f64>)> {
    let log_std = policy.log_std();
    let sigma: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let (lo, hi) = policy.config.log_std_bounds;
    let mut grads = policy.zero_actor_grads();
    let mut critic_grads = policy.critic.net.zero_grad();
    let mut out = MinibatchLoss::default();
    if batch.is_empty() {
        return Ok((out, grads, critic_grads));
    }
    let scale = 1.0 / batch.len() as f64;
    for (k, s) in batch.iter().enumerate() {
        let pass = policy.actor_pass(&s.actor_input, &s.gait, true)?;
        let logp = gaussian_log_prob(&s.action, &pass.mean, &log_std);
        let (loss, dl_dlogp) = clipped_surrogate(logp - s.log_prob, adv[k], config.clip);
        if dl_dlogp == 0.0 {
            out.clipped += 1;
        }
        out.policy_loss += loss * scale;
        let mut grad_mean = vec![0.0; pass.mean.len()];
        for j in 0..pass.mean.len() {
            let z = (s.action[j] - pass.mean[j]) / sigma[j];
            grad_mean[j] = dl_dlogp * z / sigma[j] * scale;
            if policy.actor.log_std[j] > lo && policy.actor.log_std[j] < hi {
                grads.log_std[j] += dl_dlogp * (z * z - 1.0) * scale;
            }
            let (ls_old, ls_new) = (old_log_std[j], log_std[j]);
            let d = s.mean[j] - pass.mean[j];
            out.kl += (ls_new - ls_old + ((2.0 * ls_old).exp() + d * d) / (2.0 * (2.0 * ls_new).exp()) - 0.5) * scale;
        }
        policy.actor_backward(&pass, &grad_mean, &mut grads)?;

        let (v, tape) = policy.critic.net.forward(&s.critic_input)?;
        let v = v[0];
        let err = v - returns[k];
        let (vl, dv) = if config.clip_value {
            let vc = s.value + (v - s.value).clamp(-config.clip, config.clip);
            let errc = vc - returns[k];
            if errc * errc > err * err {
                let inside = (v - s.value).abs() < config.clip;
                (errc * errc, if inside { 2.0 * errc } else { 0.0 })
            } else {
                (err * err, 2.0 * err)
            }
        } else {
            (err * err, 2.0 * err)
        };
        out.value_loss += vl * scale;
        policy
            .critic
            .net
            .backward(&tape, &[dv * config.value_coef * scale], &mut critic_grads)?;
    }
    for j in 0..grads.log_std.len() {
        let ls = policy.actor.log_std[j];
        if ls > lo && ls < hi {
            grads.log_std[j] -= config.entropy_coef;
        }
    }
    out.entropy = gaussian_entropy(&log_std);
    out.total = out.policy_loss + config.value_coef * out.value_loss - config.entropy_coef * out.entropy;
    Ok((out, grads, critic_grads))
}

/// Clipped-surrogate PPO over `epochs` shuffled minibatch passes. A
/// minibatch whose loss or gradient is non-finite is skipped and leaves the
/// parameters untouched.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy,
    opt: &mut PolicyOptimizer,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<LossMetrics> {
    let mut metrics = LossMetrics {
        learning_rate: opt.learning_rate,
        ..LossMetrics::default()
    };
    if buffer.is_empty() {
        return Ok(metrics);
    }
    let samples = buffer.flat();
    let (mut adv, returns) = buffer.advantages(config.gamma, config.lambda);
    normalize_advantages(&mut adv);
    let n = samples.len();
    let mb_size = n.div_ceil(config.minibatches);
    let mut order: Vec<usize> = (0..n).collect();
    let stage2 = policy.mode.residual_active() && !policy.mode.one_stage;
    let old_log_std = &buffer.log_std;

    let mut count = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for mb in order.chunks(mb_size) {
            let batch: Vec<&Transition> = mb.iter().map(|&i| samples[i]).collect();
            let batch_adv: Vec<f64> = mb.iter().map(|&i| adv[i]).collect();
            let batch_ret: Vec<f64> = mb.iter().map(|&i| returns[i]).collect();
            let (loss, mut grads, mut critic_grads) =
                minibatch_loss(policy, &batch, &batch_adv, &batch_ret, old_log_std, config)?;
            let MinibatchLoss {
                policy_loss: p_loss,
                value_loss: v_loss,
                kl,
                clipped,
                ..
            } = loss;
            if !(p_loss.is_finite() && v_loss.is_finite()) {
                metrics.skipped += 1;
                continue;
            }
            if let Some(target) = config.desired_kl {
                if kl > 2.0 * target {
                    opt.learning_rate = (opt.learning_rate / 1.5).max(config.lr_bounds.0);
                } else if kl < 0.5 * target && kl > 0.0 {
                    opt.learning_rate = (opt.learning_rate * 1.5).min(config.lr_bounds.1);
                }
            }
            {
                let mut slices = grads.slices_mut();
                clip_grad_norm(&mut slices, config.max_grad_norm);
            }
            clip_grad_norm(&mut [&mut critic_grads[..]], config.max_grad_norm);

            let lr = opt.learning_rate;
            let snapshot = policy.clone();
            let mut failed = false;
            {
                let grad_slices = grads.slices_mut();
                let slices = opt.actor.iter_mut().zip(policy.actor_slices_mut()).zip(grad_slices);
                for (i, ((adam, (group, params)), g)) in slices.enumerate() {
                    if params.is_empty() || (stage2 && config.freeze.frozen(i)) {
                        continue;
                    }
                    adam.config.lr = group_lr(group, lr, stage2, config.base_lr_scale);
                    if adam.config.lr <= 0.0 {
                        continue;
                    }
                    if adam.step(params, g).is_err() {
                        failed = true;
                        break;
                    }
                }
            }
            opt.critic.config.lr = lr;
            if !failed && opt.critic.step(policy.critic.net.params_mut(), &critic_grads).is_err() {
                failed = true;
            }
            if failed {
                *policy = snapshot;
                metrics.skipped += 1;
                continue;
            }
            metrics.policy_loss += p_loss;
            metrics.value_loss += v_loss;
            metrics.kl += kl;
            metrics.clip_fraction += clipped as f64 / mb.len() as f64;
            count += 1;
        }
    }
    if count > 0 {
        let c = count as f64;
        metrics.policy_loss /= c;
        metrics.value_loss /= c;
        metrics.kl /= c;
        metrics.clip_fraction /= c;
    }
    metrics.updates = count;
    metrics.entropy = gaussian_entropy(&policy.log_std());
    metrics.learning_rate = opt.learning_rate;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_gamma_zero() {
        let (adv, _) = compute_gae(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5], &[false; 3], 9.0, 0.0, 0.95);
        assert_eq!(adv, vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn gae_fixed_point() {
        let gamma = 0.99;
        let v = 1.0 / (1.0 - gamma);
        let (adv, _) = compute_gae(&[1.0; 50], &[v; 50], &[false; 50], v, gamma, 0.95);
        assert!(adv.iter().all(|a| a.abs() < 1e-10));
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.1).collect();
        let (gamma, lambda, last) = (0.97, 0.9, 0.3);
        let (adv, _) = compute_gae(&r, &v, &d, last, gamma, lambda);
        for t in 0..n {
            let mut total = 0.0;
            let mut w = 1.0;
            for k in t..n {
                let next = if k + 1 < n { v[k + 1] } else { last };
                let m = if d[k] { 0.0 } else { 1.0 };
                total += w * (r[k] + gamma * next * m - v[k]);
                if d[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            assert!((adv[t] - total).abs() < 1e-10);
        }
    }

    #[test]
    fn surrogate_clip_region() {
        let (l1, g1) = clipped_surrogate(0.0, 2.0, 0.2);
        assert_eq!(l1, -2.0);
        assert_eq!(g1, -2.0);
        let (_, g) = clipped_surrogate((1.4f64).ln(), 1.0, 0.2);
        assert_eq!(g, 0.0);
        let (_, g) = clipped_surrogate((0.5f64).ln(), -1.0, 0.2);
        assert_eq!(g, 0.0);
        let (_, g) = clipped_surrogate((0.5f64).ln(), 1.0, 0.2);
        assert!((g + 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_buffer_leaves_params() {
        let dims = crate::policy::PolicyDims {
            proprio: 3,
            history: 3,
            scan: 2,
            map: 2,
            extras: 2,
            n_gaits: 3,
            n_joints: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Policy::new(dims, crate::policy::PolicyConfig::default(), &mut rng);
        let before = p.clone();
        let mut opt = PolicyOptimizer::new(&mut p, 1e-3);
        let m = ppo_update(&mut p, &mut opt, &RolloutBuffer::new(2), &PpoConfig::default(), &mut rng).unwrap();
        assert_eq!(m.updates, 0);
        assert_eq!(p, before);
    }
}
