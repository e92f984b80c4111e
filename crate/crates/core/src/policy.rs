//! Asymmetric actor-critic with the latent mixture-of-residual-experts module.
//!
//! The actor encodes the scan pair and the history window into `f^d` and
//! `f^h`, concatenates them with o_t into f_t, and maps f_t through the
//! trunk to the latent z^o. In latent fusion the residual module adds
//! `sum_i softmax(w)_i z^e_i` to z^o before the linear head; in action
//! fusion the experts produce joint offsets that are added after the head.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, ObservationBundle};
use crate::error::{Error, Result};
use crate::net::{softmax, softmax_backward, Activation, DenseNet, Tape};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Latent,
    Action,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMode {
    pub stage: u8,
    pub fusion: Fusion,
    pub one_stage: bool,
    pub n_experts: usize,
    /// Height scans are zeroed before the encoder.
    pub blind: bool,
}

impl PolicyMode {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            fusion: Fusion::Latent,
            one_stage: false,
            n_experts: 0,
            blind: false,
        }
    }

    pub fn residual_active(&self) -> bool {
        self.stage == 2 || self.one_stage
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub d_f: usize,
    pub d_z: usize,
    pub scan_hidden: Vec<usize>,
    pub history_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub n_experts: usize,
    pub init_std: f64,
    pub log_std_bounds: (f64, f64),
    /// Observations are clipped to this many standard deviations after normalization.
    pub obs_clip: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_f: 32,
            d_z: 64,
            scan_hidden: vec![64],
            history_hidden: vec![64],
            trunk_hidden: vec![128],
            expert_hidden: vec![64],
            gate_hidden: vec![32],
            critic_hidden: vec![128, 128],
            n_experts: 3,
            init_std: 1.0,
            log_std_bounds: (-5.0, 1.0),
            obs_clip: 5.0,
        }
    }
}

/// Input sizes fixed by the environment layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub proprio: usize,
    pub history: usize,
    pub scan: usize,
    pub map: usize,
    pub extras: usize,
    pub n_gaits: usize,
    pub n_joints: usize,
}

impl PolicyDims {
    pub fn from_env(env: &EnvConfig, n_gaits: usize) -> Self {
        Self {
            proprio: env.proprio_dim(),
            history: env.history_dim(),
            scan: env.scan_dim(),
            map: env.map_dim(),
            extras: env.extras_dim(),
            n_gaits,
            n_joints: crate::env::N_JOINTS,
        }
    }

    pub fn actor_input(&self) -> usize {
        self.proprio + self.history + self.scan
    }

    pub fn critic_input(&self) -> usize {
        self.map + self.extras
    }
}

/// Running mean and variance (parallel Welford).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub clip: f64,
}

impl Normalizer {
    pub fn new(dim: usize, clip: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
            clip,
        }
    }

    pub fn update(&mut self, rows: &[Vec<f64>]) {
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        let dim = self.mean.len();
        let mut m = vec![0.0; dim];
        for r in rows {
            for (a, x) in m.iter_mut().zip(r) {
                *a += x / n;
            }
        }
        let mut v = vec![0.0; dim];
        for r in rows {
            for ((a, x), mu) in v.iter_mut().zip(r).zip(&m) {
                *a += (x - mu) * (x - mu) / n;
            }
        }
        let total = self.count + n;
        for i in 0..dim {
            let delta = m[i] - self.mean[i];
            let m2 = self.var[i] * self.count + v[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| ((x - m) / (v + 1e-8).sqrt()).clamp(-self.clip, self.clip))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorParams {
    pub scan_encoder: DenseNet,
    pub history_encoder: DenseNet,
    pub trunk: DenseNet,
    pub head: DenseNet,
    pub log_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualModuleParams {
    pub fusion: Fusion,
    pub experts: Vec<DenseNet>,
    pub gate: DenseNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    pub net: DenseNet,
    /// The gait command is appended to the critic input.
    pub with_gait: bool,
}

/// Everything needed to act and to evaluate values.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub dims: PolicyDims,
    pub config: PolicyConfig,
    pub mode: PolicyMode,
    pub actor: ActorParams,
    pub residual: Option<ResidualModuleParams>,
    pub critic: CriticParams,
    pub actor_norm: Normalizer,
    pub critic_norm: Normalizer,
}

/// Cached intermediates of one actor evaluation.
#[derive(Clone, Debug)]
pub struct ActorPass {
    pub features: Vec<f64>,
    pub z_o: Vec<f64>,
    /// Residual output z' (latent fusion) or joint offset (action fusion).
    pub residual: Vec<f64>,
    pub gate: Vec<f64>,
    pub mean: Vec<f64>,
    tapes: Option<ActorTapes>,
}

#[derive(Clone, Debug)]
struct ActorTapes {
    scan: Tape,
    history: Tape,
    trunk: Tape,
    head: Tape,
    experts: Vec<(Vec<f64>, Tape)>,
    gate: Option<Tape>,
}

/// Gradient buffers aligned with [`Policy::actor_slices_mut`].
#[derive(Clone, Debug)]
pub struct ActorGrads {
    pub scan_encoder: Vec<f64>,
    pub history_encoder: Vec<f64>,
    pub trunk: Vec<f64>,
    pub head: Vec<f64>,
    pub log_std: Vec<f64>,
    pub experts: Vec<Vec<f64>>,
    pub gate: Vec<f64>,
}

impl ActorGrads {
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.scan_encoder,
            &mut self.history_encoder,
            &mut self.trunk,
            &mut self.head,
            &mut self.log_std,
        ];
        for e in &mut self.experts {
            v.push(e);
        }
        v.push(&mut self.gate);
        v
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slices_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Whether a parameter group was present in the stage-1 policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    Residual,
}

#[derive(Clone, Debug)]
pub struct ActOutput {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub mean: Vec<f64>,
    pub z_o: Vec<f64>,
    pub residual: Vec<f64>,
    pub gate: Vec<f64>,
}

pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 + 0.5 * LN_2PI + ls).sum()
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(dims: PolicyDims, config: PolicyConfig, rng: &mut R) -> Self {
        let elu = Activation::Elu;
        let scan_encoder = DenseNet::mlp(dims.scan, &config.scan_hidden, config.d_f, elu, elu, rng);
        let history_encoder = DenseNet::mlp(dims.history, &config.history_hidden, config.d_f, elu, elu, rng);
        let trunk = DenseNet::mlp(dims.proprio + 2 * config.d_f, &config.trunk_hidden, config.d_z, elu, elu, rng);
        let mut head = DenseNet::mlp(config.d_z, &[], dims.n_joints, elu, Activation::Identity, rng);
        head.scale_output_layer(0.1);
        let mut critic = DenseNet::mlp(dims.critic_input(), &config.critic_hidden, 1, elu, Activation::Identity, rng);
        critic.scale_output_layer(0.1);
        let log_std = vec![config.init_std.ln(); dims.n_joints];
        Self {
            actor: ActorParams {
                scan_encoder,
                history_encoder,
                trunk,
                head,
                log_std,
            },
            residual: None,
            critic: CriticParams {
                net: critic,
                with_gait: false,
            },
            actor_norm: Normalizer::new(dims.actor_input(), config.obs_clip),
            critic_norm: Normalizer::new(dims.critic_input(), config.obs_clip),
            mode: PolicyMode::stage1(),
            dims,
            config,
        }
    }

    /// Attaches a residual module with zeroed expert output layers and widens
    /// the critic with zero columns for the gait command.
    pub fn attach_residual<R: Rng + ?Sized>(&mut self, fusion: Fusion, n_experts: usize, rng: &mut R) -> Result<()> {
        if n_experts == 0 {
            return Err(Error::InvalidArgument("residual module needs at least one expert".into()));
        }
        if self.residual.is_some() {
            return Err(Error::ModeMismatch("residual module already attached".into()));
        }
        let input = self.feature_dim() + self.dims.n_gaits;
        let out = match fusion {
            Fusion::Latent => self.config.d_z,
            Fusion::Action => self.dims.n_joints,
        };
        let elu = Activation::Elu;
        let experts = (0..n_experts)
            .map(|_| {
                let mut e = DenseNet::mlp(input, &self.config.expert_hidden, out, elu, Activation::Identity, rng);
                e.scale_output_layer(0.0);
                e
            })
            .collect();
        let gate = DenseNet::mlp(input, &self.config.gate_hidden, n_experts, elu, Activation::Identity, rng);
        self.residual = Some(ResidualModuleParams { fusion, experts, gate });
        if !self.critic.with_gait {
            self.critic.net.widen_input(self.dims.n_gaits);
            self.critic.with_gait = true;
        }
        self.mode.stage = 2;
        self.mode.fusion = fusion;
        self.mode.n_experts = n_experts;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.dims.proprio + 2 * self.config.d_f
    }

    fn check_mode(&self) -> Result<()> {
        match (&self.residual, self.mode.residual_active()) {
            (None, true) => Err(Error::ModeMismatch("stage-2 mode without residual parameters".into())),
            (Some(r), true) if r.fusion != self.mode.fusion || r.experts.len() != self.mode.n_experts => {
                Err(Error::ModeMismatch("residual parameters do not match mode".into()))
            }
            _ => Ok(()),
        }
    }

    /// Normalized actor input `[o_t, history, scans]`, scans zeroed when blind.
    pub fn actor_input(&self, bundle: &ObservationBundle) -> Result<Vec<f64>> {
        let a = &bundle.actor;
        let d = &self.dims;
        let check = |ctx, expected, got| {
            if expected != got {
                Err(Error::DimensionMismatch { context: ctx, expected, got })
            } else {
                Ok(())
            }
        };
        check("proprioception", d.proprio, a.proprio.len())?;
        check("history", d.history, a.history.len())?;
        check("scans", d.scan, a.scans.len())?;
        Ok(self.normalize_actor(&raw_actor_input(bundle)))
    }

    pub fn normalize_actor(&self, raw: &[f64]) -> Vec<f64> {
        let mut x = self.actor_norm.apply(raw);
        if self.mode.blind {
            let start = self.dims.proprio + self.dims.history;
            x[start..].fill(0.0);
        }
        x
    }

    /// f_t = [o_t, f^d, f^h] from a normalized actor input.
    pub fn encode_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.actor_pass(x, &[], false)?.features)
    }

    /// Mixture output z' and gate weights for features f_t and gait command.
    pub fn residual_forward(&self, features: &[f64], gait: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let res = self
            .residual
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch("no residual module".into()))?;
        let input = concat(features, gait);
        let logits = res.gate.infer(&input)?;
        let w = softmax(&logits);
        let mut out = vec![0.0; res.experts[0].output_dim()];
        for (e, wi) in res.experts.iter().zip(&w) {
            let z = e.infer(&input)?;
            for (o, v) in out.iter_mut().zip(&z) {
                *o += wi * v;
            }
        }
        Ok((out, w))
    }

    /// Full actor evaluation on a normalized input; `record` keeps tapes for backward.
    pub fn actor_pass(&self, x: &[f64], gait: &[f64], record: bool) -> Result<ActorPass> {
        self.check_mode()?;
        let d = &self.dims;
        let a = &self.actor;
        let (o, rest) = x.split_at(d.proprio);
        let (hist, scan) = rest.split_at(d.history);
        let (f_d, scan_tape) = a.scan_encoder.forward(scan)?;
        let (f_h, hist_tape) = a.history_encoder.forward(hist)?;
        let mut features = Vec::with_capacity(self.feature_dim());
        features.extend_from_slice(o);
        features.extend_from_slice(&f_d);
        features.extend_from_slice(&f_h);
        let (z_o, trunk_tape) = a.trunk.forward(&features)?;

        let mut residual = Vec::new();
        let mut gate = Vec::new();
        let mut expert_tapes = Vec::new();
        let mut gate_tape = None;
        if let (true, Some(res)) = (self.mode.residual_active(), &self.residual) {
            if gait.len() != d.n_gaits {
                return Err(Error::DimensionMismatch {
                    context: "gait command",
                    expected: d.n_gaits,
                    got: gait.len(),
                });
            }
            let input = concat(&features, gait);
            let (logits, gt) = res.gate.forward(&input)?;
            gate = softmax(&logits);
            gate_tape = Some(gt);
            residual = vec![0.0; res.experts[0].output_dim()];
            for (e, wi) in res.experts.iter().zip(&gate) {
                let (z, t) = e.forward(&input)?;
                for (r, v) in residual.iter_mut().zip(&z) {
                    *r += wi * v;
                }
                expert_tapes.push((z, t));
            }
        }

        let latent_fusion = !residual.is_empty() && self.mode.fusion == Fusion::Latent;
        let z = if latent_fusion {
            z_o.iter().zip(&residual).map(|(a, b)| a + b).collect()
        } else {
            z_o.clone()
        };
        let (mut mean, head_tape) = a.head.forward(&z)?;
        if !residual.is_empty() && self.mode.fusion == Fusion::Action {
            for (m, r) in mean.iter_mut().zip(&residual) {
                *m += r;
            }
        }
        let tapes = record.then(|| ActorTapes {
            scan: scan_tape,
            history: hist_tape,
            trunk: trunk_tape,
            head: head_tape,
            experts: expert_tapes,
            gate: gate_tape,
        });
        Ok(ActorPass {
            features,
            z_o,
            residual,
            gate,
            mean,
            tapes,
        })
    }

    pub fn log_std(&self) -> Vec<f64> {
        let (lo, hi) = self.config.log_std_bounds;
        self.actor.log_std.iter().map(|v| v.clamp(lo, hi)).collect()
    }

    /// Samples (or, when `rng` is `None`, returns the mean) for one bundle.
    pub fn act<R: Rng + ?Sized>(&self, bundle: &ObservationBundle, rng: Option<&mut R>) -> Result<ActOutput> {
        let x = self.actor_input(bundle)?;
        self.act_normalized(&x, &bundle.gait, rng)
    }

    pub fn act_normalized<R: Rng + ?Sized>(&self, x: &[f64], gait: &[f64], rng: Option<&mut R>) -> Result<ActOutput> {
        let pass = self.actor_pass(x, gait, false)?;
        let log_std = self.log_std();
        let action: Vec<f64> = match rng {
            Some(rng) => pass
                .mean
                .iter()
                .zip(&log_std)
                .map(|(m, ls)| {
                    let n: f64 = StandardNormal.sample(rng);
                    m + ls.exp() * n
                })
                .collect(),
            None => pass.mean.clone(),
        };
        let log_prob = gaussian_log_prob(&action, &pass.mean, &log_std);
        Ok(ActOutput {
            action,
            log_prob,
            mean: pass.mean,
            z_o: pass.z_o,
            residual: pass.residual,
            gate: pass.gate,
        })
    }

    pub fn zero_actor_grads(&self) -> ActorGrads {
        let (experts, gate) = match &self.residual {
            Some(r) => (r.experts.iter().map(|e| e.zero_grad()).collect(), r.gate.zero_grad()),
            None => (Vec::new(), Vec::new()),
        };
        ActorGrads {
            scan_encoder: self.actor.scan_encoder.zero_grad(),
            history_encoder: self.actor.history_encoder.zero_grad(),
            trunk: self.actor.trunk.zero_grad(),
            head: self.actor.head.zero_grad(),
            log_std: vec![0.0; self.actor.log_std.len()],
            experts,
            gate,
        }
    }

    /// Accumulates parameter gradients of `<grad_mean, mean>` into `grads`.
    pub fn actor_backward(&self, pass: &ActorPass, grad_mean: &[f64], grads: &mut ActorGrads) -> Result<()> {
        let tapes = pass
            .tapes
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("actor pass recorded without tapes".into()))?;
        let a = &self.actor;
        let d_f = self.config.d_f;
        let grad_z = a.head.backward(&tapes.head, grad_mean, &mut grads.head)?;
        let mut grad_features = vec![0.0; self.feature_dim()];

        if let (Some(res), Some(gate_tape)) = (&self.residual, &tapes.gate) {
            let grad_res: &[f64] = match self.mode.fusion {
                Fusion::Latent => &grad_z,
                Fusion::Action => grad_mean,
            };
            let input_dim = res.gate.input_dim();
            let mut grad_input = vec![0.0; input_dim];
            let mut grad_w = vec![0.0; pass.gate.len()];
            for (i, (e, (z, tape))) in res.experts.iter().zip(&tapes.experts).enumerate() {
                grad_w[i] = z.iter().zip(grad_res).map(|(a, b)| a * b).sum();
                let g: Vec<f64> = grad_res.iter().map(|v| v * pass.gate[i]).collect();
                let gi = e.backward(tape, &g, &mut grads.experts[i])?;
                for (a, b) in grad_input.iter_mut().zip(&gi) {
                    *a += b;
                }
            }
            let grad_logits = softmax_backward(&pass.gate, &grad_w);
            let gi = res.gate.backward(gate_tape, &grad_logits, &mut grads.gate)?;
            for (a, b) in grad_input.iter_mut().zip(&gi) {
                *a += b;
            }
            for (a, b) in grad_features.iter_mut().zip(&grad_input) {
                *a += b;
            }
        }
        let gf = a.trunk.backward(&tapes.trunk, &grad_z, &mut grads.trunk)?;
        for (a, b) in grad_features.iter_mut().zip(&gf) {
            *a += b;
        }
        let p = self.dims.proprio;
        a.scan_encoder
            .backward(&tapes.scan, &grad_features[p..p + d_f], &mut grads.scan_encoder)?;
        a.history_encoder
            .backward(&tapes.history, &grad_features[p + d_f..p + 2 * d_f], &mut grads.history_encoder)?;
        Ok(())
    }

    /// Mutable parameter slices in the order of [`ActorGrads::slices_mut`], with their group.
    pub fn actor_slices_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let base = if self.mode.one_stage { ParamGroup::Residual } else { ParamGroup::Base };
        let a = &mut self.actor;
        let mut v: Vec<(ParamGroup, &mut [f64])> = vec![
            (base, a.scan_encoder.params_mut()),
            (base, a.history_encoder.params_mut()),
            (base, a.trunk.params_mut()),
            (base, a.head.params_mut()),
            (base, &mut a.log_std),
        ];
        if let Some(r) = &mut self.residual {
            for e in &mut r.experts {
                v.push((ParamGroup::Residual, e.params_mut()));
            }
            v.push((ParamGroup::Residual, r.gate.params_mut()));
        } else {
            v.push((ParamGroup::Residual, &mut []));
        }
        v
    }

    pub fn critic_input(&self, bundle: &ObservationBundle) -> Result<Vec<f64>> {
        let p = &bundle.privileged;
        if p.elevation.len() != self.dims.map || p.extras.len() != self.dims.extras {
            return Err(Error::DimensionMismatch {
                context: "critic input",
                expected: self.dims.critic_input(),
                got: p.elevation.len() + p.extras.len(),
            });
        }
        let raw = concat(&p.elevation, &p.extras);
        Ok(self.normalize_critic(&raw, &bundle.gait))
    }

    pub fn normalize_critic(&self, raw: &[f64], gait: &[f64]) -> Vec<f64> {
        let mut x = self.critic_norm.apply(raw);
        if self.critic.with_gait {
            x.extend_from_slice(gait);
        }
        x
    }

    pub fn critic_value(&self, bundle: &ObservationBundle) -> Result<f64> {
        let x = self.critic_input(bundle)?;
        Ok(self.critic.net.infer(&x)?[0])
    }

    /// Value for the raw privileged vectors and optional gait command.
    pub fn value_of(&self, elevation: &[f64], extras: &[f64], gait: Option<&[f64]>) -> Result<f64> {
        if self.critic.with_gait != gait.is_some() {
            return Err(Error::ModeMismatch("critic gait input does not match stage".into()));
        }
        let raw = concat(elevation, extras);
        if raw.len() != self.dims.critic_input() {
            return Err(Error::DimensionMismatch {
                context: "critic input",
                expected: self.dims.critic_input(),
                got: raw.len(),
            });
        }
        let x = self.normalize_critic(&raw, gait.unwrap_or(&[]));
        Ok(self.critic.net.infer(&x)?[0])
    }
}

pub fn raw_actor_input(bundle: &ObservationBundle) -> Vec<f64> {
    let a = &bundle.actor;
    let mut x = Vec::with_capacity(a.proprio.len() + a.history.len() + a.scans.len());
    x.extend_from_slice(&a.proprio);
    x.extend_from_slice(&a.history);
    x.extend_from_slice(&a.scans);
    x
}

pub fn raw_critic_input(bundle: &ObservationBundle) -> Vec<f64> {
    concat(&bundle.privileged.elevation, &bundle.privileged.extras)
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// One row of the residual-latent export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub residual: Vec<f64>,
    pub gait: usize,
    pub terrain: String,
    pub gate: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Policy, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = PolicyDims {
            proprio: 5,
            history: 6,
            scan: 4,
            map: 3,
            extras: 4,
            n_gaits: 3,
            n_joints: 2,
        };
        let config = PolicyConfig {
            d_f: 3,
            d_z: 4,
            scan_hidden: vec![5],
            history_hidden: vec![5],
            trunk_hidden: vec![6],
            expert_hidden: vec![5],
            gate_hidden: vec![4],
            critic_hidden: vec![6],
            n_experts: 3,
            ..PolicyConfig::default()
        };
        (Policy::new(dims, config, &mut rng), rng)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn feature_layout() {
        let (p, mut rng) = tiny();
        let x = random_vec(&mut rng, p.dims.actor_input());
        let f = p.encode_features(&x).unwrap();
        assert_eq!(f.len(), 5 + 2 * 3);
        assert_eq!(&f[..5], &x[..5]);
    }

    #[test]
    fn zero_residual_is_identity() {
        let (mut p, mut rng) = tiny();
        let x = random_vec(&mut rng, p.dims.actor_input());
        let before = p.act_normalized::<ChaCha8Rng>(&x, &[], None).unwrap();
        p.attach_residual(Fusion::Latent, 3, &mut rng).unwrap();
        let after = p.act_normalized::<ChaCha8Rng>(&x, &[0.0, 1.0, 0.0], None).unwrap();
        assert_eq!(before.mean, after.mean);
        assert!(after.residual.iter().all(|v| *v == 0.0));
        assert!((after.gate.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_residual_is_mode_error() {
        let (mut p, mut rng) = tiny();
        p.mode.stage = 2;
        let x = random_vec(&mut rng, p.dims.actor_input());
        assert!(matches!(
            p.act_normalized::<ChaCha8Rng>(&x, &[1.0, 0.0, 0.0], None),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        for fusion in [Fusion::Latent, Fusion::Action] {
            let (mut p, mut rng) = tiny();
            p.attach_residual(fusion, 3, &mut rng).unwrap();
            if let Some(r) = &mut p.residual {
                for e in &mut r.experts {
                    e.init_xavier(&mut rng);
                }
            }
            let x = random_vec(&mut rng, p.dims.actor_input());
            let gait = [0.0, 0.0, 1.0];
            let u = random_vec(&mut rng, 2);
            let pass = p.actor_pass(&x, &gait, true).unwrap();
            let mut grads = p.zero_actor_grads();
            p.actor_backward(&pass, &u, &mut grads).unwrap();
            let analytic: Vec<Vec<f64>> = grads.slices_mut().iter().map(|s| s.to_vec()).collect();
            let objective = |p: &Policy| -> f64 {
                let m = p.actor_pass(&x, &gait, false).unwrap().mean;
                m.iter().zip(&u).map(|(a, b)| a * b).sum()
            };
            let n_slices = analytic.len();
            for s in 0..n_slices {
                let len = analytic[s].len();
                for i in (0..len).step_by(3) {
                    let h = 1e-6;
                    let mut q = p.clone();
                    q.actor_slices_mut()[s].1[i] += h;
                    let fp = objective(&q);
                    let mut q = p.clone();
                    q.actor_slices_mut()[s].1[i] -= h;
                    let fm = objective(&q);
                    let fd = (fp - fm) / (2.0 * h);
                    let an = analytic[s][i];
                    let rel = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                    assert!(rel < 1e-4 || (fd - an).abs() < 1e-9, "{fusion:?} slice {s} idx {i}: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn normalizer_matches_batch_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| random_vec(&mut rng, 2).iter().map(|v| 3.0 * v + 1.0).collect()).collect();
        let mut n = Normalizer::new(2, 10.0);
        for chunk in rows.chunks(70) {
            n.update(chunk);
        }
        let mean: f64 = rows.iter().map(|r| r[0]).sum::<f64>() / 300.0;
        let var: f64 = rows.iter().map(|r| (r[0] - mean).powi(2)).sum::<f64>() / 300.0;
        assert!((n.mean[0] - mean).abs() < 1e-12);
        assert!((n.var[0] - var).abs() < 1e-12);
    }

    #[test]
    fn log_prob_closed_form() {
        let lp = gaussian_log_prob(&[0.5], &[0.0], &[0.0]);
        assert!((lp - (-0.125 - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-15);
    }
}
