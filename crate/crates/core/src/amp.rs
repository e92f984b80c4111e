//! Adversarial motion priors: synthetic reference clips, five-frame
//! joint-angle windows, one least-squares discriminator per gait and the
//! gait-routed style reward.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{RobotModel, N_JOINTS};
use crate::error::{Error, Result};
use crate::gait::{Gait, N_GAITS};
use crate::net::{Activation, Adam, AdamConfig, DenseNet};

pub const CLIP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipGait {
    Walk,
    Run,
    HighKnees,
    Squat,
}

impl ClipGait {
    pub const ALL: [ClipGait; 4] = [ClipGait::Walk, ClipGait::Run, ClipGait::HighKnees, ClipGait::Squat];

    pub fn gait(self) -> Gait {
        match self {
            ClipGait::Walk | ClipGait::Run => Gait::WalkRun,
            ClipGait::HighKnees => Gait::HighKnees,
            ClipGait::Squat => Gait::Squat,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClipGait::Walk => "walk",
            ClipGait::Run => "run",
            ClipGait::HighKnees => "high_knees",
            ClipGait::Squat => "squat",
        }
    }
}

impl std::str::FromStr for ClipGait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClipGait::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown clip gait {s:?}")))
    }
}

/// Parameters of the task-space gait generator. The base stays level at
/// `base_height`; each ankle follows a stance/swing loop of length `stride`
/// and the joints come from two-link inverse kinematics with a flat stance foot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub gait: ClipGait,
    /// Gait cycles per second; rounded so a cycle spans whole frames.
    pub frequency: f64,
    pub stride: f64,
    pub base_height: f64,
    /// Peak ankle lift during swing. Ignored when `knee_lift` is set.
    pub clearance: f64,
    /// Target peak swing-knee height above ground (high knees).
    pub knee_lift: Option<f64>,
    pub duty: f64,
    pub cycles: usize,
    pub frame_rate: f64,
}

impl ClipParams {
    pub fn preset(gait: ClipGait) -> Self {
        let base = Self {
            gait,
            frequency: 1.0,
            stride: 0.3,
            base_height: 0.86,
            clearance: 0.08,
            knee_lift: None,
            duty: 0.6,
            cycles: 4,
            frame_rate: 50.0,
        };
        match gait {
            ClipGait::Walk => base,
            ClipGait::Run => Self {
                frequency: 1.25,
                stride: 0.32,
                base_height: 0.84,
                clearance: 0.12,
                duty: 0.4,
                ..base
            },
            ClipGait::HighKnees => Self {
                stride: 0.15,
                knee_lift: Some(0.65),
                duty: 0.5,
                ..base
            },
            ClipGait::Squat => Self {
                stride: 0.25,
                base_height: 0.68,
                clearance: 0.06,
                ..base
            },
        }
    }

    pub fn period_frames(&self) -> usize {
        ((self.frame_rate / self.frequency).round() as usize).max(2)
    }

    /// Forward base speed implied by the stance phase.
    pub fn speed(&self) -> f64 {
        let period = self.period_frames() as f64 / self.frame_rate;
        self.stride / (self.duty * period)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceClip {
    pub format_version: u32,
    pub gait: ClipGait,
    pub gait_id: usize,
    pub frame_rate: f64,
    pub frames: Vec<[f64; N_JOINTS]>,
}

impl ReferenceClip {
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.frame_rate
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let clip: Self = serde_json::from_str(s)?;
        if clip.format_version != CLIP_VERSION {
            return Err(Error::FormatVersion {
                found: clip.format_version,
                expected: CLIP_VERSION,
            });
        }
        Ok(clip)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Ankle height above ground when the flat sole touches it.
fn ankle_rest_height(model: &RobotModel) -> f64 {
    -model.heel[1].max(model.toe[1])
}

/// Hip/knee/ankle angles placing the ankle at `(ax, az)` relative to the
/// hip with the foot flat and zero pitch.
pub fn leg_ik(model: &RobotModel, ax: f64, az: f64) -> Result<[f64; 3]> {
    let (l1, l2) = (model.thigh, model.shank);
    let d = ax.hypot(az);
    if d > l1 + l2 || d < (l1 - l2).abs() || d == 0.0 {
        return Err(Error::ClipLimits(format!("ankle target ({ax:.3}, {az:.3}) out of reach")));
    }
    let knee = ((d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0).acos();
    let alpha = ax.atan2(-az);
    let beta = ((l1 * l1 + d * d - l2 * l2) / (2.0 * l1 * d)).clamp(-1.0, 1.0).acos();
    let thigh = alpha + beta;
    let shank = thigh - knee;
    Ok([thigh, knee, -shank])
}

fn swing_shape(s: f64) -> (f64, f64) {
    let x = 0.5 - 0.5 * (std::f64::consts::PI * s).cos();
    let z = (std::f64::consts::PI * s).sin();
    (x, z)
}

/// Ankle target relative to the hip at gait phase `phase` in `[0, 1)`.
fn ankle_target(p: &ClipParams, rest: f64, clearance: f64, phase: f64) -> (f64, f64) {
    let half = 0.5 * p.stride;
    if phase < p.duty {
        (half - p.stride * phase / p.duty, rest - p.base_height)
    } else {
        let (sx, sz) = swing_shape((phase - p.duty) / (1.0 - p.duty));
        (-half + p.stride * sx, rest + clearance * sz - p.base_height)
    }
}

fn pose_at(p: &ClipParams, model: &RobotModel, clearance: f64, phase: f64) -> Result<[f64; N_JOINTS]> {
    let rest = ankle_rest_height(model);
    let mut q = [0.0; N_JOINTS];
    for leg in 0..2 {
        let ph = (phase + 0.5 * leg as f64).rem_euclid(1.0);
        let (ax, az) = ankle_target(p, rest, clearance, ph);
        let mut j = leg_ik(model, ax, az)?;
        if ph >= p.duty {
            // The swing foot may tilt once the flat-foot ankle angle leaves the soft range.
            let (lo, hi) = model.soft_limits(leg * 3 + 2);
            j[2] = j[2].clamp(lo, hi);
        }
        q[leg * 3..leg * 3 + 3].copy_from_slice(&j);
    }
    Ok(q)
}

fn peak_knee_height(p: &ClipParams, model: &RobotModel, clearance: f64) -> Result<f64> {
    let n = p.period_frames();
    let mut best = f64::NEG_INFINITY;
    for k in 0..n {
        let q = pose_at(p, model, clearance, k as f64 / n as f64)?;
        for leg in 0..2 {
            let thigh = q[leg * 3];
            best = best.max(p.base_height - model.thigh * thigh.cos());
        }
    }
    Ok(best)
}

/// Generates a periodic clip; `seed` selects the starting phase in whole frames.
pub fn gen_reference_clip(params: &ClipParams, model: &RobotModel, seed: u64) -> Result<ReferenceClip> {
    if !(params.duty > 0.0 && params.duty < 1.0) || params.cycles == 0 || !(params.frequency > 0.0) {
        return Err(Error::InvalidArgument("clip needs 0 < duty < 1, cycles >= 1, frequency > 0".into()));
    }
    let period = params.period_frames();
    let clearance = match params.knee_lift {
        Some(target) => solve_clearance(params, model, target)?,
        None => params.clearance,
    };
    let offset = (seed % period as u64) as usize;
    let total = (params.cycles * period).max(5);
    let mut frames = Vec::with_capacity(total);
    for k in 0..total {
        let phase = ((k + offset) % period) as f64 / period as f64;
        let q = pose_at(params, model, clearance, phase)?;
        for (j, v) in q.iter().enumerate() {
            let lo = RobotModel::per_joint(&model.joint_lower, j);
            let hi = RobotModel::per_joint(&model.joint_upper, j);
            if *v < lo || *v > hi {
                return Err(Error::ClipLimits(format!(
                    "{} frame {k}: joint {j} = {v:.3} outside [{lo}, {hi}]",
                    params.gait.as_str()
                )));
            }
        }
        frames.push(q);
    }
    Ok(ReferenceClip {
        format_version: CLIP_VERSION,
        gait: params.gait,
        gait_id: params.gait.gait().index(),
        frame_rate: params.frame_rate,
        frames,
    })
}

/// Ankle clearance whose peak knee height equals `target`, by bisection.
fn solve_clearance(p: &ClipParams, model: &RobotModel, target: f64) -> Result<f64> {
    let rest = ankle_rest_height(model);
    let mut lo = 0.0;
    let mut hi = p.base_height - rest;
    let max = reachable_clearance(p, model, hi)?;
    hi = max;
    if peak_knee_height(p, model, lo)? > target || peak_knee_height(p, model, hi)? < target {
        return Err(Error::ClipLimits(format!("knee lift {target} m not reachable")));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if peak_knee_height(p, model, mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn reachable_clearance(p: &ClipParams, model: &RobotModel, mut c: f64) -> Result<f64> {
    for _ in 0..60 {
        if peak_knee_height(p, model, c).is_ok() {
            return Ok(c);
        }
        c *= 0.9;
    }
    Err(Error::ClipLimits("no reachable swing clearance".into()))
}

/// Stride-1 sliding windows of `len` consecutive frames, flattened frame by frame.
pub fn window_stream(frames: &[[f64; N_JOINTS]], len: usize) -> Vec<Vec<f64>> {
    if len == 0 || frames.len() < len {
        return Vec::new();
    }
    frames
        .windows(len)
        .map(|w| w.iter().flatten().copied().collect())
        .collect()
}

/// `max(0, 1 - 0.25 (d - 1)^2)`.
pub fn style_from_output(d: f64) -> f64 {
    (1.0 - 0.25 * (d - 1.0) * (d - 1.0)).max(0.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub real: f64,
    pub fake: f64,
    pub penalty: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
    pub grad_norm_real: f64,
}

/// Least-squares loss with the input-gradient-norm penalty on real windows.
/// With `grads`, the parameter gradient of the total loss is added into it.
pub fn discriminator_loss(
    net: &DenseNet,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    alpha: f64,
    mut grads: Option<&mut [f64]>,
) -> Result<LossParts> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidArgument("discriminator loss needs non-empty batches".into()));
    }
    let nr = real.len() as f64;
    let nf = fake.len() as f64;
    let mut parts = LossParts::default();
    let mut scratch = net.zero_grad();
    for x in real {
        let (y, tape) = net.forward(x)?;
        let d = y[0];
        parts.real += (d - 1.0) * (d - 1.0) / nr;
        parts.mean_real += d / nr;
        let g = net.backward(&tape, &[1.0], &mut scratch)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        parts.penalty += 0.5 * alpha * norm / nr;
        parts.grad_norm_real += norm / nr;
        if let Some(grads) = grads.as_deref_mut() {
            net.backward(&tape, &[2.0 * (d - 1.0) / nr], grads)?;
            if alpha != 0.0 && norm > 0.0 {
                let u: Vec<f64> = g.iter().map(|v| v / norm).collect();
                net.input_gradient_projection(x, &u, 0.5 * alpha / nr, grads)?;
            }
        }
    }
    for x in fake {
        let (y, tape) = net.forward(x)?;
        let d = y[0];
        parts.fake += (d + 1.0) * (d + 1.0) / nf;
        parts.mean_fake += d / nf;
        if let Some(grads) = grads.as_deref_mut() {
            net.backward(&tape, &[2.0 * (d + 1.0) / nf], grads)?;
        }
    }
    parts.total = parts.real + parts.fake + parts.penalty;
    Ok(parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmpConfig {
    pub window: usize,
    pub hidden: Vec<usize>,
    pub grad_penalty: f64,
    pub learning_rate: f64,
    pub updates_per_iteration: usize,
    pub batch_size: usize,
    pub policy_buffer: usize,
    /// Discriminator steps on stage-1 behavior before stage 2 starts.
    pub warmup_updates: usize,
    /// Rollouts collected for the warm-up.
    pub warmup_rollouts: usize,
    pub clips: Vec<ClipParams>,
}

impl Default for AmpConfig {
    fn default() -> Self {
        Self {
            window: 5,
            hidden: vec![64, 64],
            grad_penalty: 10.0,
            learning_rate: 1e-4,
            updates_per_iteration: 1,
            batch_size: 256,
            policy_buffer: 4096,
            warmup_updates: 200,
            warmup_rollouts: 2,
            clips: ClipGait::ALL.iter().map(|g| ClipParams::preset(*g)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorStats {
    pub gait: usize,
    pub loss: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
    pub grad_norm_real: f64,
    pub updates: usize,
}

/// Discriminators, their optimizers, reference windows per gait and a FIFO
/// of recent policy windows per gait.
#[derive(Clone, Debug)]
pub struct AmpState {
    pub config: AmpConfig,
    pub discriminators: Vec<DenseNet>,
    pub optimizers: Vec<Adam>,
    pub references: Vec<Vec<Vec<f64>>>,
    pub policy_windows: Vec<VecDeque<Vec<f64>>>,
}

impl AmpState {
    pub fn new<R: Rng + ?Sized>(config: AmpConfig, model: &RobotModel, seed: u64, rng: &mut R) -> Result<Self> {
        let mut references = vec![Vec::new(); N_GAITS];
        for (k, params) in config.clips.iter().enumerate() {
            let clip = gen_reference_clip(params, model, seed.wrapping_add(k as u64))?;
            references[clip.gait_id].extend(window_stream(&clip.frames, config.window));
        }
        Self::from_references(config, references, rng)
    }

    pub fn from_references<R: Rng + ?Sized>(
        config: AmpConfig,
        references: Vec<Vec<Vec<f64>>>,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = config.window * N_JOINTS;
        let adam = AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        };
        let discriminators: Vec<DenseNet> = (0..references.len())
            .map(|_| DenseNet::mlp(dim, &config.hidden, 1, Activation::Elu, Activation::Identity, rng))
            .collect();
        let optimizers = discriminators.iter().map(|d| Adam::new(d.param_count(), adam)).collect();
        Ok(Self {
            policy_windows: vec![VecDeque::new(); references.len()],
            config,
            discriminators,
            optimizers,
            references,
        })
    }

    /// Style reward from the discriminator of the commanded gait only.
    pub fn style_reward(&self, window: &[f64], gait: &[f64]) -> Result<f64> {
        let i = crate::env::argmax(gait);
        let d = self
            .discriminators
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no discriminator for gait {i}")))?;
        Ok(style_from_output(d.infer(window)?[0]))
    }

    pub fn discriminator_output(&self, gait: usize, window: &[f64]) -> Result<f64> {
        Ok(self.discriminators[gait].infer(window)?[0])
    }

    /// Pushes fresh policy windows and runs the configured number of steps.
    pub fn update<R: Rng + ?Sized>(&mut self, windows: &[Vec<Vec<f64>>], rng: &mut R) -> Result<Vec<DiscriminatorStats>> {
        self.push_windows(windows);
        self.train(self.config.updates_per_iteration, rng)
    }

    pub fn push_windows(&mut self, windows: &[Vec<Vec<f64>>]) {
        for (buf, fresh) in self.policy_windows.iter_mut().zip(windows) {
            for w in fresh {
                buf.push_back(w.clone());
            }
            while buf.len() > self.config.policy_buffer {
                buf.pop_front();
            }
        }
    }

    /// `steps` Adam updates per discriminator that has both reference and
    /// policy windows; the others are skipped.
    pub fn train<R: Rng + ?Sized>(&mut self, steps: usize, rng: &mut R) -> Result<Vec<DiscriminatorStats>> {
        let mut stats = Vec::new();
        for i in 0..self.discriminators.len() {
            let (refs, fakes) = (&self.references[i], &self.policy_windows[i]);
            if refs.is_empty() || fakes.is_empty() {
                continue;
            }
            let mut s = DiscriminatorStats {
                gait: i,
                ..DiscriminatorStats::default()
            };
            for _ in 0..steps {
                let b = self.config.batch_size.max(1);
                let real: Vec<Vec<f64>> = (0..b).map(|_| refs[rng.random_range(0..refs.len())].clone()).collect();
                let fake: Vec<Vec<f64>> = (0..b).map(|_| fakes[rng.random_range(0..fakes.len())].clone()).collect();
                let d = &mut self.discriminators[i];
                let mut grads = d.zero_grad();
                let parts = discriminator_loss(d, &real, &fake, self.config.grad_penalty, Some(&mut grads))?;
                if !parts.total.is_finite() {
                    continue;
                }
                if self.optimizers[i].step(d.params_mut(), &grads).is_err() {
                    continue;
                }
                s.loss = parts.total;
                s.mean_real = parts.mean_real;
                s.mean_fake = parts.mean_fake;
                s.grad_norm_real = parts.grad_norm_real;
                s.updates += 1;
            }
            stats.push(s);
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ik_round_trip() {
        let m = RobotModel::default();
        let q = leg_ik(&m, 0.1, -0.8).unwrap();
        let pts = m.leg_points([0.0, 0.0], 0.0, &q);
        assert!((pts.ankle[0] - 0.1).abs() < 1e-12 && (pts.ankle[1] + 0.8).abs() < 1e-12);
        assert!(pts.foot_angle.abs() < 1e-12);
    }

    #[test]
    fn presets_are_valid() {
        let m = RobotModel::default();
        for g in ClipGait::ALL {
            let clip = gen_reference_clip(&ClipParams::preset(g), &m, 0).unwrap();
            assert!(clip.frames.len() >= 5);
        }
    }

    #[test]
    fn unreachable_stride_is_error() {
        let m = RobotModel::default();
        let p = ClipParams {
            stride: 2.0,
            ..ClipParams::preset(ClipGait::Walk)
        };
        assert!(matches!(gen_reference_clip(&p, &m, 0), Err(Error::ClipLimits(_))));
    }

    #[test]
    fn style_values() {
        assert_eq!(style_from_output(1.0), 1.0);
        assert_eq!(style_from_output(-1.0), 0.0);
        assert_eq!(style_from_output(0.0), 0.75);
        assert_eq!(style_from_output(3.0), 0.0);
    }

    #[test]
    fn windows_count() {
        let frames: Vec<[f64; N_JOINTS]> = (0..9).map(|k| [k as f64; N_JOINTS]).collect();
        let w = window_stream(&frames, 5);
        assert_eq!(w.len(), 5);
        assert_eq!(w[2][0], 2.0);
        assert_eq!(w[2][N_JOINTS * 4], 6.0);
        assert!(window_stream(&frames[..4], 5).is_empty());
    }

    #[test]
    fn routing_ignores_other_discriminators() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut amp = AmpState::from_references(AmpConfig::default(), vec![vec![vec![0.0; 30]]; 3], &mut rng).unwrap();
        let w = vec![0.1; 30];
        let gait = [0.0, 1.0, 0.0];
        let before = amp.style_reward(&w, &gait).unwrap();
        amp.discriminators[0].init_xavier(&mut rng);
        amp.discriminators[2].params_mut().fill(3.0);
        assert_eq!(before, amp.style_reward(&w, &gait).unwrap());
    }
}
