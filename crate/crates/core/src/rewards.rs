//! Locomotion, gait and style reward terms and their composition.
//!
//! Planar notes: linear-velocity tracking uses forward base speed, yaw
//! tracking, heading (`cheat`) and `y_offset` use the yaw proxy, the `xy`
//! angular velocity is the pitch rate, and the feet lateral distance is the
//! fixed hip width. The robot has no arms, so `arm_deviation` is always 0.

use serde::{Deserialize, Serialize};

use crate::env::{BipedState, CommandState, RobotModel, N_JOINTS};
use crate::gait::Gait;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    TrackLinVel,
    TrackAngVel,
    JointAcc,
    JointVel,
    ActionRate,
    ActionSmoothness,
    AngVelXy,
    JointPower,
    FeetStumble,
    ArmDeviation,
    JointPosLimits,
    JointVelLimits,
    TorqueLimits,
    FeetLateralDist,
    FeetSlippage,
    FeetForce,
    Collision,
    Stuck,
    Cheat,
    YOffset,
    KneeHeight,
    SquatHeight,
    Style,
}

pub const N_TERMS: usize = 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Locomotion,
    Gait,
    Style,
}

impl Term {
    pub const ALL: [Term; N_TERMS] = [
        Term::TrackLinVel,
        Term::TrackAngVel,
        Term::JointAcc,
        Term::JointVel,
        Term::ActionRate,
        Term::ActionSmoothness,
        Term::AngVelXy,
        Term::JointPower,
        Term::FeetStumble,
        Term::ArmDeviation,
        Term::JointPosLimits,
        Term::JointVelLimits,
        Term::TorqueLimits,
        Term::FeetLateralDist,
        Term::FeetSlippage,
        Term::FeetForce,
        Term::Collision,
        Term::Stuck,
        Term::Cheat,
        Term::YOffset,
        Term::KneeHeight,
        Term::SquatHeight,
        Term::Style,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn group(self) -> Group {
        match self {
            Term::KneeHeight | Term::SquatHeight => Group::Gait,
            Term::Style => Group::Style,
            _ => Group::Locomotion,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Term::TrackLinVel => "track_lin_vel",
            Term::TrackAngVel => "track_ang_vel",
            Term::JointAcc => "joint_acc",
            Term::JointVel => "joint_vel",
            Term::ActionRate => "action_rate",
            Term::ActionSmoothness => "action_smoothness",
            Term::AngVelXy => "ang_vel_xy",
            Term::JointPower => "joint_power",
            Term::FeetStumble => "feet_stumble",
            Term::ArmDeviation => "arm_deviation",
            Term::JointPosLimits => "joint_pos_limits",
            Term::JointVelLimits => "joint_vel_limits",
            Term::TorqueLimits => "torque_limits",
            Term::FeetLateralDist => "feet_lateral_dist",
            Term::FeetSlippage => "feet_slippage",
            Term::FeetForce => "feet_force",
            Term::Collision => "collision",
            Term::Stuck => "stuck",
            Term::Cheat => "cheat",
            Term::YOffset => "y_offset",
            Term::KneeHeight => "knee_height",
            Term::SquatHeight => "squat_height",
            Term::Style => "style",
        }
    }
}

/// One weight per table row, as printed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub track_lin_vel: f64,
    pub track_ang_vel: f64,
    pub joint_acc: f64,
    pub joint_vel: f64,
    pub action_rate: f64,
    pub action_smoothness: f64,
    pub ang_vel_xy: f64,
    pub joint_power: f64,
    pub feet_stumble: f64,
    pub arm_deviation: f64,
    pub joint_pos_limits: f64,
    pub joint_vel_limits: f64,
    pub torque_limits: f64,
    pub feet_lateral_dist: f64,
    pub feet_slippage: f64,
    pub feet_force: f64,
    pub collision: f64,
    pub stuck: f64,
    pub cheat: f64,
    pub y_offset: f64,
    pub knee_height: f64,
    pub squat_height: f64,
    pub style: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            track_lin_vel: 2.0,
            track_ang_vel: 2.0,
            joint_acc: -5e-7,
            joint_vel: -1e-3,
            action_rate: -0.03,
            action_smoothness: -0.05,
            ang_vel_xy: -0.05,
            joint_power: -2.5e-5,
            feet_stumble: -1.0,
            arm_deviation: -0.5,
            joint_pos_limits: -2.0,
            joint_vel_limits: -1.0,
            torque_limits: -1.0,
            feet_lateral_dist: 0.5,
            feet_slippage: -0.25,
            feet_force: -2.5e-4,
            collision: -15.0,
            stuck: -1.0,
            cheat: -2.0,
            y_offset: -2.0,
            knee_height: 2.0,
            squat_height: 2.0,
            style: 5.0,
        }
    }
}

impl RewardWeights {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::TrackLinVel => self.track_lin_vel,
            Term::TrackAngVel => self.track_ang_vel,
            Term::JointAcc => self.joint_acc,
            Term::JointVel => self.joint_vel,
            Term::ActionRate => self.action_rate,
            Term::ActionSmoothness => self.action_smoothness,
            Term::AngVelXy => self.ang_vel_xy,
            Term::JointPower => self.joint_power,
            Term::FeetStumble => self.feet_stumble,
            Term::ArmDeviation => self.arm_deviation,
            Term::JointPosLimits => self.joint_pos_limits,
            Term::JointVelLimits => self.joint_vel_limits,
            Term::TorqueLimits => self.torque_limits,
            Term::FeetLateralDist => self.feet_lateral_dist,
            Term::FeetSlippage => self.feet_slippage,
            Term::FeetForce => self.feet_force,
            Term::Collision => self.collision,
            Term::Stuck => self.stuck,
            Term::Cheat => self.cheat,
            Term::YOffset => self.y_offset,
            Term::KneeHeight => self.knee_height,
            Term::SquatHeight => self.squat_height,
            Term::Style => self.style,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Locomotion terms only.
    Locomotion,
    /// Locomotion, style and gait terms.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub tracking_sigma: f64,
    pub knee_target: f64,
    pub squat_target: f64,
    pub knee_sigma: f64,
    /// Per-foot force threshold as a multiple of half the standing weight.
    pub feet_force_factor: f64,
    pub feet_lateral_min: f64,
    pub stuck_speed: f64,
    pub stuck_command: f64,
    pub cheat_heading: f64,
    /// Apply the squat and feet-lateral rows with their printed signs
    /// instead of as penalties.
    pub literal_signs: bool,
    pub disabled: Vec<Term>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            tracking_sigma: 0.25,
            knee_target: 0.65,
            squat_target: 0.68,
            knee_sigma: 0.25,
            feet_force_factor: 1.5,
            feet_lateral_min: 0.18,
            stuck_speed: 0.1,
            stuck_command: 0.2,
            cheat_heading: 1.0,
            literal_signs: false,
            disabled: Vec::new(),
        }
    }
}

impl RewardConfig {
    /// Weight actually multiplied onto the raw value of `term`.
    pub fn effective_weight(&self, term: Term) -> f64 {
        let w = self.weights.get(term);
        match term {
            Term::SquatHeight if !self.literal_signs => -w.abs(),
            _ => w,
        }
    }

    pub fn enabled(&self, term: Term, stage: Stage) -> bool {
        if self.disabled.contains(&term) {
            return false;
        }
        stage == Stage::Full || term.group() == Group::Locomotion
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub raw: [f64; N_TERMS],
    pub weighted: [f64; N_TERMS],
    pub locomotion: f64,
    pub style: f64,
    pub gait: f64,
    pub total: f64,
}

impl Default for RewardBreakdown {
    fn default() -> Self {
        Self {
            raw: [0.0; N_TERMS],
            weighted: [0.0; N_TERMS],
            locomotion: 0.0,
            style: 0.0,
            gait: 0.0,
            total: 0.0,
        }
    }
}

impl RewardBreakdown {
    pub fn raw(&self, term: Term) -> f64 {
        self.raw[term.index()]
    }

    pub fn weighted(&self, term: Term) -> f64 {
        self.weighted[term.index()]
    }

    fn set(&mut self, cfg: &RewardConfig, term: Term, raw: f64) {
        self.raw[term.index()] = raw;
        self.weighted[term.index()] = cfg.effective_weight(term) * raw;
    }

    pub fn named(&self) -> Vec<(&'static str, f64)> {
        Term::ALL.iter().map(|t| (t.name(), self.weighted(*t))).collect()
    }
}

/// Actions `(a_t, a_{t-1}, a_{t-2})`.
pub type ActionHistory<'a> = (&'a [f64; N_JOINTS], &'a [f64; N_JOINTS], &'a [f64; N_JOINTS]);

fn sq(x: f64) -> f64 {
    x * x
}

/// Fills the locomotion rows of `out`.
pub fn locomotion_rewards(
    state: &BipedState,
    commands: &CommandState,
    actions: ActionHistory,
    robot: &RobotModel,
    cfg: &RewardConfig,
    out: &mut RewardBreakdown,
) {
    let (a0, a1, a2) = actions;
    let sigma = cfg.tracking_sigma;
    out.set(cfg, Term::TrackLinVel, (-sq(commands.lin_vel - state.base_vel[0]) / sigma).exp());
    out.set(cfg, Term::TrackAngVel, (-sq(commands.yaw_rate - state.yaw_rate) / sigma).exp());

    let mut acc = 0.0;
    let mut vel = 0.0;
    let mut rate = 0.0;
    let mut smooth = 0.0;
    let mut power = 0.0;
    let mut pos_out = 0.0;
    let mut vel_out = 0.0;
    let mut tau_out = 0.0;
    for j in 0..N_JOINTS {
        acc += sq(state.joint_acc[j]);
        vel += sq(state.joint_vel[j]);
        rate += sq(a0[j] - a1[j]);
        smooth += sq(a0[j] - 2.0 * a1[j] + a2[j]);
        power += state.joint_torque[j].abs() * state.joint_vel[j].abs();
        let (lo, hi) = robot.soft_limits(j);
        pos_out += (lo - state.joint_pos[j]).max(0.0) + (state.joint_pos[j] - hi).max(0.0);
        let v_max = RobotModel::per_joint(&robot.velocity_limit, j) * robot.soft_limit_fraction;
        vel_out += (state.joint_vel[j].abs() - v_max).max(0.0);
        let t_max = RobotModel::per_joint(&robot.torque_limit, j) * robot.soft_limit_fraction;
        tau_out += (state.joint_torque[j].abs() - t_max).max(0.0);
    }
    out.set(cfg, Term::JointAcc, acc);
    out.set(cfg, Term::JointVel, vel);
    out.set(cfg, Term::ActionRate, rate);
    out.set(cfg, Term::ActionSmoothness, smooth);
    out.set(cfg, Term::AngVelXy, sq(state.pitch_rate));
    out.set(cfg, Term::JointPower, power);

    let loaded = |f: &[f64; 2]| f[0] != 0.0 || f[1] != 0.0;
    let stumble = state
        .foot_force
        .iter()
        .any(|f| loaded(f) && f[0].abs() >= 3.0 * f[1].abs());
    out.set(cfg, Term::FeetStumble, if stumble { 1.0 } else { 0.0 });
    out.set(cfg, Term::ArmDeviation, 0.0);
    out.set(cfg, Term::JointPosLimits, pos_out);
    out.set(cfg, Term::JointVelLimits, vel_out);
    out.set(cfg, Term::TorqueLimits, tau_out);

    let lateral = robot.hip_width - cfg.feet_lateral_min;
    out.set(
        cfg,
        Term::FeetLateralDist,
        if cfg.literal_signs { lateral } else { lateral.min(0.0) },
    );

    let mut slip = 0.0;
    let mut force = 0.0;
    let f_min = cfg.feet_force_factor * 0.5 * robot.base_mass * robot.gravity;
    for leg in 0..2 {
        if state.foot_contact[leg] {
            slip += state.foot_vel[leg][0].hypot(state.foot_vel[leg][1]);
        }
        force += (state.foot_force[leg][1] - f_min).max(0.0);
    }
    out.set(cfg, Term::FeetSlippage, slip);
    out.set(cfg, Term::FeetForce, force);
    out.set(cfg, Term::Collision, state.collisions as f64);

    let speed = state.base_vel[0].abs();
    let cmd = commands.lin_vel.hypot(commands.yaw_rate);
    let stuck = speed <= cfg.stuck_speed && cmd >= cfg.stuck_command;
    out.set(cfg, Term::Stuck, if stuck { 1.0 } else { 0.0 });
    out.set(cfg, Term::Cheat, if state.yaw.abs() > cfg.cheat_heading { 1.0 } else { 0.0 });
    out.set(cfg, Term::YOffset, state.lateral.abs());
}

/// Fills the gait rows of `out`; only the commanded gait's row is nonzero.
pub fn gait_rewards(state: &BipedState, gait: &[f64], cfg: &RewardConfig, out: &mut RewardBreakdown) {
    out.set(cfg, Term::KneeHeight, 0.0);
    out.set(cfg, Term::SquatHeight, 0.0);
    match Gait::from_index(crate::env::argmax(gait)) {
        Some(Gait::HighKnees) => {
            let h = state.knee_height[0].max(state.knee_height[1]);
            out.set(cfg, Term::KneeHeight, (-(cfg.knee_target - h).abs() / cfg.knee_sigma).exp());
        }
        Some(Gait::Squat) => {
            out.set(cfg, Term::SquatHeight, sq(cfg.squat_target - state.base_height));
        }
        _ => {}
    }
}

/// Style row from the pre-weight style reward of the commanded gait's discriminator.
pub fn style_reward_term(style: f64, cfg: &RewardConfig, out: &mut RewardBreakdown) {
    out.set(cfg, Term::Style, style);
}

/// Zeroes terms masked for `stage`, then sums groups and the total.
pub fn total_reward(out: &mut RewardBreakdown, cfg: &RewardConfig, stage: Stage) -> f64 {
    let (mut l, mut s, mut g) = (0.0, 0.0, 0.0);
    for term in Term::ALL {
        let i = term.index();
        if !cfg.enabled(term, stage) {
            out.weighted[i] = 0.0;
        }
        match term.group() {
            Group::Locomotion => l += out.weighted[i],
            Group::Gait => g += out.weighted[i],
            Group::Style => s += out.weighted[i],
        }
    }
    out.locomotion = l;
    out.gait = g;
    out.style = s;
    out.total = l + s + g;
    out.total
}

/// Full per-step reward: locomotion, gait and style rows, masked for `stage`.
pub fn compute_rewards(
    state: &BipedState,
    commands: &CommandState,
    actions: ActionHistory,
    robot: &RobotModel,
    style: f64,
    cfg: &RewardConfig,
    stage: Stage,
) -> RewardBreakdown {
    let mut out = RewardBreakdown::default();
    locomotion_rewards(state, commands, actions, robot, cfg, &mut out);
    gait_rewards(state, &commands.gait, cfg, &mut out);
    style_reward_term(style, cfg, &mut out);
    total_reward(&mut out, cfg, stage);
    out
}
