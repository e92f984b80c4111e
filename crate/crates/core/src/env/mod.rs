//! Planar-biped terrain environment: reset/step, sensing, pushes and
//! termination on top of [`biped`] dynamics and [`terrain`] heightfields.

pub mod biped;
pub mod dr;
pub mod terrain;
pub mod trace;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use biped::{BipedState, RobotModel, N_JOINTS};
pub use dr::{sample_dr, DrConfig, DrRanges};
pub use terrain::{
    build_benchmark_track, generate_terrain, BenchmarkMode, Heightfield, TerrainConfig, TerrainKind,
};

use crate::error::{Error, Result};
use crate::rewards::RewardBreakdown;

/// Layout of the proprioceptive vector o_t = [omega, g, c^v, theta, theta_dot, a_{t-1}].
pub mod layout {
    use super::N_JOINTS;
    use std::ops::Range;

    pub const OMEGA: Range<usize> = 0..2;
    pub const GRAVITY: Range<usize> = 2..4;
    pub const COMMAND: Range<usize> = 4..6;
    pub const JOINT_POS: Range<usize> = 6..6 + N_JOINTS;
    pub const JOINT_VEL: Range<usize> = 6 + N_JOINTS..6 + 2 * N_JOINTS;
    pub const LAST_ACTION: Range<usize> = 6 + 2 * N_JOINTS..6 + 3 * N_JOINTS;
    pub const PROPRIO_DIM: usize = 6 + 3 * N_JOINTS;
    /// Privileged extras before the copied o_t and history: foot positions
    /// (4), contacts (2), normal forces (2), true base velocity (2), base
    /// height (1), DR parameters (8).
    pub const EXTRAS_HEAD: usize = 19;
}

pub const OBSERVATION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub scan_points: usize,
    pub scan_lookahead: f64,
    pub scan_clip: (f64, f64),
    pub map_points: usize,
    pub map_half_extent: f64,
    pub history_len: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            scan_points: 16,
            scan_lookahead: 1.2,
            scan_clip: (-2.0, 1.0),
            map_points: 11,
            map_half_extent: 0.5,
            history_len: 5,
        }
    }
}

impl SensorConfig {
    /// Forward offsets of the scan samples from the base, evenly spaced up to the lookahead.
    pub fn scan_offsets(&self) -> Vec<f64> {
        let k = self.scan_points as f64;
        (1..=self.scan_points).map(|i| self.scan_lookahead * i as f64 / k).collect()
    }

    pub fn map_offsets(&self) -> Vec<f64> {
        if self.map_points == 1 {
            return vec![0.0];
        }
        let n = (self.map_points - 1) as f64;
        (0..self.map_points)
            .map(|i| -self.map_half_extent + 2.0 * self.map_half_extent * i as f64 / n)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminationConfig {
    pub min_base_height: f64,
    pub max_pitch: f64,
    /// A sole point this far below the rim over void counts as falling in.
    pub void_margin: f64,
    /// Knee penetration into terrain that ends the episode as a collision.
    pub knee_penetration: f64,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        Self {
            min_base_height: 0.5,
            max_pitch: 0.8,
            void_margin: 0.05,
            knee_penetration: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PushSchedule {
    pub enabled: bool,
    pub interval: f64,
    /// Horizontal velocity impulses are drawn from `[-max_velocity, max_velocity]`.
    pub max_velocity: f64,
}

impl Default for PushSchedule {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 8.0,
            max_velocity: 0.5,
        }
    }
}

impl PushSchedule {
    /// True when `step_count` control steps of length `dt` land on a push instant.
    pub fn due(&self, step_count: u64, dt: f64) -> bool {
        if !self.enabled || step_count == 0 {
            return false;
        }
        let every = (self.interval / dt).round() as u64;
        every > 0 && step_count % every == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub robot: RobotModel,
    pub terrain: TerrainConfig,
    pub sensors: SensorConfig,
    pub termination: TerminationConfig,
    pub push: PushSchedule,
    pub control_dt: f64,
    pub substeps: usize,
    pub episode_length: f64,
    pub action_bound: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            robot: RobotModel::default(),
            terrain: TerrainConfig::default(),
            sensors: SensorConfig::default(),
            termination: TerminationConfig::default(),
            push: PushSchedule::default(),
            control_dt: 0.02,
            substeps: 4,
            episode_length: 20.0,
            action_bound: 10.0,
        }
    }
}

impl EnvConfig {
    pub fn proprio_dim(&self) -> usize {
        layout::PROPRIO_DIM
    }

    pub fn history_dim(&self) -> usize {
        self.sensors.history_len * layout::PROPRIO_DIM
    }

    pub fn scan_dim(&self) -> usize {
        2 * self.sensors.scan_points
    }

    pub fn map_dim(&self) -> usize {
        self.sensors.map_points
    }

    pub fn extras_dim(&self) -> usize {
        layout::EXTRAS_HEAD + layout::PROPRIO_DIM + self.history_dim()
    }
}

/// Velocity command plus one-hot gait command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandState {
    pub lin_vel: f64,
    pub yaw_rate: f64,
    pub gait: Vec<f64>,
}

impl CommandState {
    pub fn new(lin_vel: f64, yaw_rate: f64, gait: usize, n_gaits: usize) -> Self {
        Self {
            lin_vel,
            yaw_rate,
            gait: one_hot(gait, n_gaits),
        }
    }

    pub fn gait_index(&self) -> usize {
        argmax(&self.gait)
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.lin_vel, self.yaw_rate]
    }
}

pub fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    if i < n {
        v[i] = 1.0;
    }
    v
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Deployable inputs. Nothing privileged can be reached from here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorObservation {
    pub proprio: Vec<f64>,
    /// `history_len` past o vectors, oldest first, flattened.
    pub history: Vec<f64>,
    /// Previous and current height scans, flattened.
    pub scans: Vec<f64>,
}

/// Simulator-only inputs for the critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedObservation {
    pub elevation: Vec<f64>,
    pub extras: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationBundle {
    pub version: u32,
    pub actor: ActorObservation,
    pub privileged: PrivilegedObservation,
    pub gait: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    None,
    Fall,
    Collision,
    OutOfBounds,
    Timeout,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Termination::None
    }

    /// Failure terminations bootstrap with zero value; the rest use the critic.
    pub fn is_failure(self) -> bool {
        matches!(self, Termination::Fall | Termination::Collision)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub distance: f64,
    pub time: f64,
    pub terrain_level: f64,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: ObservationBundle,
    pub rewards: RewardBreakdown,
    pub termination: Termination,
    pub stats: EpisodeStats,
}

/// Noise-free terrain heights relative to the base at the given forward offsets.
pub fn height_profile(terrain: &Heightfield, base: [f64; 2], offsets: &[f64], clip: (f64, f64)) -> Vec<f64> {
    offsets
        .iter()
        .map(|o| (terrain.sensed_height(base[0] + o) - base[1]).clamp(clip.0, clip.1))
        .collect()
}

/// Forward height scan with the DR noise model: per-entry Gaussian noise of
/// standard deviation `dr.scan_noise` plus one uniform offset in
/// `[-dr.scan_deviation, dr.scan_deviation]` shared by the frame.
pub fn sample_height_scan<R: Rng + ?Sized>(
    terrain: &Heightfield,
    base: [f64; 2],
    dr: &DrConfig,
    sensors: &SensorConfig,
    rng: &mut R,
) -> Vec<f64> {
    let offsets = sensors.scan_offsets();
    let shift = if dr.scan_deviation > 0.0 {
        rng.random_range(-dr.scan_deviation..=dr.scan_deviation)
    } else {
        0.0
    };
    let noise = Normal::new(0.0, dr.scan_noise.max(0.0)).expect("finite sigma");
    offsets
        .iter()
        .map(|o| {
            let mut h = terrain.sensed_height(base[0] + o) - base[1] + shift;
            if dr.scan_noise > 0.0 {
                h += noise.sample(rng);
            }
            h.clamp(sensors.scan_clip.0, sensors.scan_clip.1)
        })
        .collect()
}

/// Adds a horizontal velocity impulse to the base.
pub fn apply_impulse(state: &mut BipedState, dv: f64) {
    state.com_vel[0] += dv;
    state.base_vel[0] += dv;
}

/// Applies a random push when the schedule is due; returns the impulse.
pub fn apply_push<R: Rng + ?Sized>(
    state: &mut BipedState,
    schedule: &PushSchedule,
    dt: f64,
    rng: &mut R,
) -> Option<f64> {
    if !schedule.due(state.step_count, dt) || schedule.max_velocity <= 0.0 {
        return None;
    }
    let dv = rng.random_range(-schedule.max_velocity..=schedule.max_velocity);
    apply_impulse(state, dv);
    Some(dv)
}

pub fn proprioception(state: &BipedState, commands: &CommandState, last_action: &[f64; N_JOINTS]) -> Vec<f64> {
    let mut o = Vec::with_capacity(layout::PROPRIO_DIM);
    o.push(state.pitch_rate);
    o.push(state.yaw_rate);
    o.extend_from_slice(&state.gravity_proj);
    o.push(commands.lin_vel);
    o.push(commands.yaw_rate);
    o.extend_from_slice(&state.joint_pos);
    o.extend_from_slice(&state.joint_vel);
    o.extend_from_slice(last_action);
    o
}

/// Builds the full bundle from the current proprioception, the history
/// window and the scan pair.
#[allow(clippy::too_many_arguments)]
pub fn assemble_observation(
    state: &BipedState,
    commands: &CommandState,
    proprio: Vec<f64>,
    history: &VecDeque<Vec<f64>>,
    scans: (&[f64], &[f64]),
    terrain: &Heightfield,
    dr: &DrConfig,
    config: &EnvConfig,
) -> ObservationBundle {
    let history: Vec<f64> = history.iter().flatten().copied().collect();
    let mut scan_pair = Vec::with_capacity(scans.0.len() * 2);
    scan_pair.extend_from_slice(scans.0);
    scan_pair.extend_from_slice(scans.1);

    let elevation = height_profile(terrain, state.base, &config.sensors.map_offsets(), config.sensors.scan_clip);
    let weight = config.robot.base_mass * config.robot.gravity * 0.5;
    let mut extras = Vec::with_capacity(config.extras_dim());
    for leg in 0..2 {
        extras.push(state.foot_pos[leg][0] - state.base[0]);
        extras.push(state.foot_pos[leg][1] - state.base[1]);
    }
    for leg in 0..2 {
        extras.push(if state.foot_contact[leg] { 1.0 } else { 0.0 });
    }
    for leg in 0..2 {
        extras.push(state.foot_force[leg][1] / weight);
    }
    extras.extend_from_slice(&state.base_vel);
    extras.push(state.base_height);
    extras.extend_from_slice(&dr.privileged_vector());
    extras.extend_from_slice(&proprio);
    extras.extend_from_slice(&history);

    ObservationBundle {
        version: OBSERVATION_VERSION,
        actor: ActorObservation {
            proprio,
            history,
            scans: scan_pair,
        },
        privileged: PrivilegedObservation { elevation, extras },
        gait: commands.gait.clone(),
    }
}

/// One environment instance with its own RNG stream.
#[derive(Clone, Debug)]
pub struct Env {
    pub config: EnvConfig,
    terrain: Heightfield,
    dr: DrConfig,
    commands: CommandState,
    state: BipedState,
    history: VecDeque<Vec<f64>>,
    proprio: Vec<f64>,
    scan_queue: VecDeque<Vec<f64>>,
    prev_scan: Vec<f64>,
    action_queue: VecDeque<[f64; N_JOINTS]>,
    last_action: [f64; N_JOINTS],
    prev_action: [f64; N_JOINTS],
    prev2_action: [f64; N_JOINTS],
    rng: ChaCha8Rng,
    start_x: f64,
    terrain_level: f64,
    termination: Termination,
}

impl Env {
    pub fn new(config: EnvConfig) -> Self {
        let terrain = Heightfield::flat(config.terrain.cell_size, config.terrain.track_length, config.terrain.runout);
        let dr = DrConfig::identity();
        let pose = config.robot.nominal_pose();
        let state = BipedState::standing(&config.robot, &terrain, config.terrain.spawn_x, pose, &dr);
        Self {
            terrain,
            dr,
            commands: CommandState::new(0.0, 0.0, 0, 1),
            state,
            history: VecDeque::new(),
            proprio: Vec::new(),
            scan_queue: VecDeque::new(),
            prev_scan: Vec::new(),
            action_queue: VecDeque::new(),
            last_action: [0.0; N_JOINTS],
            prev_action: [0.0; N_JOINTS],
            prev2_action: [0.0; N_JOINTS],
            rng: ChaCha8Rng::seed_from_u64(0),
            start_x: config.terrain.spawn_x,
            terrain_level: 0.0,
            termination: Termination::None,
            config,
        }
    }

    pub fn state(&self) -> &BipedState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut BipedState {
        &mut self.state
    }

    pub fn terrain(&self) -> &Heightfield {
        &self.terrain
    }

    pub fn dr(&self) -> &DrConfig {
        &self.dr
    }

    pub fn commands(&self) -> &CommandState {
        &self.commands
    }

    /// Replaces the command mid-episode; the next observation reflects it.
    pub fn set_commands(&mut self, commands: CommandState) {
        self.commands = commands;
        if !self.proprio.is_empty() {
            self.proprio[layout::COMMAND].copy_from_slice(&self.commands.velocity());
        }
    }

    pub fn set_terrain_level(&mut self, level: f64) {
        self.terrain_level = level;
    }

    /// `(a_t, a_{t-1}, a_{t-2})` as of the last step.
    pub fn action_history(&self) -> (&[f64; N_JOINTS], &[f64; N_JOINTS], &[f64; N_JOINTS]) {
        (&self.last_action, &self.prev_action, &self.prev2_action)
    }

    pub fn distance(&self) -> f64 {
        self.state.base[0] - self.start_x
    }

    pub fn termination(&self) -> Termination {
        self.termination
    }

    pub fn reset(
        &mut self,
        terrain: Heightfield,
        dr: DrConfig,
        commands: CommandState,
        seed: u64,
    ) -> Result<ObservationBundle> {
        let x = self.config.terrain.spawn_x;
        let robot = &self.config.robot;
        if terrain.is_void(x) {
            return Err(Error::VoidSpawn);
        }
        let mut pose = robot.nominal_pose();
        for (j, q) in pose.iter_mut().enumerate() {
            let lo = RobotModel::per_joint(&robot.joint_lower, j);
            let hi = RobotModel::per_joint(&robot.joint_upper, j);
            *q = (*q * dr.init_joint_scale).clamp(lo, hi);
        }
        self.state = BipedState::standing(robot, &terrain, x, pose, &dr);
        self.state.update_foot_velocity(robot);
        self.terrain = terrain;
        self.dr = dr;
        self.commands = commands;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.start_x = x;
        self.termination = Termination::None;
        self.last_action = [0.0; N_JOINTS];
        self.prev_action = [0.0; N_JOINTS];
        self.prev2_action = [0.0; N_JOINTS];
        self.action_queue = std::iter::repeat([0.0; N_JOINTS]).take(self.dr.action_delay_steps + 1).collect();

        self.proprio = proprioception(&self.state, &self.commands, &self.last_action);
        self.history = std::iter::repeat(self.proprio.clone())
            .take(self.config.sensors.history_len)
            .collect();
        let scan = self.scan();
        self.scan_queue = std::iter::repeat(scan.clone()).take(self.dr.scan_delay_steps + 1).collect();
        self.prev_scan = scan;
        Ok(self.observation_with(self.prev_scan.clone()))
    }

    fn scan(&mut self) -> Vec<f64> {
        sample_height_scan(&self.terrain, self.state.base, &self.dr, &self.config.sensors, &mut self.rng)
    }

    fn observation_with(&self, current_scan: Vec<f64>) -> ObservationBundle {
        assemble_observation(
            &self.state,
            &self.commands,
            self.proprio.clone(),
            &self.history,
            (&self.prev_scan, &current_scan),
            &self.terrain,
            &self.dr,
            &self.config,
        )
    }

    /// Current observation without advancing the simulation.
    pub fn observe(&self) -> ObservationBundle {
        let current = self.scan_queue.front().cloned().unwrap_or_else(|| self.prev_scan.clone());
        assemble_observation(
            &self.state,
            &self.commands,
            self.proprio.clone(),
            &self.history,
            (&self.prev_scan, &current),
            &self.terrain,
            &self.dr,
            &self.config,
        )
    }

    /// Advances one control period. A non-finite action is rejected before
    /// any state changes.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != N_JOINTS {
            return Err(Error::DimensionMismatch {
                context: "action",
                expected: N_JOINTS,
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        if self.termination.is_done() {
            return Err(Error::InvalidArgument("step after termination; reset first".into()));
        }
        let bound = self.config.action_bound;
        let mut a = [0.0; N_JOINTS];
        for (dst, src) in a.iter_mut().zip(action) {
            *dst = src.clamp(-bound, bound);
        }
        let dt = self.config.control_dt;
        apply_push(&mut self.state, &self.config.push, dt, &mut self.rng);

        self.action_queue.push_back(a);
        while self.action_queue.len() > self.dr.action_delay_steps + 1 {
            self.action_queue.pop_front();
        }
        let applied = *self.action_queue.front().expect("queue never empty");
        let robot = &self.config.robot;
        let nominal = robot.nominal_pose();
        let mut target = [0.0; N_JOINTS];
        for j in 0..N_JOINTS {
            target[j] = nominal[j] + robot.action_scale * applied[j];
        }

        let prev_vel = self.state.joint_vel;
        let sub_dt = dt / self.config.substeps as f64;
        let mut force = [[0.0; 2]; 2];
        let mut touching = [false; 2];
        for _ in 0..self.config.substeps {
            let c = self.state.substep(robot, &self.dr, &self.terrain, &target, sub_dt);
            for leg in 0..2 {
                force[leg][0] += c.force[leg][0] / self.config.substeps as f64;
                force[leg][1] += c.force[leg][1] / self.config.substeps as f64;
            }
            touching = c.touching;
        }
        self.state.foot_force = force;
        self.state.foot_contact = touching;
        for j in 0..N_JOINTS {
            self.state.joint_acc[j] = (self.state.joint_vel[j] - prev_vel[j]) / dt;
        }
        self.state.refresh_kinematics(robot, &self.terrain);
        self.state.update_foot_velocity(robot);
        self.state.time += dt;
        self.state.step_count += 1;
        self.state.collisions = self.count_collisions();

        self.prev2_action = self.prev_action;
        self.prev_action = self.last_action;
        self.last_action = a;

        self.termination = self.check_termination();

        self.history.push_back(std::mem::take(&mut self.proprio));
        while self.history.len() > self.config.sensors.history_len {
            self.history.pop_front();
        }
        self.proprio = proprioception(&self.state, &self.commands, &self.last_action);

        let fresh = self.scan();
        self.scan_queue.push_back(fresh);
        while self.scan_queue.len() > self.dr.scan_delay_steps + 1 {
            self.scan_queue.pop_front();
        }
        let current = self.scan_queue.front().cloned().expect("scan queue never empty");
        let observation = self.observation_with(current.clone());
        self.prev_scan = current;

        Ok(StepResult {
            observation,
            rewards: RewardBreakdown::default(),
            termination: self.termination,
            stats: EpisodeStats {
                distance: self.distance(),
                time: self.state.time,
                terrain_level: self.terrain_level,
            },
        })
    }

    fn count_collisions(&self) -> u32 {
        let mut n = 0;
        for leg in 0..2 {
            let k = self.state.knee_pos[leg];
            if !self.terrain.is_void(k[0]) && k[1] < self.terrain.height_at(k[0]) {
                n += 1;
            }
        }
        n
    }

    fn check_termination(&self) -> Termination {
        let t = &self.config.termination;
        let s = &self.state;
        let robot = &self.config.robot;
        for leg in 0..2 {
            let pts = s.leg(robot, leg);
            for p in [pts.heel, pts.toe] {
                if self.terrain.is_void(p[0]) && p[1] < self.terrain.height_at(p[0]) - t.void_margin {
                    return Termination::Fall;
                }
            }
            let k = pts.knee;
            if !self.terrain.is_void(k[0]) && k[1] < self.terrain.height_at(k[0]) - t.knee_penetration {
                return Termination::Collision;
            }
        }
        if !self.terrain.is_void(s.base[0]) && s.base[1] < self.terrain.height_at(s.base[0]) {
            return Termination::Collision;
        }
        if s.base_height < t.min_base_height || s.pitch.abs() > t.max_pitch || !s.base[1].is_finite() {
            return Termination::Fall;
        }
        if s.base[0] < 0.0 || s.base[0] > self.terrain.extent() - 0.5 {
            return Termination::OutOfBounds;
        }
        if s.time >= self.config.episode_length - 1e-9 {
            return Termination::Timeout;
        }
        Termination::None
    }
}
