//! Planar (sagittal) biped: six PD-driven joints, massless legs hanging off a
//! rigid base, and an inelastic impulse-based contact solver against the
//! heightfield.
//!
//! Angles are measured from the downward vertical and grow counter-clockwise
//! (x forward, z up), so a positive hip angle swings the thigh forward and a
//! positive knee angle is flexion. Absolute segment angles are
//! `thigh = pitch + hip`, `shank = thigh - knee`, `foot = shank + ankle`.
//!
//! Lateral and yaw motion do not exist in the plane. A scalar yaw proxy is
//! driven by the difference in fore-aft contact force between the two feet
//! (which would yaw a real robot whose hips are `hip_width` apart); it feeds
//! the yaw-rate observation, heading and lateral-offset terms only and never
//! couples back into the sagittal dynamics.

use serde::{Deserialize, Serialize};

use super::dr::DrConfig;
use super::terrain::Heightfield;

pub const N_JOINTS: usize = 6;
pub const JOINTS_PER_LEG: usize = 3;
pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactParams {
    pub iterations: usize,
    pub baumgarte: f64,
    pub slop: f64,
    /// Approach speed below which impacts are treated as fully inelastic.
    pub restitution_threshold: f64,
    /// Fraction of the DR ground restitution that reaches the contact
    /// (the robot's own restitution is zero and the two are averaged).
    pub restitution_mix: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            iterations: 12,
            baumgarte: 0.2,
            slop: 0.002,
            restitution_threshold: 0.3,
            restitution_mix: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotModel {
    pub thigh: f64,
    pub shank: f64,
    /// Sole contact points in the foot frame, relative to the ankle.
    pub heel: [f64; 2],
    pub toe: [f64; 2],
    pub base_mass: f64,
    pub base_inertia: f64,
    pub hip_width: f64,
    pub yaw_inertia: f64,
    pub yaw_damping: f64,
    pub yaw_stiffness: f64,
    /// Per-leg joint parameters, ordered hip, knee, ankle.
    pub joint_inertia: [f64; 3],
    pub joint_damping: f64,
    pub kp: [f64; 3],
    pub kd: [f64; 3],
    pub torque_limit: [f64; 3],
    pub velocity_limit: [f64; 3],
    pub joint_lower: [f64; 3],
    pub joint_upper: [f64; 3],
    pub nominal: [f64; 3],
    pub soft_limit_fraction: f64,
    pub action_scale: f64,
    pub gravity: f64,
    pub contact: ContactParams,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            thigh: 0.45,
            shank: 0.45,
            heel: [-0.06, -0.05],
            toe: [0.14, -0.05],
            base_mass: 20.0,
            base_inertia: 1.2,
            hip_width: 0.2,
            yaw_inertia: 6.0,
            yaw_damping: 6.0,
            yaw_stiffness: 4.0,
            joint_inertia: [0.05, 0.04, 0.02],
            joint_damping: 0.2,
            kp: [60.0, 60.0, 30.0],
            kd: [1.5, 1.5, 0.8],
            torque_limit: [80.0, 80.0, 40.0],
            velocity_limit: [20.0, 20.0, 20.0],
            joint_lower: [-1.0, 0.0, -1.0],
            joint_upper: [1.4, 2.3, 1.0],
            nominal: [0.3, 0.6, 0.3],
            soft_limit_fraction: 0.9,
            action_scale: 0.25,
            gravity: 9.81,
            contact: ContactParams::default(),
        }
    }
}

impl RobotModel {
    #[inline]
    pub fn per_joint(a: &[f64; 3], j: usize) -> f64 {
        a[j % JOINTS_PER_LEG]
    }

    pub fn nominal_pose(&self) -> [f64; N_JOINTS] {
        let mut q = [0.0; N_JOINTS];
        for (j, v) in q.iter_mut().enumerate() {
            *v = Self::per_joint(&self.nominal, j);
        }
        q
    }

    pub fn soft_limits(&self, j: usize) -> (f64, f64) {
        let lo = Self::per_joint(&self.joint_lower, j);
        let hi = Self::per_joint(&self.joint_upper, j);
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo) * self.soft_limit_fraction;
        (mid - half, mid + half)
    }

    /// Hip height above flat ground with zero pitch for a leg pose, i.e. the
    /// drop from hip to the lower sole point.
    pub fn leg_drop(&self, leg: &[f64]) -> f64 {
        let pts = self.leg_points([0.0, 0.0], 0.0, leg);
        -(pts.heel[1].min(pts.toe[1]))
    }

    pub fn standing_height(&self, pose: &[f64; N_JOINTS]) -> f64 {
        self.leg_drop(&pose[0..3]).max(self.leg_drop(&pose[3..6]))
    }

    /// Forward kinematics of one leg from the hip point.
    pub fn leg_points(&self, hip: [f64; 2], pitch: f64, leg: &[f64]) -> LegPoints {
        let thigh_angle = pitch + leg[0];
        let shank_angle = thigh_angle - leg[1];
        let foot_angle = shank_angle + leg[2];
        let knee = [
            hip[0] + self.thigh * thigh_angle.sin(),
            hip[1] - self.thigh * thigh_angle.cos(),
        ];
        let ankle = [
            knee[0] + self.shank * shank_angle.sin(),
            knee[1] - self.shank * shank_angle.cos(),
        ];
        let (s, c) = foot_angle.sin_cos();
        let rot = |p: [f64; 2]| [ankle[0] + c * p[0] - s * p[1], ankle[1] + s * p[0] + c * p[1]];
        LegPoints {
            knee,
            ankle,
            heel: rot(self.heel),
            toe: rot(self.toe),
            thigh_angle,
            shank_angle,
            foot_angle,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LegPoints {
    pub knee: [f64; 2],
    pub ankle: [f64; 2],
    pub heel: [f64; 2],
    pub toe: [f64; 2],
    pub thigh_angle: f64,
    pub shank_angle: f64,
    pub foot_angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BipedState {
    /// Hip (base) point.
    pub base: [f64; 2],
    pub base_vel: [f64; 2],
    pub com: [f64; 2],
    pub com_vel: [f64; 2],
    pub pitch: f64,
    pub pitch_rate: f64,
    pub yaw: f64,
    pub yaw_rate: f64,
    pub lateral: f64,
    pub joint_pos: [f64; N_JOINTS],
    pub joint_vel: [f64; N_JOINTS],
    pub joint_acc: [f64; N_JOINTS],
    pub joint_torque: [f64; N_JOINTS],
    pub foot_contact: [bool; 2],
    /// Mean world-frame contact force per foot over the last control step, `[horizontal, vertical]`.
    pub foot_force: [[f64; 2]; 2],
    pub foot_pos: [[f64; 2]; 2],
    pub foot_vel: [[f64; 2]; 2],
    pub knee_pos: [[f64; 2]; 2],
    /// Knee heights above the ground under the base.
    pub knee_height: [f64; 2],
    /// Base height above the ground under the base.
    pub base_height: f64,
    pub gravity_proj: [f64; 2],
    pub collisions: u32,
    pub time: f64,
    pub step_count: u64,
}

/// Contact bookkeeping for one physics substep.
#[derive(Clone, Copy, Debug, Default)]
pub struct SubstepContacts {
    pub force: [[f64; 2]; 2],
    pub touching: [bool; 2],
}

#[inline]
fn perp(r: [f64; 2]) -> [f64; 2] {
    [-r[1], r[0]]
}

#[inline]
fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn cross(r: [f64; 2], f: [f64; 2]) -> f64 {
    r[0] * f[1] - r[1] * f[0]
}

struct ContactPoint {
    foot: usize,
    r: [f64; 2],
    v_rel: [f64; 2],
    normal: [f64; 2],
    depth: f64,
}

impl BipedState {
    /// Standing state with the lowest sole point resting on the ground at `x`.
    pub fn standing(model: &RobotModel, terrain: &Heightfield, x: f64, pose: [f64; N_JOINTS], dr: &DrConfig) -> Self {
        let ground = terrain.height_at(x);
        let height = model.standing_height(&pose);
        let base = [x, ground + height];
        let mut s = Self {
            base,
            base_vel: [0.0; 2],
            com: [base[0] + dr.com_shift, base[1]],
            com_vel: [0.0; 2],
            pitch: 0.0,
            pitch_rate: 0.0,
            yaw: 0.0,
            yaw_rate: 0.0,
            lateral: 0.0,
            joint_pos: pose,
            joint_vel: [0.0; N_JOINTS],
            joint_acc: [0.0; N_JOINTS],
            joint_torque: [0.0; N_JOINTS],
            foot_contact: [false; 2],
            foot_force: [[0.0; 2]; 2],
            foot_pos: [[0.0; 2]; 2],
            foot_vel: [[0.0; 2]; 2],
            knee_pos: [[0.0; 2]; 2],
            knee_height: [0.0; 2],
            base_height: height,
            gravity_proj: [0.0, -1.0],
            collisions: 0,
            time: 0.0,
            step_count: 0,
        };
        s.refresh_kinematics(model, terrain);
        for leg in 0..2 {
            let pts = s.leg(model, leg);
            s.foot_contact[leg] = (pts.heel[1].min(pts.toe[1]) - terrain.height_at(pts.ankle[0])).abs() < 1e-9;
        }
        s
    }

    pub fn leg(&self, model: &RobotModel, leg: usize) -> LegPoints {
        model.leg_points(self.base, self.pitch, &self.joint_pos[leg * 3..leg * 3 + 3])
    }

    fn com_offset(&self, dr: &DrConfig) -> [f64; 2] {
        let (s, c) = self.pitch.sin_cos();
        [c * dr.com_shift, s * dr.com_shift]
    }

    /// Velocity contribution of the joint rates to a point on `leg`
    /// (`depth`: 0 knee, 1 ankle, 2 sole).
    fn joint_point_velocity(&self, pts: &LegPoints, hip: [f64; 2], leg: usize, p: [f64; 2], depth: usize) -> [f64; 2] {
        let qd = &self.joint_vel[leg * 3..leg * 3 + 3];
        let mut v = [0.0; 2];
        let add = |v: &mut [f64; 2], rate: f64, pivot: [f64; 2]| {
            let pr = perp(sub(p, pivot));
            v[0] += rate * pr[0];
            v[1] += rate * pr[1];
        };
        add(&mut v, qd[0], hip);
        if depth >= 1 {
            add(&mut v, -qd[1], pts.knee);
        }
        if depth >= 2 {
            add(&mut v, qd[2], pts.ankle);
        }
        v
    }

    pub(crate) fn refresh_kinematics(&mut self, model: &RobotModel, terrain: &Heightfield) {
        let ground = terrain.height_at(self.base[0]);
        self.base_height = self.base[1] - ground;
        for leg in 0..2 {
            let pts = self.leg(model, leg);
            self.knee_pos[leg] = pts.knee;
            self.knee_height[leg] = pts.knee[1] - ground;
            self.foot_pos[leg] = pts.ankle;
        }
        self.gravity_proj = [-self.pitch.sin(), -self.pitch.cos()];
    }

    /// One physics substep. Torques come from the PD law on `target`
    /// (absolute joint targets); joints are integrated first, then the base
    /// under gravity and contact impulses, all semi-implicitly.
    pub fn substep(
        &mut self,
        model: &RobotModel,
        dr: &DrConfig,
        terrain: &Heightfield,
        target: &[f64; N_JOINTS],
        dt: f64,
    ) -> SubstepContacts {
        for j in 0..N_JOINTS {
            let kp = RobotModel::per_joint(&model.kp, j) * dr.kp_scale;
            let kd = RobotModel::per_joint(&model.kd, j) * dr.kd_scale;
            let limit = RobotModel::per_joint(&model.torque_limit, j);
            let tau = (dr.motor_strength * (kp * (target[j] - self.joint_pos[j]) - kd * self.joint_vel[j]))
                .clamp(-limit, limit);
            self.joint_torque[j] = tau;
            let inertia = RobotModel::per_joint(&model.joint_inertia, j);
            self.joint_vel[j] += dt * (tau - model.joint_damping * self.joint_vel[j]) / inertia;
            self.joint_pos[j] += dt * self.joint_vel[j];
            let lo = RobotModel::per_joint(&model.joint_lower, j);
            let hi = RobotModel::per_joint(&model.joint_upper, j);
            if self.joint_pos[j] < lo {
                self.joint_pos[j] = lo;
                self.joint_vel[j] = self.joint_vel[j].max(0.0);
            } else if self.joint_pos[j] > hi {
                self.joint_pos[j] = hi;
                self.joint_vel[j] = self.joint_vel[j].min(0.0);
            }
        }

        let mass = (model.base_mass * dr.link_mass_scale + dr.payload).max(1.0);
        let inertia = model.base_inertia * mass / model.base_mass;
        self.com_vel[1] -= model.gravity * dt;

        // Hip from the (fixed-offset) centre of mass.
        let off = self.com_offset(dr);
        let hip = sub(self.com, off);
        let mut points: Vec<ContactPoint> = Vec::with_capacity(4);
        for leg in 0..2 {
            let pts = model.leg_points(hip, self.pitch, &self.joint_pos[leg * 3..leg * 3 + 3]);
            for p in [pts.heel, pts.toe] {
                if let Some((normal, depth)) = contact_normal(terrain, p) {
                    points.push(ContactPoint {
                        foot: leg,
                        r: sub(p, self.com),
                        v_rel: self.joint_point_velocity(&pts, hip, leg, p, 2),
                        normal,
                        depth,
                    });
                }
            }
        }

        let mut out = SubstepContacts::default();
        if !points.is_empty() {
            let point_vel = |s: &BipedState, c: &ContactPoint| {
                let w = perp(c.r);
                [
                    s.com_vel[0] + s.pitch_rate * w[0] + c.v_rel[0],
                    s.com_vel[1] + s.pitch_rate * w[1] + c.v_rel[1],
                ]
            };
            let mut pn = vec![0.0; points.len()];
            let mut pt = vec![0.0; points.len()];
            let mut target_vn = vec![0.0; points.len()];
            for (i, c) in points.iter().enumerate() {
                let v = point_vel(self, c);
                let vn = v[0] * c.normal[0] + v[1] * c.normal[1];
                let bounce = if vn < -model.contact.restitution_threshold {
                    -vn * dr.restitution * model.contact.restitution_mix
                } else {
                    0.0
                };
                let push_out = model.contact.baumgarte * (c.depth - model.contact.slop).max(0.0) / dt;
                target_vn[i] = bounce.max(push_out);
            }
            for _ in 0..model.contact.iterations {
                for (i, c) in points.iter().enumerate() {
                    let n = c.normal;
                    let t = [n[1], -n[0]];
                    let rn = cross(c.r, n);
                    let kn = 1.0 / mass + rn * rn / inertia;
                    let v = point_vel(self, c);
                    let vn = v[0] * n[0] + v[1] * n[1];
                    let new_pn = (pn[i] + (target_vn[i] - vn) / kn).max(0.0);
                    let d = new_pn - pn[i];
                    pn[i] = new_pn;
                    self.com_vel[0] += d * n[0] / mass;
                    self.com_vel[1] += d * n[1] / mass;
                    self.pitch_rate += rn * d / inertia;

                    let rt = cross(c.r, t);
                    let kt = 1.0 / mass + rt * rt / inertia;
                    let v = point_vel(self, c);
                    let vt = v[0] * t[0] + v[1] * t[1];
                    let bound = dr.friction * pn[i];
                    let new_pt = (pt[i] - vt / kt).clamp(-bound, bound);
                    let d = new_pt - pt[i];
                    pt[i] = new_pt;
                    self.com_vel[0] += d * t[0] / mass;
                    self.com_vel[1] += d * t[1] / mass;
                    self.pitch_rate += rt * d / inertia;
                }
            }
            for (i, c) in points.iter().enumerate() {
                let n = c.normal;
                let t = [n[1], -n[0]];
                let f = [
                    (pn[i] * n[0] + pt[i] * t[0]) / dt,
                    (pn[i] * n[1] + pt[i] * t[1]) / dt,
                ];
                out.force[c.foot][0] += f[0];
                out.force[c.foot][1] += f[1];
                if pn[i] > 0.0 {
                    out.touching[c.foot] = true;
                }
            }
        }

        self.com[0] += dt * self.com_vel[0];
        self.com[1] += dt * self.com_vel[1];
        self.pitch += dt * self.pitch_rate;

        let yaw_torque = (out.force[0][0] - out.force[1][0]) * 0.5 * model.hip_width;
        self.yaw_rate += dt
            * (yaw_torque / model.yaw_inertia - model.yaw_damping * self.yaw_rate - model.yaw_stiffness * self.yaw);
        self.yaw += dt * self.yaw_rate;
        self.lateral += dt * self.com_vel[0] * self.yaw.sin();

        let off = self.com_offset(dr);
        self.base = sub(self.com, off);
        let w = perp(off);
        self.base_vel = [
            self.com_vel[0] - self.pitch_rate * w[0],
            self.com_vel[1] - self.pitch_rate * w[1],
        ];
        out
    }

    /// World velocity of each ankle, including base rotation and joint rates.
    pub(crate) fn update_foot_velocity(&mut self, model: &RobotModel) {
        for leg in 0..2 {
            let pts = self.leg(model, leg);
            let v_rel = self.joint_point_velocity(&pts, self.base, leg, pts.ankle, 1);
            let w = perp(sub(pts.ankle, self.com));
            self.foot_vel[leg] = [
                self.com_vel[0] + self.pitch_rate * w[0] + v_rel[0],
                self.com_vel[1] + self.pitch_rate * w[1] + v_rel[1],
            ];
        }
    }
}

/// Contact normal and penetration depth for a sole point, if it is inside
/// solid terrain. A point that entered a riser from the side resolves
/// horizontally when the side wall is nearer than the top surface.
fn contact_normal(terrain: &Heightfield, p: [f64; 2]) -> Option<([f64; 2], f64)> {
    if p[0] < 0.0 || p[0] >= terrain.extent() || terrain.is_void(p[0]) {
        return None;
    }
    let ground = terrain.height_at(p[0]);
    let depth_up = ground - p[1];
    if depth_up <= 0.0 {
        return None;
    }
    let cs = terrain.cell_size;
    let i = terrain.cell(p[0]);
    let reach = (depth_up / cs).ceil() as usize + 1;
    let mut best: Option<([f64; 2], f64)> = None;
    // Walk outwards until a cell whose surface is below the point.
    for k in 1..=reach.min(i) {
        let j = i - k;
        if terrain.void[j] || terrain.heights[j] <= p[1] {
            let d = p[0] - terrain.cell_start(j + 1);
            if d < depth_up {
                best = Some(([-1.0, 0.0], d));
            }
            break;
        }
    }
    for k in 1..=reach {
        let j = i + k;
        if j >= terrain.len() {
            break;
        }
        if terrain.void[j] || terrain.heights[j] <= p[1] {
            let d = terrain.cell_start(j) - p[0];
            if d < depth_up && best.map_or(true, |(_, bd)| d < bd) {
                best = Some(([1.0, 0.0], d));
            }
            break;
        }
    }
    Some(best.unwrap_or(([0.0, 1.0], depth_up)))
}
