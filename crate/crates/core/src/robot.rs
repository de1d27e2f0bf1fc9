//! Kinematic robot models: the skid-steer base, the velocity-controlled arm
//! and their whole-body concatenation, plus forward kinematics and center of
//! mass for a configurable serial chain.

use nalgebra::{DVector, Translation3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{planar_pose, wrap_angle, Pose3, Segment3, UnitQuaternion, Vec3};

/// Which kinematic model an optimization instance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelIndex {
    Base = 0,
    Arm = 1,
    WholeBody = 2,
}

impl ModelIndex {
    pub const ALL: [ModelIndex; 3] = [ModelIndex::Base, ModelIndex::Arm, ModelIndex::WholeBody];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelIndex::Base => "base",
            ModelIndex::Arm => "arm",
            ModelIndex::WholeBody => "wb",
        }
    }

    pub fn state_dim(self, n_arm: usize) -> usize {
        match self {
            ModelIndex::Base => 3,
            ModelIndex::Arm => n_arm,
            ModelIndex::WholeBody => 3 + n_arm,
        }
    }

    pub fn control_dim(self, n_arm: usize) -> usize {
        match self {
            ModelIndex::Base => 2,
            ModelIndex::Arm => n_arm,
            ModelIndex::WholeBody => 2 + n_arm,
        }
    }

    /// Degrees of freedom of the model: 3 for the base, N_a for the arm.
    pub fn dof(self, n_arm: usize) -> usize {
        self.state_dim(n_arm)
    }

    pub fn moves_base(self) -> bool {
        matches!(self, ModelIndex::Base | ModelIndex::WholeBody)
    }

    pub fn moves_arm(self) -> bool {
        matches!(self, ModelIndex::Arm | ModelIndex::WholeBody)
    }

    /// Offset of the first arm coordinate in this model's state and control vectors.
    pub fn arm_offset(self) -> (usize, usize) {
        match self {
            ModelIndex::Base => (3, 2),
            ModelIndex::Arm => (0, 0),
            ModelIndex::WholeBody => (3, 2),
        }
    }

    /// Slice the model's state out of a whole-body state.
    pub fn state_vector(self, s: &WholeBodyState) -> DVector<f64> {
        let n = s.arm.theta.len();
        let mut x = DVector::zeros(self.state_dim(n));
        let mut k = 0;
        if self.moves_base() {
            x[0] = s.base.x;
            x[1] = s.base.y;
            x[2] = s.base.yaw;
            k = 3;
        }
        if self.moves_arm() {
            for (i, t) in s.arm.theta.iter().enumerate() {
                x[k + i] = *t;
            }
        }
        x
    }

    /// Write a model state back into a whole-body state, leaving the frozen
    /// subsystem untouched.
    pub fn write_state(self, x: &DVector<f64>, s: &mut WholeBodyState) {
        let mut k = 0;
        if self.moves_base() {
            s.base.x = x[0];
            s.base.y = x[1];
            s.base.yaw = wrap_angle(x[2]);
            k = 3;
        }
        if self.moves_arm() {
            for (i, t) in s.arm.theta.iter_mut().enumerate() {
                *t = x[k + i];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl BaseState {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn pose(&self) -> Pose3 {
        planar_pose(self.x, self.y, self.yaw)
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseControl {
    pub v: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmState {
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmControl {
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WholeBodyState {
    pub base: BaseState,
    pub arm: ArmState,
}

impl WholeBodyState {
    pub fn new(base: BaseState, theta: Vec<f64>) -> Self {
        Self {
            base,
            arm: ArmState { theta },
        }
    }

    pub fn n_arm(&self) -> usize {
        self.arm.theta.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WholeBodyControl {
    pub base: BaseControl,
    pub arm: ArmControl,
}

impl WholeBodyControl {
    pub fn zeros(n_arm: usize) -> Self {
        Self {
            base: BaseControl::default(),
            arm: ArmControl {
                rates: vec![0.0; n_arm],
            },
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut u = DVector::zeros(2 + self.arm.rates.len());
        u[0] = self.base.v;
        u[1] = self.base.omega;
        for (i, r) in self.arm.rates.iter().enumerate() {
            u[2 + i] = *r;
        }
        u
    }
}

/// No-slip skid-steer base reduced to unicycle kinematics.
pub fn base_derivative(s: &BaseState, u: &BaseControl) -> [f64; 3] {
    [u.v * s.yaw.cos(), u.v * s.yaw.sin(), u.omega]
}

pub fn arm_derivative(s: &ArmState, u: &ArmControl) -> Result<Vec<f64>> {
    if s.theta.len() != u.rates.len() {
        return Err(Error::dim("arm_derivative", s.theta.len(), u.rates.len()));
    }
    Ok(u.rates.clone())
}

/// Stacked `[base; arm]` derivative of the decoupled whole-body system.
pub fn wb_derivative(s: &WholeBodyState, u: &WholeBodyControl) -> Result<DVector<f64>> {
    let b = base_derivative(&s.base, &u.base);
    let a = arm_derivative(&s.arm, &u.arm)?;
    let mut d = DVector::zeros(3 + a.len());
    d[0] = b[0];
    d[1] = b[1];
    d[2] = b[2];
    for (i, v) in a.iter().enumerate() {
        d[3 + i] = *v;
    }
    Ok(d)
}

/// Vector form of `f_m(s, u)`.
pub fn model_derivative(m: ModelIndex, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    match m {
        ModelIndex::Arm => u.clone(),
        ModelIndex::Base | ModelIndex::WholeBody => {
            let mut d = DVector::zeros(x.len());
            let yaw = x[2];
            d[0] = u[0] * yaw.cos();
            d[1] = u[0] * yaw.sin();
            d[2] = u[1];
            for i in 3..x.len() {
                d[i] = u[i - 1];
            }
            d
        }
    }
}

/// One classic RK4 step of `f_m`. The yaw is re-wrapped afterwards.
pub fn integrate(m: ModelIndex, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = model_derivative(m, x, u);
    let k2 = model_derivative(m, &(x + &k1 * (0.5 * dt)), u);
    let k3 = model_derivative(m, &(x + &k2 * (0.5 * dt)), u);
    let k4 = model_derivative(m, &(x + &k3 * dt), u);
    let mut next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if m.moves_base() {
        next[2] = wrap_angle(next[2]);
    }
    next
}

/// Integrate over `duration` with RK4 steps no longer than `max_dt`.
pub fn integrate_for(m: ModelIndex, x: &DVector<f64>, u: &DVector<f64>, duration: f64, max_dt: f64) -> DVector<f64> {
    let steps = (duration / max_dt - 1e-9).ceil().max(1.0) as usize;
    let h = duration / steps as f64;
    let mut s = x.clone();
    for _ in 0..steps {
        s = integrate(m, &s, u, h);
    }
    s
}

/// Expand a model control into a whole-body command, zeroing the inactive
/// subsystem.
pub fn map_whole_body_control(m: ModelIndex, u: &DVector<f64>, n_arm: usize) -> Result<WholeBodyControl> {
    let expected = m.control_dim(n_arm);
    if u.len() != expected {
        return Err(Error::dim("map_whole_body_control", expected, u.len()));
    }
    let mut out = WholeBodyControl::zeros(n_arm);
    let (_, arm_u) = m.arm_offset();
    if m.moves_base() {
        out.base.v = u[0];
        out.base.omega = u[1];
    }
    if m.moves_arm() {
        for i in 0..n_arm {
            out.arm.rates[i] = u[arm_u + i];
        }
    }
    Ok(out)
}

/// Translation plus roll-pitch-yaw (extrinsic x-y-z) as stored in config.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl PoseSpec {
    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            xyz: [x, y, z],
            rpy: [0.0; 3],
        }
    }

    pub fn to_pose(&self) -> Pose3 {
        Pose3::from_parts(
            Translation3::new(self.xyz[0], self.xyz[1], self.xyz[2]),
            UnitQuaternion::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    /// Rotation axis in the joint frame.
    pub axis: [f64; 3],
    /// Fixed transform from this joint's rotated frame to the next joint.
    pub offset: PoseSpec,
    pub position_limits: [f64; 2],
    /// Symmetric rate limit (rad/s).
    pub velocity_limit: f64,
    pub mass: f64,
    /// Link center of mass in the rotated joint frame.
    pub com: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    /// Footprint half-extents along the base x and y axes (m).
    pub half_length: f64,
    pub half_width: f64,
    /// Height of the footprint corner collision points (m).
    pub corner_height: f64,
    pub mass: f64,
    pub com: [f64; 3],
    pub max_linear_velocity: f64,
    pub max_angular_velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicChain {
    /// Arm base frame relative to the mobile base frame.
    pub mount: PoseSpec,
    pub joints: Vec<JointSpec>,
    pub ee_offset: PoseSpec,
    pub base: BaseSpec,
    /// Arm configuration at reset.
    pub home: Vec<f64>,
    pub samples_per_link: usize,
}

impl Default for KinematicChain {
    /// Six-joint arm with alternating z/y axes and 0.15 m links on a 20 kg base.
    fn default() -> Self {
        let joints = (0..6)
            .map(|i| {
                let about_z = i % 2 == 0;
                JointSpec {
                    axis: if about_z { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] },
                    offset: PoseSpec::translation(0.0, 0.0, 0.15),
                    position_limits: if about_z { [-3.0, 3.0] } else { [-2.4, 2.4] },
                    velocity_limit: 1.0,
                    mass: 1.0,
                    com: [0.0, 0.0, 0.075],
                }
            })
            .collect();
        Self {
            mount: PoseSpec::translation(0.1, 0.0, 0.3),
            joints,
            ee_offset: PoseSpec::default(),
            base: BaseSpec {
                half_length: 0.25,
                half_width: 0.2,
                corner_height: 0.1,
                mass: 20.0,
                com: [0.0, 0.0, 0.15],
                max_linear_velocity: 1.0,
                max_angular_velocity: 1.0,
            },
            home: vec![0.0, 0.058, 0.0, 1.85, 0.0, -1.908],
            samples_per_link: 3,
        }
    }
}

/// How a tracked frame moves with one state coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Prismatic(Vec3),
    Revolute { axis: Vec3, origin: Vec3 },
}

/// Pose of the frame an optimization tracks together with the motion of
/// every coordinate in the model's state, ordered from the root outward.
#[derive(Debug, Clone)]
pub struct TrackedFrame {
    pub pose: Pose3,
    pub motions: Vec<Motion>,
}

/// World-frame poses along the chain for one configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    /// Frame of each joint after its rotation is applied.
    pub joints: Vec<Pose3>,
    /// Origin of the frame following each link's fixed offset.
    pub link_ends: Vec<Vec3>,
    pub ee: Pose3,
}

impl KinematicChain {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::config("chain.joints", "at least one joint is required"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let axis = Vec3::from(j.axis);
            if (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    format!("chain.joints[{i}].axis"),
                    "must be a unit vector",
                ));
            }
            if j.mass <= 0.0 {
                return Err(Error::config(format!("chain.joints[{i}].mass"), "must be positive"));
            }
            if j.position_limits[0] >= j.position_limits[1] {
                return Err(Error::config(
                    format!("chain.joints[{i}].position_limits"),
                    "min must be < max",
                ));
            }
            if j.velocity_limit <= 0.0 {
                return Err(Error::config(
                    format!("chain.joints[{i}].velocity_limit"),
                    "must be positive",
                ));
            }
        }
        if self.base.mass <= 0.0 {
            return Err(Error::config("chain.base.mass", "must be positive"));
        }
        if self.base.half_length <= 0.0 || self.base.half_width <= 0.0 {
            return Err(Error::config(
                "chain.base.half_length",
                "footprint half-extents must be positive",
            ));
        }
        if self.base.max_linear_velocity <= 0.0 || self.base.max_angular_velocity <= 0.0 {
            return Err(Error::config(
                "chain.base.max_linear_velocity",
                "base velocity limits must be positive",
            ));
        }
        if self.home.len() != self.joints.len() {
            return Err(Error::config(
                "chain.home",
                format!("expected {} joint angles", self.joints.len()),
            ));
        }
        if self.samples_per_link == 0 {
            return Err(Error::config("chain.samples_per_link", "must be at least 1"));
        }
        Ok(())
    }

    pub fn home_state(&self, base: BaseState) -> WholeBodyState {
        WholeBodyState::new(base, self.home.clone())
    }

    pub fn frames(&self, s: &WholeBodyState) -> ChainFrames {
        let mut t = s.base.pose() * self.mount.to_pose();
        let mut joints = Vec::with_capacity(self.joints.len());
        let mut link_ends = Vec::with_capacity(self.joints.len());
        for (j, theta) in self.joints.iter().zip(&s.arm.theta) {
            let axis = nalgebra::Unit::new_normalize(Vec3::from(j.axis));
            let rotated = t * UnitQuaternion::from_axis_angle(&axis, *theta);
            joints.push(rotated);
            t = rotated * j.offset.to_pose();
            link_ends.push(t.translation.vector);
        }
        let ee = t * self.ee_offset.to_pose();
        ChainFrames { joints, link_ends, ee }
    }

    pub fn forward_kinematics(&self, s: &WholeBodyState) -> Pose3 {
        self.frames(s).ee
    }

    pub fn total_mass(&self) -> f64 {
        self.base.mass + self.joints.iter().map(|j| j.mass).sum::<f64>()
    }

    /// Mass-weighted center of mass of base and links in the world frame.
    pub fn com_position(&self, s: &WholeBodyState) -> Vec3 {
        let frames = self.frames(s);
        let base_com = s.base.pose().transform_point(&Vec3::from(self.base.com).into()).coords;
        let mut acc = base_com * self.base.mass;
        for (j, f) in self.joints.iter().zip(&frames.joints) {
            acc += f.transform_point(&Vec3::from(j.com).into()).coords * j.mass;
        }
        acc / self.total_mass()
    }

    /// Link segments from each joint origin to the next.
    pub fn link_segments(&self, s: &WholeBodyState) -> Vec<Segment3> {
        let frames = self.frames(s);
        frames
            .joints
            .iter()
            .zip(&frames.link_ends)
            .map(|(f, end)| Segment3::new(f.translation.vector, *end))
            .collect()
    }

    /// Sampled points on every link plus the footprint corners.
    pub fn collision_points(&self, s: &WholeBodyState) -> (Vec<Vec3>, Vec<Vec3>) {
        let n = self.samples_per_link;
        let links = self
            .link_segments(s)
            .iter()
            .flat_map(|seg| (0..n).map(move |k| seg.point_at((k as f64 + 0.5) / n as f64)))
            .collect();
        let pose = s.base.pose();
        let b = &self.base;
        let corners = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
            .iter()
            .map(|(sx, sy)| {
                pose.transform_point(&Vec3::new(sx * b.half_length, sy * b.half_width, b.corner_height).into())
                    .coords
            })
            .collect();
        (links, corners)
    }

    /// The frame model `m` is steered by (the base frame for the base model,
    /// the end effector otherwise) and the motion generated by each of its
    /// state coordinates.
    pub fn tracked_frame(&self, m: ModelIndex, s: &WholeBodyState) -> TrackedFrame {
        let mut motions = Vec::with_capacity(m.state_dim(self.n_joints()));
        if m.moves_base() {
            motions.push(Motion::Prismatic(Vec3::x()));
            motions.push(Motion::Prismatic(Vec3::y()));
            motions.push(Motion::Revolute {
                axis: Vec3::z(),
                origin: Vec3::new(s.base.x, s.base.y, 0.0),
            });
        }
        if m == ModelIndex::Base {
            return TrackedFrame {
                pose: s.base.pose(),
                motions,
            };
        }
        let frames = self.frames(s);
        for (j, f) in self.joints.iter().zip(&frames.joints) {
            motions.push(Motion::Revolute {
                axis: f.rotation * Vec3::from(j.axis),
                origin: f.translation.vector,
            });
        }
        TrackedFrame {
            pose: frames.ee,
            motions,
        }
    }

    /// Constant transform from the base frame to the end effector.
    pub fn ee_in_base(&self, s: &WholeBodyState) -> Pose3 {
        s.base.pose().inverse() * self.forward_kinematics(s)
    }
}
