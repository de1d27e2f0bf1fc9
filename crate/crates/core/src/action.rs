//! Decoding policy outputs into NMPC problems.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{planar_pose, wrap_angle, yaw_of, Pose3, Vec3};
use crate::robot::{BaseState, KinematicChain, ModelIndex, WholeBodyState};
use crate::slq::{ConstraintGroup, ConstraintKind, CostSpec};

/// Number of constraint-group toggles in a continuous action.
pub const N_CONSTRAINTS: usize = ConstraintKind::ALL.len();
/// Flat length of a continuous action.
pub const CONTINUOUS_LEN: usize = 1 + N_CONSTRAINTS + 7;
/// Targets per model in the discrete table: the goal plus eight sub-goals.
pub const TARGETS_PER_MODEL: usize = 9;
pub const DISCRETE_LEN: usize = ModelIndex::COUNT * TARGETS_PER_MODEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetType {
    SubGoal,
    Goal,
}

impl TargetType {
    pub fn name(self) -> &'static str {
        match self {
            TargetType::SubGoal => "sub_goal",
            TargetType::Goal => "goal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetRanges {
    /// Sub-goal position ranges per axis in the robot frame (m).
    pub sub_goal: [[f64; 2]; 3],
    /// Offsets around the goal in the goal frame (m).
    pub goal: [[f64; 2]; 3],
}

impl Default for TargetRanges {
    fn default() -> Self {
        Self {
            sub_goal: [[-2.0, 2.0], [-2.0, 2.0], [0.2, 1.5]],
            goal: [[-0.1, 0.1]; 3],
        }
    }
}

/// Per-model cost selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    pub base: CostSpec,
    pub arm: CostSpec,
    pub wb: CostSpec,
}

impl CostTable {
    pub fn default_for(n_arm: usize) -> Self {
        Self {
            base: CostSpec::default_for(ModelIndex::Base, n_arm),
            arm: CostSpec::default_for(ModelIndex::Arm, n_arm),
            wb: CostSpec::default_for(ModelIndex::WholeBody, n_arm),
        }
    }

    pub fn get(&self, m: ModelIndex) -> &CostSpec {
        match m {
            ModelIndex::Base => &self.base,
            ModelIndex::Arm => &self.arm,
            ModelIndex::WholeBody => &self.wb,
        }
    }

    pub fn validate(&self, n_arm: usize) -> Result<()> {
        for m in ModelIndex::ALL {
            let c = self.get(m);
            let key = format!("costs.{}", m.name());
            if c.control_weights.len() != m.control_dim(n_arm) {
                return Err(Error::config(
                    format!("{key}.control_weights"),
                    format!("expected {} entries", m.control_dim(n_arm)),
                ));
            }
            if c.control_weights.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::config(
                    format!("{key}.control_weights"),
                    "entries must be positive",
                ));
            }
            for (name, v) in [
                ("position_weight", c.position_weight),
                ("orientation_weight", c.orientation_weight),
                ("terminal_position_scale", c.terminal_position_scale),
                ("terminal_orientation_scale", c.terminal_orientation_scale),
            ] {
                if !(v >= 0.0) {
                    return Err(Error::config(format!("{key}.{name}"), "must be non-negative"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    #[serde(default)]
    pub target_ranges: TargetRanges,
    /// Distance the base stops short of the goal when the base model is
    /// steered toward the goal (m).
    #[serde(default = "default_standoff")]
    pub base_goal_standoff: f64,
    #[serde(default = "default_costs")]
    pub costs: CostTable,
}

fn default_standoff() -> f64 {
    0.15
}

fn default_costs() -> CostTable {
    CostTable::default_for(KinematicChain::default().n_joints())
}

impl CodecConfig {
    pub fn default_for(n_arm: usize) -> Self {
        Self {
            target_ranges: TargetRanges::default(),
            base_goal_standoff: default_standoff(),
            costs: CostTable::default_for(n_arm),
        }
    }

    pub fn validate(&self, n_arm: usize) -> Result<()> {
        for (name, ranges) in [
            ("sub_goal", &self.target_ranges.sub_goal),
            ("goal", &self.target_ranges.goal),
        ] {
            for (axis, r) in ["x", "y", "z"].iter().zip(ranges) {
                if !(r[0] < r[1]) {
                    return Err(Error::config(
                        format!("codec.target_ranges.{name}[{axis}]"),
                        "min must be < max",
                    ));
                }
            }
        }
        if !(self.base_goal_standoff >= 0.0) {
            return Err(Error::config("codec.base_goal_standoff", "must be non-negative"));
        }
        self.costs.validate(n_arm)
    }
}

/// Continuous action `[a_model, a_constraint…, a_type, a_x, a_y, a_z, a_ψ, a_ϑ, a_φ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousAction {
    pub model: f64,
    pub constraints: [f64; N_CONSTRAINTS],
    pub target_type: f64,
    pub position: [f64; 3],
    pub rpy: [f64; 3],
}

fn clamp_logged(name: &str, v: f64, lo: f64, hi: f64) -> f64 {
    if !(lo..=hi).contains(&v) {
        log::warn!(target: "codec", "{name}={v} outside [{lo}, {hi}], clamped");
    }
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}

impl ContinuousAction {
    /// Parse and clamp a flat action vector.
    pub fn from_slice(a: &[f64]) -> Result<Self> {
        if a.len() != CONTINUOUS_LEN {
            return Err(Error::dim("continuous action", CONTINUOUS_LEN, a.len()));
        }
        let mut constraints = [0.0; N_CONSTRAINTS];
        for (i, c) in constraints.iter_mut().enumerate() {
            *c = clamp_logged("a_constraint", a[1 + i], 0.0, 1.0);
        }
        let k = 1 + N_CONSTRAINTS;
        let angle = |v: f64| if (-PI..PI).contains(&v) { v } else { wrap_angle(v) };
        Ok(Self {
            model: clamp_logged("a_model", a[0], 0.0, 1.0),
            constraints,
            target_type: clamp_logged("a_type", a[k], 0.0, 1.0),
            position: [
                clamp_logged("a_x", a[k + 1], -1.0, 1.0),
                clamp_logged("a_y", a[k + 2], -1.0, 1.0),
                clamp_logged("a_z", a[k + 3], -1.0, 1.0),
            ],
            rpy: [angle(a[k + 4]), angle(a[k + 5]), angle(a[k + 6])],
        })
    }
}

/// Model selection by the thresholds 0.3 and 0.6.
pub fn decode_model(a_model: f64) -> ModelIndex {
    let a = clamp_logged("a_model", a_model, 0.0, 1.0);
    if a <= 0.3 {
        ModelIndex::Base
    } else if a <= 0.6 {
        ModelIndex::Arm
    } else {
        ModelIndex::WholeBody
    }
}

/// Constraint groups toggled on (`> 0.5`) that apply to model `m`.
pub fn decode_constraints(a_constraint: &[f64], m: ModelIndex, chain: &KinematicChain) -> Result<Vec<ConstraintGroup>> {
    if a_constraint.len() != N_CONSTRAINTS {
        return Err(Error::dim("constraint toggles", N_CONSTRAINTS, a_constraint.len()));
    }
    Ok(ConstraintKind::ALL
        .iter()
        .zip(a_constraint)
        .filter(|(k, a)| **a > 0.5 && k.applies_to(m))
        .map(|(k, _)| ConstraintGroup::from_chain(*k, chain))
        .collect())
}

/// Every constraint group that applies to `m`.
pub fn all_constraints(m: ModelIndex, chain: &KinematicChain) -> Vec<ConstraintGroup> {
    ConstraintKind::ALL
        .iter()
        .filter(|k| k.applies_to(m))
        .map(|k| ConstraintGroup::from_chain(*k, chain))
        .collect()
}

/// Affine map of `a ∈ [-1, 1]` onto `[lo, hi]`.
pub fn map_range(a: f64, r: [f64; 2]) -> f64 {
    let t = 0.5 * (a + 1.0);
    r[0] * (1.0 - t) + r[1] * t
}

/// Inverse of [`map_range`].
pub fn unmap_range(v: f64, r: [f64; 2]) -> f64 {
    2.0 * (v - r[0]) / (r[1] - r[0]) - 1.0
}

/// Intrinsic roll-pitch-yaw: rotate about x, then the new y, then the new z.
pub fn intrinsic_rpy(rpy: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vec3::x_axis(), rpy[0])
        * UnitQuaternion::from_axis_angle(&Vec3::y_axis(), rpy[1])
        * UnitQuaternion::from_axis_angle(&Vec3::z_axis(), rpy[2])
}

/// End-effector target from the type switch (0.5) and the range-mapped offsets.
pub fn decode_target(
    a_type: f64,
    position: [f64; 3],
    rpy: [f64; 3],
    robot: &Pose3,
    goal: &Pose3,
    ranges: &TargetRanges,
) -> (TargetType, Pose3) {
    if a_type > 0.5 {
        let offset = Vec3::new(
            map_range(position[0], ranges.goal[0]),
            map_range(position[1], ranges.goal[1]),
            map_range(position[2], ranges.goal[2]),
        );
        let p = goal.transform_point(&offset.into()).coords;
        (
            TargetType::Goal,
            Pose3::from_parts(Translation3::from(p), goal.rotation),
        )
    } else {
        let local = Vec3::new(
            map_range(position[0], ranges.sub_goal[0]),
            map_range(position[1], ranges.sub_goal[1]),
            map_range(position[2], ranges.sub_goal[2]),
        );
        let p = robot.transform_point(&local.into()).coords;
        (
            TargetType::SubGoal,
            Pose3::from_parts(Translation3::from(p), robot.rotation * intrinsic_rpy(rpy)),
        )
    }
}

/// Base pose after driving `(v, ω)` for `duration`, in closed form.
pub fn unicycle_endpoint(b: &BaseState, v: f64, omega: f64, duration: f64) -> BaseState {
    let yaw_end = b.yaw + omega * duration;
    if omega.abs() < 1e-12 {
        return BaseState::new(
            b.x + v * duration * b.yaw.cos(),
            b.y + v * duration * b.yaw.sin(),
            b.yaw,
        );
    }
    let r = v / omega;
    BaseState::new(
        b.x + r * (yaw_end.sin() - b.yaw.sin()),
        b.y - r * (yaw_end.cos() - b.yaw.cos()),
        yaw_end,
    )
}

/// What one discrete action aims at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiscreteTarget {
    Goal,
    /// Base motion primitive held for the action duration.
    Primitive {
        v: f64,
        omega: f64,
    },
    /// End effector moved this fraction of the way to the goal.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteEntry {
    pub model: ModelIndex,
    pub target: DiscreteTarget,
}

impl DiscreteEntry {
    pub fn target_type(&self) -> TargetType {
        match self.target {
            DiscreteTarget::Goal => TargetType::Goal,
            _ => TargetType::SubGoal,
        }
    }
}

impl fmt::Display for DiscreteTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiscreteTarget::Goal => write!(f, "goal"),
            DiscreteTarget::Primitive { v, omega } => write!(f, "primitive v={v} omega={omega}"),
            DiscreteTarget::Fraction(s) => write!(f, "fraction {s}"),
        }
    }
}

/// Ordered discrete table: model-major, the goal first and then the sub-goals.
pub fn build_discrete_table(chain: &KinematicChain) -> Vec<DiscreteEntry> {
    let v_max = chain.base.max_linear_velocity;
    let w_max = chain.base.max_angular_velocity;
    let mut table = Vec::with_capacity(DISCRETE_LEN);
    for m in ModelIndex::ALL {
        table.push(DiscreteEntry {
            model: m,
            target: DiscreteTarget::Goal,
        });
        if m == ModelIndex::Arm {
            for k in 1..=8 {
                table.push(DiscreteEntry {
                    model: m,
                    target: DiscreteTarget::Fraction(k as f64 / 8.0),
                });
            }
        } else {
            for v in [0.5 * v_max, v_max] {
                for omega in [-w_max, -0.5 * w_max, 0.5 * w_max, w_max] {
                    table.push(DiscreteEntry {
                        model: m,
                        target: DiscreteTarget::Primitive { v, omega },
                    });
                }
            }
        }
    }
    table
}

/// A decoded action, ready to become an NMPC problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAction {
    pub model: ModelIndex,
    pub costs: CostSpec,
    pub constraints: Vec<ConstraintGroup>,
    pub target_type: TargetType,
    /// Target of the tracked frame: the end effector, or for the base model
    /// the planar base pose.
    pub target: Pose3,
}

/// Decoder for both action spaces.
#[derive(Debug, Clone)]
pub struct ActionCodec {
    config: CodecConfig,
    chain: Arc<KinematicChain>,
    action_duration: f64,
    table: Vec<DiscreteEntry>,
}

impl ActionCodec {
    pub fn new(config: CodecConfig, chain: Arc<KinematicChain>, action_duration: f64) -> Result<Self> {
        config.validate(chain.n_joints())?;
        let table = build_discrete_table(&chain);
        Ok(Self {
            config,
            chain,
            action_duration,
            table,
        })
    }

    pub fn table(&self) -> &[DiscreteEntry] {
        &self.table
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    /// Planar base target that brings the end effector (in its home
    /// configuration) over `ee_target`, stopped `standoff` short along the
    /// resulting heading.
    pub fn base_target_for(&self, ee_target: &Pose3, standoff: f64) -> Pose3 {
        let home = self.chain.home_state(BaseState::default());
        let ee_in_base = self.chain.ee_in_base(&home);
        let base = ee_target * ee_in_base.inverse();
        let yaw = yaw_of(&base.rotation);
        planar_pose(
            base.translation.x - standoff * yaw.cos(),
            base.translation.y - standoff * yaw.sin(),
            yaw,
        )
    }

    fn decoded(
        &self,
        m: ModelIndex,
        constraints: Vec<ConstraintGroup>,
        target_type: TargetType,
        target: Pose3,
    ) -> DecodedAction {
        DecodedAction {
            model: m,
            costs: self.config.costs.get(m).clone(),
            constraints,
            target_type,
            target,
        }
    }

    pub fn decode_continuous(
        &self,
        a: &ContinuousAction,
        state: &WholeBodyState,
        goal: &Pose3,
    ) -> Result<DecodedAction> {
        let m = decode_model(a.model);
        let constraints = decode_constraints(&a.constraints, m, &self.chain)?;
        let robot = state.base.pose();
        let (tt, ee_target) = decode_target(
            a.target_type,
            a.position,
            a.rpy,
            &robot,
            goal,
            &self.config.target_ranges,
        );
        let target = match (m, tt) {
            (ModelIndex::Base, TargetType::Goal) => self.base_target_for(&ee_target, self.config.base_goal_standoff),
            (ModelIndex::Base, TargetType::SubGoal) => planar_pose(
                ee_target.translation.x,
                ee_target.translation.y,
                yaw_of(&ee_target.rotation),
            ),
            _ => ee_target,
        };
        Ok(self.decoded(m, constraints, tt, target))
    }

    pub fn decode_discrete(&self, index: usize, state: &WholeBodyState, goal: &Pose3) -> Result<DecodedAction> {
        let entry = *self.table.get(index).ok_or(Error::IndexOutOfRange {
            index,
            size: self.table.len(),
        })?;
        let m = entry.model;
        let target = match entry.target {
            DiscreteTarget::Goal if m == ModelIndex::Base => self.base_target_for(goal, self.config.base_goal_standoff),
            DiscreteTarget::Goal => *goal,
            DiscreteTarget::Primitive { v, omega } => {
                let end = unicycle_endpoint(&state.base, v, omega, self.action_duration);
                if m == ModelIndex::Base {
                    end.pose()
                } else {
                    end.pose() * self.chain.ee_in_base(state)
                }
            }
            DiscreteTarget::Fraction(s) => {
                let ee = self.chain.forward_kinematics(state).translation.vector;
                let p = ee * (1.0 - s) + goal.translation.vector * s;
                Pose3::from_parts(Translation3::from(p), goal.rotation)
            }
        };
        Ok(self.decoded(m, all_constraints(m, &self.chain), entry.target_type(), target))
    }
}
