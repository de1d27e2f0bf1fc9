//! Kinematic simulation of the conveyor reaching task.
//!
//! One [`Env`] runs one episode at a time. Each RL action is bracketed by
//! [`Env::begin_action`] and [`Env::end_action`]; the control steps in
//! between go through [`Env::step`].

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DVector, Translation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{closest_point_box, d_ori, d_pos, segment_segment_distance, wrap_angle, Box3, Pose3, Vec3};
use crate::robot::{integrate_for, BaseState, KinematicChain, ModelIndex, PoseSpec, WholeBodyControl, WholeBodyState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    /// Goal x is sampled uniformly from this range on reset.
    pub x_range: [f64; 2],
    pub y: f64,
    pub z: f64,
    /// Fixed goal orientation (roll, pitch, yaw).
    pub rpy: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub yaw_range: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetProgressMode {
    /// `Δp` is the fraction of the distance to the sub-target covered during the action.
    #[default]
    Formula,
    /// `Δp` is the remaining distance relative to the distance at the start of the action.
    RemainingDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Allowed base x and y, and end-effector height (m).
    pub x_limits: [f64; 2],
    pub y_limits: [f64; 2],
    pub z_limits: [f64; 2],
    pub obstacles: Vec<Box3>,
    pub goal: GoalSpec,
    pub start: StartSpec,
    /// Success when position error (m) plus orientation error (rad) is below this.
    pub success_threshold: f64,
    pub collision_distance: f64,
    pub ground_height: f64,
    /// Link index pairs whose minimum distance is observed.
    pub self_pairs: Vec<[usize; 2]>,
    pub self_collision_threshold: f64,
    /// Half-extents of the support rectangle in the base frame (m).
    pub support_half_extents: [f64; 2],
    /// Pseudo roll and pitch limits (rad).
    pub tilt_limits: [f64; 2],
    /// CoM deviation threshold for the arm-mode target reward (m).
    pub com_threshold: f64,
    pub sub_target_radius: f64,
    /// Simulation control step (s).
    pub control_dt: f64,
    /// Longest RK4 step used inside one control step (s).
    pub integration_dt: f64,
    pub target_progress_mode: TargetProgressMode,
}

/// All pairs of links that are not adjacent.
pub fn non_adjacent_pairs(n_links: usize) -> Vec<[usize; 2]> {
    let mut pairs = Vec::new();
    for i in 0..n_links {
        for j in i + 2..n_links {
            pairs.push([i, j]);
        }
    }
    pairs
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            x_limits: [-3.0, 3.0],
            y_limits: [-3.0, 2.5],
            z_limits: [0.0, 2.0],
            obstacles: vec![Box3::new(Vec3::new(0.0, 1.05, 0.25), 0.0, 4.0, 0.6, 0.5)],
            goal: GoalSpec {
                x_range: [-1.0, 1.0],
                y: 0.85,
                z: 0.7,
                rpy: [0.0, 0.0, PI / 2.0],
            },
            start: StartSpec {
                x_range: [-1.5, 1.5],
                y_range: [-2.0, -0.5],
                yaw_range: [-PI, PI],
            },
            success_threshold: 0.1,
            collision_distance: 0.02,
            ground_height: 0.0,
            self_pairs: non_adjacent_pairs(6),
            self_collision_threshold: 0.04,
            support_half_extents: [0.06, 0.04],
            tilt_limits: [0.13, 0.13],
            com_threshold: 0.05,
            sub_target_radius: 0.1,
            control_dt: 0.05,
            integration_dt: 0.01,
            target_progress_mode: TargetProgressMode::Formula,
        }
    }
}

fn check_range(key: &str, r: [f64; 2], strict: bool) -> Result<()> {
    let ok = if strict { r[0] < r[1] } else { r[0] <= r[1] };
    if ok && r.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::config(
            key,
            format!("min must be {} max", if strict { "<" } else { "<=" }),
        ))
    }
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, "must be positive"))
    }
}

impl WorldConfig {
    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        check_range("world.x_limits", self.x_limits, true)?;
        check_range("world.y_limits", self.y_limits, true)?;
        check_range("world.z_limits", self.z_limits, true)?;
        check_range("world.goal.x_range", self.goal.x_range, false)?;
        check_range("world.start.x_range", self.start.x_range, false)?;
        check_range("world.start.y_range", self.start.y_range, false)?;
        check_range("world.start.yaw_range", self.start.yaw_range, false)?;
        for (i, b) in self.obstacles.iter().enumerate() {
            if !b.is_valid() {
                return Err(Error::config(
                    format!("world.obstacles[{i}]"),
                    "extents must be positive",
                ));
            }
        }
        check_positive("world.success_threshold", self.success_threshold)?;
        check_positive("world.collision_distance", self.collision_distance)?;
        check_positive("world.sub_target_radius", self.sub_target_radius)?;
        check_positive("world.control_dt", self.control_dt)?;
        check_positive("world.integration_dt", self.integration_dt)?;
        check_positive("world.com_threshold", self.com_threshold)?;
        if self.self_collision_threshold < 0.0 {
            return Err(Error::config("world.self_collision_threshold", "must be non-negative"));
        }
        for v in self.support_half_extents.iter().chain(&self.tilt_limits) {
            if !(*v > 0.0) {
                return Err(Error::config(
                    "world.support_half_extents",
                    "support extents and tilt limits must be positive",
                ));
            }
        }
        let n = chain.n_joints();
        for p in &self.self_pairs {
            if p[0] >= n || p[1] >= n || p[0] == p[1] {
                return Err(Error::config(
                    "world.self_pairs",
                    format!("invalid link pair {p:?} for {n} links"),
                ));
            }
        }
        Ok(())
    }

    pub fn goal_orientation(&self) -> Pose3 {
        PoseSpec {
            xyz: [0.0; 3],
            rpy: self.goal.rpy,
        }
        .to_pose()
    }

    pub fn goal_pose(&self, x: f64) -> Pose3 {
        let mut p = self.goal_orientation();
        p.translation = Translation3::new(x, self.goal.y, self.goal.z);
        p
    }

    pub fn base_in_bounds(&self, b: &BaseState) -> bool {
        (self.x_limits[0]..=self.x_limits[1]).contains(&b.x) && (self.y_limits[0]..=self.y_limits[1]).contains(&b.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub tau_success: f64,
    pub tau_boundary: f64,
    pub tau_collision: f64,
    pub tau_roll: f64,
    pub tau_max_step: f64,
    pub tau_target: f64,
    /// Exponential shape of the base target reward (negative).
    pub gamma: f64,
    /// Fraction of the way to the goal where the base sub-target sits.
    pub alpha_sub: f64,
    pub w_model: f64,
    pub w_goal: f64,
    pub w_target: f64,
    /// Maximum RL actions per episode.
    pub max_steps: usize,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            tau_success: 20.0,
            tau_boundary: -10.0,
            tau_collision: -10.0,
            tau_roll: -10.0,
            tau_max_step: -5.0,
            tau_target: 1.0,
            gamma: -1.0,
            alpha_sub: 0.4,
            w_model: 1.0,
            w_goal: 1.0,
            w_target: 1.0,
            max_steps: 50,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        check_positive("rewards.tau_success", self.tau_success)?;
        for (key, v) in [
            ("rewards.tau_boundary", self.tau_boundary),
            ("rewards.tau_collision", self.tau_collision),
            ("rewards.tau_roll", self.tau_roll),
            ("rewards.tau_max_step", self.tau_max_step),
        ] {
            if !(v < 0.0) {
                return Err(Error::config(key, "must be negative"));
            }
        }
        check_positive("rewards.tau_target", self.tau_target)?;
        if !(self.alpha_sub > 0.0 && self.alpha_sub <= 1.0) {
            return Err(Error::config("rewards.alpha_sub", "must lie in (0, 1]"));
        }
        if !self.gamma.is_finite() {
            return Err(Error::config("rewards.gamma", "must be finite"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("rewards.max_steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Success,
    Boundary,
    Collision,
    Rollover,
    MaxStep,
}

impl Outcome {
    pub const TERMINAL: [Outcome; 5] = [
        Outcome::Success,
        Outcome::Rollover,
        Outcome::Collision,
        Outcome::Boundary,
        Outcome::MaxStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Running => "running",
            Outcome::Success => "success",
            Outcome::Boundary => "boundary",
            Outcome::Collision => "collision",
            Outcome::Rollover => "rollover",
            Outcome::MaxStep => "max_step",
        }
    }

    pub fn is_terminal(self) -> bool {
        self != Outcome::Running
    }

    pub fn terminal_reward(self, r: &RewardParams) -> f64 {
        match self {
            Outcome::Running => 0.0,
            Outcome::Success => r.tau_success,
            Outcome::Boundary => r.tau_boundary,
            Outcome::Collision => r.tau_collision,
            Outcome::Rollover => r.tau_roll,
            Outcome::MaxStep => r.tau_max_step,
        }
    }
}

/// Per-action bookkeeping for the target reward.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionWindow {
    pub model: ModelIndex,
    /// Base position and EE-goal distance when the action started.
    pub start_base: BaseState,
    pub start_goal_distance: f64,
    pub sub_position: [f64; 2],
    pub sub_yaw: f64,
    pub sub_reached: bool,
    pub com_deviation_sum: f64,
    pub control_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub wb: WholeBodyState,
    pub base_velocity: [f64; 2],
    pub arm_velocity: Vec<f64>,
    /// Pseudo roll and pitch (rad).
    pub tilt: [f64; 2],
    /// Completed RL actions.
    pub n: usize,
    pub time: f64,
    pub goal: Pose3,
    /// EE-goal distance at reset.
    pub initial_goal_distance: f64,
    /// Reference CoM in the base frame, fixed at reset.
    pub com_reference: Vec3,
    pub outcome: Outcome,
    pub window: Option<ActionWindow>,
    rewarded_terminal: bool,
}

impl SimState {
    pub fn ee_pose(&self, chain: &KinematicChain) -> Pose3 {
        chain.forward_kinematics(&self.wb)
    }

    pub fn goal_distance(&self, chain: &KinematicChain) -> f64 {
        d_pos(&self.ee_pose(chain).translation.vector, &self.goal.translation.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub r_model: f64,
    pub r_goal: f64,
    pub r_target: f64,
    pub r_terminal: f64,
    pub total: f64,
}

/// Sizes of the observation blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationLayout {
    pub n_occ: usize,
    pub n_self: usize,
    pub n_arm: usize,
}

impl ObservationLayout {
    pub fn new(world: &WorldConfig, chain: &KinematicChain) -> Self {
        Self {
            n_occ: world.obstacles.len(),
            n_self: world.self_pairs.len(),
            n_arm: chain.n_joints(),
        }
    }

    pub fn len(&self) -> usize {
        3 + 6 * self.n_occ + self.n_self + 2 + 2 * self.n_arm
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Observation vector `[o_goal, o_occ, o_self, o_vb, o_φb, o_θ, o_ω]`.
pub fn build_observation(s: &SimState, world: &WorldConfig, chain: &KinematicChain) -> Vec<f64> {
    let layout = ObservationLayout::new(world, chain);
    let mut o = Vec::with_capacity(layout.len());
    let base_inv = s.wb.base.pose().inverse();
    let g = base_inv.transform_point(&s.goal.translation.vector.into());
    o.extend_from_slice(&[g.x, g.y, g.z]);
    for b in &world.obstacles {
        let c = base_inv.transform_point(&b.center().into());
        o.extend_from_slice(&[c.x, c.y, c.z, b.width, b.length, b.height]);
    }
    let segments = chain.link_segments(&s.wb);
    for [i, j] in &world.self_pairs {
        o.push(segment_segment_distance(&segments[*i], &segments[*j]));
    }
    o.push(s.base_velocity[0]);
    o.push(s.base_velocity[1]);
    o.extend_from_slice(&s.wb.arm.theta);
    o.extend_from_slice(&s.arm_velocity);
    debug_assert_eq!(o.len(), layout.len());
    o
}

/// CoM expressed in the base frame.
pub fn com_in_base(chain: &KinematicChain, wb: &WholeBodyState) -> Vec3 {
    let c = chain.com_position(wb);
    wb.base.pose().inverse_transform_point(&c.into()).coords
}

/// Pseudo roll/pitch from the CoM overhang beyond the support rectangle.
pub fn pseudo_tilt(com_base: &Vec3, support_half_extents: [f64; 2]) -> [f64; 2] {
    let lateral = (com_base.y.abs() - support_half_extents[1]).max(0.0);
    let longitudinal = (com_base.x.abs() - support_half_extents[0]).max(0.0);
    let h = com_base.z.max(1e-9);
    [lateral.atan2(h), longitudinal.atan2(h)]
}

/// Whether any collision point is too close to an obstacle, below the
/// ground, or two observed links are too close to each other.
pub fn in_collision(wb: &WholeBodyState, world: &WorldConfig, chain: &KinematicChain) -> bool {
    let (links, corners) = chain.collision_points(wb);
    if links.iter().any(|p| p.z < world.ground_height) {
        return true;
    }
    for b in &world.obstacles {
        if links
            .iter()
            .chain(&corners)
            .any(|p| closest_point_box(p, b).1 < world.collision_distance)
        {
            return true;
        }
    }
    let segments = chain.link_segments(wb);
    world
        .self_pairs
        .iter()
        .any(|[i, j]| segment_segment_distance(&segments[*i], &segments[*j]) < world.self_collision_threshold)
}

/// Terminal test in priority order: success, boundary, collision, rollover, max-step.
pub fn check_terminal(s: &SimState, world: &WorldConfig, r: &RewardParams, chain: &KinematicChain) -> (Outcome, f64) {
    let ee = s.ee_pose(chain);
    let err = d_pos(&ee.translation.vector, &s.goal.translation.vector) + d_ori(&ee.rotation, &s.goal.rotation);
    let outcome = if err < world.success_threshold {
        Outcome::Success
    } else if !world.base_in_bounds(&s.wb.base)
        || !(world.z_limits[0]..=world.z_limits[1]).contains(&ee.translation.vector.z)
    {
        Outcome::Boundary
    } else if in_collision(&s.wb, world, chain) {
        Outcome::Collision
    } else if s.tilt[0] > world.tilt_limits[0] || s.tilt[1] > world.tilt_limits[1] {
        Outcome::Rollover
    } else if s.n >= r.max_steps {
        Outcome::MaxStep
    } else {
        Outcome::Running
    };
    (outcome, outcome.terminal_reward(r))
}

/// Point `α_sub` of the way from the base to the goal, and the heading toward the goal.
pub fn sub_goal(p_b: [f64; 2], p_g: [f64; 2], alpha_sub: f64, current_yaw: f64) -> ([f64; 2], f64) {
    let d = [p_g[0] - p_b[0], p_g[1] - p_b[1]];
    let p = [p_b[0] + alpha_sub * d[0], p_b[1] + alpha_sub * d[1]];
    let yaw = if d[0] == 0.0 && d[1] == 0.0 {
        current_yaw
    } else {
        d[1].atan2(d[0])
    };
    (p, yaw)
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Normalized yaw error folded so that facing away counts as aligned.
pub fn yaw_difference(sub_yaw: f64, yaw: f64) -> f64 {
    let d = wrap_angle(sub_yaw - yaw).abs();
    d.min(PI - d) / PI
}

/// Normalized progress toward the sub-target, clamped to `[0, 1]`.
pub fn target_progress(d_prev: f64, d_curr: f64, mode: TargetProgressMode) -> f64 {
    if d_prev <= 0.0 {
        return 0.0;
    }
    let v = match mode {
        TargetProgressMode::Formula => (d_prev - d_curr) / d_prev,
        TargetProgressMode::RemainingDistance => d_curr / d_prev,
    };
    v.clamp(0.0, 1.0)
}

/// Arm-mode target reward: `sgn(δ_com − Ω_com)·τ_target`.
pub fn arm_target_reward(omega_com: f64, com_threshold: f64, tau_target: f64) -> f64 {
    let d = com_threshold - omega_com;
    if d > 0.0 {
        tau_target
    } else if d < 0.0 {
        -tau_target
    } else {
        0.0
    }
}

/// `τ_target·exp(γ/2·(Δp + Δφ))` while the sub-target has not been reached.
pub fn base_target_reward(dp: f64, dphi: f64, gamma: f64, tau_target: f64) -> f64 {
    tau_target * (0.5 * gamma * (dp + dphi)).exp()
}

/// `−τ_target·exp(−γΔp)/exp(γ)` once the sub-target was reached within the action.
pub fn base_target_penalty(dp: f64, gamma: f64, tau_target: f64) -> f64 {
    -tau_target * (-gamma * dp).exp() / gamma.exp()
}

/// Step reward of one RL action. `window` describes the action that just
/// finished and `curr` the state after it.
pub fn step_reward(
    window: &ActionWindow,
    curr: &SimState,
    world: &WorldConfig,
    r: &RewardParams,
    chain: &KinematicChain,
    r_terminal: f64,
) -> RewardBreakdown {
    let n_arm = chain.n_joints();
    let r_model = -(window.model.dof(n_arm) as f64) / ModelIndex::WholeBody.dof(n_arm) as f64;
    let d_curr = curr.goal_distance(chain);
    let r_goal = if curr.initial_goal_distance > 0.0 {
        (window.start_goal_distance - d_curr) / curr.initial_goal_distance
    } else {
        0.0
    };
    let r_target = if window.model == ModelIndex::Arm {
        let omega = window.com_deviation_sum / window.control_steps.max(1) as f64;
        arm_target_reward(omega, world.com_threshold, r.tau_target)
    } else {
        let d_prev = dist2(window.start_base.position(), window.sub_position);
        let d_now = dist2(curr.wb.base.position(), window.sub_position);
        let dp = target_progress(d_prev, d_now, world.target_progress_mode);
        if window.sub_reached {
            base_target_penalty(dp, r.gamma, r.tau_target)
        } else {
            let dphi = yaw_difference(window.sub_yaw, curr.wb.base.yaw);
            base_target_reward(dp, dphi, r.gamma, r.tau_target)
        }
    };
    RewardBreakdown {
        r_model,
        r_goal,
        r_target,
        r_terminal,
        total: r.w_model * r_model + r.w_goal * r_goal + r.w_target * r_target + r_terminal,
    }
}

/// How an episode is initialized.
#[derive(Debug, Clone, PartialEq)]
pub enum ResetSpec {
    Seed(u64),
    Explicit { base: BaseState, goal: Pose3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub done: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct Env {
    world: Arc<WorldConfig>,
    rewards: RewardParams,
    chain: Arc<KinematicChain>,
    state: Option<SimState>,
}

impl Env {
    pub fn new(world: Arc<WorldConfig>, rewards: RewardParams, chain: Arc<KinematicChain>) -> Result<Self> {
        chain.validate()?;
        world.validate(&chain)?;
        rewards.validate()?;
        Ok(Self {
            world,
            rewards,
            chain,
            state: None,
        })
    }

    pub fn world(&self) -> &WorldConfig {
        &self.world
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn rewards(&self) -> &RewardParams {
        &self.rewards
    }

    pub fn layout(&self) -> ObservationLayout {
        ObservationLayout::new(&self.world, &self.chain)
    }

    pub fn state(&self) -> Option<&SimState> {
        self.state.as_ref()
    }

    fn running_state(&self) -> Result<&SimState> {
        self.state.as_ref().ok_or(Error::Lifecycle("episode not started"))
    }

    pub fn reset(&mut self, spec: ResetSpec) -> Result<Vec<f64>> {
        let (base, goal) = match spec {
            ResetSpec::Seed(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let st = &self.world.start;
                let mut sample = |r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..r[1]) } else { r[0] };
                let x = sample(st.x_range);
                let y = sample(st.y_range);
                let yaw = sample(st.yaw_range);
                let gx = sample(self.world.goal.x_range);
                (BaseState::new(x, y, yaw), self.world.goal_pose(gx))
            }
            ResetSpec::Explicit { base, goal } => {
                if !self.world.base_in_bounds(&base) || !base.yaw.is_finite() {
                    return Err(Error::config(
                        "reset.base",
                        "explicit base pose lies outside the world limits",
                    ));
                }
                (BaseState::new(base.x, base.y, base.yaw), goal)
            }
        };
        let wb = self.chain.home_state(base);
        let n_arm = self.chain.n_joints();
        let com_reference = com_in_base(&self.chain, &wb);
        let mut s = SimState {
            tilt: pseudo_tilt(&com_reference, self.world.support_half_extents),
            wb,
            base_velocity: [0.0; 2],
            arm_velocity: vec![0.0; n_arm],
            n: 0,
            time: 0.0,
            goal,
            initial_goal_distance: 0.0,
            com_reference,
            outcome: Outcome::Running,
            window: None,
            rewarded_terminal: false,
        };
        s.initial_goal_distance = s.goal_distance(&self.chain);
        let obs = build_observation(&s, &self.world, &self.chain);
        self.state = Some(s);
        Ok(obs)
    }

    pub fn observation(&self) -> Result<Vec<f64>> {
        Ok(build_observation(self.running_state()?, &self.world, &self.chain))
    }

    /// Open the bookkeeping window of a new RL action executed with model `m`.
    pub fn begin_action(&mut self, m: ModelIndex) -> Result<()> {
        let chain = Arc::clone(&self.chain);
        let alpha = self.rewards.alpha_sub;
        let s = self.state.as_mut().ok_or(Error::Lifecycle("episode not started"))?;
        if s.outcome.is_terminal() {
            return Err(Error::Lifecycle("episode already finished"));
        }
        if s.window.is_some() {
            return Err(Error::Lifecycle("previous action not finished"));
        }
        let g = s.goal.translation.vector;
        let (sub_position, sub_yaw) = sub_goal(s.wb.base.position(), [g.x, g.y], alpha, s.wb.base.yaw);
        s.window = Some(ActionWindow {
            model: m,
            start_base: s.wb.base,
            start_goal_distance: s.goal_distance(&chain),
            sub_position,
            sub_yaw,
            sub_reached: false,
            com_deviation_sum: 0.0,
            control_steps: 0,
        });
        Ok(())
    }

    /// Apply `u` (clamped to the velocity limits) for one control step.
    pub fn step(&mut self, u: &WholeBodyControl) -> Result<StepResult> {
        self.step_for(u, self.world.control_dt)
    }

    /// Hold `u` for `duration` seconds of simulated time.
    pub fn step_for(&mut self, u: &WholeBodyControl, duration: f64) -> Result<StepResult> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::config("step.duration", "must be positive"));
        }
        let chain = Arc::clone(&self.chain);
        let world = Arc::clone(&self.world);
        let s = self.state.as_mut().ok_or(Error::Lifecycle("episode not started"))?;
        if s.outcome.is_terminal() {
            return Err(Error::Lifecycle("step called after the episode finished"));
        }
        let n_arm = chain.n_joints();
        if u.arm.rates.len() != n_arm {
            return Err(Error::dim("env step control", n_arm, u.arm.rates.len()));
        }
        let b = &chain.base;
        let v = u.base.v.clamp(-b.max_linear_velocity, b.max_linear_velocity);
        let w = u.base.omega.clamp(-b.max_angular_velocity, b.max_angular_velocity);
        let rates: Vec<f64> = u
            .arm
            .rates
            .iter()
            .zip(&chain.joints)
            .map(|(r, j)| r.clamp(-j.velocity_limit, j.velocity_limit))
            .collect();
        let mut uv = DVector::zeros(2 + n_arm);
        uv[0] = v;
        uv[1] = w;
        for (i, r) in rates.iter().enumerate() {
            uv[2 + i] = *r;
        }
        let x = ModelIndex::WholeBody.state_vector(&s.wb);
        let next = integrate_for(ModelIndex::WholeBody, &x, &uv, duration, world.integration_dt);
        ModelIndex::WholeBody.write_state(&next, &mut s.wb);
        for (t, j) in s.wb.arm.theta.iter_mut().zip(&chain.joints) {
            *t = t.clamp(j.position_limits[0], j.position_limits[1]);
        }
        s.base_velocity = [v, w];
        s.arm_velocity = rates;
        s.time += duration;

        let com = com_in_base(&chain, &s.wb);
        s.tilt = pseudo_tilt(&com, world.support_half_extents);
        if let Some(win) = s.window.as_mut() {
            win.com_deviation_sum += d_pos(&com, &s.com_reference);
            win.control_steps += 1;
            if dist2(s.wb.base.position(), win.sub_position) < world.sub_target_radius {
                win.sub_reached = true;
            }
        }
        let (outcome, _) = check_terminal(s, &world, &self.rewards, &chain);
        // the step budget is only checked between actions
        if outcome != Outcome::MaxStep {
            s.outcome = outcome;
        }
        Ok(StepResult {
            observation: build_observation(s, &world, &chain),
            done: s.outcome.is_terminal(),
            outcome: s.outcome,
        })
    }

    /// Close the current action window: count the action, apply the step
    /// budget and return its reward.
    pub fn end_action(&mut self) -> Result<(RewardBreakdown, Outcome)> {
        let chain = Arc::clone(&self.chain);
        let world = Arc::clone(&self.world);
        let s = self.state.as_mut().ok_or(Error::Lifecycle("episode not started"))?;
        let window = s.window.take().ok_or(Error::Lifecycle("no action in progress"))?;
        if s.rewarded_terminal {
            return Err(Error::Lifecycle("no rewards after the episode finished"));
        }
        s.n += 1;
        if !s.outcome.is_terminal() {
            s.outcome = check_terminal(s, &world, &self.rewards, &chain).0;
        }
        let r_terminal = s.outcome.terminal_reward(&self.rewards);
        if s.outcome.is_terminal() {
            s.rewarded_terminal = true;
        }
        Ok((
            step_reward(&window, s, &world, &self.rewards, &chain, r_terminal),
            s.outcome,
        ))
    }
}
