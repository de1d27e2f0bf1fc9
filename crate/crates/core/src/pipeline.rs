//! The policy-in-the-loop episode runner and the whole-body baseline.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::action::{all_constraints, ActionCodec, ContinuousAction, DecodedAction, TargetType, DISCRETE_LEN};
use crate::config::{PipelineConfig, TimingMode};
use crate::drl::{Checkpoint, DqnAgent, Transition};
use crate::env::{Env, ObservationLayout, Outcome, ResetSpec};
use crate::error::{Error, Result};
use crate::robot::{map_whole_body_control, KinematicChain, ModelIndex, WholeBodyControl};
use crate::slq::{MpcSolver, NmpcProblem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyAction {
    Discrete(usize),
    Continuous(ContinuousAction),
}

pub trait Policy {
    fn act(&mut self, observation: &[f64]) -> Result<PolicyAction>;

    /// Called once per RL step taken with a discrete action; returns a
    /// training loss when the policy learned from it.
    fn observe(&mut self, _transition: Transition) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Emits the same action every step.
#[derive(Debug, Clone, Copy)]
pub struct FixedPolicy(pub PolicyAction);

impl Policy for FixedPolicy {
    fn act(&mut self, _observation: &[f64]) -> Result<PolicyAction> {
        Ok(self.0)
    }
}

impl Policy for Checkpoint {
    fn act(&mut self, observation: &[f64]) -> Result<PolicyAction> {
        Ok(PolicyAction::Discrete(self.greedy(observation)?))
    }
}

/// ε-greedy acting with learning from every transition.
impl Policy for DqnAgent {
    fn act(&mut self, observation: &[f64]) -> Result<PolicyAction> {
        Ok(PolicyAction::Discrete(DqnAgent::act(self, observation)?))
    }

    fn observe(&mut self, transition: Transition) -> Result<Option<f64>> {
        DqnAgent::observe(self, transition)
    }
}

/// Solve-time statistics of one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelTiming {
    /// Wall-clock solve times (s), one per `mpc_step` call.
    pub solve_times: Vec<f64>,
}

impl ModelTiming {
    pub fn calls(&self) -> usize {
        self.solve_times.len()
    }

    pub fn record(&mut self, seconds: f64) {
        self.solve_times.push(seconds);
    }

    pub fn merge(&mut self, other: &ModelTiming) {
        self.solve_times.extend_from_slice(&other.solve_times);
    }

    /// Mean solve time in milliseconds, 0 without calls.
    pub fn mean_ms(&self) -> f64 {
        if self.solve_times.is_empty() {
            return 0.0;
        }
        1e3 * self.solve_times.iter().sum::<f64>() / self.solve_times.len() as f64
    }

    /// Population standard deviation in milliseconds.
    pub fn std_ms(&self) -> f64 {
        let n = self.solve_times.len();
        if n == 0 {
            return 0.0;
        }
        let mean = self.mean_ms();
        let var = self.solve_times.iter().map(|t| (1e3 * t - mean).powi(2)).sum::<f64>() / n as f64;
        var.sqrt()
    }
}

/// One executed control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Simulated time after the step (s).
    pub t: f64,
    pub x_b: f64,
    pub y_b: f64,
    pub yaw: f64,
    /// Pseudo roll and pitch after the step (rad).
    pub tilt: [f64; 2],
    pub model: ModelIndex,
    pub target_type: TargetType,
    /// Episode status after the step.
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub rl_steps: usize,
    pub reward: f64,
    pub timing: [ModelTiming; ModelIndex::COUNT],
    /// Control steps whose solve failed and fell back to zero control.
    pub divergences: usize,
    pub trace: Vec<TraceRow>,
    pub losses: Vec<f64>,
}

impl Default for EpisodeResult {
    fn default() -> Self {
        Self::new()
    }
}

impl EpisodeResult {
    pub fn new() -> Self {
        Self {
            outcome: Outcome::Running,
            rl_steps: 0,
            reward: 0.0,
            timing: Default::default(),
            divergences: 0,
            trace: Vec::new(),
            losses: Vec::new(),
        }
    }

    pub fn control_steps(&self) -> usize {
        self.trace.len()
    }

    pub fn mean_loss(&self) -> Option<f64> {
        if self.losses.is_empty() {
            None
        } else {
            Some(self.losses.iter().sum::<f64>() / self.losses.len() as f64)
        }
    }
}

/// Shared, immutable pieces of a configured pipeline.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    world: Arc<crate::env::WorldConfig>,
    chain: Arc<KinematicChain>,
    codec: ActionCodec,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let chain = Arc::new(config.chain.clone());
        let codec = ActionCodec::new(config.codec.clone(), Arc::clone(&chain), config.action_duration)?;
        Ok(Self {
            world: Arc::new(config.world.clone()),
            chain,
            codec,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn codec(&self) -> &ActionCodec {
        &self.codec
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn layout(&self) -> ObservationLayout {
        ObservationLayout::new(&self.world, &self.chain)
    }

    pub fn n_actions(&self) -> usize {
        DISCRETE_LEN
    }

    pub fn env(&self) -> Result<Env> {
        Env::new(
            Arc::clone(&self.world),
            self.config.rewards.clone(),
            Arc::clone(&self.chain),
        )
    }

    pub fn solver(&self) -> MpcSolver {
        MpcSolver::new(self.config.world.control_dt)
    }

    /// Fresh agent sized for this pipeline.
    pub fn agent(&self) -> Result<DqnAgent> {
        DqnAgent::new(self.layout().len(), self.n_actions(), self.config.dqn.clone())
    }

    fn sync_steps(&self) -> usize {
        ((self.config.action_duration / self.config.world.control_dt) - 1e-9)
            .ceil()
            .max(1.0) as usize
    }

    /// The baseline's fixed decision: whole-body model, goal target, all constraints.
    pub fn baseline_action(&self, goal: &crate::geometry::Pose3) -> DecodedAction {
        let m = ModelIndex::WholeBody;
        DecodedAction {
            model: m,
            costs: self.config.codec.costs.get(m).clone(),
            constraints: all_constraints(m, &self.chain),
            target_type: TargetType::Goal,
            target: *goal,
        }
    }

    /// Run control steps of one decoded action until the action duration has
    /// elapsed or the episode ends.
    fn execute(&self, env: &mut Env, solver: &mut MpcSolver, a: &DecodedAction, out: &mut EpisodeResult) -> Result<()> {
        let n_arm = self.chain.n_joints();
        let duration = self.config.action_duration;
        let sync_steps = self.sync_steps();
        let mut t_p = 0.0;
        let mut k = 0;
        loop {
            let more = match self.config.timing_mode {
                TimingMode::Sync => k < sync_steps,
                TimingMode::Realtime => t_p < duration,
            };
            if !more {
                return Ok(());
            }
            let state = env.state().ok_or(Error::Lifecycle("episode not started"))?;
            let problem = NmpcProblem {
                model: a.model,
                costs: a.costs.clone(),
                constraints: a.constraints.clone(),
                state: state.wb.clone(),
                target: a.target,
                settings: self.config.solver.clone(),
                rbf: self.config.rbf,
            };
            let start = Instant::now();
            let (u, dtp) = match solver.mpc_step(&problem, &self.chain) {
                Ok(step) => (map_whole_body_control(a.model, &step.control, n_arm)?, step.solve_time),
                Err(Error::SolverDiverged { iterations, .. }) => {
                    log::debug!("solver diverged after {iterations} iterations, holding zero control");
                    out.divergences += 1;
                    (WholeBodyControl::zeros(n_arm), start.elapsed().as_secs_f64().max(1e-9))
                }
                Err(e) => return Err(e),
            };
            out.timing[a.model.index()].record(dtp);
            let hold = match self.config.timing_mode {
                TimingMode::Sync => self.config.world.control_dt,
                TimingMode::Realtime => dtp,
            };
            let r = env.step_for(&u, hold)?;
            let s = env.state().ok_or(Error::Lifecycle("episode not started"))?;
            out.trace.push(TraceRow {
                step: out.trace.len(),
                t: s.time,
                x_b: s.wb.base.x,
                y_b: s.wb.base.y,
                yaw: s.wb.base.yaw,
                tilt: s.tilt,
                model: a.model,
                target_type: a.target_type,
                outcome: r.outcome,
            });
            t_p += hold;
            k += 1;
            if r.done {
                return Ok(());
            }
        }
    }

    /// One episode with `policy` choosing the NMPC setting of every RL step.
    pub fn run_episode(
        &self,
        env: &mut Env,
        solver: &mut MpcSolver,
        policy: &mut dyn Policy,
        reset: ResetSpec,
    ) -> Result<EpisodeResult> {
        let mut out = EpisodeResult::new();
        let mut obs = env.reset(reset)?;
        solver.reset();
        loop {
            let action = policy.act(&obs)?;
            let s = env.state().ok_or(Error::Lifecycle("episode not started"))?;
            let decoded = match &action {
                PolicyAction::Discrete(i) => self.codec.decode_discrete(*i, &s.wb, &s.goal)?,
                PolicyAction::Continuous(a) => self.codec.decode_continuous(a, &s.wb, &s.goal)?,
            };
            env.begin_action(decoded.model)?;
            self.execute(env, solver, &decoded, &mut out)?;
            let (reward, outcome) = env.end_action()?;
            out.reward += reward.total;
            out.rl_steps += 1;
            let next = env.observation()?;
            if let PolicyAction::Discrete(i) = action {
                let t = Transition {
                    observation: obs,
                    action: i,
                    reward: reward.total,
                    next_observation: next.clone(),
                    done: outcome.is_terminal(),
                };
                if let Some(loss) = policy.observe(t)? {
                    out.losses.push(loss);
                }
            }
            obs = next;
            if outcome.is_terminal() {
                out.outcome = outcome;
                return Ok(out);
            }
        }
    }

    /// Whole-body NMPC tracking the goal at every control step. Actions are
    /// still grouped into windows of the action duration so that the step
    /// budget and rewards match the policy runner.
    pub fn run_episode_baseline(
        &self,
        env: &mut Env,
        solver: &mut MpcSolver,
        reset: ResetSpec,
    ) -> Result<EpisodeResult> {
        let mut out = EpisodeResult::new();
        env.reset(reset)?;
        solver.reset();
        loop {
            let goal = env.state().ok_or(Error::Lifecycle("episode not started"))?.goal;
            let decoded = self.baseline_action(&goal);
            env.begin_action(decoded.model)?;
            self.execute(env, solver, &decoded, &mut out)?;
            let (reward, outcome) = env.end_action()?;
            out.reward += reward.total;
            out.rl_steps += 1;
            if outcome.is_terminal() {
                out.outcome = outcome;
                return Ok(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::planar_pose;
    use crate::robot::BaseState;

    fn fast_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.solver.dt = 0.1;
        c.solver.max_iterations = 3;
        c.action_duration = 0.2;
        c.rewards.max_steps = 3;
        c
    }

    #[test]
    fn one_control_step_per_action_when_durations_match() {
        let mut c = fast_config();
        c.action_duration = c.world.control_dt;
        let p = Pipeline::new(c).unwrap();
        let mut env = p.env().unwrap();
        let mut solver = p.solver();
        let mut policy = FixedPolicy(PolicyAction::Discrete(0));
        let r = p
            .run_episode(&mut env, &mut solver, &mut policy, ResetSpec::Seed(1))
            .unwrap();
        assert_eq!(r.control_steps(), r.rl_steps);
        let calls: usize = r.timing.iter().map(|t| t.calls()).sum();
        assert_eq!(calls, r.control_steps());
    }

    #[test]
    fn step_budget_ends_in_max_step() {
        let p = Pipeline::new(fast_config()).unwrap();
        let mut env = p.env().unwrap();
        let mut solver = p.solver();
        // arm fraction 1/8 toward the goal from far away: neither success nor failure in 3 actions
        let mut policy = FixedPolicy(PolicyAction::Discrete(10));
        let reset = ResetSpec::Explicit {
            base: BaseState::new(0.0, -2.0, 0.0),
            goal: planar_pose(0.0, 0.85, 0.0) * p.config().world.goal_orientation(),
        };
        let r = p.run_episode(&mut env, &mut solver, &mut policy, reset).unwrap();
        assert_eq!(r.outcome, Outcome::MaxStep);
        assert_eq!(r.rl_steps, 3);
        assert_eq!(r.control_steps(), 3 * 4);
        assert!(r.reward <= p.config().rewards.tau_max_step + 3.0 * 2.0);
        assert!(r.timing[ModelIndex::Arm.index()].solve_times.iter().all(|t| *t > 0.0));
    }

    #[test]
    fn baseline_uses_whole_body_only() {
        let p = Pipeline::new(fast_config()).unwrap();
        let mut env = p.env().unwrap();
        let mut solver = p.solver();
        let r = p
            .run_episode_baseline(&mut env, &mut solver, ResetSpec::Seed(3))
            .unwrap();
        assert!(r
            .trace
            .iter()
            .all(|t| t.model == ModelIndex::WholeBody && t.target_type == TargetType::Goal));
        assert_eq!(r.timing[0].calls(), 0);
        assert_eq!(r.timing[1].calls(), 0);
        assert_eq!(r.timing[2].calls(), r.control_steps());
    }

    #[test]
    fn realtime_mode_advances_by_solve_time() {
        let mut c = fast_config();
        c.timing_mode = TimingMode::Realtime;
        c.rewards.max_steps = 1;
        let p = Pipeline::new(c).unwrap();
        let mut env = p.env().unwrap();
        let mut solver = p.solver();
        let r = p
            .run_episode_baseline(&mut env, &mut solver, ResetSpec::Seed(3))
            .unwrap();
        let total: f64 = r.timing[2].solve_times.iter().sum();
        let last = r.trace.last().unwrap();
        assert!((last.t - total).abs() < 1e-9);
        assert!(last.t >= p.config().action_duration || last.outcome.is_terminal());
    }

    #[test]
    fn timing_statistics() {
        let t = ModelTiming {
            solve_times: vec![0.001, 0.003],
        };
        assert!((t.mean_ms() - 2.0).abs() < 1e-12);
        assert!((t.std_ms() - 1.0).abs() < 1e-12);
        assert_eq!(ModelTiming::default().mean_ms(), 0.0);
    }
}
