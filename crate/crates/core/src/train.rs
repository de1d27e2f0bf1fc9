//! DQN training over the policy-in-the-loop episode runner.

use crate::drl::{Checkpoint, DqnAgent};
use crate::env::ResetSpec;
use crate::error::Result;
use crate::eval::derive_seed;
use crate::pipeline::{EpisodeResult, Pipeline};

/// Seed stream reserved for training resets.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
/// Seed stream reserved for seeded greedy evaluation.
const EVAL_STREAM: u64 = 0x6576_616c_0000_0000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub episode: usize,
    pub reward: f64,
    /// Outcome name, or `error` when the episode aborted.
    pub outcome: String,
    /// Mean TD loss over the episode's updates.
    pub loss: Option<f64>,
    /// Exploration rate at the end of the episode.
    pub epsilon: f64,
    pub rl_steps: usize,
    /// Agent steps since training started.
    pub total_steps: u64,
}

pub fn training_reset(master_seed: u64, episode: usize) -> ResetSpec {
    ResetSpec::Seed(derive_seed(master_seed, TRAIN_STREAM, episode as u64))
}

pub fn evaluation_reset(master_seed: u64, episode: usize) -> ResetSpec {
    ResetSpec::Seed(derive_seed(master_seed, EVAL_STREAM, episode as u64))
}

/// Train `agent` for `episodes` episodes with seeded random resets. An
/// episode that fails with an error is logged and skipped.
pub fn train(
    pipeline: &Pipeline,
    agent: &mut DqnAgent,
    episodes: usize,
    master_seed: u64,
    mut on_episode: impl FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>> {
    let mut env = pipeline.env()?;
    let mut solver = pipeline.solver();
    let mut log = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let reset = training_reset(master_seed, episode);
        let row = match pipeline.run_episode(&mut env, &mut solver, agent, reset) {
            Ok(r) => TrainLogRow {
                episode,
                reward: r.reward,
                outcome: r.outcome.name().to_string(),
                loss: r.mean_loss(),
                epsilon: agent.epsilon(),
                rl_steps: r.rl_steps,
                total_steps: agent.steps(),
            },
            Err(e) => {
                log::warn!("training episode {episode} aborted: {e}");
                TrainLogRow {
                    episode,
                    reward: 0.0,
                    outcome: "error".to_string(),
                    loss: None,
                    epsilon: agent.epsilon(),
                    rl_steps: 0,
                    total_steps: agent.steps(),
                }
            }
        };
        on_episode(&row);
        log.push(row);
    }
    Ok(log)
}

/// Greedy episodes of a checkpoint from seeded random resets.
pub fn evaluate_seeded(
    pipeline: &Pipeline,
    policy: &Checkpoint,
    episodes: usize,
    master_seed: u64,
) -> Result<Vec<EpisodeResult>> {
    let mut env = pipeline.env()?;
    let mut solver = pipeline.solver();
    let mut policy = policy.clone();
    (0..episodes)
        .map(|i| pipeline.run_episode(&mut env, &mut solver, &mut policy, evaluation_reset(master_seed, i)))
        .collect()
}
