//! The 3×3×3×4 start/goal evaluation grid and its metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::drl::Checkpoint;
use crate::env::{Outcome, ResetSpec, WorldConfig};
use crate::error::{Error, Result};
use crate::pipeline::{EpisodeResult, ModelTiming, Pipeline};
use crate::robot::{BaseState, ModelIndex};

pub const GRID_BASE_X: usize = 3;
pub const GRID_BASE_Y: usize = 3;
pub const GRID_GOAL_X: usize = 3;
pub const GRID_YAW: usize = 4;
pub const GRID_SIZE: usize = GRID_BASE_X * GRID_BASE_Y * GRID_GOAL_X * GRID_YAW;

/// Mix a master seed with two indices into an independent stream seed.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng.gen()
}

/// `n` evenly spaced points covering `[lo, hi]`, the midpoint when `n = 1`.
pub fn linspace(r: [f64; 2], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (r[0] + r[1])];
    }
    (0..n)
        .map(|i| r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64)
        .collect()
}

/// `n` yaw values evenly spaced over `[-π, π)`.
pub fn yaw_samples(n: usize) -> Vec<f64> {
    (0..n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub base: BaseState,
    pub goal_x: f64,
}

/// All grid configurations, base x varying slowest and yaw fastest.
pub fn grid_points(world: &WorldConfig) -> Vec<GridPoint> {
    let mut out = Vec::with_capacity(GRID_SIZE);
    for x in linspace(world.start.x_range, GRID_BASE_X) {
        for y in linspace(world.start.y_range, GRID_BASE_Y) {
            for gx in linspace(world.goal.x_range, GRID_GOAL_X) {
                for yaw in yaw_samples(GRID_YAW) {
                    out.push(GridPoint {
                        index: out.len(),
                        base: BaseState { x, y, yaw },
                        goal_x: gx,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub enum Method {
    Baseline,
    Policy(Checkpoint),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "wb_nmpc",
            Method::Policy(_) => "dqn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub config_index: usize,
    pub run: usize,
    pub seed: u64,
    pub result: EpisodeResult,
}

/// Aggregate outcome shares and solve-time statistics of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub episodes: usize,
    pub counts: [usize; Outcome::TERMINAL.len()],
    pub timing: [ModelTiming; ModelIndex::COUNT],
}

impl MetricsRow {
    pub fn from_results<'a>(method: &str, results: impl IntoIterator<Item = &'a EpisodeResult>) -> Self {
        let mut row = MetricsRow {
            method: method.to_string(),
            episodes: 0,
            counts: [0; Outcome::TERMINAL.len()],
            timing: Default::default(),
        };
        for r in results {
            row.episodes += 1;
            if let Some(k) = Outcome::TERMINAL.iter().position(|o| *o == r.outcome) {
                row.counts[k] += 1;
            }
            for (acc, t) in row.timing.iter_mut().zip(&r.timing) {
                acc.merge(t);
            }
        }
        row
    }

    /// Share of episodes (percent) ending in `o`.
    pub fn pct(&self, o: Outcome) -> f64 {
        match Outcome::TERMINAL.iter().position(|x| *x == o) {
            Some(k) if self.episodes > 0 => 100.0 * self.counts[k] as f64 / self.episodes as f64,
            _ => 0.0,
        }
    }

    pub fn calls(&self, m: ModelIndex) -> usize {
        self.timing[m.index()].calls()
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: MetricsRow,
    pub episodes: Vec<EpisodeRecord>,
}

/// Start pose of one run: the grid pose plus a seeded uniform jitter.
pub fn jittered(p: &GridPoint, seed: u64, pos: f64, yaw: f64, world: &WorldConfig) -> BaseState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut j = |s: f64| if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 };
    let x = (p.base.x + j(pos)).clamp(world.x_limits[0], world.x_limits[1]);
    let y = (p.base.y + j(pos)).clamp(world.y_limits[0], world.y_limits[1]);
    BaseState::new(x, y, p.base.yaw + j(yaw))
}

/// Run `method` on every configuration of `points` `runs` times. Episodes
/// are fanned out over a worker pool; results keep grid order.
pub fn eval_points(pipeline: &Pipeline, method: &Method, points: &[GridPoint], master_seed: u64) -> Result<EvalReport> {
    let cfg = pipeline.config();
    let runs = cfg.eval.runs;
    let jobs: Vec<(GridPoint, usize)> = points.iter().flat_map(|p| (0..runs).map(move |r| (*p, r))).collect();
    let run_one = |(p, run): &(GridPoint, usize)| -> Result<EpisodeRecord> {
        let seed = derive_seed(master_seed, p.index as u64, *run as u64);
        let base = jittered(p, seed, cfg.eval.position_jitter, cfg.eval.yaw_jitter, &cfg.world);
        let reset = ResetSpec::Explicit {
            base,
            goal: cfg.world.goal_pose(p.goal_x),
        };
        let mut env = pipeline.env()?;
        let mut solver = pipeline.solver();
        let result = match method {
            Method::Baseline => pipeline.run_episode_baseline(&mut env, &mut solver, reset)?,
            Method::Policy(c) => {
                let mut policy = c.clone();
                pipeline.run_episode(&mut env, &mut solver, &mut policy, reset)?
            }
        };
        Ok(EpisodeRecord {
            config_index: p.index,
            run: *run,
            seed,
            result,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.eval.workers)
        .build()
        .map_err(|e| Error::config("eval.workers", e.to_string()))?;
    let episodes: Vec<EpisodeRecord> = pool.install(|| jobs.par_iter().map(run_one).collect::<Result<_>>())?;
    let metrics = MetricsRow::from_results(method.name(), episodes.iter().map(|e| &e.result));
    Ok(EvalReport { metrics, episodes })
}

/// The full 108-configuration grid.
pub fn eval_grid(pipeline: &Pipeline, method: &Method, master_seed: u64) -> Result<EvalReport> {
    eval_points(pipeline, method, &grid_points(&pipeline.config().world), master_seed)
}
