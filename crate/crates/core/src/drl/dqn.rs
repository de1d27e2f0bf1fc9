use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::replay::{ReplayBuffer, Transition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub learning_rate: f64,
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which ε decays linearly.
    pub epsilon_decay_steps: u64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Updates between target-network syncs.
    pub target_sync: u64,
    pub hidden: Vec<usize>,
    pub max_grad_norm: f64,
    /// Observations used to fit the normalizer before it is frozen.
    pub normalizer_warmup: u64,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            discount: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            replay_capacity: 50_000,
            batch_size: 64,
            target_sync: 500,
            hidden: vec![400, 300],
            max_grad_norm: 10.0,
            normalizer_warmup: 1_000,
            seed: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("dqn.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::config("dqn.discount", "must lie in [0, 1)"));
        }
        for (key, v) in [
            ("dqn.epsilon_start", self.epsilon_start),
            ("dqn.epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("dqn.batch_size", "must be at least 1"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::config("dqn.replay_capacity", "must be at least the batch size"));
        }
        if self.target_sync == 0 {
            return Err(Error::config("dqn.target_sync", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("dqn.hidden", "layer widths must be positive"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::config("dqn.max_grad_norm", "must be positive"));
        }
        Ok(())
    }

    pub fn epsilon(&self, step: u64) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let f = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + f * (self.epsilon_end - self.epsilon_start)
    }
}

/// Per-feature standardization from running statistics, frozen after a warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations (Welford).
    pub m2: Vec<f64>,
    pub frozen_after: u64,
}

impl Normalizer {
    pub fn new(dim: usize, frozen_after: u64) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            frozen_after,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.count >= self.frozen_after
    }

    pub fn update(&mut self, x: &[f64]) {
        if self.is_frozen() {
            return;
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.count < 2 {
            return x.to_vec();
        }
        let n = self.count as f64;
        x.iter()
            .zip(self.mean.iter().zip(&self.m2))
            .map(|(v, (m, s))| {
                let var = s / (n - 1.0);
                let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
                (v - m) / sd
            })
            .collect()
    }
}

/// Index of the largest value, the lowest index on ties.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy choice over `q`.
pub fn select_action<R: Rng>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, n: usize, dim: usize) -> Array2<f64> {
    let data: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((n, dim), data).expect("rows share the observation length")
}

/// One gradient step on the TD targets `r + γ·max_a' Q_target(o', a')·(1 − done)`.
/// Returns the loss before the step.
pub fn dqn_update(
    online: &mut Mlp,
    target: &Mlp,
    batch: &[&Transition],
    normalizer: &Normalizer,
    cfg: &DqnConfig,
) -> Result<f64> {
    let n = batch.len();
    let dim = online.input_dim();
    for t in batch {
        if t.observation.len() != dim || t.next_observation.len() != dim {
            return Err(Error::dim("transition observation", dim, t.observation.len()));
        }
    }
    let x = stack(batch.iter().map(|t| normalizer.apply(&t.observation)), n, dim);
    let x_next = stack(batch.iter().map(|t| normalizer.apply(&t.next_observation)), n, dim);
    let q_next = target.forward_batch(x_next.view())?;
    let targets: Vec<f64> = batch
        .iter()
        .zip(q_next.rows())
        .map(|(t, q)| {
            if t.done {
                t.reward
            } else {
                let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + cfg.discount * best
            }
        })
        .collect();
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    let (loss, grads) = online.td_loss_gradient(x.view(), &actions, &targets)?;
    online.sgd_step(&grads, cfg.learning_rate, cfg.max_grad_norm);
    Ok(loss)
}

/// Online and target networks, replay memory and exploration state.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub cfg: DqnConfig,
    pub online: Mlp,
    pub target: Mlp,
    pub normalizer: Normalizer,
    pub replay: ReplayBuffer,
    rng: ChaCha8Rng,
    steps: u64,
    updates: u64,
}

impl DqnAgent {
    pub fn new(obs_dim: usize, n_actions: usize, cfg: DqnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sizes = vec![obs_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(n_actions);
        let online = Mlp::new(&sizes, &mut rng);
        Ok(Self {
            target: online.clone(),
            online,
            normalizer: Normalizer::new(obs_dim, cfg.normalizer_warmup),
            replay: ReplayBuffer::new(cfg.replay_capacity),
            rng,
            steps: 0,
            updates: 0,
            cfg,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon(self.steps)
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.online.forward(&self.normalizer.apply(obs))
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(obs)?))
    }

    /// ε-greedy action under the current schedule.
    pub fn act(&mut self, obs: &[f64]) -> Result<usize> {
        let q = self.q_values(obs)?;
        let eps = self.epsilon();
        Ok(select_action(&q, eps, &mut self.rng))
    }

    /// Store a transition and run one update once the replay holds a batch.
    pub fn observe(&mut self, t: Transition) -> Result<Option<f64>> {
        self.normalizer.update(&t.observation);
        self.replay.push(t);
        self.steps += 1;
        if self.replay.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let batch = self.replay.sample(self.cfg.batch_size, &mut self.rng);
        let loss = dqn_update(&mut self.online, &self.target, &batch, &self.normalizer, &self.cfg)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.cfg.target_sync) {
            self.target = self.online.clone();
        }
        Ok(Some(loss))
    }

    pub fn policy(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            network: self.online.clone(),
            normalizer: self.normalizer.clone(),
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Greedy policy snapshot written to disk as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub network: Mlp,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn greedy(&self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&self.network.forward(&self.normalizer.apply(obs))?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }
}
