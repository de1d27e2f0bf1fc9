//! Policy network, replay memory and DQN training.

pub mod dqn;
pub mod mlp;
pub mod replay;

pub use dqn::{argmax, dqn_update, select_action, Checkpoint, DqnAgent, DqnConfig, Normalizer};
pub use mlp::{Gradients, Layer, Mlp};
pub use replay::{ReplayBuffer, Transition};
