//! Likelihood-based video-prediction rewards for reinforcement learning,
//! at desk scale.
//!
//! The crate trains small autoregressive transformers (plus MaskGIT-style
//! and BYOL baselines) on tokenized expert videos from toy pixel
//! environments, then uses the frozen models' conditional log-likelihoods
//! as per-transition rewards for an actor-critic agent. Everything runs
//! deterministically on CPU: same seed, same bits.

pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod graph;
pub mod tokenizer;
pub mod videomodel;
pub mod optim;
pub mod rewards;
pub mod rl;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use graph::{Graph, Node};
pub use optim::{Grads, OptimizerConfig, ParamStore};
pub use tensor::Tensor;
