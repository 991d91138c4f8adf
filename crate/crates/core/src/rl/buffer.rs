//! Fixed-capacity on-policy rollout storage with lambda-return advantages.

use crate::error::{Error, Result};

/// Step-major storage for one collection phase: index = step * n_envs + env.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub n_steps: usize,
    pub obs_dim: usize,
    /// Policy inputs (stacked grayscale frames).
    pub obs: Vec<f32>,
    pub actions: Vec<u8>,
    /// Combined model rewards; ground-truth rewards never enter here.
    pub rewards: Vec<f32>,
    pub values: Vec<f32>,
    pub log_probs: Vec<f32>,
    pub dones: Vec<bool>,
    /// Value estimates for the observation after the final step, per env.
    pub bootstrap: Vec<f32>,
    /// Filled by `compute_advantages` once collection is complete.
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
    /// Mean reward components for diagnostics.
    pub mean_r_viper: f64,
    pub mean_r_expl: f64,
}

impl RolloutBuffer {
    pub fn new(n_envs: usize, n_steps: usize, obs_dim: usize) -> Self {
        let n = n_envs * n_steps;
        RolloutBuffer {
            n_envs,
            n_steps,
            obs_dim,
            obs: Vec::with_capacity(n * obs_dim),
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            bootstrap: vec![0.0; n_envs],
            advantages: Vec::new(),
            returns: Vec::new(),
            mean_r_viper: 0.0,
            mean_r_expl: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Generalized advantage estimates and lambda returns. Must run after
    /// the collection phase is complete.
    pub fn compute_advantages(&mut self, discount: f32, lambda: f32) -> Result<()> {
        let n = self.n_envs * self.n_steps;
        if self.len() != n {
            return Err(Error::usage("buffer incomplete; collect before computing advantages"));
        }
        self.advantages = vec![0.0; n];
        self.returns = vec![0.0; n];
        for env in 0..self.n_envs {
            let mut acc = 0.0f32;
            let mut next_value = self.bootstrap[env];
            for step in (0..self.n_steps).rev() {
                let i = step * self.n_envs + env;
                let not_done = if self.dones[i] { 0.0 } else { 1.0 };
                let delta =
                    self.rewards[i] + discount * next_value * not_done - self.values[i];
                acc = delta + discount * lambda * not_done * acc;
                self.advantages[i] = acc;
                self.returns[i] = acc + self.values[i];
                next_value = self.values[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_buffer() -> RolloutBuffer {
        let mut b = RolloutBuffer::new(1, 3, 1);
        b.obs = vec![0.0; 3];
        b.actions = vec![0; 3];
        b.rewards = vec![1.0, 0.0, 1.0];
        b.values = vec![0.5, 0.5, 0.5];
        b.log_probs = vec![0.0; 3];
        b.dones = vec![false, false, true];
        b
    }

    #[test]
    fn advantages_match_hand_rollout() {
        let mut b = tiny_buffer();
        b.compute_advantages(0.9, 1.0).unwrap();
        // terminal step: delta = 1 - 0.5
        assert!((b.advantages[2] - 0.5).abs() < 1e-6);
        // middle: delta = 0 + 0.9*0.5 - 0.5 = -0.05; acc = -0.05 + 0.9*0.5
        assert!((b.advantages[1] - (-0.05 + 0.9 * 0.5)).abs() < 1e-6);
        for i in 0..3 {
            assert!((b.returns[i] - (b.advantages[i] + b.values[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn incomplete_buffer_is_usage_error() {
        let mut b = RolloutBuffer::new(2, 4, 1);
        assert!(matches!(b.compute_advantages(0.99, 0.95), Err(Error::Usage(_))));
    }
}
