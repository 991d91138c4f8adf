//! Named parameter storage and the Adam update.

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Adam hyperparameters plus global-norm gradient clipping.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub grad_clip: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 100.0,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(lr: f32) -> Self {
        OptimizerConfig { learning_rate: lr, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1/beta2 must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Ordered map of named parameter tensors with Adam moments.
///
/// Iteration order is the insertion order fixed at construction, so
/// updates, clipping, and serialization are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.m.push(Tensor::zeros(t.shape().to_vec()));
        self.v.push(Tensor::zeros(t.shape().to_vec()));
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Moment tensors for checkpointing; same order as `names`.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(&mut self) -> (&mut [Tensor], &mut [Tensor]) {
        (&mut self.m, &mut self.v)
    }

    /// Mount every parameter into a graph as a leaf; returns nodes in
    /// insertion order keyed by name.
    pub fn mount(&self, g: &mut Graph) -> BTreeMap<String, Node> {
        let mut nodes = BTreeMap::new();
        for (name, t) in self.iter() {
            nodes.insert(name.to_string(), g.param(t));
        }
        nodes
    }

    /// Collect gradients for the mounted nodes, zeros where a parameter
    /// did not participate.
    pub fn collect_grads(&self, g: &Graph, nodes: &BTreeMap<String, Node>) -> Grads {
        let mut out = Vec::with_capacity(self.names.len());
        for (name, t) in self.iter() {
            let node = nodes[name];
            match g.grad(node) {
                Some(gv) => out.push(gv.to_vec()),
                None => out.push(vec![0.0; t.len()]),
            }
        }
        Grads { by_param: out }
    }

    /// Apply one Adam step with bias correction; gradients are clipped by
    /// global norm first. Errors if any gradient is non-finite.
    pub fn adam_step(&mut self, grads: &Grads, cfg: &OptimizerConfig) -> Result<()> {
        assert_eq!(grads.by_param.len(), self.tensors.len(), "gradient/param count mismatch");
        for (i, g) in grads.by_param.iter().enumerate() {
            assert_eq!(g.len(), self.tensors[i].len(), "gradient shape mismatch");
        }
        let mut sq = 0.0f64;
        for g in &grads.by_param {
            for &x in g {
                if !x.is_finite() {
                    return Err(Error::training("non-finite gradient"));
                }
                sq += (x as f64) * (x as f64);
            }
        }
        let norm = sq.sqrt() as f32;
        let scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.tensors.len() {
            let p = self.tensors[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = &grads.by_param[i];
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients in ParamStore order.
#[derive(Debug, Clone)]
pub struct Grads {
    by_param: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads { by_param: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    /// Accumulate `other * weight` into self.
    pub fn add_scaled(&mut self, other: &Grads, weight: f32) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += weight * y;
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in &mut self.by_param {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn by_param(&self) -> &[Vec<f32>] {
        &self.by_param
    }
}
