//! Ensemble-disagreement bonus: variance across one-step latent dynamics
//! predictors over encoded frames.

use super::nets::{frame_features, Mlp, FRAME_FEATURES};
use crate::envs::Frame;
use crate::optim::OptimizerConfig;
use crate::tensor::Tensor;
use crate::util::rng_stream;

const LATENT: usize = 32;
const HIDDEN: usize = 64;

#[derive(Debug, Clone)]
pub struct EnsembleState {
    /// Frozen random projection from frame features to the latent space.
    projection: Tensor,
    /// Identical architectures, independent initializations.
    pub members: Vec<Mlp>,
    pub opt: OptimizerConfig,
}

impl EnsembleState {
    pub fn init(members: usize, seed: u64) -> Self {
        assert!(members >= 2, "ensemble needs at least two members");
        let mut rng = rng_stream(seed, "ensemble.projection");
        let projection =
            Tensor::randn(vec![FRAME_FEATURES, LATENT], 1.0 / (FRAME_FEATURES as f32).sqrt(), &mut rng);
        let members = (0..members)
            .map(|i| Mlp::init(LATENT, HIDDEN, LATENT, seed ^ (i as u64 + 1), "ensemble.member"))
            .collect();
        EnsembleState { projection, members, opt: OptimizerConfig::with_lr(3e-4) }
    }

    pub fn encode(&self, frame: &Frame) -> Vec<f32> {
        let feats = frame_features(frame);
        let mut out = vec![0.0; LATENT];
        crate::graph::gemm(1, FRAME_FEATURES, LATENT, 1.0, &feats, false, self.projection.data(), false, 0.0, &mut out);
        out
    }
}

/// Mean per-dimension population variance of the member predictions for
/// the next embedding. Invariant under member permutation.
pub fn disagreement_reward(ens: &EnsembleState, frame_t: &Frame, _frame_next: &Frame) -> f64 {
    let z = ens.encode(frame_t);
    let preds: Vec<Vec<f32>> = ens.members.iter().map(|m| m.forward(&z, 1)).collect();
    let e = preds.len() as f64;
    let mut total = 0.0;
    for d in 0..LATENT {
        let mean: f64 = preds.iter().map(|p| p[d] as f64).sum::<f64>() / e;
        let var: f64 = preds.iter().map(|p| (p[d] as f64 - mean).powi(2)).sum::<f64>() / e;
        total += var;
    }
    total / LATENT as f64
}

/// Train every member on the true next embeddings.
pub fn ensemble_update(ens: &mut EnsembleState, batch: &[(Frame, Frame)]) -> f32 {
    if batch.is_empty() {
        return 0.0;
    }
    let xs: Vec<f32> = batch.iter().flat_map(|(a, _)| ens.encode(a)).collect();
    let ys: Vec<f32> = batch.iter().flat_map(|(_, b)| ens.encode(b)).collect();
    let opt = ens.opt;
    let mut total = 0.0;
    for m in &mut ens.members {
        total += m.mse_step(&xs, batch.len(), &ys, &opt);
    }
    total / ens.members.len() as f32
}
