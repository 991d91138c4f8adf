//! Random network distillation: prediction error against a frozen random
//! target network as an exploration bonus.

use super::nets::{frame_features, Mlp, FRAME_FEATURES};
use crate::envs::Frame;
use crate::optim::OptimizerConfig;
use crate::util::RunningStat;

const EMBED: usize = 64;
const HIDDEN: usize = 128;

#[derive(Debug, Clone)]
pub struct RndState {
    /// Never updated after initialization.
    pub target: Mlp,
    pub predictor: Mlp,
    pub opt: OptimizerConfig,
    /// Running scale of raw rewards, for optional normalization.
    pub stat: RunningStat,
}

impl RndState {
    pub fn init(seed: u64) -> Self {
        RndState {
            target: Mlp::init(FRAME_FEATURES, HIDDEN, EMBED, seed, "rnd.target"),
            predictor: Mlp::init(FRAME_FEATURES, HIDDEN, EMBED, seed, "rnd.predictor"),
            opt: OptimizerConfig::with_lr(1e-4),
            stat: RunningStat::default(),
        }
    }

    pub fn target_embedding(&self, frame: &Frame) -> Vec<f32> {
        self.target.forward(&frame_features(frame), 1)
    }
}

/// Mean squared error between predictor and frozen target embeddings.
pub fn rnd_reward(rnd: &RndState, frame: &Frame) -> f64 {
    let feats = frame_features(frame);
    let t = rnd.target.forward(&feats, 1);
    let p = rnd.predictor.forward(&feats, 1);
    t.iter().zip(&p).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / EMBED as f64
}

/// Train the predictor toward the target on a batch of frames.
pub fn rnd_update(rnd: &mut RndState, frames: &[Frame]) -> f32 {
    if frames.is_empty() {
        return 0.0;
    }
    let feats: Vec<f32> = frames.iter().flat_map(|f| frame_features(f)).collect();
    let targets: Vec<f32> = {
        let mut g = crate::graph::Graph::new();
        let x = g.constant(frames.len(), FRAME_FEATURES, &feats);
        let nodes = crate::videomodel::mount_frozen(&mut g, &rnd.target.store);
        let h = g.matmul(x, nodes["w1"]);
        let hb = g.add_row(h, nodes["b1"]);
        let ha = g.relu(hb);
        let o = g.matmul(ha, nodes["w2"]);
        let ob = g.add_row(o, nodes["b2"]);
        g.value(ob).to_vec()
    };
    let opt = rnd.opt;
    rnd.predictor.mse_step(&feats, frames.len(), &targets, &opt)
}
