//! Small MLP plumbing shared by the exploration and discriminator nets.

use crate::envs::Frame;
use crate::graph::Graph;
use crate::optim::{OptimizerConfig, ParamStore};
use crate::tensor::Tensor;
use crate::util::rng_stream;

/// 16x16 mean-pooled RGB features of a 32x32 frame, channel-major.
pub fn frame_features(frame: &Frame) -> Vec<f32> {
    let (h, w) = (frame.h / 2, frame.w / 2);
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = [0.0f32; 3];
            for dy in 0..2 {
                for dx in 0..2 {
                    let c = frame.get(2 * y + dy, 2 * x + dx);
                    for ch in 0..3 {
                        s[ch] += c[ch] as f32 / 255.0;
                    }
                }
            }
            for ch in 0..3 {
                out[ch * h * w + y * w + x] = s[ch] / 4.0;
            }
        }
    }
    out
}

pub const FRAME_FEATURES: usize = 3 * 16 * 16;

/// Two-layer perceptron with ReLU, trained by Adam.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub store: ParamStore,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, output: usize, seed: u64, label: &str) -> Self {
        let mut rng = rng_stream(seed, label);
        let mut store = ParamStore::new();
        let s1 = 1.0 / (input as f32).sqrt();
        let s2 = 1.0 / (hidden as f32).sqrt();
        store.insert("w1", Tensor::randn(vec![input, hidden], s1, &mut rng));
        store.insert("b1", Tensor::zeros(vec![1, hidden]));
        store.insert("w2", Tensor::randn(vec![hidden, output], s2, &mut rng));
        store.insert("b2", Tensor::zeros(vec![1, output]));
        Mlp { store, input, hidden, output }
    }

    fn build(&self, g: &mut Graph, x: crate::graph::Node, trainable: bool) -> crate::graph::Node {
        let nodes = if trainable {
            self.store.mount(g)
        } else {
            crate::videomodel::mount_frozen(g, &self.store)
        };
        let h = g.matmul(x, nodes["w1"]);
        let hb = g.add_row(h, nodes["b1"]);
        let ha = g.relu(hb);
        let o = g.matmul(ha, nodes["w2"]);
        g.add_row(o, nodes["b2"])
    }

    /// Forward a batch without gradients.
    pub fn forward(&self, xs: &[f32], rows: usize) -> Vec<f32> {
        let mut g = Graph::new();
        let x = g.constant(rows, self.input, xs);
        let out = self.build(&mut g, x, false);
        g.value(out).to_vec()
    }

    /// One Adam step on mean squared error toward `targets`; returns loss.
    pub fn mse_step(
        &mut self,
        xs: &[f32],
        rows: usize,
        targets: &[f32],
        opt: &OptimizerConfig,
    ) -> f32 {
        let mut g = Graph::new();
        let x = g.constant(rows, self.input, xs);
        let nodes = self.store.mount(&mut g);
        let h = g.matmul(x, nodes["w1"]);
        let hb = g.add_row(h, nodes["b1"]);
        let ha = g.relu(hb);
        let o = g.matmul(ha, nodes["w2"]);
        let ob = g.add_row(o, nodes["b2"]);
        let t = g.constant(rows, self.output, targets);
        let diff = g.sub(ob, t);
        let sq = g.mul(diff, diff);
        let loss = g.mean_all(sq);
        g.backward(loss);
        let grads = self.store.collect_grads(&g, &nodes);
        let v = g.scalar_value(loss);
        self.store.adam_step(&grads, opt).expect("finite mlp gradients");
        v
    }

    /// One Adam step on summed binary cross-entropy; returns mean loss.
    pub fn bce_step(
        &mut self,
        xs: &[f32],
        rows: usize,
        labels: &[f32],
        opt: &OptimizerConfig,
    ) -> f32 {
        let mut g = Graph::new();
        let x = g.constant(rows, self.input, xs);
        let nodes = self.store.mount(&mut g);
        let h = g.matmul(x, nodes["w1"]);
        let hb = g.add_row(h, nodes["b1"]);
        let ha = g.relu(hb);
        let o = g.matmul(ha, nodes["w2"]);
        let ob = g.add_row(o, nodes["b2"]);
        let loss = g.bce_with_logits_sum(ob, labels);
        g.backward(loss);
        let grads = self.store.collect_grads(&g, &nodes);
        let v = g.scalar_value(loss) / rows as f32;
        self.store.adam_step(&grads, opt).expect("finite bce gradients");
        v
    }
}
