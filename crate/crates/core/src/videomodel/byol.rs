//! Recurrent self-predictive baseline with an EMA target network.
//!
//! An online CNN encoder feeds a closed-loop recurrent cell; its carry is
//! unrolled by an open-loop cell up to `horizon` steps, and a predictor
//! head regresses the (stop-gradient, L2-normalized) target-encoder
//! embedding of the future observation. Rewards are the negated sum of
//! the prediction losses whose target is the next observation, so a
//! perfectly predicted transition scores 0 and everything else below.

use crate::envs::Frame;
use crate::error::{Error, Result};
use crate::graph::{ConvShape, Graph, Node};
use crate::optim::{OptimizerConfig, ParamStore};
use crate::tensor::Tensor;
use crate::util::rng_stream;
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct ByolConfig {
    pub embed_dim: usize,
    pub cell_dim: usize,
    /// Open-loop horizon K.
    pub horizon: usize,
    pub ema_rate: f32,
}

impl Default for ByolConfig {
    fn default() -> Self {
        ByolConfig { embed_dim: 64, cell_dim: 128, horizon: 8, ema_rate: 0.99 }
    }
}

/// Online networks plus the EMA target encoder.
#[derive(Debug, Clone)]
pub struct ByolState {
    pub config: ByolConfig,
    pub online: ParamStore,
    pub target: ParamStore,
}

const ENC_NAMES: [&str; 6] =
    ["enc.c1.w", "enc.c1.b", "enc.c2.w", "enc.c2.b", "enc.fc.w", "enc.fc.b"];

fn conv1_shape(batch: usize) -> ConvShape {
    ConvShape { batch, in_c: 3, in_h: 32, in_w: 32, out_c: 8, kernel: 3, stride: 2, pad: 1 }
}

fn conv2_shape(batch: usize) -> ConvShape {
    ConvShape { batch, in_c: 8, in_h: 16, in_w: 16, out_c: 16, kernel: 3, stride: 2, pad: 1 }
}

impl ByolState {
    pub fn init(config: &ByolConfig, seed: u64) -> Self {
        if !(0.0..1.0).contains(&config.ema_rate) || config.ema_rate == 0.0 {
            panic!("ema rate must be in (0,1)");
        }
        let mut rng = rng_stream(seed, "byol.init");
        let (e, c) = (config.embed_dim, config.cell_dim);
        let mut p = ParamStore::new();
        let mut w = |p: &mut ParamStore, name: &str, shape: Vec<usize>, fan_in: usize| {
            let std = 1.0 / (fan_in as f32).sqrt();
            p.insert(name, Tensor::randn(shape, std, &mut rng));
        };
        w(&mut p, "enc.c1.w", vec![8, 27], 27);
        p.insert("enc.c1.b", Tensor::zeros(vec![1, 8]));
        w(&mut p, "enc.c2.w", vec![16, 72], 72);
        p.insert("enc.c2.b", Tensor::zeros(vec![1, 16]));
        w(&mut p, "enc.fc.w", vec![1024, e], 1024);
        p.insert("enc.fc.b", Tensor::zeros(vec![1, e]));
        for gate in ["z", "r", "c"] {
            w(&mut p, &format!("cl.wx{gate}"), vec![e, c], e);
            w(&mut p, &format!("cl.wh{gate}"), vec![c, c], c);
            p.insert(&format!("cl.b{gate}"), Tensor::zeros(vec![1, c]));
        }
        for gate in ["z", "c"] {
            w(&mut p, &format!("op.w{gate}"), vec![c, c], c);
            p.insert(&format!("op.b{gate}"), Tensor::zeros(vec![1, c]));
        }
        w(&mut p, "pred.w1", vec![c, c], c);
        p.insert("pred.b1", Tensor::zeros(vec![1, c]));
        w(&mut p, "pred.w2", vec![c, e], c);
        p.insert("pred.b2", Tensor::zeros(vec![1, e]));

        let mut target = ParamStore::new();
        for name in ENC_NAMES {
            target.insert(name, p.get(name).clone());
        }
        ByolState { config: *config, online: p, target }
    }

    /// EMA update of the target encoder from the online encoder.
    fn update_target(&mut self) {
        let rate = self.config.ema_rate;
        for name in ENC_NAMES {
            let src = self.online.get(name).data().to_vec();
            let dst = self.target.get_mut(name).data_mut();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = rate * *d + (1.0 - rate) * s;
            }
        }
    }
}

fn encode(g: &mut Graph, nodes: &BTreeMap<String, Node>, x: Node, batch: usize) -> Node {
    let c1 = g.conv2d(x, nodes["enc.c1.w"], nodes["enc.c1.b"], conv1_shape(batch));
    let a1 = g.relu(c1);
    let c2 = g.conv2d(a1, nodes["enc.c2.w"], nodes["enc.c2.b"], conv2_shape(batch));
    let a2 = g.relu(c2);
    let fc = g.matmul(a2, nodes["enc.fc.w"]);
    g.add_row(fc, nodes["enc.fc.b"])
}

fn gru_step(g: &mut Graph, nodes: &BTreeMap<String, Node>, x: Node, h: Node) -> Node {
    let zx = g.matmul(x, nodes["cl.wxz"]);
    let zh = g.matmul(h, nodes["cl.whz"]);
    let zs = g.add(zx, zh);
    let zb = g.add_row(zs, nodes["cl.bz"]);
    let z = g.sigmoid(zb);
    let rx = g.matmul(x, nodes["cl.wxr"]);
    let rh = g.matmul(h, nodes["cl.whr"]);
    let rs = g.add(rx, rh);
    let rb = g.add_row(rs, nodes["cl.br"]);
    let r = g.sigmoid(rb);
    let rh2 = g.mul(r, h);
    let cx = g.matmul(x, nodes["cl.wxc"]);
    let ch = g.matmul(rh2, nodes["cl.whc"]);
    let cs = g.add(cx, ch);
    let cb = g.add_row(cs, nodes["cl.bc"]);
    let cand = g.tanh(cb);
    let one_minus_z = g.affine_const(z, -1.0, 1.0);
    let keep = g.mul(one_minus_z, h);
    let take = g.mul(z, cand);
    g.add(keep, take)
}

fn open_step(g: &mut Graph, nodes: &BTreeMap<String, Node>, b: Node) -> Node {
    let zb = g.matmul(b, nodes["op.wz"]);
    let zbb = g.add_row(zb, nodes["op.bz"]);
    let z = g.sigmoid(zbb);
    let cb = g.matmul(b, nodes["op.wc"]);
    let cbb = g.add_row(cb, nodes["op.bc"]);
    let cand = g.tanh(cbb);
    let one_minus_z = g.affine_const(z, -1.0, 1.0);
    let keep = g.mul(one_minus_z, b);
    let take = g.mul(z, cand);
    g.add(keep, take)
}

fn predictor(g: &mut Graph, nodes: &BTreeMap<String, Node>, b: Node) -> Node {
    let h = g.matmul(b, nodes["pred.w1"]);
    let hb = g.add_row(h, nodes["pred.b1"]);
    let ha = g.relu(hb);
    let o = g.matmul(ha, nodes["pred.w2"]);
    g.add_row(o, nodes["pred.b2"])
}

/// Normalized target embeddings, computed without gradients.
fn target_embeddings(state: &ByolState, frames: &[Frame]) -> Vec<Vec<f32>> {
    let mut g = Graph::new();
    let nodes = super::mount_frozen(&mut g, &state.target);
    let chw: Vec<f32> = frames.iter().flat_map(|f| f.to_chw()).collect();
    let x = g.constant(frames.len(), 3 * 32 * 32, &chw);
    let e = encode(&mut g, &nodes, x, frames.len());
    let n = g.l2_normalize_rows(e);
    let d = state.config.embed_dim;
    (0..frames.len()).map(|i| g.value(n)[i * d..(i + 1) * d].to_vec()).collect()
}

/// Closed-loop carries b_0..b_{T-1} on the online network.
fn closed_loop(
    g: &mut Graph,
    nodes: &BTreeMap<String, Node>,
    cfg: &ByolConfig,
    frames: &[Frame],
) -> Vec<Node> {
    let t = frames.len();
    let chw: Vec<f32> = frames.iter().flat_map(|f| f.to_chw()).collect();
    let x = g.constant(t, 3 * 32 * 32, &chw);
    let e = encode(g, nodes, x, t);
    let mut h = g.constant(1, cfg.cell_dim, &vec![0.0; cfg.cell_dim]);
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let xi = g.slice_rows(e, i, 1);
        h = gru_step(g, nodes, xi, h);
        out.push(h);
    }
    out
}

/// One optimizer step on a single episode; returns the loss.
///
/// Loss: mean over (t, k) of the squared distance between the normalized
/// open-loop prediction and the normalized EMA-target embedding of the
/// frame k steps ahead. The target side carries no gradient. The target
/// encoder then takes an EMA step toward the online encoder.
pub fn byol_train_step(
    state: &mut ByolState,
    frames: &[Frame],
    opt: &OptimizerConfig,
) -> Result<f32> {
    let t = frames.len();
    if t < 2 {
        return Err(Error::input("byol needs at least two frames"));
    }
    let cfg = state.config;
    let targets = target_embeddings(state, frames);
    let mut g = Graph::new();
    let nodes = state.online.mount(&mut g);
    let carries = closed_loop(&mut g, &nodes, &cfg, frames);
    let mut loss: Option<Node> = None;
    for (t0, carry) in carries.iter().enumerate().take(t - 1) {
        let k_t = cfg.horizon.min(t - 1 - t0);
        let weight = 1.0 / ((t - 1) as f32 * k_t as f32);
        let mut b = *carry;
        for k in 1..=k_t {
            b = open_step(&mut g, &nodes, b);
            let pred = predictor(&mut g, &nodes, b);
            let pn = g.l2_normalize_rows(pred);
            let tgt = g.constant(1, cfg.embed_dim, &targets[t0 + k]);
            let diff = g.sub(pn, tgt);
            let sq = g.mul(diff, diff);
            let term = g.sum_all(sq);
            loss = Some(match loss {
                None => g.scale(term, weight),
                Some(acc) => g.add_scaled(acc, term, weight),
            });
        }
    }
    let loss = loss.expect("t >= 2 guarantees at least one term");
    let value = g.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::training("non-finite byol loss"));
    }
    g.backward(loss);
    let grads = state.online.collect_grads(&g, &nodes);
    state.online.adam_step(&grads, opt)?;
    state.update_target();
    Ok(value)
}

/// Accumulated prediction losses whose target is the final frame of the
/// window, negated. Always <= 0; a perfect predictor scores 0.
pub fn byol_reward(state: &ByolState, window: &[Frame]) -> Result<f64> {
    let n = window.len();
    if n < 2 {
        return Err(Error::input("byol reward needs at least two frames"));
    }
    let cfg = state.config;
    let target = target_embeddings(state, &window[n - 1..]).remove(0);
    let mut g = Graph::new();
    let nodes = super::mount_frozen(&mut g, &state.online);
    let carries = closed_loop(&mut g, &nodes, &cfg, &window[..n - 1]);
    let mut total = 0.0f64;
    // all (p, q) with p + q = n-1 and 1 <= q <= K predict the final frame
    for (p, carry) in carries.iter().enumerate() {
        let q = n - 1 - p;
        if q == 0 || q > cfg.horizon {
            continue;
        }
        let mut b = *carry;
        for _ in 0..q {
            b = open_step(&mut g, &nodes, b);
        }
        let pred = predictor(&mut g, &nodes, b);
        let pn = g.l2_normalize_rows(pred);
        let tgt = g.constant(1, cfg.embed_dim, &target);
        let diff = g.sub(pn, tgt);
        let sq = g.mul(diff, diff);
        let term = g.sum_all(sq);
        total += g.scalar_value(term) as f64;
    }
    Ok(-total)
}

/// Train over episodes sampled uniformly; one episode per optimizer step.
pub fn train_byol(
    episodes: &[Vec<Frame>],
    cfg: &ByolConfig,
    opt: &OptimizerConfig,
    steps: usize,
    seed: u64,
) -> Result<(ByolState, Vec<f32>)> {
    if episodes.is_empty() {
        return Err(Error::config("no episodes for byol training"));
    }
    let mut state = ByolState::init(cfg, seed);
    let mut rng = rng_stream(seed, "byol.train");
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let ep = &episodes[rng.gen_range(0..episodes.len())];
        curve.push(byol_train_step(&mut state, ep, opt)?);
    }
    Ok((state, curve))
}
