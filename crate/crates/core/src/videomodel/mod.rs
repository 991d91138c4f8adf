//! Likelihood models over token sequences.
//!
//! The primary model is an autoregressive transformer over the flat
//! (time x space) raster order of frame tokens, with task conditioning
//! through per-task layer-norm gains and biases. A MaskGIT-style variant
//! (bidirectional within a frame, causal across frames) and a recurrent
//! BYOL model serve as ablation baselines.

pub mod ar;
pub mod byol;
pub mod maskgit;

pub use ar::{
    forward_transformer, frame_logprob, likelihood_heatmap, sample_rollout, sequence_logprob,
    train_videomodel, LossCurve,
};
pub use byol::{byol_reward, byol_train_step, train_byol, ByolConfig, ByolState};
pub use maskgit::{maskgit_frame_logprob, train_maskgit};

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use crate::util::rng_stream;
use std::collections::BTreeMap;

/// Which likelihood model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Autoregressive,
    Maskgit,
    Byol,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Autoregressive => "autoregressive",
            ModelVariant::Maskgit => "maskgit",
            ModelVariant::Byol => "byol",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "autoregressive" | "ar" => Ok(ModelVariant::Autoregressive),
            "maskgit" => Ok(ModelVariant::Maskgit),
            "byol" => Ok(ModelVariant::Byol),
            _ => Err(Error::config(format!("unknown model variant {s}"))),
        }
    }
}

/// Transformer video model hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Maximum context length in frames (k). Scoring windows hold up to
    /// k context frames plus the predicted frame.
    pub context_frames: usize,
    /// Temporal stride when sampling training windows and building
    /// reward contexts.
    pub frame_stride: usize,
    pub vocab: usize,
    pub z_h: usize,
    pub z_w: usize,
    pub num_tasks: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::Autoregressive,
            context_frames: 16,
            frame_stride: 1,
            vocab: 64,
            z_h: 8,
            z_w: 8,
            num_tasks: 3,
            layers: 4,
            heads: 4,
            dim: 128,
            ff_dim: 512,
        }
    }
}

impl ModelConfig {
    pub fn tokens_per_frame(&self) -> usize {
        self.z_h * self.z_w
    }

    /// Longest window the model accepts: k context frames + 1 predicted.
    pub fn max_frames(&self) -> usize {
        self.context_frames + 1
    }

    pub fn max_positions(&self) -> usize {
        self.max_frames() * self.tokens_per_frame()
    }

    /// Start-of-sequence token id (autoregressive shift).
    pub fn start_id(&self) -> u32 {
        self.vocab as u32
    }

    /// Mask token id (MaskGIT variant).
    pub fn mask_id(&self) -> u32 {
        self.vocab as u32 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_frames < 1 {
            return Err(Error::config("context_frames must be >= 1"));
        }
        if self.frame_stride < 1 {
            return Err(Error::config("frame_stride must be >= 1"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config("dim must be divisible by heads"));
        }
        if self.vocab < 2 || self.layers == 0 || self.dim == 0 || self.ff_dim == 0 {
            return Err(Error::config("degenerate model dimensions"));
        }
        Ok(())
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("variant".into(), self.variant.name().into());
        m.insert("context_frames".into(), self.context_frames.to_string());
        m.insert("frame_stride".into(), self.frame_stride.to_string());
        m.insert("vocab".into(), self.vocab.to_string());
        m.insert("z_h".into(), self.z_h.to_string());
        m.insert("z_w".into(), self.z_w.to_string());
        m.insert("num_tasks".into(), self.num_tasks.to_string());
        m.insert("layers".into(), self.layers.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("dim".into(), self.dim.to_string());
        m.insert("ff_dim".into(), self.ff_dim.to_string());
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::config(format!("checkpoint missing {k}")))
        };
        Ok(ModelConfig {
            variant: ModelVariant::parse(
                meta.get("variant").ok_or_else(|| Error::config("checkpoint missing variant"))?,
            )?,
            context_frames: get("context_frames")?,
            frame_stride: get("frame_stride")?,
            vocab: get("vocab")?,
            z_h: get("z_h")?,
            z_w: get("z_w")?,
            num_tasks: get("num_tasks")?,
            layers: get("layers")?,
            heads: get("heads")?,
            dim: get("dim")?,
            ff_dim: get("ff_dim")?,
        })
    }
}

/// A trained (or initializing) transformer video model.
#[derive(Debug, Clone)]
pub struct VideoModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl VideoModel {
    /// Fresh parameters. The output head starts at zero so an untrained
    /// model predicts the uniform distribution exactly.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = rng_stream(seed, "videomodel.init");
        let mut p = ParamStore::new();
        let d = config.dim;
        let std = 0.02;
        p.insert("tok_embed", Tensor::randn(vec![config.vocab + 2, d], std, &mut rng));
        p.insert("pos_embed", Tensor::randn(vec![config.max_positions(), d], std, &mut rng));
        for l in 0..config.layers {
            for ln in ["ln1", "ln2"] {
                p.insert(
                    &format!("layer{l}.{ln}.gain"),
                    Tensor::full(vec![config.num_tasks, d], 1.0),
                );
                p.insert(
                    &format!("layer{l}.{ln}.bias"),
                    Tensor::zeros(vec![config.num_tasks, d]),
                );
            }
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(
                    &format!("layer{l}.attn.{w}"),
                    Tensor::randn(vec![d, d], std, &mut rng),
                );
            }
            p.insert(&format!("layer{l}.ff.w1"), Tensor::randn(vec![d, config.ff_dim], std, &mut rng));
            p.insert(&format!("layer{l}.ff.b1"), Tensor::zeros(vec![1, config.ff_dim]));
            p.insert(&format!("layer{l}.ff.w2"), Tensor::randn(vec![config.ff_dim, d], std, &mut rng));
            p.insert(&format!("layer{l}.ff.b2"), Tensor::zeros(vec![1, d]));
        }
        p.insert("ln_f.gain", Tensor::full(vec![config.num_tasks, d], 1.0));
        p.insert("ln_f.bias", Tensor::zeros(vec![config.num_tasks, d]));
        p.insert("head.w", Tensor::zeros(vec![d, config.vocab]));
        p.insert("head.b", Tensor::zeros(vec![1, config.vocab]));
        VideoModel { config: config.clone(), params: p }
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(stem, &self.params, &self.config.meta())
    }

    pub fn load(stem: &std::path::Path) -> Result<Self> {
        let (params, meta) = crate::checkpoint::load(stem)?;
        let config = ModelConfig::from_meta(&meta)?;
        Ok(VideoModel { config, params })
    }
}

/// Attention mask kinds over the flat token order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Strictly causal: position i attends to j <= i.
    Causal,
    /// Causal across frames, bidirectional within each frame.
    BlockCausal,
}

/// Additive attention mask; blocked entries get a large negative value so
/// their softmax weight underflows to exactly zero.
pub fn attention_mask(n: usize, tokens_per_frame: usize, kind: MaskKind) -> Vec<f32> {
    let mut m = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let visible = match kind {
                MaskKind::Causal => j <= i,
                MaskKind::BlockCausal => j / tokens_per_frame <= i / tokens_per_frame,
            };
            if !visible {
                m[i * n + j] = -1e9;
            }
        }
    }
    m
}

/// Conditional layer norm: normalize rows of `x`, then scale and shift by
/// the task's learned gain/bias rows.
pub fn cond_layer_norm(
    g: &mut Graph,
    x: Node,
    gain_table: Node,
    bias_table: Node,
    task_id: u32,
) -> Node {
    let ln = g.layer_norm(x, 1e-5);
    let gain = g.embed(gain_table, &[task_id]);
    let bias = g.embed(bias_table, &[task_id]);
    let scaled = g.mul_row(ln, gain);
    g.add_row(scaled, bias)
}

/// Build the transformer trunk over already-chosen input ids.
///
/// `input_ids` are token ids into the embedding table (including start or
/// mask sentinels); logits row i is the distribution for the sequence
/// token at flat position i.
pub fn build_trunk(
    g: &mut Graph,
    nodes: &BTreeMap<String, Node>,
    cfg: &ModelConfig,
    input_ids: &[u32],
    task_id: u32,
    mask_kind: MaskKind,
) -> Node {
    let n = input_ids.len();
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let positions: Vec<u32> = (0..n as u32).collect();
    let tok = g.embed(nodes["tok_embed"], input_ids);
    let pos = g.embed(nodes["pos_embed"], &positions);
    let mut x = g.add(tok, pos);
    let mask = attention_mask(n, cfg.tokens_per_frame(), mask_kind);
    let mask_node = g.constant(n, n, &mask);
    let scale = 1.0 / (dh as f32).sqrt();
    for l in 0..cfg.layers {
        let pfx = format!("layer{l}");
        let xn = cond_layer_norm(
            g,
            x,
            nodes[&format!("{pfx}.ln1.gain")],
            nodes[&format!("{pfx}.ln1.bias")],
            task_id,
        );
        let q = g.matmul(xn, nodes[&format!("{pfx}.attn.wq")]);
        let k = g.matmul(xn, nodes[&format!("{pfx}.attn.wk")]);
        let v = g.matmul(xn, nodes[&format!("{pfx}.attn.wv")]);
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_tb(qh, kh);
            let scaled = g.scale(scores, scale);
            let masked = g.add(scaled, mask_node);
            let probs = g.softmax_rows(masked);
            heads.push(g.matmul(probs, vh));
        }
        let cat = g.concat_cols(&heads);
        let attn_out = g.matmul(cat, nodes[&format!("{pfx}.attn.wo")]);
        x = g.add(x, attn_out);
        let xn2 = cond_layer_norm(
            g,
            x,
            nodes[&format!("{pfx}.ln2.gain")],
            nodes[&format!("{pfx}.ln2.bias")],
            task_id,
        );
        let h1 = g.matmul(xn2, nodes[&format!("{pfx}.ff.w1")]);
        let h1b = g.add_row(h1, nodes[&format!("{pfx}.ff.b1")]);
        let h1a = g.gelu(h1b);
        let h2 = g.matmul(h1a, nodes[&format!("{pfx}.ff.w2")]);
        let h2b = g.add_row(h2, nodes[&format!("{pfx}.ff.b2")]);
        x = g.add(x, h2b);
    }
    let xf = cond_layer_norm(g, x, nodes["ln_f.gain"], nodes["ln_f.bias"], task_id);
    let logits = g.matmul(xf, nodes["head.w"]);
    g.add_row(logits, nodes["head.b"])
}

/// Mount parameters read-only (no gradients), e.g. for reward evaluation.
pub fn mount_frozen(g: &mut Graph, params: &ParamStore) -> BTreeMap<String, Node> {
    let mut nodes = BTreeMap::new();
    for (name, t) in params.iter() {
        let (r, c) = t.dims2();
        nodes.insert(name.to_string(), g.leaf(r, c, t.data(), false));
    }
    nodes
}
