//! MaskGIT-style baseline: bidirectional within a frame, causal across
//! frames. Scoring is a pseudo-log-likelihood built from several masked
//! forward passes.

use super::ar::train_loop;
use super::{build_trunk, mount_frozen, LossCurve, MaskKind, ModelConfig, VideoModel};
use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph};
use crate::optim::OptimizerConfig;
use crate::tokenizer::TokenSequence;
use crate::util::rng_stream;
use rand::Rng;

/// Train the masked-token model: windows keep their context frames fully
/// revealed, the final frame is masked at a random ratio, and the loss
/// covers the masked positions.
pub fn train_maskgit(
    seqs: &[TokenSequence],
    cfg: &ModelConfig,
    opt: &OptimizerConfig,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<(VideoModel, LossCurve)> {
    train_loop(seqs, cfg, opt, steps, batch, seed, |params, cfg, window, item_seed| {
        let z = cfg.tokens_per_frame();
        let mut rng = rng_stream(item_seed, "maskgit.ratio");
        // score a random frame boundary so every context length and every
        // position range sees training signal
        let window = &window.slice_frames(0, rng.gen_range(1..=window.t));
        let ratio: f64 = rng.gen::<f64>().max(1.0 / z as f64);
        let base = (window.t - 1) * z;
        let mut ids: Vec<u32> = window.tokens.iter().map(|&t| t as u32).collect();
        let mut weights = vec![0.0f32; window.tokens.len()];
        let mut masked = 0usize;
        for i in 0..z {
            if rng.gen::<f64>() < ratio {
                ids[base + i] = cfg.mask_id();
                weights[base + i] = 1.0;
                masked += 1;
            }
        }
        if masked == 0 {
            // always score at least one position
            ids[base] = cfg.mask_id();
            weights[base] = 1.0;
            masked = 1;
        }
        let mut g = Graph::new();
        let nodes = params.mount(&mut g);
        let logits = build_trunk(&mut g, &nodes, cfg, &ids, window.task_id, MaskKind::BlockCausal);
        let targets: Vec<u32> = window.tokens.iter().map(|&t| t as u32).collect();
        let loss = g.cross_entropy_sum(logits, &targets, Some(&weights));
        g.backward(loss);
        let grads = params.collect_grads(&g, &nodes);
        Ok((g.scalar_value(loss) as f64, grads, masked))
    })
}

/// Per-token scores for the next frame under the group-reveal scheme.
///
/// Tokens start fully masked. Each pass scores the still-masked tokens
/// conditioned on the context plus everything revealed so far, then
/// reveals the group the model is most confident about (ties in raster
/// order). Every token is scored exactly once, in the pass that reveals
/// it.
pub(crate) fn maskgit_frame_scores(
    model: &VideoModel,
    context: &[&[u16]],
    next_frame: &[u16],
    task_id: u32,
    passes: usize,
) -> Result<Vec<f32>> {
    if passes < 1 {
        return Err(Error::input("passes must be >= 1"));
    }
    let cfg = &model.config;
    if context.len() > cfg.context_frames {
        return Err(Error::usage("context exceeds model window"));
    }
    let z = cfg.tokens_per_frame();
    if next_frame.len() != z {
        return Err(Error::input("next frame has wrong token count"));
    }
    let base = context.len() * z;
    let mut ids: Vec<u32> = Vec::with_capacity(base + z);
    for c in context {
        ids.extend(c.iter().map(|&t| t as u32));
    }
    ids.extend(std::iter::repeat(cfg.mask_id()).take(z));
    let mut revealed = vec![false; z];
    let mut scores = vec![0.0f32; z];
    let mut remaining = z;
    for pass in 0..passes {
        if remaining == 0 {
            break;
        }
        let mut g = Graph::new();
        let nodes = mount_frozen(&mut g, &model.params);
        let logits = build_trunk(&mut g, &nodes, cfg, &ids, task_id, MaskKind::BlockCausal);
        let v = cfg.vocab;
        let data = g.value(logits);
        let mut candidates: Vec<(usize, f32)> = Vec::with_capacity(remaining);
        for i in 0..z {
            if !revealed[i] {
                let row = &data[(base + i) * v..(base + i + 1) * v];
                candidates.push((i, row[next_frame[i] as usize] - log_sum_exp(row)));
            }
        }
        // most confident first; raster index breaks ties
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let group = remaining.div_ceil(passes - pass);
        for &(i, lp) in candidates.iter().take(group) {
            scores[i] = lp;
            revealed[i] = true;
            ids[base + i] = next_frame[i] as u32;
            remaining -= 1;
        }
    }
    Ok(scores)
}

/// Pseudo-log-likelihood of the next frame over `passes` reveal groups.
pub fn maskgit_frame_logprob(
    model: &VideoModel,
    context: &[&[u16]],
    next_frame: &[u16],
    task_id: u32,
    passes: usize,
) -> Result<f64> {
    let scores = maskgit_frame_scores(model, context, next_frame, task_id, passes)?;
    Ok(scores.iter().map(|&x| x as f64).sum())
}

/// The number of forward passes the ablation uses by default.
pub const DEFAULT_PASSES: usize = 8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videomodel::ModelVariant;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            variant: ModelVariant::Maskgit,
            context_frames: 3,
            frame_stride: 1,
            vocab: 3,
            z_h: 2,
            z_w: 2,
            num_tasks: 1,
            layers: 1,
            heads: 2,
            dim: 8,
            ff_dim: 16,
        }
    }

    #[test]
    fn single_pass_is_fully_factorized() {
        // under one pass every token is scored under the all-masked frame;
        // per-position probabilities over the vocabulary must sum to 1
        let cfg = tiny_cfg();
        let model = VideoModel::init(&cfg, 3);
        let ctx: Vec<u16> = vec![0, 1, 2, 0];
        let ctx_ref: Vec<&[u16]> = vec![&ctx];
        for pos in 0..4 {
            let mut total = 0.0f64;
            for v in 0..cfg.vocab as u16 {
                let mut frame: Vec<u16> = vec![0, 2, 1, 0];
                frame[pos] = v;
                let scores =
                    maskgit_frame_scores(&model, &ctx_ref, &frame, 0, 1).unwrap();
                total += (scores[pos] as f64).exp();
            }
            assert!((total - 1.0).abs() < 1e-5, "pos {pos}: {total}");
        }
    }

    #[test]
    fn one_token_per_pass_scores_every_token_once() {
        let cfg = tiny_cfg();
        let model = VideoModel::init(&cfg, 4);
        let ctx: Vec<u16> = vec![1, 1, 0, 2];
        let ctx_ref: Vec<&[u16]> = vec![&ctx];
        let frame: Vec<u16> = vec![2, 0, 1, 1];
        let z = 4;
        let scores = maskgit_frame_scores(&model, &ctx_ref, &frame, 0, z).unwrap();
        assert_eq!(scores.len(), 4);
        // uniform init model scores ln(1/V) everywhere; the reveal order
        // degenerates to raster order on ties
        for &s in &scores {
            assert!((s - (1.0f32 / 3.0).ln()).abs() < 1e-4);
        }
        let lp = maskgit_frame_logprob(&model, &ctx_ref, &frame, 0, z).unwrap();
        assert!((lp - 4.0 * (1.0f64 / 3.0).ln()).abs() < 1e-4);
    }

    #[test]
    fn passes_cannot_be_zero() {
        let cfg = tiny_cfg();
        let model = VideoModel::init(&cfg, 0);
        let frame: Vec<u16> = vec![0; 4];
        assert!(maskgit_frame_logprob(&model, &[], &frame, 0, 0).is_err());
    }

    #[test]
    fn maskgit_training_learns_a_constant_frame() {
        let cfg = tiny_cfg();
        let data = vec![TokenSequence {
            tokens: vec![1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1, 2],
            t: 3,
            z_h: 2,
            z_w: 2,
            task_id: 0,
        }];
        let opt = OptimizerConfig::with_lr(3e-3);
        let (model, curve) = train_maskgit(&data, &cfg, &opt, 80, 2, 1).unwrap();
        assert!(curve.last().unwrap() < &(0.5 * curve[0]), "{curve:?}");
        let ctx: Vec<u16> = vec![1, 2, 1, 2];
        let ctx_ref: Vec<&[u16]> = vec![&ctx];
        let good = maskgit_frame_logprob(&model, &ctx_ref, &[1, 2, 1, 2], 0, 2).unwrap();
        let bad = maskgit_frame_logprob(&model, &ctx_ref, &[2, 1, 2, 1], 0, 2).unwrap();
        assert!(good > bad);
    }
}
