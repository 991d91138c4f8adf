//! Per-transition rewards from a frozen video model, exploration bonuses,
//! and their combination.

pub mod amp;
pub mod disagreement;
pub mod nets;
pub mod rnd;

pub use amp::{amp_reward, amp_score, amp_update, AmpState, AMP_REWARD_CEILING};
pub use disagreement::{disagreement_reward, ensemble_update, EnsembleState};
pub use rnd::{rnd_reward, rnd_update, RndState};

use crate::envs::{mask_region, Frame, Rect};
use crate::error::{Error, Result};
use crate::tokenizer::{encode, Codebook};
use crate::videomodel::{frame_logprob, VideoModel};
use rayon::prelude::*;
use std::collections::VecDeque;

/// Exploration bonus choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exploration {
    Rnd,
    Disagreement,
    None,
}

impl Exploration {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnd" => Ok(Exploration::Rnd),
            "disagreement" => Ok(Exploration::Disagreement),
            "none" => Ok(Exploration::None),
            _ => Err(Error::config(format!("unknown exploration kind {s}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Exploration::Rnd => "rnd",
            Exploration::Disagreement => "disagreement",
            Exploration::None => "none",
        }
    }
}

/// How transitions are scored.
#[derive(Debug, Clone, Copy)]
pub struct RewardSpec {
    /// Exploration weight.
    pub beta: f64,
    /// Context frames for the likelihood window.
    pub k: usize,
    /// Temporal stride of the context.
    pub stride: usize,
    pub exploration: Exploration,
    /// Divide the likelihood reward by the token count per frame.
    pub normalize: bool,
    /// Divide the exploration reward by its running std.
    pub normalize_exploration: bool,
    /// Optional region blanked before tokenization (and at model training).
    pub mask_rect: Option<Rect>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            beta: 1.0,
            k: 2,
            stride: 1,
            exploration: Exploration::Rnd,
            normalize: true,
            normalize_exploration: true,
            mask_rect: None,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::config("beta must be >= 0"));
        }
        if self.stride < 1 {
            return Err(Error::config("stride must be >= 1"));
        }
        Ok(())
    }
}

/// Mutable exploration-side state carried through collection.
#[derive(Debug, Clone)]
pub enum ExplorationState {
    Rnd(RndState),
    Ensemble(EnsembleState),
    None,
}

impl ExplorationState {
    pub fn init(kind: Exploration, seed: u64) -> Self {
        match kind {
            Exploration::Rnd => ExplorationState::Rnd(RndState::init(seed)),
            Exploration::Disagreement => {
                ExplorationState::Ensemble(EnsembleState::init(4, seed))
            }
            Exploration::None => ExplorationState::None,
        }
    }

    /// Raw bonus for a transition; mutates nothing.
    pub fn raw_bonus(&self, frame_t: &Frame, frame_next: &Frame) -> f64 {
        match self {
            ExplorationState::Rnd(r) => rnd_reward(r, frame_next),
            ExplorationState::Ensemble(e) => disagreement_reward(e, frame_t, frame_next),
            ExplorationState::None => 0.0,
        }
    }

    /// Bonus with running-std normalization applied (and recorded).
    pub fn bonus(&mut self, frame_t: &Frame, frame_next: &Frame, normalize: bool) -> f64 {
        let raw = self.raw_bonus(frame_t, frame_next);
        match self {
            ExplorationState::Rnd(r) => {
                r.stat.push(raw);
                if normalize {
                    raw / r.stat.std()
                } else {
                    raw
                }
            }
            ExplorationState::Ensemble(_) | ExplorationState::None => raw,
        }
    }

    /// Train the exploration nets on collected frames/transitions.
    pub fn update(&mut self, transitions: &[(Frame, Frame)]) {
        match self {
            ExplorationState::Rnd(r) => {
                let frames: Vec<Frame> = transitions.iter().map(|(_, b)| b.clone()).collect();
                rnd_update(r, &frames);
            }
            ExplorationState::Ensemble(e) => {
                ensemble_update(e, transitions);
            }
            ExplorationState::None => {}
        }
    }
}

/// Exact weighted sum of the likelihood and exploration rewards.
pub fn combined_reward(r_viper: f64, r_expl: f64, beta: f64) -> f64 {
    r_viper + beta * r_expl
}

fn maybe_mask(frame: &Frame, rect: Option<Rect>) -> Result<Frame> {
    match rect {
        Some(r) => mask_region(frame, r),
        None => Ok(frame.clone()),
    }
}

/// Log-likelihood reward for a transition: encode the recent frames and
/// the next frame, then score the next frame under the frozen model.
///
/// `window` is the raw recent-frame window ending at the current frame;
/// it is strided and truncated to at most k context frames. Masking (when
/// configured) happens before tokenization, matching the model's training
/// preprocessing.
pub fn viper_reward(
    model: &VideoModel,
    codebook: &Codebook,
    window: &[Frame],
    next_frame: &Frame,
    task_id: u32,
    spec: &RewardSpec,
) -> Result<f64> {
    if model.config.vocab != codebook.vocab {
        return Err(Error::config(format!(
            "model vocab {} != codebook vocab {}",
            model.config.vocab, codebook.vocab
        )));
    }
    let mut ctx_tokens: Vec<Vec<u16>> = Vec::new();
    // walk backward from the newest frame at the configured stride
    let mut idx = window.len() as isize - 1;
    while idx >= 0 && ctx_tokens.len() < spec.k.min(model.config.context_frames) {
        let f = maybe_mask(&window[idx as usize], spec.mask_rect)?;
        ctx_tokens.push(encode(&f, codebook)?);
        idx -= spec.stride as isize;
    }
    ctx_tokens.reverse();
    let next = maybe_mask(next_frame, spec.mask_rect)?;
    let next_tokens = encode(&next, codebook)?;
    let ctx_refs: Vec<&[u16]> = ctx_tokens.iter().map(|c| c.as_slice()).collect();
    let lp = frame_logprob(model, &ctx_refs, &next_tokens, task_id)?;
    Ok(if spec.normalize { lp / next_tokens.len() as f64 } else { lp })
}

/// A reward-labeled transition, with its components retained.
#[derive(Debug, Clone)]
pub struct LabeledTransition {
    pub frame_t: Frame,
    pub action: u8,
    /// Combined reward r_viper + beta * r_expl.
    pub reward: f64,
    pub frame_next: Frame,
    pub done: bool,
    pub r_viper: f64,
    pub r_expl: f64,
}

/// Rolling window of recent raw frames for one environment instance.
#[derive(Debug, Clone)]
pub struct RecentFrames {
    frames: VecDeque<Frame>,
    cap: usize,
}

impl RecentFrames {
    pub fn new(spec: &RewardSpec) -> Self {
        let cap = (spec.k.max(1) - 1) * spec.stride + 1;
        RecentFrames { frames: VecDeque::with_capacity(cap + 1), cap: cap.max(1) }
    }

    pub fn push(&mut self, frame: Frame) {
        self.frames.push_back(frame);
        while self.frames.len() > self.cap {
            self.frames.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn window(&self) -> Vec<Frame> {
        self.frames.iter().cloned().collect()
    }
}

/// Inputs for labeling one transition.
#[derive(Debug, Clone)]
pub struct PendingTransition {
    pub window: Vec<Frame>,
    pub frame_t: Frame,
    pub action: u8,
    pub frame_next: Frame,
    pub done: bool,
    pub task_id: u32,
}

/// Label a batch of transitions. Likelihood scoring runs in parallel and
/// is read-only on the model; exploration bonuses are applied in batch
/// order so results match one-at-a-time labeling bit for bit.
pub fn label_batch(
    model: &VideoModel,
    codebook: &Codebook,
    spec: &RewardSpec,
    expl: &mut ExplorationState,
    pending: Vec<PendingTransition>,
) -> Result<Vec<LabeledTransition>> {
    let viper: Vec<Result<f64>> = pending
        .par_iter()
        .map(|p| viper_reward(model, codebook, &p.window, &p.frame_next, p.task_id, spec))
        .collect();
    let mut out = Vec::with_capacity(pending.len());
    for (p, rv) in pending.into_iter().zip(viper) {
        let r_viper = rv?;
        let r_expl = if spec.beta > 0.0 {
            expl.bonus(&p.frame_t, &p.frame_next, spec.normalize_exploration)
        } else {
            0.0
        };
        let reward = combined_reward(r_viper, r_expl, spec.beta);
        out.push(LabeledTransition {
            frame_t: p.frame_t,
            action: p.action,
            reward,
            frame_next: p.frame_next,
            done: p.done,
            r_viper,
            r_expl,
        });
    }
    Ok(out)
}

/// Label one transition (batch of one).
pub fn label_transition(
    model: &VideoModel,
    codebook: &Codebook,
    spec: &RewardSpec,
    expl: &mut ExplorationState,
    pending: PendingTransition,
) -> Result<LabeledTransition> {
    Ok(label_batch(model, codebook, spec, expl, vec![pending])?.remove(0))
}

/// One row of a reward trace CSV:
/// `episode,step,r_viper,r_expl,beta,combined,env_reward`.
pub fn trace_csv_header() -> &'static str {
    "episode,step,r_viper,r_expl,beta,combined,env_reward"
}

pub fn trace_csv_row(
    episode: usize,
    step: usize,
    t: &LabeledTransition,
    beta: f64,
    env_reward: f32,
) -> String {
    format!(
        "{episode},{step},{:.6},{:.6},{beta:.3},{:.6},{env_reward:.3}",
        t.r_viper, t.r_expl, t.reward
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{oracle_policy, pong_scoreboard_rect, reset, rollout, EnvId, StateKind};
    use crate::tokenizer::fit_codebook;
    use crate::videomodel::{ModelConfig, ModelVariant};

    fn tiny_model(vocab: usize) -> (VideoModel, ModelConfig) {
        let cfg = ModelConfig {
            variant: ModelVariant::Autoregressive,
            context_frames: 3,
            frame_stride: 1,
            vocab,
            z_h: 8,
            z_w: 8,
            num_tasks: 3,
            layers: 1,
            heads: 2,
            dim: 16,
            ff_dim: 32,
        };
        (VideoModel::init(&cfg, 0), cfg)
    }

    fn reach_codebook() -> Codebook {
        let mut frames = Vec::new();
        for seed in 0..6 {
            frames.extend(rollout(EnvId::Reach, 0, seed, |s| oracle_policy(s)).unwrap().frames);
        }
        fit_codebook(&frames, 64, 10, 0).unwrap()
    }

    #[test]
    fn uniform_model_reward_is_ln_v_per_token() {
        let cb = reach_codebook();
        let (model, _) = tiny_model(cb.vocab);
        let ep = rollout(EnvId::Reach, 0, 9, |s| oracle_policy(s)).unwrap();
        let spec =
            RewardSpec { normalize: false, beta: 0.0, ..Default::default() };
        let r = viper_reward(&model, &cb, &ep.frames[..2], &ep.frames[2], 0, &spec).unwrap();
        let want = -(64.0 * (cb.vocab as f64).ln());
        assert!((r - want).abs() < 1e-3, "{r} vs {want}");
        // normalized: per-token value
        let spec_n = RewardSpec { normalize: true, beta: 0.0, ..Default::default() };
        let rn = viper_reward(&model, &cb, &ep.frames[..2], &ep.frames[2], 0, &spec_n).unwrap();
        assert!((rn - want / 64.0).abs() < 1e-5);
    }

    #[test]
    fn empty_context_is_the_unconditional_likelihood() {
        let cb = reach_codebook();
        let (model, _) = tiny_model(cb.vocab);
        let ep = rollout(EnvId::Reach, 0, 4, |s| oracle_policy(s)).unwrap();
        let spec = RewardSpec { k: 0, normalize: false, beta: 0.0, ..Default::default() };
        let r = viper_reward(&model, &cb, &[], &ep.frames[0], 0, &spec).unwrap();
        let toks = encode(&ep.frames[0], &cb).unwrap();
        let refs: Vec<&[u16]> = Vec::new();
        let want = frame_logprob(&model, &refs, &toks, 0).unwrap();
        assert_eq!(r, want);
    }

    #[test]
    fn combined_reward_is_linear_in_beta() {
        let cases = [(-3.2, 0.7), (0.0, 1.9), (4.5, -0.4)];
        for (rv, re) in cases {
            for (b1, b2) in [(0.0, 1.0), (0.25, 1.0), (0.5, 2.0)] {
                let lhs = combined_reward(rv, re, b1) - combined_reward(rv, re, b2);
                let rhs = (b1 - b2) * re;
                assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
            }
        }
        assert_eq!(combined_reward(2.5, 9.0, 0.0), 2.5);
        assert_eq!(combined_reward(2.5, 9.0, 1.0), 11.5);
    }

    #[test]
    fn kl_identity_on_enumerated_toy_distributions() {
        // two symbols, length-2 sequences; q is a policy distribution,
        // p a model; KL(q||p) must equal E_q[-ln p] - H[q] exactly
        let q = [0.4 * 0.7, 0.4 * 0.3, 0.6 * 0.1, 0.6 * 0.9];
        let p = [0.25, 0.25, 0.35, 0.15];
        let kl: f64 = q
            .iter()
            .zip(&p)
            .map(|(&qi, &pi): (&f64, &f64)| qi * (qi / pi).ln())
            .sum();
        let ce: f64 = q.iter().zip(&p).map(|(&qi, &pi): (&f64, &f64)| -qi * pi.ln()).sum();
        let h: f64 = q.iter().map(|&qi: &f64| -qi * qi.ln()).sum();
        assert!((kl - (ce - h)).abs() < 1e-9);
    }

    #[test]
    fn masked_labeling_ignores_score_pixels() {
        let cb = reach_codebook();
        let (model, _) = tiny_model(cb.vocab);
        let spec = RewardSpec {
            mask_rect: Some(pong_scoreboard_rect()),
            beta: 0.0,
            ..Default::default()
        };
        // two pong states differing only in score
        let (s, f) = reset(EnvId::PongMini, 0, 3).unwrap();
        let mut s2 = s.clone();
        if let StateKind::Pong { score, .. } = &mut s2.kind {
            *score = 7;
        }
        let f2 = crate::envs::render(&s2);
        let ctx = [f.clone()];
        let r1 = viper_reward(&model, &cb, &ctx, &f, 2, &spec).unwrap();
        let r2 = viper_reward(&model, &cb, &ctx, &f2, 2, &spec).unwrap();
        assert_eq!(r1.to_bits(), r2.to_bits(), "masked rewards must be bit-identical");
    }

    #[test]
    fn batch_labeling_matches_individual_labeling() {
        let cb = reach_codebook();
        let (model, _) = tiny_model(cb.vocab);
        let spec = RewardSpec { beta: 1.0, ..Default::default() };
        let ep = rollout(EnvId::Reach, 0, 12, |s| oracle_policy(s)).unwrap();
        let mut pending = Vec::new();
        for i in 0..ep.frames.len() - 1 {
            pending.push(PendingTransition {
                window: ep.frames[..=i].to_vec(),
                frame_t: ep.frames[i].clone(),
                action: ep.actions[i],
                frame_next: ep.frames[i + 1].clone(),
                done: ep.dones[i],
                task_id: 0,
            });
        }
        let mut expl_a = ExplorationState::init(Exploration::Rnd, 7);
        let batch =
            label_batch(&model, &cb, &spec, &mut expl_a, pending.clone()).unwrap();
        let mut expl_b = ExplorationState::init(Exploration::Rnd, 7);
        for (i, p) in pending.into_iter().enumerate() {
            let one = label_transition(&model, &cb, &spec, &mut expl_b, p).unwrap();
            assert_eq!(one.reward.to_bits(), batch[i].reward.to_bits(), "item {i}");
            assert_eq!(one.r_viper.to_bits(), batch[i].r_viper.to_bits());
            assert_eq!(one.r_expl.to_bits(), batch[i].r_expl.to_bits());
        }
    }

    #[test]
    fn labeling_never_mutates_the_model() {
        let cb = reach_codebook();
        let (model, _) = tiny_model(cb.vocab);
        let before: Vec<Vec<f32>> =
            model.params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let spec = RewardSpec::default();
        let ep = rollout(EnvId::Reach, 0, 3, |s| oracle_policy(s)).unwrap();
        let mut expl = ExplorationState::init(Exploration::None, 0);
        let _ = label_transition(
            &model,
            &cb,
            &spec,
            &mut expl,
            PendingTransition {
                window: ep.frames[..1].to_vec(),
                frame_t: ep.frames[0].clone(),
                action: 0,
                frame_next: ep.frames[1].clone(),
                done: false,
                task_id: 0,
            },
        )
        .unwrap();
        for ((_, t), b) in model.params.iter().zip(before) {
            assert_eq!(t.data(), &b[..]);
        }
    }

    #[test]
    fn recent_frames_window_respects_capacity() {
        let spec = RewardSpec { k: 2, stride: 2, ..Default::default() };
        let mut ring = RecentFrames::new(&spec);
        let ep = rollout(EnvId::Reach, 0, 0, |s| oracle_policy(s)).unwrap();
        for f in &ep.frames {
            ring.push(f.clone());
        }
        // capacity (k-1)*stride + 1 = 3
        assert_eq!(ring.window().len(), 3.min(ep.frames.len()));
    }
}
