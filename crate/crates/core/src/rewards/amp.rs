//! Adversarial baseline: a discriminator over encoded frame pairs,
//! trained expert-vs-policy, with -ln(1 - D) as the reward.

use super::nets::{frame_features, Mlp, FRAME_FEATURES};
use crate::envs::Frame;
use crate::optim::OptimizerConfig;

const HIDDEN: usize = 256;
pub const AMP_REWARD_CEILING: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct AmpState {
    pub disc: Mlp,
    pub opt: OptimizerConfig,
}

impl AmpState {
    pub fn init(seed: u64) -> Self {
        AmpState {
            disc: Mlp::init(2 * FRAME_FEATURES, HIDDEN, 1, seed, "amp.disc"),
            opt: OptimizerConfig::with_lr(1e-3),
        }
    }
}

fn pair_features(frame_t: &Frame, frame_next: &Frame) -> Vec<f32> {
    let mut f = frame_features(frame_t);
    f.extend(frame_features(frame_next));
    f
}

/// Discriminator probability that a transition comes from expert data.
pub fn amp_score(amp: &AmpState, frame_t: &Frame, frame_next: &Frame) -> f64 {
    let logit = amp.disc.forward(&pair_features(frame_t, frame_next), 1)[0] as f64;
    1.0 / (1.0 + (-logit).exp())
}

/// Reward -ln(1 - D), clipped to [0, AMP_REWARD_CEILING].
pub fn amp_reward(amp: &AmpState, frame_t: &Frame, frame_next: &Frame) -> f64 {
    let d = amp_score(amp, frame_t, frame_next);
    (-(1.0 - d).ln()).clamp(0.0, AMP_REWARD_CEILING)
}

/// One adversarial update: expert transitions labeled 1, policy 0.
pub fn amp_update(
    amp: &mut AmpState,
    expert: &[(Frame, Frame)],
    policy: &[(Frame, Frame)],
) -> f32 {
    if expert.is_empty() || policy.is_empty() {
        return 0.0;
    }
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (a, b) in expert {
        xs.extend(pair_features(a, b));
        labels.push(1.0);
    }
    for (a, b) in policy {
        xs.extend(pair_features(a, b));
        labels.push(0.0);
    }
    let opt = amp.opt;
    amp.disc.bce_step(&xs, labels.len(), &labels, &opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{oracle_policy, reset, rollout, EnvId};
    use rand::Rng;

    #[test]
    fn uninformative_discriminator_rewards_ln_two() {
        let mut amp = AmpState::init(0);
        // zero the head so D = 0.5 everywhere
        for name in ["w2", "b2"] {
            for x in amp.disc.store.get_mut(name).data_mut() {
                *x = 0.0;
            }
        }
        let (_, f) = reset(EnvId::Reach, 0, 0).unwrap();
        let r = amp_reward(&amp, &f, &f);
        assert!((r - (2.0f64).ln()).abs() < 1e-9, "{r}");
    }

    #[test]
    fn confident_discriminator_hits_the_clip_ceiling() {
        let mut amp = AmpState::init(1);
        // push the output bias far positive: D ~ 1
        amp.disc.store.get_mut("b2").data_mut()[0] = 50.0;
        let (_, f) = reset(EnvId::Reach, 0, 1).unwrap();
        assert_eq!(amp_reward(&amp, &f, &f), AMP_REWARD_CEILING);
    }

    #[test]
    fn adversarial_training_separates_expert_from_random() {
        let mut amp = AmpState::init(2);
        let mut expert_pairs = Vec::new();
        for seed in 0..80 {
            let ep = rollout(EnvId::Reach, 0, seed, |s| oracle_policy(s)).unwrap();
            expert_pairs
                .extend(ep.frames.windows(2).map(|w| (w[0].clone(), w[1].clone())));
        }
        let mut rng = crate::util::rng_stream(5, "amp.random");
        let mut random_pairs = Vec::new();
        for seed in 100..180 {
            let ep = rollout(EnvId::Reach, 0, seed, |_| rng.gen_range(0..5) as u8).unwrap();
            random_pairs
                .extend(ep.frames.windows(2).map(|w| (w[0].clone(), w[1].clone())));
        }
        let held_exp = expert_pairs.split_off(expert_pairs.len() - 30);
        let held_rnd = random_pairs.split_off(random_pairs.len() - 30);
        // class-balanced updates: rotate through policy pairs
        let n = expert_pairs.len();
        for step in 0..500 {
            let start = (step * n) % random_pairs.len();
            let end = (start + n).min(random_pairs.len());
            amp_update(&mut amp, &expert_pairs, &random_pairs[start..end]);
        }
        let mut correct = 0;
        for (a, b) in &held_exp {
            if amp_score(&amp, a, b) > 0.5 {
                correct += 1;
            }
        }
        for (a, b) in &held_rnd {
            if amp_score(&amp, a, b) <= 0.5 {
                correct += 1;
            }
        }
        let acc = correct as f64 / 60.0;
        assert!(acc > 0.9, "held-out accuracy {acc}");
    }
}
