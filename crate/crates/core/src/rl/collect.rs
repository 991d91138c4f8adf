//! Parallel-env experience collection with reward labeling.

use super::{pick_action, policy_forward, ActMode, ObsStack, PolicyParams, RolloutBuffer};
use crate::envs::{reset, step, EnvId, Frame};
use crate::error::Result;
use crate::rewards::{
    amp_reward, amp_update, label_batch, AmpState, ExplorationState, PendingTransition,
    RecentFrames, RewardSpec,
};
use crate::tokenizer::Codebook;
use crate::util::rng_stream;
use crate::videomodel::VideoModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Where transition rewards come from during collection.
pub enum RewardSource<'a> {
    /// Frozen video model likelihoods plus an exploration bonus.
    Model {
        model: &'a VideoModel,
        codebook: &'a Codebook,
        spec: RewardSpec,
        expl: ExplorationState,
    },
    /// Adversarial baseline; the discriminator trains between phases.
    Amp { amp: AmpState, expert: Vec<(Frame, Frame)>, rng: ChaCha8Rng },
    /// Ground-truth env rewards (diagnostics only).
    GroundTruth,
    /// Dense oracle-agreement reward: 1 when the taken action matches the
    /// scripted oracle (sanity path for the RL machinery).
    OracleRelabel,
}

struct Runner {
    state: crate::envs::EnvState,
    current: Frame,
    stack: ObsStack,
    ring: RecentFrames,
    gt_return: f64,
}

/// Steps N environment instances and labels every transition before it
/// is stored.
pub struct Collector {
    pub env_id: EnvId,
    pub variant_id: u32,
    runners: Vec<Runner>,
    reset_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
    ring_spec: RewardSpec,
    frame_stack: usize,
    pub total_steps: u64,
    /// Ground-truth returns of finished episodes, for evaluation CSVs only.
    pub finished_returns: Vec<f64>,
}

impl Collector {
    pub fn new(
        env_id: EnvId,
        variant_id: u32,
        n_envs: usize,
        ring_spec: RewardSpec,
        frame_stack: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut reset_rng = rng_stream(seed, "collect.reset");
        let action_rng = rng_stream(seed, "collect.action");
        let mut runners = Vec::with_capacity(n_envs);
        for _ in 0..n_envs {
            let ep_seed: u64 = reset_rng.gen();
            let (state, frame) = reset(env_id, variant_id, ep_seed)?;
            let mut ring = RecentFrames::new(&ring_spec);
            ring.push(frame.clone());
            runners.push(Runner {
                state,
                stack: ObsStack::new(frame_stack, &frame),
                current: frame,
                ring,
                gt_return: 0.0,
            });
        }
        Ok(Collector {
            env_id,
            variant_id,
            runners,
            reset_rng,
            action_rng,
            ring_spec,
            frame_stack,
            total_steps: 0,
            finished_returns: Vec::new(),
        })
    }

    pub fn n_envs(&self) -> usize {
        self.runners.len()
    }

    fn obs_batch(&self, obs_dim: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.runners.len() * obs_dim);
        for r in &self.runners {
            out.extend(r.stack.obs());
        }
        out
    }
}

/// Collect `n_steps` per environment; every stored reward comes from the
/// reward source, never from the ground-truth channel.
pub fn collect(
    collector: &mut Collector,
    policy: &PolicyParams,
    source: &mut RewardSource,
    n_steps: usize,
) -> Result<RolloutBuffer> {
    let n_envs = collector.n_envs();
    let obs_dim = policy.config.obs_dim();
    let actions = policy.config.action_count;
    let mut buffer = RolloutBuffer::new(n_envs, n_steps, obs_dim);
    let mut phase_pairs: Vec<(Frame, Frame)> = Vec::with_capacity(n_envs * n_steps);
    let mut viper_sum = 0.0f64;
    let mut expl_sum = 0.0f64;

    for _ in 0..n_steps {
        let obs = collector.obs_batch(obs_dim);
        let (logits, values) = policy_forward(policy, &obs, n_envs);
        buffer.obs.extend_from_slice(&obs);

        // act and step every env
        type Stepped = (u8, f32, f32, crate::envs::EnvState, Frame, f32, bool);
        let mut stepped: Vec<Stepped> = Vec::with_capacity(n_envs);
        let mut pending: Vec<PendingTransition> = Vec::with_capacity(n_envs);
        let mut oracle_match: Vec<f64> = Vec::with_capacity(n_envs);
        for e in 0..n_envs {
            let row = &logits[e * actions..(e + 1) * actions];
            let (a, lp) = pick_action(row, ActMode::Sample, &mut collector.action_rng);
            let runner = &collector.runners[e];
            oracle_match.push(if a == crate::envs::oracle_policy(&runner.state) { 1.0 } else { 0.0 });
            let (next_state, next_frame, env_reward, done) = step(&runner.state, a)?;
            pending.push(PendingTransition {
                window: runner.ring.window(),
                frame_t: runner.current.clone(),
                action: a,
                frame_next: next_frame.clone(),
                done,
                task_id: collector.env_id.task_id(),
            });
            stepped.push((a, lp, values[e], next_state, next_frame, env_reward, done));
        }

        // label rewards
        let rewards: Vec<(f64, f64, f64)> = match source {
            RewardSource::Model { model, codebook, spec, expl } => {
                let labeled = label_batch(model, codebook, spec, expl, pending)?;
                labeled.iter().map(|l| (l.reward, l.r_viper, l.r_expl)).collect()
            }
            RewardSource::Amp { amp, .. } => pending
                .iter()
                .map(|p| {
                    let r = amp_reward(amp, &p.frame_t, &p.frame_next);
                    (r, r, 0.0)
                })
                .collect(),
            RewardSource::GroundTruth => {
                stepped.iter().map(|s| (s.5 as f64, 0.0, 0.0)).collect()
            }
            RewardSource::OracleRelabel => {
                oracle_match.iter().map(|&m| (m, 0.0, 0.0)).collect()
            }
        };

        for (e, ((a, lp, v, next_state, next_frame, env_reward, done), (reward, rv, re))) in
            stepped.into_iter().zip(rewards).enumerate()
        {
            buffer.actions.push(a);
            buffer.log_probs.push(lp);
            buffer.values.push(v);
            buffer.rewards.push(reward as f32);
            buffer.dones.push(done);
            viper_sum += rv;
            expl_sum += re;
            let runner = &mut collector.runners[e];
            phase_pairs.push((runner.current.clone(), next_frame.clone()));
            runner.gt_return += env_reward as f64;
            runner.state = next_state;
            if done {
                collector.finished_returns.push(runner.gt_return);
                runner.gt_return = 0.0;
                let ep_seed: u64 = collector.reset_rng.gen();
                let (state, frame) = reset(collector.env_id, collector.variant_id, ep_seed)?;
                runner.state = state;
                runner.stack = ObsStack::new(collector.frame_stack, &frame);
                runner.ring = RecentFrames::new(&collector.ring_spec);
                runner.ring.push(frame.clone());
                runner.current = frame;
            } else {
                runner.stack.push(&next_frame);
                runner.ring.push(next_frame.clone());
                runner.current = next_frame;
            }
        }
        collector.total_steps += n_envs as u64;
    }

    // bootstrap values for the observation after the last step
    let obs = collector.obs_batch(obs_dim);
    let (_, values) = policy_forward(policy, &obs, n_envs);
    buffer.bootstrap = values;
    buffer.mean_r_viper = viper_sum / buffer.len().max(1) as f64;
    buffer.mean_r_expl = expl_sum / buffer.len().max(1) as f64;

    // exploration / discriminator training between phases
    match source {
        RewardSource::Model { expl, .. } => expl.update(&phase_pairs),
        RewardSource::Amp { amp, expert, rng } => {
            if !expert.is_empty() {
                let take = phase_pairs.len().min(expert.len()).max(1);
                let start = rng.gen_range(0..expert.len());
                let batch: Vec<(Frame, Frame)> =
                    (0..take).map(|i| expert[(start + i) % expert.len()].clone()).collect();
                amp_update(amp, &batch, &phase_pairs);
            }
        }
        RewardSource::GroundTruth | RewardSource::OracleRelabel => {}
    }
    Ok(buffer)
}
