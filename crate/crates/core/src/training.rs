//! Experience collection, replay, TD and clipped policy-gradient updates,
//! target networks, exploration schedule and evaluation.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::{self, Agent, AgentConfig, AgentError, AgentKind, Scorer};
use crate::env::{Env, EnvError, EnvSpec, Observation};
use crate::tensor::{fill_missing_grads, Adam, ParamStore, Tape, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Agent(AgentError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub joint_action: Vec<usize>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Successor observation for non-terminal transitions.
    pub next_observation: Option<Observation>,
}

/// Fixed-capacity FIFO replay memory with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` draws, uniform with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub kind: AgentKind,
    pub agent: AgentConfig,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_update_interval: usize,
    pub episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_fraction: f64,
    /// Collected episodes per gradient update.
    pub update_every: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// On-policy episodes per policy-gradient update.
    pub rollout_episodes: usize,
    pub ppo_epochs: usize,
    pub ppo_clip: f64,
    pub baseline_decay: f64,
    /// Weight of the mean policy entropy bonus in the policy-gradient loss.
    pub entropy_coef: f64,
    pub target_kl: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn ppo(&self) -> PpoSettings {
        PpoSettings {
            clip: self.ppo_clip,
            epochs: self.ppo_epochs,
            entropy_coef: self.entropy_coef,
            target_kl: self.target_kl,
        }
    }

    pub fn new(env: EnvSpec, kind: AgentKind) -> Self {
        Self {
            env,
            kind,
            agent: AgentConfig::default(),
            lr: 5e-4,
            gamma: 0.99,
            batch_size: 32,
            buffer_capacity: 50_000,
            target_update_interval: 200,
            episodes: 300_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_fraction: 0.2,
            update_every: 1,
            eval_interval: 10_000,
            eval_episodes: 1_000,
            rollout_episodes: 128,
            ppo_epochs: 4,
            ppo_clip: 0.2,
            baseline_decay: 0.99,
            entropy_coef: 0.01,
            target_kl: 0.02,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.target_update_interval == 0 || self.rollout_episodes == 0 {
            return bad("batch_size, buffer_capacity, target_update_interval and rollout_episodes must be positive");
        }
        if self.update_every == 0 || self.eval_interval == 0 || self.eval_episodes == 0 || self.ppo_epochs == 0 {
            return bad("update_every, eval_interval, eval_episodes and ppo_epochs must be positive");
        }
        if !(self.eps_anneal_fraction > 0.0 && self.eps_anneal_fraction <= 1.0) {
            return bad("eps_anneal_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("epsilon endpoints must lie in [0, 1]");
        }
        if !(self.ppo_clip > 0.0) || !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("ppo_clip must be positive and baseline_decay in [0, 1)");
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad("entropy_coef must be a finite non-negative number");
        }
        if !(self.target_kl >= 0.0 && self.target_kl.is_finite()) {
            return bad("target_kl must be a finite non-negative number");
        }
        Ok(())
    }
}

/// Linear decay from `eps_start` to `eps_end` over the first
/// `eps_anneal_fraction` of training, constant afterwards.
pub fn epsilon_at(episode: usize, config: &TrainConfig) -> f64 {
    let anneal = config.eps_anneal_fraction * config.episodes as f64;
    if anneal <= 0.0 || episode as f64 >= anneal {
        return config.eps_end;
    }
    let frac = episode as f64 / anneal;
    config.eps_start + frac * (config.eps_end - config.eps_start)
}

/// Named, independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env,
    Init,
    Explore,
    Sample,
    Eval,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ (stream as u64 + 1)) ^ counter)
}

pub fn stream_rng(master: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, counter))
}

/// Choose a joint action: ε-greedy for value agents, sampling from the
/// policy for policy-gradient agents (`greedy` forces argmax for both).
pub fn act<S: Scorer + ?Sized, R: Rng + ?Sized>(agent: &S, obs: &Observation, epsilon: f64, greedy: bool, rng: &mut R) -> Result<Vec<usize>> {
    let scores = agent.score_batch(&[obs])?.remove(0);
    choose(agent.samples_policy(), &scores, &obs.avail, epsilon, greedy, rng)
}

fn choose<R: Rng + ?Sized>(sample: bool, scores: &[Vec<f64>], avail: &[Vec<bool>], epsilon: f64, greedy: bool, rng: &mut R) -> Result<Vec<usize>> {
    if greedy {
        return Ok(agents::select_actions(scores, avail, 0.0, rng)?);
    }
    if sample {
        let dists = agents::policy_from_logits(scores, avail)?;
        Ok(agents::sample_actions(&dists, rng))
    } else {
        Ok(agents::select_actions(scores, avail, epsilon, rng)?)
    }
}

/// One reset → act → step cycle.
pub fn collect_episode<S: Scorer + ?Sized, R: Rng + ?Sized>(env: &mut Env, agent: &S, epsilon: f64, env_rng: &mut R, explore_rng: &mut R) -> Result<Transition> {
    let obs = env.reset(env_rng);
    let joint_action = act(agent, &obs, epsilon, false, explore_rng)?;
    let step = env.step(&joint_action)?;
    Ok(Transition {
        observation: obs,
        joint_action,
        reward: step.reward,
        done: step.done,
        success: step.success,
        next_observation: None,
    })
}

/// One TD step on a batch. Additive agents regress `Σ_i Q_i(a_i)` on
/// `r + γ Σ_i max_a Q̄_i(o', a)`; independent learners regress each
/// `Q_i(a_i)` on `r + γ max_a Q̄_i(o', a)`. Returns the pre-step loss.
pub fn td_update(batch: &[&Transition], agent: &mut Agent, target: &ParamStore, opt: &mut Adam, gamma: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if agent.kind().is_policy_gradient() {
        return Err(AgentError::KindMismatch {
            expected: "a value-based agent",
            got: agent.kind().name(),
        }
        .into());
    }
    let n = agent.spec().num_agents;
    let additive = agent.kind().mixes_additively();
    let bootstrap = next_state_values(batch, agent, target)?;
    let targets: Vec<f64> = if additive {
        batch
            .iter()
            .zip(&bootstrap)
            .map(|(t, next)| t.reward + gamma * next.iter().sum::<f64>())
            .collect()
    } else {
        batch
            .iter()
            .zip(&bootstrap)
            .flat_map(|(t, next)| next.iter().map(move |v| t.reward + gamma * v))
            .collect()
    };
    let observations: Vec<&Observation> = batch.iter().map(|t| &t.observation).collect();
    let actions: Vec<usize> = batch.iter().flat_map(|t| t.joint_action.iter().copied()).collect();
    let mut tape = Tape::new();
    let out = agent.forward(&mut tape, &observations)?;
    let chosen = tape.select_cols(out.scores, actions)?;
    let pred = if additive { tape.sum_groups(chosen, n)? } else { chosen };
    let loss = tape.mse(pred, targets)?;
    let value = tape.value(loss).item();
    tape.backward(loss, agent.store_mut())?;
    fill_missing_grads(agent.store_mut());
    opt.step(agent.store_mut())?;
    Ok(value)
}

/// Per-agent `max_a Q̄_i(o', a)` under the target parameters; zeros for
/// terminal transitions.
fn next_state_values(batch: &[&Transition], agent: &Agent, target: &ParamStore) -> Result<Vec<Vec<f64>>> {
    let n = agent.spec().num_agents;
    let mut values = vec![vec![0.0; n]; batch.len()];
    let live: Vec<usize> = (0..batch.len())
        .filter(|&b| !batch[b].done && batch[b].next_observation.is_some())
        .collect();
    if live.is_empty() {
        return Ok(values);
    }
    let next: Vec<&Observation> = live.iter().map(|&b| batch[b].next_observation.as_ref().unwrap()).collect();
    let mut tape = Tape::new();
    let out = agent.forward_with(&mut tape, target, &next)?;
    let scores = tape.value(out.scores);
    for (row, &b) in live.iter().enumerate() {
        for i in 0..n {
            let q = scores.row(row * n + i);
            let avail = &batch[b].next_observation.as_ref().unwrap().avail[i];
            let best = agents::masked_argmax(q, avail).ok_or(AgentError::NoAvailableAction(i))?;
            values[b][i] = q[best];
        }
    }
    Ok(values)
}

/// Running mean of episode rewards used as the advantage baseline. The
/// first update replaces the initial value outright.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBaseline {
    pub value: f64,
    pub decay: f64,
    pub updates: u64,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Self {
        Self {
            value: 0.0,
            decay,
            updates: 0,
        }
    }

    pub fn update(&mut self, mean_reward: f64) {
        self.value = if self.updates == 0 {
            mean_reward
        } else {
            self.decay * self.value + (1.0 - self.decay) * mean_reward
        };
        self.updates += 1;
    }
}

/// Inner-loop settings of the clipped-ratio policy-gradient update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoSettings {
    pub clip: f64,
    pub epochs: usize,
    /// Weight of the mean per-agent policy entropy subtracted from the loss.
    pub entropy_coef: f64,
    /// Inner steps stop once the approximate KL between the batch policy and
    /// the current one exceeds this; 0 disables the check.
    pub target_kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgStep {
    /// Surrogate loss (without the entropy term) at the first inner step.
    pub surrogate: f64,
    pub steps: usize,
}

/// Clipped-ratio policy-gradient update on an on-policy batch, with
/// advantage `r − baseline`. Runs up to `epochs` inner steps against the
/// log-probabilities at entry, then updates the baseline.
pub fn pg_update(batch: &[&Transition], agent: &mut Agent, opt: &mut Adam, baseline: &mut RewardBaseline, ppo: &PpoSettings) -> Result<PgStep> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if !agent.kind().is_policy_gradient() {
        return Err(AgentError::KindMismatch {
            expected: AgentKind::AgpPg.name(),
            got: agent.kind().name(),
        }
        .into());
    }
    let n = agent.spec().num_agents;
    let observations: Vec<&Observation> = batch.iter().map(|t| &t.observation).collect();
    let actions: Vec<usize> = batch.iter().flat_map(|t| t.joint_action.iter().copied()).collect();
    let mask: Vec<bool> = batch.iter().flat_map(|t| t.observation.avail.iter().flatten().copied()).collect();
    let advantages: Vec<f64> = batch.iter().map(|t| t.reward - baseline.value).collect();
    let mut old_logp: Option<Vec<f64>> = None;
    let mut result = PgStep { surrogate: 0.0, steps: 0 };
    for epoch in 0..ppo.epochs {
        let mut tape = Tape::new();
        let out = agent.forward(&mut tape, &observations)?;
        let logp = tape.masked_log_softmax(out.scores, mask.clone())?;
        let chosen = tape.select_cols(logp, actions.clone())?;
        let joint = tape.sum_groups(chosen, n)?;
        let old = old_logp.get_or_insert_with(|| tape.value(joint).data().to_vec()).clone();
        if epoch > 0 && ppo.target_kl > 0.0 && approx_kl(&old, tape.value(joint).data()) > ppo.target_kl {
            break;
        }
        let surrogate = tape.ppo_clip_loss(joint, old, advantages.clone(), ppo.clip)?;
        if epoch == 0 {
            result.surrogate = tape.value(surrogate).item();
        }
        let loss = if ppo.entropy_coef > 0.0 {
            // Σ p·log p is the negated entropy; masked entries are 0 in both.
            let p = tape.masked_softmax(out.scores, mask.clone())?;
            let plogp = tape.mul(p, logp)?;
            let neg_entropy = tape.sum(plogp)?;
            let bonus = tape.scale(neg_entropy, ppo.entropy_coef / actions.len() as f64)?;
            tape.add(surrogate, bonus)?
        } else {
            surrogate
        };
        tape.backward(loss, agent.store_mut())?;
        fill_missing_grads(agent.store_mut());
        opt.step(agent.store_mut())?;
        result.steps += 1;
    }
    let mean = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
    baseline.update(mean);
    Ok(result)
}

/// Sample estimate of KL(old ‖ new) from log-probabilities of actions drawn
/// under `old`: mean of `(ρ − 1) − log ρ` with `ρ = new / old`.
pub fn approx_kl(old: &[f64], new: &[f64]) -> f64 {
    let total: f64 = old.iter().zip(new).map(|(o, n)| (n - o).exp_m1() - (n - o)).sum();
    total / old.len().max(1) as f64
}

/// Greedy (ε = 0) rollouts: `(mean reward, success rate)`. Touches neither
/// the agent nor any buffer.
pub fn evaluate<S: Scorer + ?Sized, R: Rng + ?Sized>(spec: &EnvSpec, agent: &S, episodes: usize, rng: &mut R) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(TrainError::Config("evaluation needs at least one episode".into()));
    }
    let mut env = Env::new(spec.clone())?;
    let mut reward = 0.0;
    let mut successes = 0usize;
    const CHUNK: usize = 500;
    let mut done = 0;
    while done < episodes {
        let m = CHUNK.min(episodes - done);
        let mut resets = Vec::with_capacity(m);
        for _ in 0..m {
            let obs = env.reset(rng);
            resets.push((obs, env.clone()));
        }
        let batch: Vec<&Observation> = resets.iter().map(|(o, _)| o).collect();
        let scores = agent.score_batch(&batch)?;
        for ((obs, snapshot), s) in resets.iter().zip(&scores) {
            let a = agents::select_actions(s, &obs.avail, 0.0, rng)?;
            let step = snapshot.step(&a)?;
            reward += step.reward;
            successes += usize::from(step.success);
        }
        done += m;
    }
    Ok((reward / episodes as f64, successes as f64 / episodes as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub curve: LearningCurve,
    pub agent: Agent,
}

/// Mutable state of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub agent: Agent,
    pub target: ParamStore,
    pub buffer: ReplayBuffer,
    pub optimizer: Adam,
    pub baseline: RewardBaseline,
    env: Env,
    env_rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    rollout: Vec<Transition>,
    episode: usize,
    evals: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = stream_rng(config.seed, Stream::Init, 0);
        let agent = Agent::new(config.kind, &config.env, config.agent.clone(), &mut init_rng)?;
        let target = agent.store().clone();
        Ok(Self {
            env: Env::new(config.env.clone())?,
            env_rng: stream_rng(config.seed, Stream::Env, 0),
            explore_rng: stream_rng(config.seed, Stream::Explore, 0),
            sample_rng: stream_rng(config.seed, Stream::Sample, 0),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            optimizer: Adam::new(config.lr),
            baseline: RewardBaseline::new(config.baseline_decay),
            rollout: Vec::new(),
            agent,
            target,
            episode: 0,
            evals: 0,
            config,
        })
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    /// Collect one episode and apply whatever updates fall due.
    pub fn train_episode(&mut self) -> Result<()> {
        let eps = epsilon_at(self.episode, &self.config);
        let t = collect_episode(&mut self.env, &self.agent, eps, &mut self.env_rng, &mut self.explore_rng)?;
        self.episode += 1;
        let cfg = &self.config;
        if cfg.kind.is_policy_gradient() {
            self.rollout.push(t);
            if self.rollout.len() == cfg.rollout_episodes {
                let batch: Vec<&Transition> = self.rollout.iter().collect();
                pg_update(&batch, &mut self.agent, &mut self.optimizer, &mut self.baseline, &cfg.ppo())?;
                self.rollout.clear();
            }
        } else {
            self.buffer.push(t);
            if self.buffer.len() >= cfg.batch_size && self.episode.is_multiple_of(cfg.update_every) {
                let batch = self.buffer.sample(cfg.batch_size, &mut self.sample_rng);
                td_update(&batch, &mut self.agent, &self.target, &mut self.optimizer, cfg.gamma)?;
            }
            if self.episode.is_multiple_of(cfg.target_update_interval) {
                self.target.copy_values_from(self.agent.store());
            }
        }
        Ok(())
    }

    /// Greedy evaluation on a stream indexed by the evaluation count, so
    /// evaluating never perturbs training randomness.
    pub fn evaluate_now(&mut self) -> Result<CurvePoint> {
        let mut rng = stream_rng(self.config.seed, Stream::Eval, self.evals);
        self.evals += 1;
        let (mean_reward, success_rate) = evaluate(&self.config.env, &self.agent, self.config.eval_episodes, &mut rng)?;
        let epsilon = if self.config.kind.is_policy_gradient() {
            0.0
        } else {
            epsilon_at(self.episode, &self.config)
        };
        Ok(CurvePoint {
            episode: self.episode,
            mean_reward,
            success_rate,
            epsilon,
        })
    }
}

/// Full training loop for one seed.
pub fn run_experiment(config: &TrainConfig) -> Result<RunOutput> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut curve = LearningCurve::default();
    for _ in 0..config.episodes {
        trainer.train_episode()?;
        let ep = trainer.episode();
        if ep % config.eval_interval == 0 || ep == config.episodes {
            curve.points.push(trainer.evaluate_now()?);
        }
    }
    Ok(RunOutput {
        curve,
        agent: trainer.agent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GameKind;

    fn transition(reward: f64) -> Transition {
        Transition {
            observation: Observation {
                per_agent: vec![vec![0.0]],
                avail: vec![vec![true, true]],
                ids: vec![],
            },
            joint_action: vec![0],
            reward,
            done: true,
            success: false,
            next_observation: None,
        }
    }

    #[test]
    fn epsilon_schedule() {
        let mut cfg = TrainConfig::new(EnvSpec::topk(6, 2), AgentKind::AgpQ);
        cfg.episodes = 1000;
        assert_eq!(epsilon_at(0, &cfg), 1.0);
        assert_eq!(epsilon_at(200, &cfg), 0.05);
        assert_eq!(epsilon_at(999, &cfg), 0.05);
        assert!((epsilon_at(100, &cfg) - 0.525).abs() < 1e-12);
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3);
        for r in 0..5 {
            buf.push(transition(r as f64));
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(buf.sample(10, &mut rng).len(), 10);
        assert!(ReplayBuffer::new(2).sample(4, &mut rng).is_empty());
    }

    #[test]
    fn seed_streams_are_distinct() {
        let a = derive_seed(7, Stream::Env, 0);
        assert_ne!(a, derive_seed(7, Stream::Init, 0));
        assert_ne!(a, derive_seed(7, Stream::Env, 1));
        assert_ne!(a, derive_seed(8, Stream::Env, 0));
        assert_eq!(a, derive_seed(7, Stream::Env, 0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(EnvSpec::topk(6, 2), AgentKind::Vdn);
        assert!(cfg.validate().is_ok());
        cfg.eps_anneal_fraction = 0.0;
        assert!(cfg.validate().is_err());
        cfg.eps_anneal_fraction = 0.2;
        cfg.env.k = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_batches_and_kind_mismatches() {
        let spec = EnvSpec::new(GameKind::ExactlyOne, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut q = Agent::new(AgentKind::Vdn, &spec, AgentConfig::default(), &mut rng).unwrap();
        let target = q.store().clone();
        let mut opt = Adam::new(1e-3);
        assert_eq!(td_update(&[], &mut q, &target, &mut opt, 0.99).unwrap_err(), TrainError::EmptyBatch);
        let mut base = RewardBaseline::new(0.99);
        let t = Transition {
            observation: Env::new(spec.clone()).unwrap().reset(&mut rng),
            joint_action: vec![0, 1],
            reward: 1.0,
            done: true,
            success: true,
            next_observation: None,
        };
        assert!(matches!(
            pg_update(&[&t], &mut q, &mut opt, &mut base, &TrainConfig::new(spec.clone(), AgentKind::AgpPg).ppo()),
            Err(TrainError::Agent(AgentError::KindMismatch { .. }))
        ));
    }

    #[test]
    fn approx_kl_is_zero_only_without_change() {
        let old = [-0.5, -1.2, -3.0];
        assert_eq!(approx_kl(&old, &old), 0.0);
        assert!(approx_kl(&old, &[-0.4, -1.2, -3.0]) > 0.0);
        assert!(approx_kl(&old, &[-0.6, -1.2, -3.0]) > 0.0);
        // second order in small shifts
        let k = approx_kl(&[0.0], &[1e-3]);
        assert!((k - 0.5e-6).abs() < 1e-9);
    }

    #[test]
    fn baseline_starts_from_first_batch() {
        let mut b = RewardBaseline::new(0.9);
        b.update(-0.5);
        assert_eq!(b.value, -0.5);
        b.update(0.5);
        assert!((b.value - (-0.4)).abs() < 1e-15);
        assert_eq!(b.updates, 2);
    }

    #[test]
    fn zero_episode_run_has_empty_curve() {
        let mut cfg = TrainConfig::new(EnvSpec::topk(3, 1), AgentKind::Iql);
        cfg.episodes = 0;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.curve.points.is_empty());
    }
}
