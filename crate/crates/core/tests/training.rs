mod common;

use agp_core::agents::{self, Agent, AgentConfig, AgentKind, Scorer};
use agp_core::env::{top_k_set, Env, EnvSpec, GameKind, Observation};
use agp_core::tensor::{Adam, Tape};
use agp_core::training::{
    collect_episode, evaluate, pg_update, run_experiment, td_update, PpoSettings, RewardBaseline, TrainConfig, Trainer, Transition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

fn small() -> AgentConfig {
    AgentConfig {
        hidden: 16,
        heads: 4,
        layers: 2,
    }
}

/// Scores action 1 above action 0 exactly for the top-K signals.
struct TopKOracle(usize);

impl Scorer for TopKOracle {
    fn score_batch(&self, batch: &[&Observation]) -> agents::Result<Vec<Vec<Vec<f64>>>> {
        Ok(batch
            .iter()
            .map(|o| {
                let top = top_k_set(&o.signals(), self.0);
                (0..o.num_agents()).map(|i| if top.contains(&i) { vec![0.0, 1.0] } else { vec![1.0, 0.0] }).collect()
            })
            .collect())
    }
}

/// Fresh uniform noise as scores, so the greedy choice is uniformly random.
struct Noise(RefCell<ChaCha8Rng>);

impl Scorer for Noise {
    fn score_batch(&self, batch: &[&Observation]) -> agents::Result<Vec<Vec<Vec<f64>>>> {
        let mut rng = self.0.borrow_mut();
        Ok(batch
            .iter()
            .map(|o| o.avail.iter().map(|m| m.iter().map(|_| rng.gen::<f64>()).collect()).collect())
            .collect())
    }
}

fn within_3_sigma(rate: f64, p: f64, n: usize) -> bool {
    (rate - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn oracle_scorer_always_succeeds() {
    let spec = EnvSpec::topk(6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (reward, success) = evaluate(&spec, &TopKOracle(2), 2000, &mut rng).unwrap();
    assert_eq!((reward, success), (1.0, 1.0));
    let mut env = Env::new(spec).unwrap();
    let (mut r1, mut r2) = (ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2));
    for _ in 0..50 {
        assert!(collect_episode(&mut env, &TopKOracle(2), 0.0, &mut r1, &mut r2).unwrap().success);
    }
}

#[test]
fn random_play_on_exactly_one() {
    let spec = EnvSpec::new(GameKind::ExactlyOne, 4);
    let noise = Noise(RefCell::new(ChaCha8Rng::seed_from_u64(3)));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, success) = evaluate(&spec, &noise, 10_000, &mut rng).unwrap();
    assert!(within_3_sigma(success, 0.25, 10_000), "{success}");

    let agent = Agent::new(AgentKind::Vdn, &spec, small(), &mut rng).unwrap();
    let mut env = Env::new(spec).unwrap();
    let (mut r1, mut r2) = (ChaCha8Rng::seed_from_u64(5), ChaCha8Rng::seed_from_u64(6));
    let hits = (0..10_000)
        .filter(|_| collect_episode(&mut env, &agent, 1.0, &mut r1, &mut r2).unwrap().success)
        .count();
    assert!(within_3_sigma(hits as f64 / 1e4, 0.25, 10_000), "{hits}");
}

#[test]
fn collection_is_reproducible() {
    let spec = EnvSpec::topk(6, 2);
    let agent = Agent::new(AgentKind::AgpQ, &spec, small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let run = || {
        let mut env = Env::new(spec.clone()).unwrap();
        let (mut r1, mut r2) = (ChaCha8Rng::seed_from_u64(7), ChaCha8Rng::seed_from_u64(8));
        collect_episode(&mut env, &agent, 0.3, &mut r1, &mut r2).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let spec = EnvSpec::topk(6, 2);
    let agent = Agent::new(AgentKind::AgpQ, &spec, small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = agent.store().fingerprint();
    let a = evaluate(&spec, &agent, 700, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = evaluate(&spec, &agent, 700, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, agent.store().fingerprint());
    assert!(evaluate(&spec, &agent, 0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
}

fn transitions(spec: &EnvSpec, count: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    let mut env = Env::new(spec.clone()).unwrap();
    (0..count)
        .map(|_| {
            let obs = env.reset(rng);
            let a: Vec<usize> = (0..spec.num_agents).map(|_| rng.gen_range(0..2)).collect();
            let step = env.step(&a).unwrap();
            Transition {
                observation: obs,
                joint_action: a,
                reward: step.reward,
                done: true,
                success: step.success,
                next_observation: None,
            }
        })
        .collect()
}

fn chosen_q_tot(agent: &Agent, t: &Transition) -> f64 {
    let q = agent.scores(&t.observation).unwrap();
    t.joint_action.iter().enumerate().map(|(i, &a)| q[i][a]).sum()
}

#[test]
fn td_update_at_fixed_point_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let spec = EnvSpec::topk(4, 2);
    for kind in [AgentKind::AgpQ, AgentKind::Vdn] {
        let mut agent = Agent::new(kind, &spec, small(), &mut rng).unwrap();
        let mut batch = transitions(&spec, 8, &mut rng);
        for t in &mut batch {
            t.reward = chosen_q_tot(&agent, t);
        }
        let target = agent.store().clone();
        let before = agent.store().flat_values();
        let refs: Vec<&Transition> = batch.iter().collect();
        let loss = td_update(&refs, &mut agent, &target, &mut Adam::new(5e-4), 0.99).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(before, agent.store().flat_values());
    }
}

#[test]
fn td_update_overfits_one_transition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = EnvSpec::topk(6, 2);
    let mut overfit = |kind, updates| {
        let mut agent = Agent::new(kind, &spec, AgentConfig::default(), &mut rng).unwrap();
        let mut t = transitions(&spec, 1, &mut rng).remove(0);
        t.reward = 1.0;
        let target = agent.store().clone();
        let mut opt = Adam::new(5e-4);
        let first = td_update(&[&t], &mut agent, &target, &mut opt, 0.99).unwrap();
        let mut last = first;
        for _ in 1..updates {
            last = td_update(&[&t], &mut agent, &target, &mut opt, 0.99).unwrap();
        }
        assert_eq!(opt.steps(), updates);
        (first, last)
    };
    for kind in [AgentKind::AgpQ, AgentKind::Vdn, AgentKind::AgpNoCross, AgentKind::AgpNoGraph] {
        let (first, last) = overfit(kind, 200);
        assert!(last < 1e-3 * first, "{kind:?}: {first} -> {last}");
    }
    // independent targets: one regression per agent, slower to pin down
    let (first, last) = overfit(AgentKind::Iql, 1000);
    assert!(last < 1e-2 * first, "{first} -> {last}");
}

#[test]
fn td_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let spec = EnvSpec::new(GameKind::ExactlyOne, 2);
    for kind in [AgentKind::AgpQ, AgentKind::Iql] {
        let agent = Agent::new(kind, &spec, small(), &mut rng).unwrap();
        let batch = transitions(&spec, 3, &mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();
        let target = agent.store().clone();
        let loss_at = |a: &Agent| td_update(&refs, &mut a.clone(), &target, &mut Adam::new(0.0), 0.99).unwrap();
        // lr 0 keeps the parameters; the first moment holds (1 - beta1) * grad
        let mut probe = agent.clone();
        let mut opt = Adam::new(0.0);
        td_update(&refs, &mut probe, &target, &mut opt, 0.99).unwrap();
        let mut worst: f64 = 0.0;
        for id in agent.store().ids().collect::<Vec<_>>() {
            let (m, _) = opt.moments(id).unwrap();
            for j in 0..agent.store().value(id).len() {
                let mut plus = agent.clone();
                plus.store_mut().value_mut(id).data_mut()[j] += common::STEP;
                let mut minus = agent.clone();
                minus.store_mut().value_mut(id).data_mut()[j] -= common::STEP;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * common::STEP);
                worst = worst.max(common::rel_err(m[j] / 0.1, numeric));
            }
        }
        assert!(worst < common::TOL, "{kind:?}: {worst}");
    }
}

#[test]
fn td_update_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = EnvSpec::topk(3, 1);
    let mut pg = Agent::new(AgentKind::AgpPg, &spec, small(), &mut rng).unwrap();
    let t = transitions(&spec, 1, &mut rng).remove(0);
    let target = pg.store().clone();
    assert!(td_update(&[&t], &mut pg, &target, &mut Adam::new(1e-3), 0.99).is_err());
}

/// Two-step chain for one agent: state A (signal 0.2) leads to B (signal
/// 0.7) with reward 0 whatever the action; B ends with reward 1.
fn chain() -> Vec<Transition> {
    let a = common::signal_obs(&[0.2]);
    let b = common::signal_obs(&[0.7]);
    let mut out = Vec::new();
    for act in 0..2 {
        out.push(Transition {
            observation: a.clone(),
            joint_action: vec![act],
            reward: 0.0,
            done: false,
            success: false,
            next_observation: Some(b.clone()),
        });
        out.push(Transition {
            observation: b.clone(),
            joint_action: vec![act],
            reward: 1.0,
            done: true,
            success: true,
            next_observation: None,
        });
    }
    out
}

#[test]
fn bootstrapped_target_uses_target_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = EnvSpec::topk(1, 1);
    for kind in [AgentKind::Iql, AgentKind::Vdn, AgentKind::AgpQ] {
        let mut agent = Agent::new(kind, &spec, small(), &mut rng).unwrap();
        // a distinct target network
        let target = Agent::new(kind, &spec, small(), &mut rng).unwrap().store().clone();
        let data = chain();
        let refs: Vec<&Transition> = data.iter().collect();
        let gamma = 0.9;
        let mut expected = 0.0;
        for t in &data {
            let q = agent.scores(&t.observation).unwrap()[0][t.joint_action[0]];
            let y = match &t.next_observation {
                Some(next) => {
                    let mut tape = Tape::new();
                    let out = agent.forward_with(&mut tape, &target, &[next]).unwrap();
                    let row = tape.value(out.scores).row(0).to_vec();
                    t.reward + gamma * row[0].max(row[1])
                }
                None => t.reward,
            };
            expected += (q - y).powi(2) / data.len() as f64;
        }
        let loss = td_update(&refs, &mut agent, &target, &mut Adam::new(1e-3), gamma).unwrap();
        assert!((loss - expected).abs() < 1e-12, "{kind:?}: {loss} vs {expected}");
    }
}

#[test]
fn two_step_chain_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let spec = EnvSpec::topk(1, 1);
    let mut agent = Agent::new(AgentKind::Iql, &spec, small(), &mut rng).unwrap();
    let mut target = agent.store().clone();
    let data = chain();
    let refs: Vec<&Transition> = data.iter().collect();
    let mut opt = Adam::new(3e-3);
    for step in 0..3000 {
        td_update(&refs, &mut agent, &target, &mut opt, 0.99).unwrap();
        if step % 25 == 0 {
            target.copy_values_from(agent.store());
        }
    }
    let qa = agent.scores(&common::signal_obs(&[0.2])).unwrap();
    let qb = agent.scores(&common::signal_obs(&[0.7])).unwrap();
    for a in 0..2 {
        assert!((qb[0][a] - 1.0).abs() < 0.02, "{:?}", qb);
        assert!((qa[0][a] - 0.99).abs() < 0.02, "{:?}", qa);
    }
}

fn ppo(epochs: usize, entropy_coef: f64, target_kl: f64) -> PpoSettings {
    PpoSettings {
        clip: 0.2,
        epochs,
        entropy_coef,
        target_kl,
    }
}

fn pg_batch(spec: &EnvSpec, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    transitions(spec, 6, rng)
}

#[test]
fn zero_advantage_leaves_policy_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let spec = EnvSpec::topk(4, 2);
    let mut agent = Agent::new(AgentKind::AgpPg, &spec, small(), &mut rng).unwrap();
    let mut batch = pg_batch(&spec, &mut rng);
    for t in &mut batch {
        t.reward = 0.25;
    }
    let mut baseline = RewardBaseline::new(0.99);
    baseline.value = 0.25;
    let before = agent.store().flat_values();
    let refs: Vec<&Transition> = batch.iter().collect();
    let step = pg_update(&refs, &mut agent, &mut Adam::new(5e-4), &mut baseline, &ppo(4, 0.0, 0.02)).unwrap();
    assert_eq!(step.steps, 4);
    assert_eq!(before, agent.store().flat_values());
    assert_eq!(baseline.value, 0.25);
}

#[test]
fn entropy_bonus_alone_flattens_the_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let spec = EnvSpec::topk(4, 2);
    let mut agent = Agent::new(AgentKind::AgpPg, &spec, small(), &mut rng).unwrap();
    let mut batch = pg_batch(&spec, &mut rng);
    for t in &mut batch {
        t.reward = 0.0;
    }
    let entropy = |agent: &Agent| -> f64 {
        let mut h = 0.0;
        for t in &batch {
            for row in agent.scores(&t.observation).unwrap() {
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                h -= row.iter().map(|x| (x - m).exp() / z * (x - m - z.ln())).sum::<f64>();
            }
        }
        h
    };
    let before = entropy(&agent);
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut opt = Adam::new(1e-2);
    let mut baseline = RewardBaseline::new(0.99);
    for _ in 0..5 {
        pg_update(&refs, &mut agent, &mut opt, &mut baseline, &ppo(4, 0.1, 0.0)).unwrap();
    }
    assert!(entropy(&agent) > before, "{} <= {before}", entropy(&agent));
}

#[test]
fn first_inner_step_is_unclipped() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let spec = EnvSpec::topk(4, 2);
    let mut agent = Agent::new(AgentKind::AgpPg, &spec, small(), &mut rng).unwrap();
    let batch = pg_batch(&spec, &mut rng);
    let mut baseline = RewardBaseline::new(0.99);
    baseline.value = -0.3;
    baseline.updates = 1;
    let refs: Vec<&Transition> = batch.iter().collect();
    let adv: Vec<f64> = batch.iter().map(|t| t.reward + 0.3).collect();
    let loss = pg_update(&refs, &mut agent, &mut Adam::new(5e-4), &mut baseline, &ppo(3, 0.01, 0.02)).unwrap().surrogate;
    // ratio 1 everywhere: surrogate is -mean(advantage)
    let want = -adv.iter().sum::<f64>() / adv.len() as f64;
    assert!((loss - want).abs() < 1e-12);
    let mean = batch.iter().map(|t| t.reward).sum::<f64>() / 6.0;
    assert!((baseline.value - (0.99 * -0.3 + 0.01 * mean)).abs() < 1e-15);
}

#[test]
fn pg_update_requires_policy_agent() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let spec = EnvSpec::topk(3, 1);
    let mut agent = Agent::new(AgentKind::Vdn, &spec, small(), &mut rng).unwrap();
    let batch = pg_batch(&spec, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    assert!(pg_update(&refs, &mut agent, &mut Adam::new(1e-3), &mut RewardBaseline::new(0.99), &ppo(1, 0.01, 0.02)).is_err());
}

#[test]
fn kl_limit_cuts_inner_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let spec = EnvSpec::topk(4, 2);
    let agent = Agent::new(AgentKind::AgpPg, &spec, small(), &mut rng).unwrap();
    let batch = pg_batch(&spec, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let run = |target_kl: f64| {
        let mut a = agent.clone();
        let mut baseline = RewardBaseline::new(0.99);
        baseline.value = -0.5;
        baseline.updates = 1;
        pg_update(&refs, &mut a, &mut Adam::new(0.05), &mut baseline, &ppo(6, 0.0, target_kl)).unwrap().steps
    };
    assert_eq!(run(0.0), 6);
    assert_eq!(run(1e-9), 1);
}

#[test]
fn policy_gradient_solves_two_agent_exactly_one() {
    let mut cfg = TrainConfig::new(EnvSpec::new(GameKind::ExactlyOne, 2), AgentKind::AgpPg);
    cfg.episodes = 50_000;
    cfg.eval_interval = 10_000;
    cfg.eval_episodes = 1_000;
    cfg.seed = 1;
    let out = run_experiment(&cfg).unwrap();
    let last = out.curve.last().unwrap();
    assert_eq!(last.episode, 50_000);
    assert!(last.success_rate >= 0.9, "{:?}", out.curve.points);
}

#[test]
fn target_network_tracks_syncs() {
    let mut cfg = TrainConfig::new(EnvSpec::topk(3, 1), AgentKind::Vdn);
    cfg.episodes = 1_000;
    cfg.target_update_interval = 50;
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut frozen = trainer.target.flat_values();
    for _ in 0..400 {
        trainer.train_episode().unwrap();
        let now = trainer.target.flat_values();
        if trainer.episode().is_multiple_of(50) {
            assert_eq!(now, trainer.agent.store().flat_values());
            frozen = now;
        } else {
            assert_eq!(now, frozen);
        }
        assert!(trainer.buffer.len() <= trainer.buffer.capacity());
    }
}

#[test]
fn buffer_drops_oldest_beyond_capacity() {
    let mut cfg = TrainConfig::new(EnvSpec::topk(3, 1), AgentKind::Iql);
    cfg.buffer_capacity = 100;
    cfg.episodes = 1_000;
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut first = None;
    for _ in 0..250 {
        trainer.train_episode().unwrap();
        if first.is_none() {
            first = trainer.buffer.iter().next().cloned();
        }
    }
    assert_eq!(trainer.buffer.len(), 100);
    let first = first.unwrap();
    assert!(trainer.buffer.iter().all(|t| t != &first));
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let mut cfg = TrainConfig::new(EnvSpec::topk(4, 2), AgentKind::AgpQ);
    cfg.agent = small();
    cfg.episodes = 600;
    cfg.eval_interval = 200;
    cfg.eval_episodes = 200;
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.agent.store().fingerprint(), b.agent.store().fingerprint());
    let eps: Vec<usize> = a.curve.points.iter().map(|p| p.episode).collect();
    assert_eq!(eps, vec![200, 400, 600]);
    cfg.seed = 1;
    let c = run_experiment(&cfg).unwrap();
    assert_ne!(a.agent.store().fingerprint(), c.agent.store().fingerprint());
}
