//! Randomized invariants of the numeric core, the graph and the oracles.

mod common;

use agp_core::agents::{masked_argmax, policy_from_logits, select_actions, Agent, AgentConfig, AgentKind};
use agp_core::env::{binary_joint_action, Env, EnvSpec, GameKind, Observation};
use agp_core::graph::{pool_contexts, ActionNodeSet};
use agp_core::oracles::{
    best_product_kl, brute_force_joint_success, closed_form_kl, greedy_vs_joint, independent_topk_bound, pairwise_fit_residual,
    parity_delta, LatentAccess, PairwiseDecomposition,
};
use agp_core::tensor::{masked_softmax, ParamStore, Tape, Tensor};
use agp_core::oracles::JointDistribution;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> AgentConfig {
    AgentConfig {
        hidden: 16,
        heads: 4,
        layers: 2,
    }
}

fn scores_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0f64..50.0, n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(|(s, mut m, keep)| {
                m[keep] = true;
                (s, m)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_distribution_on_support((scores, mask) in scores_and_mask()) {
        let p = masked_softmax(&scores, &mask).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (x, m) in p.iter().zip(&mask) {
            if *m { prop_assert!(*x > 0.0); } else { prop_assert_eq!(*x, 0.0); }
        }
        // tape version agrees and stores rows independently
        let mut tape = Tape::new();
        let n = scores.len();
        let v = tape.constant(Tensor::matrix(1, n, scores.clone()).unwrap()).unwrap();
        let s = tape.masked_softmax(v, mask.clone()).unwrap();
        prop_assert_eq!(tape.value(s).data(), p.as_slice());
    }

    #[test]
    fn masked_mean_matches_loop(rows in 1usize..8, cols in 1usize..6, seed in any::<u64>(), mask_bits in any::<u16>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mask: Vec<bool> = (0..rows).map(|r| mask_bits >> r & 1 == 1).collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(rows, cols, data.clone()).unwrap()).unwrap();
        let m = tape.masked_mean(v, &mask).unwrap();
        let count = mask.iter().filter(|&&b| b).count();
        for c in 0..cols {
            let mut s = 0.0;
            for r in 0..rows {
                if mask[r] { s += data[r * cols + c]; }
            }
            let want = if count == 0 { 0.0 } else { s / count as f64 };
            prop_assert!((tape.value(m).data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::matrix(m, k, a.clone()).unwrap()).unwrap();
        let bv = tape.constant(Tensor::matrix(k, n, b.clone()).unwrap()).unwrap();
        let c = tape.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                prop_assert!((tape.value(c).data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_ignores_constant_shift(scores in prop::collection::vec(-10.0f64..10.0, 1..6), c in -100.0f64..100.0) {
        let mask = vec![true; scores.len()];
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        // a shift can merge near-ties through rounding; only compare clear winners
        let best = masked_argmax(&scores, &mask).unwrap();
        let runner_up = scores.iter().enumerate().filter(|&(i, _)| i != best).map(|(_, &s)| s).fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(scores[best] - runner_up > 1e-9);
        prop_assert_eq!(masked_argmax(&shifted, &mask), Some(best));
    }

    #[test]
    fn masked_actions_never_selected(eps in 0.0f64..=1.0, seed in any::<u64>(), (scores, mask) in scores_and_mask()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let a = select_actions(std::slice::from_ref(&scores), std::slice::from_ref(&mask), eps, &mut rng).unwrap();
            prop_assert!(mask[a[0]]);
        }
        let p = policy_from_logits(std::slice::from_ref(&scores), std::slice::from_ref(&mask)).unwrap();
        for (x, m) in p[0].iter().zip(&mask) {
            if !m { prop_assert_eq!(*x, 0.0); }
        }
    }

    #[test]
    fn no_cross_context_ignores_other_agents(u in prop::collection::vec(0.0f64..1.0, 4), j in 0usize..4, delta in -1.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = EnvSpec::topk(4, 2);
        let agent = Agent::new(AgentKind::AgpNoCross, &spec, small(), &mut rng).unwrap();
        let base = common::signal_obs(&u);
        let mut moved = u.clone();
        moved[j] += delta;
        let k0 = agent.contexts(&base).unwrap();
        let k1 = agent.contexts(&common::signal_obs(&moved)).unwrap();
        for i in (0..4).filter(|&i| i != j) {
            for (a, b) in k0[i].iter().zip(&k1[i]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_graph_policy_ignores_other_agents(u in prop::collection::vec(0.0f64..1.0, 3), v in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(AgentKind::AgpNoGraph, &EnvSpec::topk(3, 1), small(), &mut rng).unwrap();
        let mut other = u.clone();
        other[1] = v;
        other[2] = 1.0 - v;
        let a = agent.scores(&common::signal_obs(&u)).unwrap();
        let b = agent.scores(&common::signal_obs(&other)).unwrap();
        prop_assert_eq!(&a[0], &b[0]);
    }

    #[test]
    fn relabeling_agents_permutes_contexts(u in prop::collection::vec(0.0f64..1.0, 4), seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        for spec in [EnvSpec::topk(4, 2), EnvSpec::new(GameKind::ExactlyOne, 4)] {
            let agent = Agent::new(AgentKind::AgpQ, &spec, small(), &mut rng).unwrap();
            let mut obs = Env::new(spec.clone()).unwrap().reset(&mut rng);
            if spec.game == GameKind::TopK {
                obs = common::signal_obs(&u);
            }
            // agent i of the original becomes agent perm[i]
            let mut permuted = obs.clone();
            for i in 0..4 {
                permuted.per_agent[perm[i]] = obs.per_agent[i].clone();
                permuted.avail[perm[i]] = obs.avail[i].clone();
                if !obs.ids.is_empty() {
                    permuted.ids[perm[i]] = obs.ids[i].clone();
                }
            }
            let k0 = agent.contexts(&obs).unwrap();
            let k1 = agent.contexts(&permuted).unwrap();
            for i in 0..4 {
                for (a, b) in k0[i].iter().zip(&k1[perm[i]]) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn parity_delta_is_linear(f in prop::array::uniform8(-5.0f64..5.0), g in prop::array::uniform8(-5.0f64..5.0), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let idx = |a: usize, b: usize, c: usize| a * 4 + b * 2 + c;
        let lhs = parity_delta(|a, b, c| alpha * f[idx(a, b, c)] + beta * g[idx(a, b, c)]);
        let rhs = alpha * parity_delta(|a, b, c| f[idx(a, b, c)]) + beta * parity_delta(|a, b, c| g[idx(a, b, c)]);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn decomposable_tables_fit_exactly(n in 3usize..=5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = PairwiseDecomposition::random(n, &mut rng);
        prop_assert!(pairwise_fit_residual(&d.table(), n).unwrap() < 1e-8);
        if n == 3 {
            let f = |a: usize, b: usize, c: usize| d.eval(&[a, b, c]);
            prop_assert!(parity_delta(f).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_vs_joint_matches_enumeration(u1 in prop::collection::vec(-3.0f64..3.0, 2..4), u2 in prop::collection::vec(-3.0f64..3.0, 2..4), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u12: Vec<Vec<f64>> = (0..u1.len()).map(|_| (0..u2.len()).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let r = greedy_vs_joint(&u1, &u2, &u12).unwrap();
        let mut best = (0, 0);
        for a in 0..u1.len() {
            for b in 0..u2.len() {
                let v = u1[a] + u2[b] + u12[a][b];
                if v > u1[best.0] + u2[best.1] + u12[best.0][best.1] { best = (a, b); }
            }
        }
        prop_assert_eq!(r.optimal, best);
        prop_assert_eq!(r.matches, r.greedy == r.optimal);
    }
}

#[test]
fn zeroed_projection_reduces_to_no_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = EnvSpec::topk(5, 2);
    let mut agp = Agent::new(AgentKind::AgpQ, &spec, AgentConfig::default(), &mut rng).unwrap();
    let mut flat = Agent::new(AgentKind::AgpNoGraph, &spec, AgentConfig::default(), &mut rng).unwrap();
    let proj = agp.graph().unwrap().proj;
    agp.store_mut().value_mut(proj).data_mut().fill(0.0);
    let head_ids: Vec<_> = flat.store().ids().collect();
    for id in head_ids {
        let name = flat.store().name(id).to_string();
        let src = agp.store().find(&name).unwrap();
        let values = agp.store().value(src).clone();
        *flat.store_mut().value_mut(id) = values;
    }
    let mut env = Env::new(spec).unwrap();
    for _ in 0..20 {
        let obs = env.reset(&mut rng);
        assert!(agp.contexts(&obs).unwrap().iter().flatten().all(|&x| x == 0.0));
        assert_eq!(agp.scores(&obs).unwrap(), flat.scores(&obs).unwrap());
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [AgentKind::AgpQ, AgentKind::AgpNoCross, AgentKind::AgpPg] {
        let spec = EnvSpec::topk(4, 2);
        let agent = Agent::new(kind, &spec, AgentConfig::default(), &mut rng).unwrap();
        let mut obs = Env::new(spec).unwrap().reset(&mut rng);
        obs.avail[2] = vec![false, true];
        for rec in agent.attention(&[&obs]).unwrap() {
            let v = rec.num_nodes;
            for layer in &rec.weights {
                for head in layer {
                    for r in 0..v {
                        let row = &head[r * v..(r + 1) * v];
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                        for c in 0..v {
                            if !rec.admissible[r * v + c] {
                                assert_eq!(row[c], 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    let iql = Agent::new(AgentKind::Iql, &EnvSpec::topk(3, 1), AgentConfig::default(), &mut rng).unwrap();
    assert!(iql.attention(&[&common::signal_obs(&[0.1, 0.2, 0.3])]).is_err());
}

#[test]
fn pooling_ignores_own_node_order() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let nodes = ActionNodeSet::from_counts(&[3, 3]);
    let h: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut swapped = h.clone();
    // reverse agent 1's rows
    for (dst, src) in [(3, 5), (5, 3)] {
        swapped[dst * 4..dst * 4 + 4].copy_from_slice(&h[src * 4..src * 4 + 4]);
    }
    let pool = |data: Vec<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(6, 4, data).unwrap()).unwrap();
        let c = pool_contexts(&mut tape, v, &nodes, &[vec![true; 6]]).unwrap();
        tape.value(c).data().to_vec()
    };
    let (a, b) = (pool(h), pool(swapped));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = EnvSpec::topk(6, 2);
    let agent = Agent::new(AgentKind::AgpQ, &spec, AgentConfig::default(), &mut rng).unwrap();
    let obs: Vec<Observation> = {
        let mut env = Env::new(spec).unwrap();
        (0..8).map(|_| env.reset(&mut rng)).collect()
    };
    let refs: Vec<&Observation> = obs.iter().collect();
    let a = agent.scores_batch(&refs).unwrap();
    let b = agent.scores_batch(&refs).unwrap();
    assert_eq!(a, b);
    let bits = |v: &Vec<Vec<Vec<f64>>>| v.iter().flatten().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    // batched and single-sample passes agree
    for (k, o) in obs.iter().enumerate() {
        let single = agent.scores(o).unwrap();
        for (x, y) in single.iter().flatten().zip(a[k].iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn one_hot_projection_matches_closed_form() {
    for n in 2..=6 {
        let r = best_product_kl(&JointDistribution::uniform_one_hot(n).unwrap()).unwrap();
        for m in &r.policy.marginals {
            assert!((m[1] - 1.0 / n as f64).abs() < 1e-9);
        }
        assert!((r.kl - closed_form_kl(n).unwrap()).abs() < 1e-9);
        assert!(r.refinement_gain <= 1e-9);
        assert!(!r.infinite);
    }
}

#[test]
fn random_targets_cannot_beat_marginals() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let counts = vec![2, 3, 2];
        let raw: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let t = JointDistribution::new(counts, raw.iter().map(|x| x / total).collect()).unwrap();
        assert!(best_product_kl(&t).unwrap().refinement_gain <= 1e-9);
    }
}

#[test]
fn independent_gap_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (n, k) in [(3, 1), (4, 2), (5, 2), (6, 2), (6, 3), (8, 3)] {
        let central = brute_force_joint_success(&EnvSpec::topk(n, k), 50, LatentAccess::Oracle, &mut rng).unwrap();
        assert_eq!(central, 1.0);
        assert!(independent_topk_bound(n, k).unwrap() < central);
    }
}

#[test]
fn topk_has_unique_winner() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 1..=8 {
        for k in 1..=n {
            let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let wins = (0..1usize << n)
                .filter(|&c| agp_core::env::step_topk(&u, &binary_joint_action(c, n), k).unwrap().success)
                .count();
            assert_eq!(wins, 1);
        }
    }
}

#[test]
fn store_fingerprint_tracks_values() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    let before = store.fingerprint();
    store.value_mut(id).data_mut()[0] = 1.5;
    assert_ne!(before, store.fingerprint());
}
