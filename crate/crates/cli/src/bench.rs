//! Wall-clock cost of message passing as the action graph grows.

use crate::report::BenchRow;
use agp_core::env::Observation;
use agp_core::graph::{encode_nodes, message_pass, ActionNodeSet, EdgeMask, GraphConfig, GraphParams};
use agp_core::tensor::{ParamStore, Tape, TensorError};
use rand::Rng;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("reps must be positive")]
    NoReps,
    #[error("sizes must be positive")]
    EmptySize,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean microseconds per single-sample `message_pass` for every
/// (N, |A|) pair, at the default width.
pub fn bench_complexity<R: Rng + ?Sized>(agents: &[usize], actions: &[usize], reps: usize, rng: &mut R) -> Result<Vec<BenchRow>, BenchError> {
    if reps == 0 {
        return Err(BenchError::NoReps);
    }
    let mut rows = Vec::new();
    for &n in agents {
        for &a in actions {
            if n == 0 || a == 0 {
                return Err(BenchError::EmptySize);
            }
            let config = GraphConfig {
                obs_dim: 1,
                id_dim: 0,
                max_actions: a,
                hidden: 64,
                heads: 4,
                layers: 2,
                edge_mask: EdgeMask::Full,
            };
            let mut store = ParamStore::new();
            let params = GraphParams::init(config, &mut store, rng)?;
            let nodes = ActionNodeSet::from_counts(&vec![a; n]);
            let obs = Observation {
                per_agent: (0..n).map(|_| vec![rng.gen::<f64>()]).collect(),
                avail: vec![vec![true; a]; n],
                ids: Vec::new(),
            };
            let avail = vec![nodes.node_mask(&obs.avail)];
            let mut tape = Tape::new();
            let mut elapsed = 0.0;
            for rep in 0..=reps {
                tape.clear();
                let x = encode_nodes(&mut tape, &store, &params, &[&obs], &nodes)?;
                let start = Instant::now();
                let (h, _) = message_pass(&mut tape, &store, &params, x, &nodes, &avail)?;
                std::hint::black_box(tape.value(h));
                // first pass warms caches and is not counted
                if rep > 0 {
                    elapsed += start.elapsed().as_secs_f64();
                }
            }
            rows.push(BenchRow {
                num_agents: n,
                num_actions: a,
                num_nodes: nodes.len(),
                mean_us: elapsed * 1e6 / reps as f64,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_row_per_pair() {
        let rows = bench_complexity(&[2, 4], &[2, 3], 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let keys: Vec<(usize, usize, usize)> = rows.iter().map(|r| (r.num_agents, r.num_actions, r.num_nodes)).collect();
        assert_eq!(keys, vec![(2, 2, 4), (2, 3, 6), (4, 2, 8), (4, 3, 12)]);
        assert!(rows.iter().all(|r| r.mean_us > 0.0));
    }

    #[test]
    fn zero_reps_is_an_error() {
        assert!(matches!(bench_complexity(&[2], &[2], 0, &mut ChaCha8Rng::seed_from_u64(0)), Err(BenchError::NoReps)));
    }
}
