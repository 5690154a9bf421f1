#![allow(dead_code)]

use agp_core::env::Observation;
#[allow(unused_imports)]
pub use agp_core::gradcheck::*;

pub fn signal_obs(u: &[f64]) -> Observation {
    Observation {
        per_agent: u.iter().map(|&x| vec![x]).collect(),
        avail: vec![vec![true, true]; u.len()],
        ids: Vec::new(),
    }
}
