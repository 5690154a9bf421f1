//! Action-graph policies for cooperative multi-agent coordination games:
//! autodiff, environments, the action graph encoder, agents, training and
//! verification oracles.

pub mod agents;
pub mod env;
pub mod gradcheck;
pub mod graph;
pub mod oracles;
pub mod tensor;
pub mod training;
