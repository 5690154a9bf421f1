//! Attention heatmaps averaged over evaluation resets.

use crate::report::{self, LabeledMatrix};
use agp_core::agents::{Agent, AgentError};
use agp_core::env::{Env, EnvSpec, Observation};
use rand::Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

const CHUNK: usize = 500;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("batch must be positive")]
    EmptyBatch,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] agp_core::env::EnvError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapExport {
    /// `heads[l][h]`: batch-averaged attention of head `h` in layer `l`.
    pub heads: Vec<Vec<LabeledMatrix>>,
    /// `means[l]`: average over the heads of layer `l`.
    pub means: Vec<LabeledMatrix>,
}

impl HeatmapExport {
    pub fn file_name(layer: usize, head: usize) -> String {
        format!("attn_L{layer}H{head}.csv")
    }

    pub fn mean_file_name(layer: usize) -> String {
        format!("attn_L{layer}mean.csv")
    }
}

/// Average attention of `agent` over `batch` fresh resets of `spec`.
pub fn compute_heatmaps<R: Rng + ?Sized>(agent: &Agent, spec: &EnvSpec, batch: usize, rng: &mut R) -> Result<HeatmapExport, HeatmapError> {
    if batch == 0 {
        return Err(HeatmapError::EmptyBatch);
    }
    let mut env = Env::new(spec.clone())?;
    let labels = agent.nodes().labels();
    let v = labels.len();
    let mut sums: Option<Vec<Vec<Vec<f64>>>> = None;
    let mut done = 0;
    while done < batch {
        let n = CHUNK.min(batch - done);
        let obs: Vec<Observation> = (0..n).map(|_| env.reset(rng)).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        for rec in agent.attention(&refs)? {
            let acc = sums.get_or_insert_with(|| rec.weights.iter().map(|l| vec![vec![0.0; v * v]; l.len()]).collect());
            for (al, rl) in acc.iter_mut().zip(&rec.weights) {
                for (ah, rh) in al.iter_mut().zip(rl) {
                    for (a, r) in ah.iter_mut().zip(rh) {
                        *a += r;
                    }
                }
            }
        }
        done += n;
    }
    let sums = sums.unwrap_or_default();
    let heads: Vec<Vec<LabeledMatrix>> = sums
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|m| LabeledMatrix {
                    labels: labels.clone(),
                    values: m.into_iter().map(|x| x / batch as f64).collect(),
                })
                .collect()
        })
        .collect();
    let means = heads
        .iter()
        .map(|layer| {
            let mut mean = vec![0.0; v * v];
            for m in layer {
                for (a, x) in mean.iter_mut().zip(&m.values) {
                    *a += x / layer.len() as f64;
                }
            }
            LabeledMatrix {
                labels: labels.clone(),
                values: mean,
            }
        })
        .collect();
    Ok(HeatmapExport { heads, means })
}

/// Compute and write one CSV per (layer, head) plus one head-mean CSV per
/// layer to `dir`.
pub fn export_heatmaps<R: Rng + ?Sized>(
    agent: &Agent,
    spec: &EnvSpec,
    batch: usize,
    dir: &Path,
    rng: &mut R,
) -> Result<(HeatmapExport, Vec<PathBuf>), HeatmapError> {
    let export = compute_heatmaps(agent, spec, batch, rng)?;
    let mut files = Vec::new();
    for (l, layer) in export.heads.iter().enumerate() {
        for (h, m) in layer.iter().enumerate() {
            let path = dir.join(HeatmapExport::file_name(l, h));
            report::write(&path, &report::matrix_csv(m)?)?;
            files.push(path);
        }
        let path = dir.join(HeatmapExport::mean_file_name(l));
        report::write(&path, &report::matrix_csv(&export.means[l])?)?;
        files.push(path);
    }
    Ok((export, files))
}

/// Mean weight on `actK → actK` cells between different agents.
pub fn cross_agent_weight(m: &LabeledMatrix, nodes: &[(usize, usize)], action: usize) -> f64 {
    let mut total = 0.0;
    let mut cells = 0;
    for (r, &(ri, ra)) in nodes.iter().enumerate() {
        for (c, &(ci, ca)) in nodes.iter().enumerate() {
            if ri != ci && ra == action && ca == action {
                total += m.get(r, c);
                cells += 1;
            }
        }
    }
    if cells == 0 {
        0.0
    } else {
        total / cells as f64
    }
}

/// Total weight on cells whose row and column belong to different agents.
pub fn cross_agent_mass(m: &LabeledMatrix, nodes: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for (r, &(ri, _)) in nodes.iter().enumerate() {
        for (c, &(ci, _)) in nodes.iter().enumerate() {
            if ri != ci {
                total += m.get(r, c);
            }
        }
    }
    total
}
