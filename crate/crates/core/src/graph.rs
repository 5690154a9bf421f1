//! Global action graph: one node per (agent, action) pair, encoded by a shared
//! MLP, mixed by stacked multi-head attention over all nodes, and pooled back
//! into one coordination context per agent.

use rand::Rng;

use crate::env::{EnvSpec, Observation};
use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Canonical agent-major, action-minor node ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionNodeSet {
    nodes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    counts: Vec<usize>,
}

impl ActionNodeSet {
    pub fn from_counts(counts: &[usize]) -> Self {
        let mut nodes = Vec::new();
        let mut offsets = Vec::with_capacity(counts.len());
        for (i, &c) in counts.iter().enumerate() {
            offsets.push(nodes.len());
            nodes.extend((0..c).map(|a| (i, a)));
        }
        Self {
            nodes,
            offsets,
            counts: counts.to_vec(),
        }
    }

    pub fn build(spec: &EnvSpec) -> Self {
        Self::from_counts(&vec![spec.num_actions; spec.num_agents])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_agents(&self) -> usize {
        self.counts.len()
    }

    pub fn nodes(&self) -> &[(usize, usize)] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> (usize, usize) {
        self.nodes[idx]
    }

    pub fn index(&self, agent: usize, action: usize) -> Option<usize> {
        (agent < self.counts.len() && action < self.counts[agent]).then(|| self.offsets[agent] + action)
    }

    pub fn agent_range(&self, agent: usize) -> std::ops::Range<usize> {
        self.offsets[agent]..self.offsets[agent] + self.counts[agent]
    }

    pub fn action_count(&self, agent: usize) -> usize {
        self.counts[agent]
    }

    pub fn max_actions(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Node availability flattened from per-agent masks.
    pub fn node_mask(&self, avail: &[Vec<bool>]) -> Vec<bool> {
        self.nodes.iter().map(|&(i, a)| avail[i][a]).collect()
    }

    /// Human-readable node labels, `agent{i}-act{a}`.
    pub fn labels(&self) -> Vec<String> {
        self.nodes.iter().map(|(i, a)| format!("agent{i}-act{a}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMask {
    /// Every node may attend to every available node.
    Full,
    /// Nodes only attend to their own agent's action nodes.
    SameAgent,
}

impl EdgeMask {
    pub fn allows(self, from: (usize, usize), to: (usize, usize)) -> bool {
        match self {
            EdgeMask::Full => true,
            EdgeMask::SameAgent => from.0 == to.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub obs_dim: usize,
    pub id_dim: usize,
    pub max_actions: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub edge_mask: EdgeMask,
}

impl GraphConfig {
    pub fn for_spec(spec: &EnvSpec, edge_mask: EdgeMask) -> Self {
        Self {
            obs_dim: spec.obs_dim,
            id_dim: spec.id_dim(),
            max_actions: spec.num_actions,
            hidden: 64,
            heads: 4,
            layers: 2,
            edge_mask,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.max_actions + self.id_dim
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

/// Parameter handles for the whole graph; one set shared by every node.
#[derive(Debug, Clone)]
pub struct GraphParams {
    pub config: GraphConfig,
    pub enc1_w: ParamId,
    pub enc1_b: ParamId,
    pub enc2_w: ParamId,
    pub enc2_b: ParamId,
    pub proj: ParamId,
    pub layers: Vec<AttentionLayer>,
}

impl GraphParams {
    pub fn init<R: Rng + ?Sized>(config: GraphConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let d = config.hidden;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(TensorError::Invalid(format!("hidden {d} not divisible by {} heads", config.heads)));
        }
        let din = config.input_dim();
        let mut add = |name: String, shape: &[usize], fan_in: usize| store.add(name, Tensor::uniform_init(shape, fan_in, rng));
        let enc1_w = add("graph.enc1.w".into(), &[din, d], din);
        let enc1_b = add("graph.enc1.b".into(), &[d], din);
        let enc2_w = add("graph.enc2.w".into(), &[d, d], d);
        let enc2_b = add("graph.enc2.b".into(), &[d], d);
        let proj = add("graph.proj".into(), &[d, d], d);
        let layers = (0..config.layers)
            .map(|l| AttentionLayer {
                query: add(format!("graph.l{l}.q"), &[d, d], d),
                key: add(format!("graph.l{l}.k"), &[d, d], d),
                value: add(format!("graph.l{l}.v"), &[d, d], d),
                output: add(format!("graph.l{l}.o"), &[d, d], d),
            })
            .collect();
        Ok(Self {
            config,
            enc1_w,
            enc1_b,
            enc2_w,
            enc2_b,
            proj,
            layers,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b, self.proj];
        for l in &self.layers {
            ids.extend([l.query, l.key, l.value, l.output]);
        }
        ids
    }
}

/// Rows `concat(o_i, onehot(a) [, id_i])` for every node of every sample.
pub fn node_inputs(batch: &[&Observation], nodes: &ActionNodeSet, config: &GraphConfig) -> Result<Tensor> {
    let din = config.input_dim();
    let mut data = Vec::with_capacity(batch.len() * nodes.len() * din);
    for obs in batch {
        if obs.num_agents() != nodes.num_agents() {
            return Err(TensorError::ShapeMismatch {
                op: "encode_nodes",
                left: vec![obs.num_agents()],
                right: vec![nodes.num_agents()],
            });
        }
        for &(i, a) in nodes.nodes() {
            let o = &obs.per_agent[i];
            let id: &[f64] = if config.id_dim > 0 { obs.ids.get(i).map_or(&[], |v| v) } else { &[] };
            if o.len() != config.obs_dim || id.len() != config.id_dim {
                return Err(TensorError::ShapeMismatch {
                    op: "encode_nodes",
                    left: vec![o.len(), id.len()],
                    right: vec![config.obs_dim, config.id_dim],
                });
            }
            data.extend_from_slice(o);
            data.extend((0..config.max_actions).map(|b| if b == a { 1.0 } else { 0.0 }));
            data.extend_from_slice(id);
        }
    }
    Tensor::matrix(batch.len() * nodes.len(), din, data)
}

/// Node features `x = φ(o_i, a)`: `[B·|V|, d]`.
pub fn encode_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GraphParams,
    batch: &[&Observation],
    nodes: &ActionNodeSet,
) -> Result<Var> {
    let input = tape.constant(node_inputs(batch, nodes, &params.config)?)?;
    let w1 = tape.param(store, params.enc1_w)?;
    let b1 = tape.param(store, params.enc1_b)?;
    let w2 = tape.param(store, params.enc2_w)?;
    let b2 = tape.param(store, params.enc2_b)?;
    let h = tape.matmul(input, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.add_row(h, b2)?;
    tape.relu(h)
}

/// Attention column mask for every (sample, head, row) triple, flattened to
/// `[B·H·|V|, |V|]`. Self-edges are always kept.
pub fn attention_mask(batch_avail: &[Vec<bool>], nodes: &ActionNodeSet, heads: usize, edges: EdgeMask) -> Vec<bool> {
    let v = nodes.len();
    let mut mask = Vec::with_capacity(batch_avail.len() * heads * v * v);
    for avail in batch_avail {
        for _ in 0..heads {
            for r in 0..v {
                for c in 0..v {
                    let keep = r == c || (avail[c] && edges.allows(nodes.node(r), nodes.node(c)));
                    mask.push(keep);
                }
            }
        }
    }
    mask
}

/// Tape handles to the per-layer attention weights, `[B·H·|V|, |V|]` each.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub layers: Vec<Var>,
}

/// L layers of masked multi-head scaled dot-product attention with residual
/// connections. `node_avail` holds one flag per node per sample.
pub fn message_pass(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GraphParams,
    x: Var,
    nodes: &ActionNodeSet,
    node_avail: &[Vec<bool>],
) -> Result<(Var, AttentionTrace)> {
    let cfg = &params.config;
    let v = nodes.len();
    let blocks = node_avail.len();
    let (rows, cols) = tape.value(x).dims2();
    if rows != blocks * v || cols != cfg.hidden {
        return Err(TensorError::ShapeMismatch {
            op: "message_pass",
            left: tape.value(x).shape().to_vec(),
            right: vec![blocks * v, cfg.hidden],
        });
    }
    let proj = tape.param(store, params.proj)?;
    let mut z = tape.matmul(x, proj)?;
    let mask = attention_mask(node_avail, nodes, cfg.heads, cfg.edge_mask);
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut trace = AttentionTrace::default();
    for layer in &params.layers {
        let wq = tape.param(store, layer.query)?;
        let wk = tape.param(store, layer.key)?;
        let wv = tape.param(store, layer.value)?;
        let wo = tape.param(store, layer.output)?;
        let q = tape.matmul(z, wq)?;
        let k = tape.matmul(z, wk)?;
        let val = tape.matmul(z, wv)?;
        let q = tape.split_heads(q, blocks, cfg.heads)?;
        let k = tape.split_heads(k, blocks, cfg.heads)?;
        let val = tape.split_heads(val, blocks, cfg.heads)?;
        let scores = tape.block_scores(q, k, v, scale)?;
        let alpha = tape.masked_softmax(scores, mask.clone())?;
        trace.layers.push(alpha);
        let mixed = tape.block_apply(alpha, val, v)?;
        let merged = tape.merge_heads(mixed, blocks, cfg.heads)?;
        let out = tape.matmul(merged, wo)?;
        z = tape.add(z, out)?;
    }
    Ok((z, trace))
}

/// `κ_i` = masked mean of agent `i`'s node rows: `[B·N, d]`.
pub fn pool_contexts(tape: &mut Tape, h: Var, nodes: &ActionNodeSet, node_avail: &[Vec<bool>]) -> Result<Var> {
    let v = nodes.len();
    let mut segments = Vec::with_capacity(node_avail.len() * nodes.num_agents());
    for b in 0..node_avail.len() {
        for i in 0..nodes.num_agents() {
            let r = nodes.agent_range(i);
            segments.push((b * v + r.start, r.len()));
        }
    }
    let mask = node_avail.concat();
    tape.masked_mean_segments(h, segments, mask)
}

/// Attention weights of one sample: `weights[layer][head]` is a row-major
/// `|V| × |V|` row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub num_nodes: usize,
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Columns that were admissible for each row (edge mask ∧ availability).
    pub admissible: Vec<bool>,
}

impl AttentionRecord {
    /// Split a batched trace into one record per sample.
    pub fn from_trace(tape: &Tape, trace: &AttentionTrace, heads: usize, nodes: &ActionNodeSet, node_avail: &[Vec<bool>], edges: EdgeMask) -> Vec<Self> {
        let v = nodes.len();
        let full_mask = attention_mask(node_avail, nodes, 1, edges);
        (0..node_avail.len())
            .map(|b| {
                let weights = trace
                    .layers
                    .iter()
                    .map(|&alpha| {
                        let data = tape.value(alpha).data();
                        (0..heads)
                            .map(|h| {
                                let start = (b * heads + h) * v * v;
                                data[start..start + v * v].to_vec()
                            })
                            .collect()
                    })
                    .collect();
                Self {
                    num_nodes: v,
                    weights,
                    admissible: full_mask[b * v * v..(b + 1) * v * v].to_vec(),
                }
            })
            .collect()
    }
}

/// Full graph pipeline for a batch: `(contexts [B·N, d], trace)`.
pub fn coordination_contexts(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GraphParams,
    batch: &[&Observation],
    nodes: &ActionNodeSet,
) -> Result<(Var, AttentionTrace)> {
    let node_avail: Vec<Vec<bool>> = batch.iter().map(|o| nodes.node_mask(&o.avail)).collect();
    let x = encode_nodes(tape, store, params, batch, nodes)?;
    let (h, trace) = message_pass(tape, store, params, x, nodes, &node_avail)?;
    let ctx = pool_contexts(tape, h, nodes, &node_avail)?;
    Ok((ctx, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvSpec, GameKind};

    #[test]
    fn node_set_examples() {
        let s = ActionNodeSet::from_counts(&[2, 2]);
        assert_eq!(s.nodes(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(ActionNodeSet::build(&EnvSpec::topk(6, 2)).len(), 12);
        assert_eq!(ActionNodeSet::from_counts(&[3]).len(), 3);
        let ragged = ActionNodeSet::from_counts(&[1, 3, 2]);
        assert_eq!(ragged.index(1, 2), Some(3));
        assert_eq!(ragged.index(2, 2), None);
        assert_eq!(ragged.agent_range(2), 4..6);
        for (idx, &(i, a)) in ragged.nodes().iter().enumerate() {
            assert_eq!(ragged.index(i, a), Some(idx));
        }
    }

    #[test]
    fn mask_keeps_self_edges() {
        let nodes = ActionNodeSet::from_counts(&[2, 2]);
        let avail = vec![vec![true, false, true, true]];
        let m = attention_mask(&avail, &nodes, 1, EdgeMask::SameAgent);
        // row 1 (unavailable node) still keeps itself
        assert_eq!(&m[4..8], &[true, true, false, false]);
        assert_eq!(&m[8..12], &[false, false, true, true]);
        assert_eq!(&m[0..4], &[true, false, false, false]);
    }

    #[test]
    fn input_rows_layout() {
        let spec = EnvSpec::new(GameKind::ExactlyOne, 3);
        let nodes = ActionNodeSet::build(&spec);
        let cfg = GraphConfig::for_spec(&spec, EdgeMask::Full);
        let obs = Observation {
            per_agent: vec![vec![0.0]; 3],
            avail: vec![vec![true; 2]; 3],
            ids: (0..3).map(|i| (0..3).map(|j| f64::from(u8::from(i == j))).collect()).collect(),
        };
        let t = node_inputs(&[&obs], &nodes, &cfg).unwrap();
        assert_eq!(t.shape(), &[6, 6]);
        assert_eq!(t.row(3), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }
}
