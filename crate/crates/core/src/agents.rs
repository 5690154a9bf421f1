//! Agent architectures: context-conditioned Q and policy heads on top of the
//! action graph, the independent (IQL) and additive (VDN) baselines, and the
//! two graph ablations.

use rand::Rng;
use thiserror::Error;

use crate::env::{EnvSpec, Observation};
use crate::graph::{coordination_contexts, ActionNodeSet, AttentionRecord, AttentionTrace, EdgeMask, GraphConfig, GraphParams};
use crate::tensor::{self, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("agent {0} has no available action")]
    NoAvailableAction(usize),
    #[error("operation needs {expected}, agent is {got}")]
    KindMismatch { expected: &'static str, got: &'static str },
    #[error("epsilon {0} outside [0, 1]")]
    BadEpsilon(f64),
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentKind {
    AgpQ,
    AgpPg,
    Iql,
    Vdn,
    AgpNoCross,
    AgpNoGraph,
}

impl AgentKind {
    pub const ALL: [AgentKind; 6] = [
        AgentKind::AgpQ,
        AgentKind::AgpPg,
        AgentKind::Iql,
        AgentKind::Vdn,
        AgentKind::AgpNoCross,
        AgentKind::AgpNoGraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::AgpQ => "agp_q",
            AgentKind::AgpPg => "agp_pg",
            AgentKind::Iql => "iql",
            AgentKind::Vdn => "vdn",
            AgentKind::AgpNoCross => "agp_no_cross",
            AgentKind::AgpNoGraph => "agp_no_graph",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Edge mask of the action graph, `None` for graph-free agents.
    pub fn edge_mask(self) -> Option<EdgeMask> {
        match self {
            AgentKind::AgpQ | AgentKind::AgpPg => Some(EdgeMask::Full),
            AgentKind::AgpNoCross => Some(EdgeMask::SameAgent),
            AgentKind::Iql | AgentKind::Vdn | AgentKind::AgpNoGraph => None,
        }
    }

    pub fn uses_graph(self) -> bool {
        self.edge_mask().is_some()
    }

    pub fn is_policy_gradient(self) -> bool {
        self == AgentKind::AgpPg
    }

    /// Whether the head input carries a context slot (zeroed for no-graph).
    fn has_context_slot(self) -> bool {
        !matches!(self, AgentKind::Iql | AgentKind::Vdn)
    }

    /// Additive joint value for the TD loss; IQL trains per-agent values.
    pub fn mixes_additively(self) -> bool {
        !matches!(self, AgentKind::Iql | AgentKind::AgpPg)
    }
}

/// Two-layer MLP `in → hidden → ReLU → out`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(prefix: &str, dims: (usize, usize, usize), store: &mut ParamStore, rng: &mut R) -> Self {
        let (din, h, dout) = dims;
        Self {
            w1: store.add(format!("{prefix}.w1"), Tensor::uniform_init(&[din, h], din, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::uniform_init(&[h], din, rng)),
            w2: store.add(format!("{prefix}.w2"), Tensor::uniform_init(&[h, dout], h, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::uniform_init(&[dout], h, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> tensor::Result<Var> {
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let h = tape.matmul(input, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, w2)?;
        tape.add_row(out, b2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            layers: 2,
        }
    }
}

/// Result of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per-agent action scores (Q-values or logits), `[B·N, |A|]`.
    pub scores: Var,
    /// Coordination contexts `[B·N, d]`, if the agent has a context slot.
    pub contexts: Option<Var>,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone)]
pub struct Agent {
    kind: AgentKind,
    spec: EnvSpec,
    config: AgentConfig,
    nodes: ActionNodeSet,
    store: ParamStore,
    graph: Option<GraphParams>,
    head: Mlp,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(kind: AgentKind, spec: &EnvSpec, config: AgentConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let nodes = ActionNodeSet::build(spec);
        let graph = match kind.edge_mask() {
            Some(mask) => {
                let gc = GraphConfig {
                    hidden: config.hidden,
                    heads: config.heads,
                    layers: config.layers,
                    ..GraphConfig::for_spec(spec, mask)
                };
                Some(GraphParams::init(gc, &mut store, rng)?)
            }
            None => None,
        };
        let ctx = if kind.has_context_slot() { config.hidden } else { 0 };
        let head_name = if kind.is_policy_gradient() { "policy" } else { "q" };
        let head = Mlp::init(head_name, (spec.obs_dim + ctx, config.hidden, spec.num_actions), &mut store, rng);
        Ok(Self {
            kind,
            spec: spec.clone(),
            config,
            nodes,
            store,
            graph,
            head,
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn nodes(&self) -> &ActionNodeSet {
        &self.nodes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn graph(&self) -> Option<&GraphParams> {
        self.graph.as_ref()
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    /// Batched forward pass recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &[&Observation]) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.store, batch)
    }

    /// Forward pass using the architecture of `self` with parameters from
    /// `store` (e.g. a target network's copy).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: &[&Observation]) -> Result<ForwardOutput> {
        let n = self.spec.num_agents;
        let obs_rows: Vec<f64> = batch.iter().flat_map(|o| o.per_agent.iter().flatten().copied()).collect();
        let obs = tape.constant(Tensor::matrix(batch.len() * n, self.spec.obs_dim, obs_rows)?)?;
        let (contexts, trace) = match (&self.graph, self.kind.has_context_slot()) {
            (Some(g), _) => {
                let (ctx, trace) = coordination_contexts(tape, store, g, batch, &self.nodes)?;
                (Some(ctx), trace)
            }
            (None, true) => {
                let zeros = tape.constant(Tensor::zeros(&[batch.len() * n, self.config.hidden]))?;
                (Some(zeros), AttentionTrace::default())
            }
            (None, false) => (None, AttentionTrace::default()),
        };
        let input = match contexts {
            Some(ctx) => tape.concat(&[obs, ctx])?,
            None => obs,
        };
        let scores = self.head.forward(tape, store, input)?;
        Ok(ForwardOutput { scores, contexts, trace })
    }

    /// Per-sample, per-agent score vectors without recording gradients.
    pub fn scores_batch(&self, batch: &[&Observation]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        let a = self.spec.num_actions;
        let n = self.spec.num_agents;
        let data = tape.value(out.scores).data();
        Ok((0..batch.len())
            .map(|b| (0..n).map(|i| data[(b * n + i) * a..(b * n + i + 1) * a].to_vec()).collect())
            .collect())
    }

    pub fn scores(&self, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        Ok(self.scores_batch(&[obs])?.remove(0))
    }

    /// Coordination contexts `κ_i` for one observation (zero vectors for the
    /// no-graph ablation; empty for IQL/VDN).
    pub fn contexts(&self, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &[obs])?;
        Ok(match out.contexts {
            Some(ctx) => {
                let t = tape.value(ctx);
                (0..self.spec.num_agents).map(|i| t.row(i).to_vec()).collect()
            }
            None => Vec::new(),
        })
    }

    /// Attention weights for each observation of the batch.
    pub fn attention(&self, batch: &[&Observation]) -> Result<Vec<AttentionRecord>> {
        let Some(g) = &self.graph else {
            return Err(AgentError::KindMismatch {
                expected: "an action-graph agent",
                got: self.kind.name(),
            });
        };
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        let node_avail: Vec<Vec<bool>> = batch.iter().map(|o| self.nodes.node_mask(&o.avail)).collect();
        Ok(AttentionRecord::from_trace(
            &tape,
            &out.trace,
            g.config.heads,
            &self.nodes,
            &node_avail,
            g.config.edge_mask,
        ))
    }

    /// Per-agent action distributions `π_i(· | o_i, κ_i)`.
    pub fn policy_distribution(&self, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        let scores = self.scores(obs)?;
        policy_from_logits(&scores, &obs.avail)
    }

    /// Q-values from externally supplied contexts, bypassing the graph.
    pub fn q_values_from_contexts(&self, obs: &Observation, contexts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.spec.num_agents;
        let mut rows = Vec::new();
        let mut width = 0;
        for i in 0..n {
            let mut row = obs.per_agent[i].clone();
            if self.kind.has_context_slot() {
                row.extend_from_slice(&contexts[i]);
            }
            width = row.len();
            rows.extend(row);
        }
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::matrix(n, width, rows)?)?;
        let out = self.head.forward(&mut tape, &self.store, input)?;
        let t = tape.value(out);
        Ok((0..n).map(|i| t.row(i).to_vec()).collect())
    }
}

/// Anything that maps a batch of observations to per-agent action scores.
pub trait Scorer {
    /// `[sample][agent][action]` scores.
    fn score_batch(&self, batch: &[&Observation]) -> Result<Vec<Vec<Vec<f64>>>>;

    /// Whether training-time actions are sampled from the softmax of the
    /// scores instead of ε-greedy.
    fn samples_policy(&self) -> bool {
        false
    }
}

impl Scorer for Agent {
    fn score_batch(&self, batch: &[&Observation]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.scores_batch(batch)
    }

    fn samples_policy(&self) -> bool {
        self.kind.is_policy_gradient()
    }
}

/// Masked softmax per agent.
pub fn policy_from_logits(logits: &[Vec<f64>], avail: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
    logits
        .iter()
        .zip(avail)
        .enumerate()
        .map(|(i, (l, m))| {
            tensor::masked_softmax(l, m).map_err(|e| match e {
                TensorError::AllMasked { .. } => AgentError::NoAvailableAction(i),
                other => other.into(),
            })
        })
        .collect()
}

/// Joint log-probability of a joint action: `Σ_i log π_i(a_i)`.
pub fn joint_log_prob(dists: &[Vec<f64>], joint_action: &[usize]) -> f64 {
    dists.iter().zip(joint_action).map(|(p, &a)| p[a].ln()).sum()
}

/// Highest-scoring available action; ties go to the lowest index.
pub fn masked_argmax(scores: &[f64], avail: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (a, (&s, &ok)) in scores.iter().zip(avail).enumerate() {
        if ok && best.is_none_or(|b| s > scores[b]) {
            best = Some(a);
        }
    }
    best
}

/// Independent ε-greedy choice per agent over available actions.
pub fn select_actions<R: Rng + ?Sized>(scores: &[Vec<f64>], avail: &[Vec<bool>], epsilon: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(AgentError::BadEpsilon(epsilon));
    }
    scores
        .iter()
        .zip(avail)
        .enumerate()
        .map(|(i, (s, m))| {
            let greedy = masked_argmax(s, m).ok_or(AgentError::NoAvailableAction(i))?;
            if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                let choices: Vec<usize> = (0..m.len()).filter(|&a| m[a]).collect();
                Ok(choices[rng.gen_range(0..choices.len())])
            } else {
                Ok(greedy)
            }
        })
        .collect()
}

/// Sample one action per agent from its distribution.
pub fn sample_actions<R: Rng + ?Sized>(dists: &[Vec<f64>], rng: &mut R) -> Vec<usize> {
    dists
        .iter()
        .map(|p| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (a, &pa) in p.iter().enumerate() {
                if pa > 0.0 {
                    last = a;
                    acc += pa;
                    if u < acc {
                        return a;
                    }
                }
            }
            last
        })
        .collect()
}

/// Joint value of the chosen per-agent values: the sum for additive mixers,
/// `None` for independent learners, which train per-agent targets.
pub fn mix_joint_q(values: &[f64], kind: AgentKind) -> Option<f64> {
    kind.mixes_additively().then(|| values.iter().sum())
}
