//! One-step cooperative coordination games behind a common reset/step
//! interface.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("expected a joint action of {expected} agents, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("agent {agent} chose action {action}, which is not available")]
    InvalidAction { agent: usize, action: usize },
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("step called before reset")]
    NotReset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GameKind {
    TopK,
    AntiCoordination,
    ExactlyOne,
    LatentMatching,
    MismatchTable,
    Parity,
}

impl GameKind {
    pub const ALL: [GameKind; 6] = [
        GameKind::TopK,
        GameKind::AntiCoordination,
        GameKind::ExactlyOne,
        GameKind::LatentMatching,
        GameKind::MismatchTable,
        GameKind::Parity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GameKind::TopK => "topk",
            GameKind::AntiCoordination => "anticoord",
            GameKind::ExactlyOne => "exactly_one",
            GameKind::LatentMatching => "latent_matching",
            GameKind::MismatchTable => "mismatch_table",
            GameKind::Parity => "parity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }

    /// Games whose observations carry a private signal per agent.
    pub fn has_signals(self) -> bool {
        matches!(self, GameKind::TopK | GameKind::AntiCoordination)
    }
}

/// How the anti-coordination penalty counts violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyMode {
    /// `λ` per unordered violating pair.
    PerPair,
    /// `λ` once if any pair violates.
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub game: GameKind,
    pub num_agents: usize,
    pub num_actions: usize,
    /// Length of each agent's observation vector.
    pub obs_dim: usize,
    pub k: usize,
    pub penalty_eps: f64,
    pub penalty_lambda: f64,
    pub penalty_mode: PenaltyMode,
    /// Expose a one-hot agent index as identity features.
    pub agent_ids: bool,
}

impl EnvSpec {
    pub fn new(game: GameKind, num_agents: usize) -> Self {
        let (n, agent_ids) = match game {
            GameKind::LatentMatching | GameKind::MismatchTable => (2, true),
            GameKind::ExactlyOne => (num_agents, true),
            _ => (num_agents, false),
        };
        Self {
            game,
            num_agents: n,
            num_actions: 2,
            obs_dim: 1,
            k: 2,
            penalty_eps: 0.1,
            penalty_lambda: 0.5,
            penalty_mode: PenaltyMode::PerPair,
            agent_ids,
        }
    }

    pub fn topk(n: usize, k: usize) -> Self {
        Self {
            k,
            ..Self::new(GameKind::TopK, n)
        }
    }

    pub fn anticoord(n: usize, k: usize, eps: f64, lambda: f64) -> Self {
        Self {
            k,
            penalty_eps: eps,
            penalty_lambda: lambda,
            ..Self::new(GameKind::AntiCoordination, n)
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidSpec(m));
        if self.num_agents == 0 {
            return bad("N must be positive".into());
        }
        if self.num_actions != 2 {
            return bad(format!("built-in games use binary actions, got {}", self.num_actions));
        }
        if self.game.has_signals() && self.obs_dim != 1 {
            return bad("signal games use obs_dim = 1".into());
        }
        if self.game.has_signals() && !(1..=self.num_agents).contains(&self.k) {
            return bad(format!("K ≤ N violated: K = {}, N = {}", self.k, self.num_agents));
        }
        if self.game == GameKind::AntiCoordination {
            if !(self.penalty_eps > 0.0) {
                return bad("anti-coordination needs epsilon_penalty > 0".into());
            }
            if !(self.penalty_lambda >= 0.0) {
                return bad("anti-coordination needs lambda ≥ 0".into());
            }
        }
        if matches!(self.game, GameKind::LatentMatching | GameKind::MismatchTable) && self.num_agents != 2 {
            return bad(format!("{} is a two-agent game", self.game.name()));
        }
        Ok(())
    }

    /// Width of the identity feature block (0 when identities are off).
    pub fn id_dim(&self) -> usize {
        if self.agent_ids {
            self.num_agents
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// One row of length `obs_dim` per agent.
    pub per_agent: Vec<Vec<f64>>,
    /// One availability row of length `|A_i|` per agent.
    pub avail: Vec<Vec<bool>>,
    /// One-hot agent index rows, empty when identities are off.
    pub ids: Vec<Vec<f64>>,
}

impl Observation {
    pub fn num_agents(&self) -> usize {
        self.per_agent.len()
    }

    /// Signals `u_i` of a Top-K style observation.
    pub fn signals(&self) -> Vec<f64> {
        self.per_agent.iter().map(|o| o[0]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Number of violating pairs (anti-coordination only).
    pub violations: usize,
}

impl StepResult {
    fn terminal(reward: f64, success: bool) -> Self {
        Self {
            reward,
            done: true,
            success,
            violations: 0,
        }
    }
}

/// Hidden state sampled at reset.
#[derive(Debug, Clone, PartialEq)]
enum Hidden {
    None,
    Signals(Vec<f64>),
    Latent(usize),
}

#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    hidden: Option<Hidden>,
}

fn check_arity(n: usize, a: &[usize]) -> Result<(), EnvError> {
    if a.len() != n {
        return Err(EnvError::Arity {
            expected: n,
            got: a.len(),
        });
    }
    Ok(())
}

fn check_binary(a: &[usize]) -> Result<(), EnvError> {
    match a.iter().position(|&x| x > 1) {
        Some(agent) => Err(EnvError::InvalidAction { agent, action: a[agent] }),
        None => Ok(()),
    }
}

/// Indices of the `k` largest signals; ties go to the lower index.
pub fn top_k_set(u: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = idx.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

pub fn step_topk(u: &[f64], joint_action: &[usize], k: usize) -> Result<StepResult, EnvError> {
    check_arity(u.len(), joint_action)?;
    check_binary(joint_action)?;
    let target = top_k_set(u, k);
    let selected: Vec<usize> = (0..u.len()).filter(|&i| joint_action[i] == 1).collect();
    let success = selected == target;
    Ok(StepResult::terminal(if success { 1.0 } else { -1.0 }, success))
}

pub fn step_anticoord(
    u: &[f64],
    joint_action: &[usize],
    k: usize,
    eps: f64,
    lambda: f64,
    mode: PenaltyMode,
) -> Result<StepResult, EnvError> {
    let mut result = step_topk(u, joint_action, k)?;
    let mut pairs = 0;
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            if joint_action[i] == 1 && joint_action[j] == 1 && (u[i] - u[j]).abs() < eps {
                pairs += 1;
            }
        }
    }
    let charged = match mode {
        PenaltyMode::PerPair => pairs,
        PenaltyMode::Flat => pairs.min(1),
    };
    result.reward -= lambda * charged as f64;
    result.violations = pairs;
    Ok(result)
}

pub fn step_exactly_one(joint_action: &[usize]) -> Result<StepResult, EnvError> {
    check_binary(joint_action)?;
    let success = joint_action.iter().sum::<usize>() == 1;
    Ok(StepResult::terminal(if success { 1.0 } else { 0.0 }, success))
}

pub fn step_latent_matching(joint_action: &[usize], hidden_s: usize) -> Result<StepResult, EnvError> {
    check_arity(2, joint_action)?;
    check_binary(joint_action)?;
    let success = joint_action[0] == hidden_s && joint_action[1] == hidden_s;
    Ok(StepResult::terminal(if success { 1.0 } else { 0.0 }, success))
}

pub fn step_mismatch_table(joint_action: &[usize]) -> Result<StepResult, EnvError> {
    check_arity(2, joint_action)?;
    check_binary(joint_action)?;
    let reward = match (joint_action[0], joint_action[1]) {
        (0, 0) => 3.0,
        (1, 1) => 2.0,
        _ => -1.0,
    };
    Ok(StepResult::terminal(reward, joint_action[0] == 0 && joint_action[1] == 0))
}

pub fn step_parity(joint_action: &[usize]) -> Result<StepResult, EnvError> {
    check_binary(joint_action)?;
    let success = joint_action.iter().sum::<usize>() % 2 == 0;
    Ok(StepResult::terminal(if success { 1.0 } else { 0.0 }, success))
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        Ok(Self { spec, hidden: None })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn build_obs(&self, per_agent: Vec<Vec<f64>>) -> Observation {
        let n = self.spec.num_agents;
        let ids = if self.spec.agent_ids {
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect()
        } else {
            Vec::new()
        };
        Observation {
            per_agent,
            avail: vec![vec![true; self.spec.num_actions]; n],
            ids,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Observation {
        let n = self.spec.num_agents;
        let null = || vec![vec![0.0; self.spec.obs_dim]; n];
        let (hidden, per_agent) = match self.spec.game {
            GameKind::TopK | GameKind::AntiCoordination => {
                let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                let rows = u.iter().map(|&x| vec![x]).collect();
                (Hidden::Signals(u), rows)
            }
            GameKind::LatentMatching => (Hidden::Latent(rng.gen_range(0..2)), null()),
            GameKind::ExactlyOne | GameKind::MismatchTable | GameKind::Parity => (Hidden::None, null()),
        };
        self.hidden = Some(hidden);
        self.build_obs(per_agent)
    }

    /// Latent state of the latent-matching game, if sampled.
    pub fn hidden_latent(&self) -> Option<usize> {
        match self.hidden {
            Some(Hidden::Latent(s)) => Some(s),
            _ => None,
        }
    }

    /// Force the latent state (used by exhaustive oracles).
    pub fn set_latent(&mut self, s: usize) {
        self.hidden = Some(Hidden::Latent(s));
    }

    pub fn step(&self, joint_action: &[usize]) -> Result<StepResult, EnvError> {
        let spec = &self.spec;
        check_arity(spec.num_agents, joint_action)?;
        let hidden = self.hidden.as_ref().ok_or(EnvError::NotReset)?;
        match (spec.game, hidden) {
            (GameKind::TopK, Hidden::Signals(u)) => step_topk(u, joint_action, spec.k),
            (GameKind::AntiCoordination, Hidden::Signals(u)) => step_anticoord(
                u,
                joint_action,
                spec.k,
                spec.penalty_eps,
                spec.penalty_lambda,
                spec.penalty_mode,
            ),
            (GameKind::ExactlyOne, _) => step_exactly_one(joint_action),
            (GameKind::LatentMatching, Hidden::Latent(s)) => step_latent_matching(joint_action, *s),
            (GameKind::MismatchTable, _) => step_mismatch_table(joint_action),
            (GameKind::Parity, _) => step_parity(joint_action),
            _ => Err(EnvError::NotReset),
        }
    }
}

/// Decode joint action number `code` (agent 0 is the most significant bit)
/// for `n` binary agents.
pub fn binary_joint_action(code: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| (code >> (n - 1 - i)) & 1).collect()
}
