//! Experiment configuration files.
//!
//! One `key: value` pair per line. `#` starts a comment. Optional section
//! headers (`[env]`, `[agent]`, `[train]`, `[eval]`, `[run]`) group keys;
//! a key may also appear before any header. See the README for the key list.

use agp_core::agents::{AgentConfig, AgentKind};
use agp_core::env::{EnvSpec, GameKind, PenaltyMode};
use agp_core::training::TrainConfig;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

const SECTIONS: [(&str, &[&str]); 5] = [
    ("env", &["game", "N", "K", "penalty_eps", "penalty_lambda", "penalty_mode", "agent_ids"]),
    ("agent", &["hidden", "heads", "layers"]),
    (
        "train",
        &[
            "lr",
            "gamma",
            "batch_size",
            "buffer_capacity",
            "target_update_interval",
            "episodes",
            "eps_start",
            "eps_end",
            "eps_anneal_fraction",
            "update_every",
            "rollout_episodes",
            "ppo_epochs",
            "ppo_clip",
            "baseline_decay",
            "entropy_coef",
            "target_kl",
        ],
    ),
    ("eval", &["eval_interval", "eval_episodes"]),
    ("run", &["methods", "seeds", "output_dir", "heatmaps", "heatmap_batch", "threads"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Shared training settings; `kind` and `seed` are overridden per run.
    pub train: TrainConfig,
    pub methods: Vec<AgentKind>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub heatmaps: bool,
    /// Evaluation resets averaged per heatmap.
    pub heatmap_batch: usize,
    /// Worker threads for independent (method, seed) runs.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::new(EnvSpec::topk(6, 2), AgentKind::AgpQ),
            methods: vec![AgentKind::AgpQ, AgentKind::Iql, AgentKind::Vdn],
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("out"),
            heatmaps: false,
            heatmap_batch: 1000,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    /// Training config for one cell of the suite.
    pub fn run_config(&self, kind: AgentKind, seed: u64) -> TrainConfig {
        TrainConfig {
            kind,
            seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(ConfigError::Invalid("method list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seed list is empty".into()));
        }
        if self.heatmap_batch == 0 {
            return Err(ConfigError::Invalid("heatmap_batch must be positive".into()));
        }
        if self.threads == 0 {
            return Err(ConfigError::Invalid("threads must be positive".into()));
        }
        for &kind in &self.methods {
            self.run_config(kind, 0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_str(&text)
}

struct Entry {
    line: usize,
    value: String,
}

pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("unterminated section header `{content}`"),
            })?;
            let name = name.trim();
            if !SECTIONS.iter().any(|(s, _)| *s == name) {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("unknown section [{name}]"),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content.split_once(':').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected `key: value`, got `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let home = section_of(key).ok_or_else(|| ConfigError::UnknownKey {
            line,
            key: key.to_string(),
        })?;
        if let Some(s) = &section {
            if s != home {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("key `{key}` belongs in [{home}], not [{s}]"),
                });
            }
        }
        if let Some(prev) = entries.get(key) {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("duplicate key `{key}` (first set on line {})", prev.line),
            });
        }
        entries.insert(
            key.to_string(),
            Entry {
                line,
                value: value.to_string(),
            },
        );
    }
    build(&entries)
}

fn value<T: std::str::FromStr>(entries: &BTreeMap<String, Entry>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    entries
        .get(key)
        .map(|e| {
            e.value.parse::<T>().map_err(|err| ConfigError::Value {
                line: e.line,
                key: key.to_string(),
                msg: format!("`{}`: {err}", e.value),
            })
        })
        .transpose()
}

fn list<T>(entries: &BTreeMap<String, Entry>, key: &str, item: impl Fn(&str) -> Option<T>) -> Result<Option<Vec<T>>> {
    let Some(e) = entries.get(key) else { return Ok(None) };
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            item(s).ok_or_else(|| ConfigError::Value {
                line: e.line,
                key: key.to_string(),
                msg: format!("unrecognized item `{s}`"),
            })
        })
        .collect::<Result<Vec<T>>>()
        .map(Some)
}

fn keyword<T>(entries: &BTreeMap<String, Entry>, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
    let Some(e) = entries.get(key) else { return Ok(None) };
    parse(&e.value).map(Some).ok_or_else(|| ConfigError::Value {
        line: e.line,
        key: key.to_string(),
        msg: format!("unrecognized value `{}`", e.value),
    })
}

fn build(entries: &BTreeMap<String, Entry>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let game = keyword(entries, "game", GameKind::parse)?.unwrap_or(GameKind::TopK);
    let n = value(entries, "N")?.unwrap_or(6);
    let mut env = EnvSpec::new(game, n);
    if let Some(k) = value(entries, "K")? {
        env.k = k;
    }
    if let Some(v) = value(entries, "penalty_eps")? {
        env.penalty_eps = v;
    }
    if let Some(v) = value(entries, "penalty_lambda")? {
        env.penalty_lambda = v;
    }
    if let Some(v) = keyword(entries, "penalty_mode", |s| match s {
        "per_pair" => Some(PenaltyMode::PerPair),
        "flat" => Some(PenaltyMode::Flat),
        _ => None,
    })? {
        env.penalty_mode = v;
    }
    if let Some(v) = value(entries, "agent_ids")? {
        env.agent_ids = v;
    }
    env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let mut t = TrainConfig::new(env, AgentKind::AgpQ);
    let d = AgentConfig::default();
    t.agent = AgentConfig {
        hidden: value(entries, "hidden")?.unwrap_or(d.hidden),
        heads: value(entries, "heads")?.unwrap_or(d.heads),
        layers: value(entries, "layers")?.unwrap_or(d.layers),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = value(entries, stringify!($field))? {
                t.$field = v;
            }
        )*};
    }
    set!(
        lr,
        gamma,
        batch_size,
        buffer_capacity,
        target_update_interval,
        episodes,
        eps_start,
        eps_end,
        eps_anneal_fraction,
        update_every,
        rollout_episodes,
        ppo_epochs,
        ppo_clip,
        baseline_decay,
        entropy_coef,
        target_kl,
        eval_interval,
        eval_episodes
    );
    cfg.train = t;
    if let Some(m) = list(entries, "methods", AgentKind::parse)? {
        cfg.methods = m;
    }
    if let Some(s) = list(entries, "seeds", |s| s.parse().ok())? {
        cfg.seeds = s;
    }
    if let Some(e) = entries.get("output_dir") {
        cfg.output_dir = PathBuf::from(&e.value);
    }
    if let Some(v) = value(entries, "heatmaps")? {
        cfg.heatmaps = v;
    }
    if let Some(v) = value(entries, "heatmap_batch")? {
        cfg.heatmap_batch = v;
    }
    if let Some(v) = value(entries, "threads")? {
        cfg.threads = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
