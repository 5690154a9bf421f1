//! Versioned text dump of an agent's named parameter tensors.
//!
//! ```text
//! agp-checkpoint 1
//! kind agp_q
//! env topk 6
//! agent 64 4 2
//! param graph.enc1.w 3 64
//! <values, space separated>
//! ...
//! ```

use agp_core::agents::{Agent, AgentConfig, AgentKind};
use agp_core::env::EnvSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAGIC: &str = "agp-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is for {saved}, config asks for {wanted}")]
    Mismatch { saved: String, wanted: String },
    #[error("cannot rebuild agent: {0}")]
    Agent(#[from] agp_core::agents::AgentError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn save(agent: &Agent) -> String {
    let store = agent.store();
    let spec = agent.spec();
    let c = agent.config();
    let mut out = format!(
        "{MAGIC} {VERSION}\nkind {}\nenv {} {}\nagent {} {} {}\n",
        agent.kind().name(),
        spec.game.name(),
        spec.num_agents,
        c.hidden,
        c.heads,
        c.layers
    );
    for id in store.ids() {
        let t = store.value(id);
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.push_str(&format!("param {} {}\n", store.name(id), shape.join(" ")));
        let values: Vec<String> = t.data().iter().map(|&x| crate::report::fmt_f64(x)).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(CheckpointError::Format {
                line: self.last + 1,
                msg: format!("unexpected end of file, expected {what}"),
            }),
        }
    }

    fn fields(&mut self, tag: &str, count: usize) -> Result<Vec<&'a str>> {
        let line = self.next(tag)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.first() != Some(&tag) || parts.len() < count + 1 {
            return Err(self.error(format!("expected `{tag}` with {count} fields")));
        }
        Ok(parts[1..].to_vec())
    }

    fn error(&self, msg: String) -> CheckpointError {
        CheckpointError::Format { line: self.last, msg }
    }

    fn number<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.error(format!("bad number `{s}`")))
    }
}

/// Rebuild an agent for `spec` from a checkpoint.
pub fn load(text: &str, spec: &EnvSpec) -> Result<Agent> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let head = lines.fields(MAGIC, 1)?;
    let version: u32 = lines.number(head[0])?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let kind_name = lines.fields("kind", 1)?[0];
    let kind = AgentKind::parse(kind_name).ok_or_else(|| lines.error(format!("unknown agent kind `{kind_name}`")))?;
    let env = lines.fields("env", 2)?;
    let saved = format!("{} N={}", env[0], env[1]);
    let wanted = format!("{} N={}", spec.game.name(), spec.num_agents);
    if saved != wanted {
        return Err(CheckpointError::Mismatch { saved, wanted });
    }
    let a = lines.fields("agent", 3)?;
    let config = AgentConfig {
        hidden: lines.number(a[0])?,
        heads: lines.number(a[1])?,
        layers: lines.number(a[2])?,
    };
    let mut agent = Agent::new(kind, spec, config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let ids: Vec<_> = agent.store().ids().collect();
    for id in ids {
        let p = lines.fields("param", 1)?;
        let name = agent.store().name(id).to_string();
        if p[0] != name {
            return Err(lines.error(format!("expected parameter `{name}`, found `{}`", p[0])));
        }
        let shape = p[1..].iter().map(|s| lines.number(s)).collect::<Result<Vec<usize>>>()?;
        if shape != agent.store().value(id).shape() {
            return Err(lines.error(format!("shape {shape:?} for `{name}`, expected {:?}", agent.store().value(id).shape())));
        }
        let line = lines.next("values")?;
        let values = line.split_whitespace().map(|s| lines.number(s)).collect::<Result<Vec<f64>>>()?;
        let dst = agent.store_mut().value_mut(id).data_mut();
        if values.len() != dst.len() {
            return Err(lines.error(format!("{} values for `{name}`, expected {}", values.len(), dst.len())));
        }
        dst.copy_from_slice(&values);
    }
    if let Ok(extra) = lines.next("") {
        if !extra.trim().is_empty() {
            return Err(lines.error("trailing content".into()));
        }
    }
    Ok(agent)
}
