use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Strategy;
use crate::error::{RelayError, Result};

pub const WORKFLOW_SCHEMA_VERSION: u32 = 1;

/// One slot of an agent prompt template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSlot {
    /// Literal token ids.
    Tokens(Vec<u32>),
    /// `n` pseudo-random tokens drawn from the workflow seed.
    Random(usize),
    /// Verbatim output of an earlier agent.
    Upstream(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    #[serde(default)]
    pub name: String,
    pub template: Vec<TemplateSlot>,
    pub max_new_tokens: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
}

fn default_strategy() -> Strategy {
    Strategy::Relay
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    pub schema_version: u32,
    pub seed: u64,
    pub agents: Vec<AgentSpec>,
}

/// Template with random slots drawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolvedSlot {
    Tokens(Vec<u32>),
    Upstream(usize),
}

impl WorkflowSpec {
    /// Cumulative chain: agent `i` sees `prefix_len` random tokens, then the
    /// outputs of agents `0..i` in order, then `suffix_len` random tokens.
    pub fn chain(
        agents: usize,
        prefix_len: usize,
        suffix_len: usize,
        output_len: usize,
        strategy: Strategy,
        seed: u64,
    ) -> Self {
        Self::chain_with_outputs(agents, prefix_len, suffix_len, &vec![output_len; agents], strategy, seed)
    }

    /// As [`chain`](Self::chain) with a per-agent output length.
    pub fn chain_with_outputs(
        agents: usize,
        prefix_len: usize,
        suffix_len: usize,
        outputs: &[usize],
        strategy: Strategy,
        seed: u64,
    ) -> Self {
        let agents = (0..agents)
            .map(|i| {
                let mut template = vec![TemplateSlot::Random(prefix_len.max(1))];
                template.extend((0..i).map(TemplateSlot::Upstream));
                if suffix_len > 0 {
                    template.push(TemplateSlot::Random(suffix_len));
                }
                AgentSpec {
                    name: format!("agent{i}"),
                    template,
                    max_new_tokens: outputs[i],
                    strategy,
                }
            })
            .collect();
        Self {
            schema_version: WORKFLOW_SCHEMA_VERSION,
            seed,
            agents,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: WorkflowSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RelayError::InvalidWorkflow(m));
        if self.schema_version != WORKFLOW_SCHEMA_VERSION {
            return Err(RelayError::VersionMismatch {
                found: self.schema_version,
                expected: WORKFLOW_SCHEMA_VERSION,
            });
        }
        if self.agents.len() < 2 {
            return bad(format!("a workflow needs at least 2 agents, got {}", self.agents.len()));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.max_new_tokens == 0 {
                return bad(format!("agent {i}: max_new_tokens must be at least 1"));
            }
            a.strategy.validate()?;
            let mut last: Option<usize> = None;
            let mut any_tokens = false;
            for slot in &a.template {
                match *slot {
                    TemplateSlot::Upstream(k) => {
                        if k >= i {
                            return bad(format!("agent {i}: upstream {k} is not an earlier agent"));
                        }
                        if last.is_some_and(|p| k <= p) {
                            return bad(format!("agent {i}: upstream slots must be strictly increasing"));
                        }
                        last = Some(k);
                        any_tokens = true;
                    }
                    TemplateSlot::Tokens(ref t) => any_tokens |= !t.is_empty(),
                    TemplateSlot::Random(n) => any_tokens |= n > 0,
                }
            }
            if !any_tokens {
                return bad(format!("agent {i}: empty prompt template"));
            }
        }
        Ok(())
    }

    /// Draws every random slot from one stream seeded by `seed`, in agent
    /// then slot order.
    pub fn resolve(&self, vocab_size: usize) -> Result<Vec<Vec<ResolvedSlot>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let vocab = vocab_size as u32;
        let mut out = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.iter().enumerate() {
            let mut slots: Vec<ResolvedSlot> = Vec::new();
            for slot in &a.template {
                let tokens = match slot {
                    TemplateSlot::Upstream(k) => {
                        slots.push(ResolvedSlot::Upstream(*k));
                        continue;
                    }
                    TemplateSlot::Tokens(t) => {
                        if let Some(&bad) = t.iter().find(|&&t| t >= vocab) {
                            return Err(RelayError::InvalidWorkflow(format!(
                                "agent {i}: token {bad} outside vocabulary of {vocab}"
                            )));
                        }
                        t.clone()
                    }
                    TemplateSlot::Random(n) => (0..*n).map(|_| rng.random_range(0..vocab)).collect(),
                };
                match slots.last_mut() {
                    Some(ResolvedSlot::Tokens(prev)) => prev.extend(tokens),
                    _ if !tokens.is_empty() => slots.push(ResolvedSlot::Tokens(tokens)),
                    _ => {}
                }
            }
            out.push(slots);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_layout() {
        let w = WorkflowSpec::chain(4, 5, 3, 8, Strategy::Relay, 1);
        w.validate().unwrap();
        let r = w.resolve(64).unwrap();
        assert_eq!(r[0].len(), 1, "prefix and suffix merge when no upstream sits between");
        assert_eq!(r[3].len(), 5);
        assert_eq!(r[3][1], ResolvedSlot::Upstream(0));
        assert_eq!(r[3][3], ResolvedSlot::Upstream(2));
        assert_eq!(w.resolve(64).unwrap(), r);
    }

    #[test]
    fn validation_rules() {
        let mut w = WorkflowSpec::chain(3, 2, 0, 4, Strategy::Full, 0);
        w.agents[2].template = vec![TemplateSlot::Upstream(1), TemplateSlot::Upstream(0)];
        assert!(matches!(w.validate(), Err(RelayError::InvalidWorkflow(_))));
        w.agents[2].template = vec![TemplateSlot::Upstream(2)];
        assert!(w.validate().is_err());
        let mut w = WorkflowSpec::chain(2, 2, 0, 4, Strategy::Full, 0);
        w.agents.pop();
        assert!(w.validate().is_err());
        let mut w = WorkflowSpec::chain(2, 2, 0, 4, Strategy::Full, 0);
        w.schema_version = 9;
        assert!(matches!(w.validate(), Err(RelayError::VersionMismatch { .. })));
        let mut w = WorkflowSpec::chain(2, 2, 0, 4, Strategy::Full, 0);
        w.agents[0].template = vec![TemplateSlot::Tokens(vec![99])];
        assert!(w.resolve(64).is_err());
    }

    #[test]
    fn json_shape() {
        let text = r#"{
            "schema_version": 1,
            "seed": 3,
            "agents": [
                {"name": "a", "template": [{"tokens": [1, 2]}, {"random": 3}], "max_new_tokens": 4},
                {"name": "b", "template": [{"random": 2}, {"upstream": 0}], "max_new_tokens": 2,
                 "strategy": {"blend": {"alpha": 0.5}}}
            ]
        }"#;
        let w = WorkflowSpec::from_json(text).unwrap();
        assert_eq!(w.agents[0].strategy, Strategy::Relay);
        assert_eq!(w.agents[1].strategy, Strategy::Blend { alpha: 0.5 });
        let back = WorkflowSpec::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(back, w);
    }
}
