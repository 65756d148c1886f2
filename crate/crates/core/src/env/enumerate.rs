//! Exhaustive enumeration of the terminal set: exact partition function, target
//! distribution and per-prefix flows.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::sequence::{Condition, Token, TokenSequence};
use super::task::SyntheticTask;
use crate::error::{Error, Result};
use crate::scalar::log_sum_exp;

pub const DEFAULT_ENUMERATION_LIMIT: u128 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalEntry {
    pub sequence: TokenSequence,
    pub log_r: f64,
    pub p_star: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixFlow {
    pub prefix: Vec<Token>,
    pub log_flow: f64,
}

/// Exact target for one condition. Terminals are listed in depth-first order
/// (tokens ascending, eos last).
#[derive(Clone, Debug)]
pub struct EnumerationResult {
    pub condition_id: usize,
    pub log_z: f64,
    pub entries: Vec<TerminalEntry>,
    prefix_flows: HashMap<Vec<Token>, f64>,
    terminal_index: HashMap<Vec<Token>, usize>,
}

/// Serialized form of [`EnumerationResult`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnumerationExport {
    pub task: String,
    pub condition_id: usize,
    pub log_z: f64,
    pub terminals: Vec<TerminalEntry>,
    pub prefix_flows: Vec<PrefixFlow>,
}

impl EnumerationResult {
    /// `log F(prefix)`: log of the total reward of terminals extending a non-terminal prefix.
    pub fn log_flow(&self, prefix: &[Token]) -> Option<f64> {
        self.prefix_flows.get(prefix).copied()
    }

    /// Number of non-terminal prefixes.
    pub fn prefix_count(&self) -> usize {
        self.prefix_flows.len()
    }

    pub fn prefixes(&self) -> impl Iterator<Item = (&Vec<Token>, f64)> {
        self.prefix_flows.iter().map(|(k, v)| (k, *v))
    }

    pub fn entry(&self, sequence: &[Token]) -> Option<&TerminalEntry> {
        self.terminal_index.get(sequence).map(|&i| &self.entries[i])
    }

    pub fn p_star(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.p_star).collect()
    }

    /// Optimal next-token log-probabilities at a non-terminal prefix: `log F(child) - log F(prefix)`,
    /// with `log F(terminal) = log R`. Disallowed tokens get `-inf`.
    pub fn optimal_log_policy(&self, task: &SyntheticTask, prefix: &[Token]) -> Option<Vec<f64>> {
        let parent = self.log_flow(prefix)?;
        let vocab = task.vocab();
        let mut child = prefix.to_vec();
        let out = (0..vocab.alphabet() as Token)
            .map(|t| {
                if t == vocab.eos() && !vocab.eos_allowed(prefix.len()) {
                    return f64::NEG_INFINITY;
                }
                child.push(t);
                let flow = if vocab.is_terminal(&child) {
                    self.entry(&child).map(|e| e.log_r)
                } else {
                    self.log_flow(&child)
                };
                child.pop();
                flow.map_or(f64::NEG_INFINITY, |f| f - parent)
            })
            .collect();
        Some(out)
    }

    pub fn export(&self, task: &SyntheticTask) -> EnumerationExport {
        let mut prefix_flows: Vec<PrefixFlow> =
            self.prefix_flows.iter().map(|(p, &f)| PrefixFlow { prefix: p.clone(), log_flow: f }).collect();
        prefix_flows.sort_by(|a, b| a.prefix.len().cmp(&b.prefix.len()).then_with(|| a.prefix.cmp(&b.prefix)));
        EnumerationExport {
            task: task.name().to_string(),
            condition_id: self.condition_id,
            log_z: self.log_z,
            terminals: self.entries.clone(),
            prefix_flows,
        }
    }
}

pub fn enumerate(task: &SyntheticTask, x: &Condition) -> Result<EnumerationResult> {
    enumerate_with_limit(task, x, DEFAULT_ENUMERATION_LIMIT)
}

/// Refuses when the terminal set is larger than `limit`.
pub fn enumerate_with_limit(task: &SyntheticTask, x: &Condition, limit: u128) -> Result<EnumerationResult> {
    check_budget(task, limit)?;
    let mut walk = Walk { task, x, entries: Vec::new(), prefix_flows: HashMap::new() };
    let mut prefix = Vec::with_capacity(task.vocab().max_len() + 1);
    let log_z = walk.visit(&mut prefix, 0.0);
    let Walk { mut entries, prefix_flows, .. } = walk;
    for e in &mut entries {
        e.p_star = (e.log_r - log_z).exp();
    }
    let terminal_index = entries.iter().enumerate().map(|(i, e)| (e.sequence.tokens().to_vec(), i)).collect();
    Ok(EnumerationResult { condition_id: x.id, log_z, entries, prefix_flows, terminal_index })
}

pub(crate) fn check_budget(task: &SyntheticTask, limit: u128) -> Result<()> {
    let terminals = task.vocab().terminal_count();
    if terminals > limit {
        return Err(Error::EnumerationBudget { terminals, limit });
    }
    Ok(())
}

struct Walk<'a> {
    task: &'a SyntheticTask,
    x: &'a Condition,
    entries: Vec<TerminalEntry>,
    prefix_flows: HashMap<Vec<Token>, f64>,
}

impl Walk<'_> {
    /// Returns `log F(prefix)` for a non-terminal prefix.
    fn visit(&mut self, prefix: &mut Vec<Token>, log_ref: f64) -> f64 {
        let vocab = *self.task.vocab();
        let mut child_flows = Vec::with_capacity(vocab.alphabet());
        for t in 0..vocab.alphabet() as Token {
            if t == vocab.eos() && !vocab.eos_allowed(prefix.len()) {
                continue;
            }
            let step = self.task.ref_log_step(self.x.id, prefix, t);
            prefix.push(t);
            let flow = if vocab.is_terminal(prefix) {
                let sequence = TokenSequence::from_tokens(&vocab, prefix.clone()).expect("walk only builds legal sequences");
                let log_r = log_ref + step + self.task.terminal_reward(self.x, &sequence).expect("terminal") / self.task.beta();
                self.entries.push(TerminalEntry { sequence, log_r, p_star: 0.0 });
                log_r
            } else {
                self.visit(prefix, log_ref + step)
            };
            prefix.pop();
            child_flows.push(flow);
        }
        let flow = log_sum_exp(child_flows.iter().copied());
        self.prefix_flows.insert(prefix.clone(), flow);
        flow
    }
}
