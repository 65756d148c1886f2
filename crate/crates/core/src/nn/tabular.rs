use std::collections::HashMap;

use rand::Rng;

use super::model::{check_non_terminal, step_mask, SequenceModel, StepNodes};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{log_softmax, NodeId, Tape};
use crate::env::{Condition, EnumerationResult, SyntheticTask, Token, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// What the flow table of a tabular model stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowTarget {
    /// `log F(s)`, as used by detailed balance.
    Absolute,
    /// `log F(s) - log R(x, s)`, the forward-looking reparameterization.
    ForwardLooking,
}

/// One free logit row and one flow scalar per (condition, non-terminal prefix).
#[derive(Clone, Debug)]
pub struct TabularModel<S> {
    vocab: Vocabulary,
    store: ParamStore<S>,
    logits: ParamId,
    flows: ParamId,
    log_z: ParamId,
    index: HashMap<(usize, Vec<Token>), usize>,
}

fn non_terminal_prefixes(vocab: &Vocabulary) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    while let Some(p) = frontier.pop() {
        for t in 0..vocab.size() {
            let mut c = p.clone();
            c.push(t);
            if !vocab.is_terminal(&c) {
                out.push(c.clone());
                frontier.push(c);
            }
        }
    }
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

impl<S: Scalar> TabularModel<S> {
    fn build(task: &SyntheticTask, mut fill: impl FnMut(usize, &[Token]) -> (Vec<f64>, f64)) -> Result<Self> {
        crate::env::check_budget(task, crate::env::DEFAULT_ENUMERATION_LIMIT)?;
        let vocab = *task.vocab();
        let alphabet = vocab.alphabet();
        let prefixes = non_terminal_prefixes(&vocab);
        let n_cond = task.conditions().len();
        let mut index = HashMap::new();
        let mut logits = Vec::with_capacity(n_cond * prefixes.len() * alphabet);
        let mut flows = Vec::with_capacity(n_cond * prefixes.len());
        for c in 0..n_cond {
            for p in &prefixes {
                index.insert((c, p.clone()), index.len());
                let (row, flow) = fill(c, p);
                debug_assert_eq!(row.len(), alphabet);
                // masked entries are never read; keep them finite
                logits.extend(row.into_iter().map(|l| S::of(if l.is_finite() { l } else { 0.0 })));
                flows.push(S::of(flow));
            }
        }
        let rows = index.len();
        let mut store = ParamStore::new();
        let logits = store.add("table.logits", &[rows, alphabet], ParamGroup::Policy, logits)?;
        let flows = store.add("table.log_flow", &[rows, 1], ParamGroup::Flow, flows)?;
        let log_z = store.add("log_z", &[n_cond, 1], ParamGroup::Flow, vec![S::zero(); n_cond])?;
        Ok(Self { vocab, store, logits, flows, log_z, index })
    }

    /// Uniform policy, zero flows.
    pub fn uniform(task: &SyntheticTask) -> Result<Self> {
        let a = task.vocab().alphabet();
        Self::build(task, |_, _| (vec![0.0; a], 0.0))
    }

    /// Logits and flows drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(task: &SyntheticTask, rng: &mut R, scale: f64) -> Result<Self> {
        let a = task.vocab().alphabet();
        Self::build(task, |_, _| {
            let row = (0..a).map(|_| rng.gen_range(-scale..=scale)).collect();
            (row, rng.gen_range(-scale..=scale))
        })
    }

    /// Policy equal to the reference model's conditionals, zero flows.
    pub fn reference(task: &SyntheticTask) -> Result<Self> {
        let a = task.vocab().alphabet() as Token;
        Self::build(task, |c, p| ((0..a).map(|t| task.ref_log_step(c, p, t)).collect(), 0.0))
    }

    /// Policy equal to the optimal conditionals `F(child)/F(prefix)`, flows from the oracle,
    /// and `log Z` set to the oracle's partition value.
    pub fn from_oracle(task: &SyntheticTask, oracles: &[EnumerationResult], target: FlowTarget) -> Result<Self> {
        if oracles.len() != task.conditions().len() {
            return Err(Error::Precondition("one enumeration result per condition is required".into()));
        }
        let mut model = Self::build(task, |c, p| {
            let o = &oracles[c];
            let row = o.optimal_log_policy(task, p).expect("oracle covers every prefix");
            let log_flow = o.log_flow(p).expect("oracle covers every prefix");
            let flow = match target {
                FlowTarget::Absolute => log_flow,
                FlowTarget::ForwardLooking => {
                    let prefix = TokenSequence::from_tokens(task.vocab(), p.to_vec()).expect("legal prefix");
                    log_flow - task.log_prefix_reward(&task.conditions()[c], &prefix)
                }
            };
            (row, flow)
        })?;
        let lz = model.log_z;
        for o in oracles {
            model.store.get_mut(lz).values[o.condition_id] = S::of(o.log_z);
        }
        Ok(model)
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn logits_table(&self) -> ParamId {
        self.logits
    }

    pub fn flow_table(&self) -> ParamId {
        self.flows
    }

    pub fn log_z_table(&self) -> ParamId {
        self.log_z
    }

    pub fn row(&self, x: &Condition, prefix: &[Token]) -> Result<usize> {
        check_non_terminal(&self.vocab, prefix)?;
        self.index
            .get(&(x.id, prefix.to_vec()))
            .copied()
            .ok_or_else(|| Error::Precondition(format!("prefix {prefix:?} for condition {} not in table", x.id)))
    }
}

impl<S: Scalar> SequenceModel<S> for TabularModel<S> {
    fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn log_policy(&self, x: &Condition, prefix: &[Token]) -> Result<Vec<S>> {
        let r = self.row(x, prefix)?;
        Ok(log_softmax(self.store.get(self.logits).row(r), step_mask(&self.vocab, prefix.len()).as_deref()))
    }

    fn log_flow(&self, x: &Condition, prefix: &[Token]) -> Result<S> {
        if self.vocab.is_terminal(prefix) {
            return Ok(S::zero());
        }
        let r = self.row(x, prefix)?;
        Ok(self.store.get(self.flows).values[r])
    }

    fn record_step(&self, tape: &mut Tape<'_, S>, x: &Condition, prefix: &[Token], with_flow: bool) -> Result<StepNodes> {
        let r = self.row(x, prefix)?;
        let logits = tape.gather(self.logits, r);
        let log_probs = tape.log_softmax(logits, step_mask(&self.vocab, prefix.len()));
        let log_flow = with_flow.then(|| tape.gather(self.flows, r));
        Ok(StepNodes { log_probs, log_flow })
    }

    fn record_log_z(&self, tape: &mut Tape<'_, S>, x: &Condition) -> NodeId {
        tape.gather(self.log_z, x.id)
    }
}
