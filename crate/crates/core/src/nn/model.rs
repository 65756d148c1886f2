use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{linear_forward, log_softmax, NodeId, Tape};
use crate::env::{Condition, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tape nodes produced for one non-terminal prefix.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    /// Log-probabilities over the alphabet (masked entries are `-inf`).
    pub log_probs: NodeId,
    /// Scalar flow output, when requested.
    pub log_flow: Option<NodeId>,
}

/// A forward policy over a prefix tree with an optional state-flow estimate.
///
/// Both the neural [`Model`] and the [`TabularModel`](super::TabularModel) implement this,
/// so losses and diagnostics run unchanged on either.
pub trait SequenceModel<S: Scalar> {
    fn store(&self) -> &ParamStore<S>;

    fn vocab(&self) -> &Vocabulary;

    /// Log-probabilities of the next token after a non-terminal `prefix`.
    fn log_policy(&self, x: &Condition, prefix: &[Token]) -> Result<Vec<S>>;

    /// Flow output at `prefix`; exactly zero at terminal states.
    fn log_flow(&self, x: &Condition, prefix: &[Token]) -> Result<S>;

    fn record_step(&self, tape: &mut Tape<'_, S>, x: &Condition, prefix: &[Token], with_flow: bool)
        -> Result<StepNodes>;

    /// Learnable per-condition log partition estimate.
    fn record_log_z(&self, tape: &mut Tape<'_, S>, x: &Condition) -> NodeId;

    /// `sum_t log P_F(y_t | y_<t)` over a terminal sequence.
    fn sequence_log_prob(&self, x: &Condition, y: &crate::env::TokenSequence) -> Result<S> {
        if !y.is_terminal() {
            return Err(Error::Contract("sequence_log_prob needs a terminal sequence".into()));
        }
        let tokens = y.tokens();
        let mut total = S::zero();
        for t in 0..tokens.len() {
            total += self.log_policy(x, &tokens[..t])?[tokens[t] as usize];
        }
        Ok(total)
    }
}

/// Allowed-token mask after a prefix of `len` tokens; `None` when everything is allowed.
pub(crate) fn step_mask(vocab: &Vocabulary, len: usize) -> Option<Vec<bool>> {
    if vocab.eos_allowed(len) {
        None
    } else {
        let mut m = vec![true; vocab.alphabet()];
        m[vocab.eos() as usize] = false;
        Some(m)
    }
}

pub(crate) fn check_non_terminal(vocab: &Vocabulary, prefix: &[Token]) -> Result<()> {
    if vocab.is_terminal(prefix) {
        return Err(Error::Contract(format!("policy evaluated at terminal state {prefix:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    /// Width of both trunk layers.
    pub hidden: usize,
    pub flow_hidden: usize,
    /// Number of most recent prefix tokens fed to the trunk (left-padded).
    pub window: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { embed_dim: 16, hidden: 64, flow_hidden: 64, window: 4 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.flow_hidden == 0 || self.window == 0 {
            return Err(Error::Config("network dimensions must all be positive".into()));
        }
        Ok(())
    }
}

/// Shape information needed to rebuild a [`Model`] from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub network: NetworkConfig,
    pub vocab: Vocabulary,
    pub n_conditions: usize,
}

/// Condition/token embeddings, two rectifier layers, and the next-token head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyNetwork {
    pub condition_embedding: ParamId,
    pub token_embedding: ParamId,
    pub hidden1: (ParamId, ParamId),
    pub hidden2: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
}

/// State-flow estimator reading the trunk's last hidden layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowHead {
    pub hidden: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
}

pub const FLOW_OUTPUT_WEIGHT: &str = "flow.out.w";
pub const FLOW_OUTPUT_BIAS: &str = "flow.out.b";

/// Post-rectifier activations of every hidden layer for a probe batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub layers: Vec<LayerActivations>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivations {
    pub name: String,
    /// One row per probe input, `width` columns.
    pub rows: Vec<Vec<f64>>,
}

impl LayerActivations {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Layer names in an [`ActivationTrace`].
pub const TRUNK_LAYER_1: &str = "policy.hidden1";
pub const TRUNK_LAYER_2: &str = "policy.hidden2";
pub const FLOW_HIDDEN_LAYER: &str = "flow.hidden";

/// Untaped forward values at one prefix.
#[derive(Clone, Debug)]
pub struct Forward<S> {
    pub log_probs: Vec<S>,
    pub log_flow: S,
    pub hidden1: Vec<S>,
    pub hidden2: Vec<S>,
    pub flow_hidden: Vec<S>,
}

/// The conditional policy network, its flow head and the per-condition log Z table.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    arch: Architecture,
    store: ParamStore<S>,
    policy: PolicyNetwork,
    flow: FlowHead,
    log_z: ParamId,
}

fn uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<S> {
    (0..n).map(|_| S::of(rng.gen_range(-bound..=bound))).collect()
}

/// Rectifier-preserving bound for a layer read by a ReLU.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn flow_output_init<S: Scalar, R: Rng + ?Sized>(rng: &mut R, flow_hidden: usize) -> (Vec<S>, Vec<S>) {
    let bound = 1.0 / (flow_hidden as f64).sqrt();
    (uniform(rng, flow_hidden, bound), uniform(rng, 1, bound))
}

impl<S: Scalar> Model<S> {
    pub fn new<R: Rng + ?Sized>(network: NetworkConfig, vocab: Vocabulary, n_conditions: usize, rng: &mut R) -> Result<Self> {
        network.validate()?;
        if n_conditions == 0 {
            return Err(Error::Config("model needs at least one condition".into()));
        }
        let d = network.embed_dim;
        let h = network.hidden;
        let hf = network.flow_hidden;
        let alphabet = vocab.alphabet();
        let input = d * (network.window + 1);
        let mut store = ParamStore::new();
        use ParamGroup::{Flow, Policy};

        let condition_embedding =
            store.add("policy.condition_embedding", &[n_conditions, d], Policy, uniform(rng, n_conditions * d, 1.0))?;
        // one extra row for left padding
        let token_embedding =
            store.add("policy.token_embedding", &[alphabet + 1, d], Policy, uniform(rng, (alphabet + 1) * d, 1.0))?;
        let hidden1 = (
            store.add("policy.hidden1.w", &[h, input], Policy, uniform(rng, h * input, he_bound(input)))?,
            store.add("policy.hidden1.b", &[h], Policy, vec![S::zero(); h])?,
        );
        let hidden2 = (
            store.add("policy.hidden2.w", &[h, h], Policy, uniform(rng, h * h, he_bound(h)))?,
            store.add("policy.hidden2.b", &[h], Policy, vec![S::zero(); h])?,
        );
        let output = (
            store.add("policy.out.w", &[alphabet, h], Policy, vec![S::zero(); alphabet * h])?,
            store.add("policy.out.b", &[alphabet], Policy, vec![S::zero(); alphabet])?,
        );
        let flow_hidden = (
            store.add("flow.hidden.w", &[hf, h], Flow, uniform(rng, hf * h, he_bound(h)))?,
            store.add("flow.hidden.b", &[hf], Flow, vec![S::zero(); hf])?,
        );
        let (ow, ob) = flow_output_init(rng, hf);
        let flow_output = (store.add(FLOW_OUTPUT_WEIGHT, &[1, hf], Flow, ow)?, store.add(FLOW_OUTPUT_BIAS, &[1], Flow, ob)?);
        let log_z = store.add("log_z", &[n_conditions, 1], Flow, vec![S::zero(); n_conditions])?;

        Ok(Self {
            arch: Architecture { network, vocab, n_conditions },
            store,
            policy: PolicyNetwork { condition_embedding, token_embedding, hidden1, hidden2, output },
            flow: FlowHead { hidden: flow_hidden, output: flow_output },
            log_z,
        })
    }

    /// Rebuilds the layout for `arch` and adopts `store`, checking every name and shape.
    pub fn from_store(arch: Architecture, store: ParamStore<S>) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let template = Self::new(arch.network.clone(), arch.vocab, arch.n_conditions, &mut rng)?;
        if template.store.len() != store.len() {
            return Err(Error::Shape(format!(
                "architecture expects {} arrays, checkpoint has {}",
                template.store.len(),
                store.len()
            )));
        }
        for (want, got) in template.store.arrays().iter().zip(store.arrays()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Shape(format!(
                    "expected `{}` {:?}, found `{}` {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        Ok(Self { store, ..template })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn policy_layout(&self) -> &PolicyNetwork {
        &self.policy
    }

    pub fn flow_layout(&self) -> &FlowHead {
        &self.flow
    }

    pub fn log_z_table(&self) -> ParamId {
        self.log_z
    }

    fn pad(&self) -> usize {
        self.arch.vocab.alphabet()
    }

    /// Token-embedding rows for the last `window` tokens, left-padded.
    fn window_rows(&self, prefix: &[Token]) -> Vec<usize> {
        let w = self.arch.network.window;
        let tail = &prefix[prefix.len().saturating_sub(w)..];
        let mut rows = vec![self.pad(); w - tail.len()];
        rows.extend(tail.iter().map(|&t| t as usize));
        rows
    }

    fn check_condition(&self, x: &Condition) -> Result<()> {
        if x.id >= self.arch.n_conditions {
            return Err(Error::Precondition(format!(
                "condition {} outside model's {} conditions",
                x.id, self.arch.n_conditions
            )));
        }
        Ok(())
    }

    /// Plain forward pass at a non-terminal prefix.
    pub fn forward(&self, x: &Condition, prefix: &[Token]) -> Result<Forward<S>> {
        check_non_terminal(&self.arch.vocab, prefix)?;
        self.check_condition(x)?;
        let s = &self.store;
        let mut input = Vec::with_capacity(self.arch.network.embed_dim * (self.arch.network.window + 1));
        input.extend_from_slice(s.get(self.policy.condition_embedding).row(x.id));
        for r in self.window_rows(prefix) {
            input.extend_from_slice(s.get(self.policy.token_embedding).row(r));
        }
        let dense = |(w, b): (ParamId, ParamId), x: &[S], relu: bool| {
            let mut out = vec![S::zero(); s.get(b).len()];
            linear_forward(&s.get(w).values, &s.get(b).values, x, &mut out);
            if relu {
                out.iter_mut().for_each(|v| *v = v.max(S::zero()));
            }
            out
        };
        let hidden1 = dense(self.policy.hidden1, &input, true);
        let hidden2 = dense(self.policy.hidden2, &hidden1, true);
        let logits = dense(self.policy.output, &hidden2, false);
        let log_probs = log_softmax(&logits, step_mask(&self.arch.vocab, prefix.len()).as_deref());
        let flow_hidden = dense(self.flow.hidden, &hidden2, true);
        let log_flow = dense(self.flow.output, &flow_hidden, false)[0];
        Ok(Forward { log_probs, log_flow, hidden1, hidden2, flow_hidden })
    }

    /// Re-draws the flow output layer from its initialization distribution and clears its
    /// optimizer state. Nothing else is touched.
    pub fn reset_flow_last_layer<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (w, b) = flow_output_init::<S, R>(rng, self.arch.network.flow_hidden);
        let (wid, bid) = self.flow.output;
        let wa = self.store.get_mut(wid);
        wa.values = w;
        wa.clear_optimizer_state();
        let ba = self.store.get_mut(bid);
        ba.values = b;
        ba.clear_optimizer_state();
    }

    /// Hidden activations (both trunk layers and the flow hidden layer) over `probe`.
    pub fn capture_activations(&self, probe: &[(Condition, Vec<Token>)]) -> Result<ActivationTrace> {
        if probe.is_empty() {
            return Err(Error::Precondition("probe batch must be nonempty".into()));
        }
        let mut layers: Vec<LayerActivations> = [TRUNK_LAYER_1, TRUNK_LAYER_2, FLOW_HIDDEN_LAYER]
            .iter()
            .map(|n| LayerActivations { name: n.to_string(), rows: Vec::with_capacity(probe.len()) })
            .collect();
        let to64 = |v: &[S]| v.iter().map(|a| a.as_f64()).collect::<Vec<_>>();
        for (x, prefix) in probe {
            let f = self.forward(x, prefix)?;
            layers[0].rows.push(to64(&f.hidden1));
            layers[1].rows.push(to64(&f.hidden2));
            layers[2].rows.push(to64(&f.flow_hidden));
        }
        Ok(ActivationTrace { layers })
    }
}

impl<S: Scalar> SequenceModel<S> for Model<S> {
    fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    fn vocab(&self) -> &Vocabulary {
        &self.arch.vocab
    }

    fn log_policy(&self, x: &Condition, prefix: &[Token]) -> Result<Vec<S>> {
        Ok(self.forward(x, prefix)?.log_probs)
    }

    fn log_flow(&self, x: &Condition, prefix: &[Token]) -> Result<S> {
        if self.arch.vocab.is_terminal(prefix) {
            return Ok(S::zero());
        }
        Ok(self.forward(x, prefix)?.log_flow)
    }

    fn record_step(
        &self,
        tape: &mut Tape<'_, S>,
        x: &Condition,
        prefix: &[Token],
        with_flow: bool,
    ) -> Result<StepNodes> {
        check_non_terminal(&self.arch.vocab, prefix)?;
        self.check_condition(x)?;
        let mut parts = Vec::with_capacity(self.arch.network.window + 1);
        parts.push(tape.gather(self.policy.condition_embedding, x.id));
        for r in self.window_rows(prefix) {
            parts.push(tape.gather(self.policy.token_embedding, r));
        }
        let input = tape.concat(&parts);
        let z1 = tape.linear(self.policy.hidden1.0, self.policy.hidden1.1, input);
        let h1 = tape.relu(z1);
        let z2 = tape.linear(self.policy.hidden2.0, self.policy.hidden2.1, h1);
        let h2 = tape.relu(z2);
        let logits = tape.linear(self.policy.output.0, self.policy.output.1, h2);
        let log_probs = tape.log_softmax(logits, step_mask(&self.arch.vocab, prefix.len()));
        let log_flow = with_flow.then(|| {
            let zf = tape.linear(self.flow.hidden.0, self.flow.hidden.1, h2);
            let hf = tape.relu(zf);
            tape.linear(self.flow.output.0, self.flow.output.1, hf)
        });
        Ok(StepNodes { log_probs, log_flow })
    }

    fn record_log_z(&self, tape: &mut Tape<'_, S>, x: &Condition) -> NodeId {
        tape.gather(self.log_z, x.id)
    }
}
