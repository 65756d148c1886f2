//! Mixed on-policy/replay training rounds with reward-prioritized replay and
//! periodic reactivation of the flow output layer, plus a REINFORCE baseline.

use std::collections::VecDeque;

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{dormant_ratio, probe_set, DormantReport, PROBE_SIZE};
use crate::env::{sample_index, Condition, SyntheticTask, Token, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, CheckpointMeta, Model, NetworkConfig, NodeId, ParamGroup, RngState, SequenceModel, Tape};
use crate::objectives::{trajectory_loss, vargrad_loss, Objective};
use crate::scalar::Scalar;

/// How replay priorities are formed from stored rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prioritization {
    /// `P(i) ∝ exp(log R_i / T)`, i.e. proportional to `R^(1/T)`, computed stably.
    #[default]
    #[serde(rename = "softmax-log-R")]
    SoftmaxLogR,
    /// `P(i) ∝ exp(R_i / T)` with `R_i` the raw shaped reward.
    #[serde(rename = "literal-exp-R")]
    LiteralExpR,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub condition_id: usize,
    pub sequence: TokenSequence,
    pub log_r: f64,
    /// Position in the global insertion order.
    pub inserted: u64,
}

/// Bounded FIFO store of terminal sequences with reward-prioritized sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    temperature: f64,
    prioritization: Prioritization,
    entries: VecDeque<ReplayEntry>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, temperature: f64, prioritization: Prioritization) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("priority temperature must be positive, got {temperature}")));
        }
        Ok(Self { capacity, temperature, prioritization, entries: VecDeque::with_capacity(capacity), inserted: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    /// Appends an entry, evicting the oldest one when full.
    pub fn insert(&mut self, condition_id: usize, sequence: TokenSequence, log_r: f64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ReplayEntry { condition_id, sequence, log_r, inserted: self.inserted });
        self.inserted += 1;
    }

    fn scores(&self, entries: &[&ReplayEntry]) -> Vec<f64> {
        let values: Vec<f64> = match self.prioritization {
            Prioritization::SoftmaxLogR => entries.iter().map(|e| e.log_r / self.temperature).collect(),
            Prioritization::LiteralExpR => entries.iter().map(|e| e.log_r.exp().min(f64::MAX) / self.temperature).collect(),
        };
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        values.iter().map(|v| (v - max).exp()).collect()
    }

    /// Sampling probability of every entry, in buffer order.
    pub fn probabilities(&self) -> Vec<f64> {
        let all: Vec<&ReplayEntry> = self.entries.iter().collect();
        let w = self.scores(&all);
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    /// `count` prioritized draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<&ReplayEntry>> {
        if self.entries.is_empty() {
            return Err(Error::Precondition("cannot sample from an empty replay buffer".into()));
        }
        let all: Vec<&ReplayEntry> = self.entries.iter().collect();
        let dist = WeightedIndex::new(self.scores(&all)).map_err(|e| Error::Precondition(e.to_string()))?;
        Ok((0..count).map(|_| all[dist.sample(rng)]).collect())
    }

    /// One prioritized draw among entries of a single condition, if any exist.
    pub fn sample_condition<R: Rng + ?Sized>(&self, rng: &mut R, condition_id: usize) -> Option<&ReplayEntry> {
        let subset: Vec<&ReplayEntry> = self.entries.iter().filter(|e| e.condition_id == condition_id).collect();
        if subset.is_empty() {
            return None;
        }
        Some(subset[sample_index(&self.scores(&subset), rng)])
    }
}

/// Which update rule drives the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Balance-objective training with replay and flow reactivation.
    #[default]
    Gflownet,
    /// REINFORCE on the task reward with a moving-average baseline.
    RewardMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub rounds: usize,
    pub batch_size: usize,
    /// Flow output layer reset period; `None` disables resets.
    pub reset_period: Option<usize>,
    /// Overrides the task's reward temperature when set.
    pub beta: Option<f64>,
    pub lr_policy: f64,
    pub lr_flow: f64,
    pub adam: AdamConfig,
    pub objective: Objective,
    /// Probability that a batch slot is drawn from replay.
    pub replay_mix: f64,
    pub buffer_capacity: usize,
    pub prioritization: Prioritization,
    pub priority_temperature: f64,
    pub rollout_temperature: f64,
    /// Group size for the variance objective; the batch is split into `batch_size / k` groups.
    pub vargrad_k: usize,
    pub seed: u64,
    /// Dormancy is measured every this many rounds (0 disables).
    pub diagnostics_every: usize,
    pub dormancy_tau: f64,
    pub checkpoint_every: Option<usize>,
    /// Learning rate of the reward-maximizing baseline's policy.
    pub pg_lr: f64,
    /// Decay of the baseline's reward moving average.
    pub pg_baseline_decay: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            rounds: 10_000,
            batch_size: 64,
            reset_period: Some(2000),
            beta: None,
            lr_policy: 1e-5,
            lr_flow: 1e-4,
            adam: AdamConfig::default(),
            objective: Objective::Fldb,
            replay_mix: 0.5,
            buffer_capacity: 5000,
            prioritization: Prioritization::SoftmaxLogR,
            priority_temperature: 1.0,
            rollout_temperature: 1.0,
            vargrad_k: 16,
            seed: 0,
            diagnostics_every: 100,
            dormancy_tau: 0.0,
            checkpoint_every: None,
            pg_lr: 1e-3,
            pg_baseline_decay: 0.9,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.reset_period == Some(0) {
            return bad("reset_period must be positive (use null to disable)".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive (use null to disable)".into());
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("beta must be positive, got {b}"));
            }
        }
        for (name, v) in [
            ("lr_policy", self.lr_policy),
            ("lr_flow", self.lr_flow),
            ("pg_lr", self.pg_lr),
            ("priority_temperature", self.priority_temperature),
            ("rollout_temperature", self.rollout_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.replay_mix) {
            return bad(format!("replay_mix must lie in [0, 1], got {}", self.replay_mix));
        }
        if !(0.0..1.0).contains(&self.pg_baseline_decay) {
            return bad(format!("pg_baseline_decay must lie in [0, 1), got {}", self.pg_baseline_decay));
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive".into());
        }
        if self.dormancy_tau < 0.0 {
            return bad("dormancy_tau must be nonnegative".into());
        }
        if self.objective == Objective::Vargrad && (self.vargrad_k < 2 || !self.batch_size.is_multiple_of(self.vargrad_k)) {
            return bad(format!(
                "vargrad needs vargrad_k >= 2 dividing batch_size ({} / {})",
                self.batch_size, self.vargrad_k
            ));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub loss: f64,
    #[serde(rename = "mean_logR")]
    pub mean_log_r: f64,
    #[serde(rename = "max_logR")]
    pub max_log_r: f64,
    pub replay_frac: f64,
    pub reset: bool,
    pub seed: u64,
}

const INIT_STREAM: u64 = u64::MAX;
const RESET_STREAM: u64 = u64::MAX - 1;
const PROBE_STREAM: u64 = u64::MAX - 2;
const GROUP_STREAM: u64 = 1 << 32;

/// Independent generator for `(seed, round, stream)`.
pub fn stream_rng(seed: u64, round: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&round.to_le_bytes());
    key[16..24].copy_from_slice(&stream.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Seed of the frozen dormancy probe set for a run seed.
pub fn probe_seed(seed: u64) -> u64 {
    stream_rng(seed, 0, PROBE_STREAM).gen()
}

/// Samples a terminal sequence token by token from the tempered policy and returns it
/// with its shaped log reward.
pub fn rollout<S: Scalar, M: SequenceModel<S>, R: Rng + ?Sized>(
    model: &M,
    task: &SyntheticTask,
    x: &Condition,
    rng: &mut R,
    temperature: f64,
) -> Result<(TokenSequence, f64)> {
    let vocab = task.vocab();
    let mut y = TokenSequence::empty();
    let mut weights = Vec::with_capacity(vocab.alphabet());
    while !y.is_terminal() {
        let log_p = model.log_policy(x, y.tokens())?;
        let max = log_p.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        weights.clear();
        weights.extend(log_p.iter().map(|v| ((v.as_f64() - max) / temperature).exp()));
        y.push(vocab, sample_index(&weights, rng) as Token)?;
    }
    let log_r = task.log_shaped_reward(x, &y)?;
    Ok((y, log_r))
}

/// Callbacks fired by [`train`]. Every method defaults to doing nothing.
pub trait Observer<S: Scalar> {
    fn on_round(&mut self, _report: &RoundReport) -> Result<()> {
        Ok(())
    }

    fn on_diagnostics(&mut self, _round: usize, _report: &DormantReport) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState<S>) -> Result<()> {
        Ok(())
    }

    /// Whether [`Observer::on_reset`] should receive pre-reset snapshots.
    fn wants_reset_snapshots(&self) -> bool {
        false
    }

    fn on_reset(&mut self, _round: usize, _before: &Model<S>, _after: &Model<S>) -> Result<()> {
        Ok(())
    }
}

impl<S: Scalar> Observer<S> for () {}

/// Collects everything in memory.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    pub rounds: Vec<RoundReport>,
    pub diagnostics: Vec<(usize, DormantReport)>,
}

impl<S: Scalar> Observer<S> for Recorder {
    fn on_round(&mut self, report: &RoundReport) -> Result<()> {
        self.rounds.push(report.clone());
        Ok(())
    }

    fn on_diagnostics(&mut self, round: usize, report: &DormantReport) -> Result<()> {
        self.diagnostics.push((round, report.clone()));
        Ok(())
    }
}

/// Trainer state: model, optimizer moments (inside the model's store), replay buffer,
/// round counter and the frozen dormancy probe set.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    task: SyntheticTask,
    config: TrainerConfig,
    model: Model<S>,
    buffer: ReplayBuffer,
    round: usize,
    baseline: f64,
    probe: Vec<(Condition, Vec<Token>)>,
    probe_seed: u64,
}

struct Slot {
    condition: usize,
    sequence: TokenSequence,
    log_r: f64,
    replayed: bool,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(task: &SyntheticTask, config: TrainerConfig, network: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let task = match config.beta {
            Some(beta) if beta != task.beta() => {
                let mut spec = task.spec().clone();
                spec.beta = beta;
                SyntheticTask::from_spec(spec)?
            }
            _ => task.clone(),
        };
        let mut init = stream_rng(config.seed, 0, INIT_STREAM);
        let model = Model::new(network, *task.vocab(), task.conditions().len(), &mut init)?;
        Self::with_model(&task, config, model)
    }

    /// Starts from existing parameters (round counter restarts at 0).
    pub fn with_model(task: &SyntheticTask, config: TrainerConfig, model: Model<S>) -> Result<Self> {
        config.validate()?;
        if model.architecture().vocab != *task.vocab() || model.architecture().n_conditions != task.conditions().len() {
            return Err(Error::Shape("model architecture does not match the task".into()));
        }
        let buffer = ReplayBuffer::new(config.buffer_capacity, config.priority_temperature, config.prioritization)?;
        let probe_seed = probe_seed(config.seed);
        let probe = probe_set(task, probe_seed, PROBE_SIZE);
        Ok(Self { task: task.clone(), config, model, buffer, round: 0, baseline: 0.0, probe, probe_seed })
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<S> {
        &mut self.model
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Number of completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Moving-average reward baseline of the reward-max method.
    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn probe(&self) -> &[(Condition, Vec<Token>)] {
        &self.probe
    }

    pub fn probe_seed(&self) -> u64 {
        self.probe_seed
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        let mut meta = CheckpointMeta {
            round: self.round,
            rng: RngState { seed: self.config.seed, round: self.round as u64 },
            extras: Default::default(),
        };
        meta.extras.insert("baseline".into(), self.baseline);
        meta
    }

    pub fn dormancy(&self) -> Result<DormantReport> {
        dormant_ratio(&self.model.capture_activations(&self.probe)?, self.config.dormancy_tau)
    }

    fn on_policy(&self, rng: &mut ChaCha8Rng, condition: usize) -> Result<Slot> {
        let x = &self.task.conditions()[condition];
        let (sequence, log_r) = rollout(&self.model, &self.task, x, rng, self.config.rollout_temperature)?;
        Ok(Slot { condition, sequence, log_r, replayed: false })
    }

    fn replayed(entry: &ReplayEntry) -> Slot {
        Slot { condition: entry.condition_id, sequence: entry.sequence.clone(), log_r: entry.log_r, replayed: true }
    }

    /// Fills the batch. Replay draws see the buffer as it was at the start of the round;
    /// a replay slot with nothing to draw falls back to a fresh rollout.
    fn collect(&self, round: u64) -> Result<Vec<Slot>> {
        let cfg = &self.config;
        let n_cond = self.task.conditions().len();
        let mut slots = Vec::with_capacity(cfg.batch_size);
        let group = if cfg.objective == Objective::Vargrad { cfg.vargrad_k } else { 1 };
        let mut group_condition = 0;
        for i in 0..cfg.batch_size {
            if i % group == 0 && group > 1 {
                group_condition = stream_rng(cfg.seed, round, GROUP_STREAM + (i / group) as u64).gen_range(0..n_cond);
            }
            let mut rng = stream_rng(cfg.seed, round, i as u64);
            let replay = rng.gen_bool(cfg.replay_mix);
            let slot = if group > 1 {
                match replay.then(|| self.buffer.sample_condition(&mut rng, group_condition)).flatten() {
                    Some(e) => Self::replayed(e),
                    None => self.on_policy(&mut rng, group_condition)?,
                }
            } else if replay && !self.buffer.is_empty() {
                Self::replayed(self.buffer.sample(&mut rng, 1)?[0])
            } else {
                let c = rng.gen_range(0..n_cond);
                self.on_policy(&mut rng, c)?
            };
            slots.push(slot);
        }
        Ok(slots)
    }

    fn loss_node(&self, tape: &mut Tape<'_, S>, slots: &[Slot]) -> Result<NodeId> {
        let cfg = &self.config;
        let conditions = self.task.conditions();
        let mut terms = Vec::new();
        let weight = if cfg.objective == Objective::Vargrad {
            for group in slots.chunks(cfg.vargrad_k) {
                let x = &conditions[group[0].condition];
                let batch: Vec<(TokenSequence, f64)> = group.iter().map(|s| (s.sequence.clone(), s.log_r)).collect();
                terms.push(vargrad_loss(tape, &self.model, x, &batch)?.node);
            }
            1.0 / terms.len() as f64
        } else {
            for s in slots {
                let x = &conditions[s.condition];
                terms.push(trajectory_loss(cfg.objective, tape, &self.model, &self.task, x, &s.sequence, s.log_r)?.node);
            }
            1.0 / slots.len() as f64
        };
        let total = tape.sum(&terms);
        Ok(tape.scale(total, S::of(weight)))
    }

    fn finish_round(&mut self, observer: &mut dyn Observer<S>, round: usize, loss: f64, slots: &[Slot], reset: bool) -> Result<RoundReport> {
        let n = slots.len() as f64;
        let report = RoundReport {
            round,
            loss,
            mean_log_r: slots.iter().map(|s| s.log_r).sum::<f64>() / n,
            max_log_r: slots.iter().map(|s| s.log_r).fold(f64::NEG_INFINITY, f64::max),
            replay_frac: slots.iter().filter(|s| s.replayed).count() as f64 / n,
            reset,
            seed: self.config.seed,
        };
        self.round = round;
        observer.on_round(&report)?;
        if self.config.diagnostics_every > 0 && round.is_multiple_of(self.config.diagnostics_every) {
            observer.on_diagnostics(round, &self.dormancy()?)?;
        }
        if self.config.checkpoint_every.is_some_and(|c| round.is_multiple_of(c)) {
            observer.on_checkpoint(self)?;
        }
        Ok(report)
    }

    /// One round: fill the batch, take one optimizer step on the mean loss, store the
    /// fresh rollouts, and reset the flow output layer when the round index hits the period.
    pub fn train_round(&mut self, observer: &mut dyn Observer<S>) -> Result<RoundReport> {
        let round = self.round + 1;
        let slots = self.collect(round as u64)?;
        let (loss, grads) = {
            let mut tape = Tape::new(self.model.store());
            let node = self.loss_node(&mut tape, &slots)?;
            let loss = tape.scalar(node).as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { round, detail: format!("batch loss {loss}") });
            }
            (loss, tape.backward(node).map_err(|e| Error::NonFiniteLoss { round, detail: e.to_string() })?)
        };
        let (lr_policy, lr_flow) = (self.config.lr_policy, self.config.lr_flow);
        let adam = self.config.adam;
        adam_step(self.model.store_mut(), &grads, |g| match g {
            ParamGroup::Policy => lr_policy,
            ParamGroup::Flow => lr_flow,
        }, &adam)
        .map_err(|e| Error::NonFiniteLoss { round, detail: e.to_string() })?;
        for s in slots.iter().filter(|s| !s.replayed) {
            self.buffer.insert(s.condition, s.sequence.clone(), s.log_r);
        }
        let reset = self.config.reset_period.is_some_and(|m| round.is_multiple_of(m));
        if reset {
            let before = observer.wants_reset_snapshots().then(|| self.model.clone());
            self.model.reset_flow_last_layer(&mut stream_rng(self.config.seed, round as u64, RESET_STREAM));
            if let Some(before) = before {
                observer.on_reset(round, &before, &self.model)?;
            }
        }
        self.finish_round(observer, round, loss, &slots, reset)
    }

    /// One REINFORCE round on the raw task reward: on-policy rollouts only, no flow,
    /// advantages against a moving-average baseline.
    pub fn reward_max_round(&mut self, observer: &mut dyn Observer<S>) -> Result<RoundReport> {
        let round = self.round + 1;
        let n_cond = self.task.conditions().len();
        let mut slots = Vec::with_capacity(self.config.batch_size);
        for i in 0..self.config.batch_size {
            let mut rng = stream_rng(self.config.seed, round as u64, i as u64);
            let c = rng.gen_range(0..n_cond);
            slots.push(self.on_policy(&mut rng, c)?);
        }
        let conditions = self.task.conditions();
        let rewards = slots
            .iter()
            .map(|s| self.task.terminal_reward(&conditions[s.condition], &s.sequence))
            .collect::<Result<Vec<f64>>>()?;
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let b = slots.len() as f64;
        let (loss, grads) = {
            let mut tape = Tape::new(self.model.store());
            let mut terms = Vec::with_capacity(slots.len());
            for (s, r) in slots.iter().zip(&rewards) {
                let x = &conditions[s.condition];
                let tokens = s.sequence.tokens();
                let mut picks = Vec::with_capacity(tokens.len());
                for t in 0..tokens.len() {
                    let step = self.model.record_step(&mut tape, x, &tokens[..t], false)?;
                    picks.push(tape.pick(step.log_probs, tokens[t] as usize));
                }
                let log_p = tape.sum(&picks);
                terms.push(tape.scale(log_p, S::of(-(r - self.baseline) / b)));
            }
            let node = tape.sum(&terms);
            let loss = tape.scalar(node).as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { round, detail: format!("surrogate loss {loss}") });
            }
            (loss, tape.backward(node).map_err(|e| Error::NonFiniteLoss { round, detail: e.to_string() })?)
        };
        let lr = self.config.pg_lr;
        let adam = self.config.adam;
        adam_step(self.model.store_mut(), &grads, |_| lr, &adam).map_err(|e| Error::NonFiniteLoss { round, detail: e.to_string() })?;
        let decay = self.config.pg_baseline_decay;
        self.baseline = if round == 1 { mean_reward } else { decay * self.baseline + (1.0 - decay) * mean_reward };
        self.finish_round(observer, round, loss, &slots, false)
    }
}

/// Runs the remaining rounds of `state` with the given method.
pub fn run<S: Scalar>(state: &mut TrainState<S>, method: Method, observer: &mut dyn Observer<S>) -> Result<()> {
    while state.round < state.config.rounds {
        match method {
            Method::Gflownet => state.train_round(observer)?,
            Method::RewardMax => state.reward_max_round(observer)?,
        };
    }
    Ok(())
}

/// Balance-objective training for `config.rounds` rounds.
pub fn train<S: Scalar>(state: &mut TrainState<S>, observer: &mut dyn Observer<S>) -> Result<()> {
    run(state, Method::Gflownet, observer)
}

/// Reward-maximizing policy-gradient training for `config.rounds` rounds.
pub fn train_reward_max_baseline<S: Scalar>(state: &mut TrainState<S>, observer: &mut dyn Observer<S>) -> Result<()> {
    run(state, Method::RewardMax, observer)
}
