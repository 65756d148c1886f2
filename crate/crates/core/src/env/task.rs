use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sequence::{Condition, EosRule, Token, TokenSequence, Vocabulary};
use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-6;

/// Structured description of a task, as stored in JSON task files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub vocab_size: u32,
    pub max_len: usize,
    #[serde(default)]
    pub eos: EosRule,
    /// Inverse temperature applied to the terminal reward.
    pub beta: f64,
    pub conditions: Vec<Condition>,
    pub ref_model: RefModelSpec,
    pub reward: RewardSpec,
}

/// How the tabular bigram reference model is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RefModelSpec {
    Uniform,
    /// Each row is a softmax of logits drawn uniformly from `[-spread, spread]`.
    Seeded { seed: u64, spread: f64 },
    /// One entry per condition, or a single entry shared by all conditions.
    Explicit { rows: Vec<BigramRows> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BigramRows {
    /// Distribution of the first token (alphabet-sized, eos last).
    pub start: Vec<f64>,
    /// `transitions[t]` is the distribution after ordinary token `t`.
    pub transitions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModePattern {
    pub tokens: Vec<Token>,
    /// Restricts the pattern to one condition; `None` applies it everywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<usize>,
}

impl ModePattern {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens, condition: None }
    }

    pub fn applies_to(&self, condition_id: usize) -> bool {
        self.condition.is_none_or(|c| c == condition_id)
    }

    /// Contiguous occurrence inside `body` (eos already stripped).
    pub fn occurs_in(&self, body: &[Token]) -> bool {
        !self.tokens.is_empty() && body.windows(self.tokens.len()).any(|w| w == self.tokens.as_slice())
    }
}

/// Terminal reward `r(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// `r_hi` if `y` contains any applicable pattern, else `r_lo`.
    Mode { patterns: Vec<ModePattern>, r_hi: f64, r_lo: f64 },
    /// `alpha * min(count of token in y, cap)`.
    Count { alpha: f64, token: Token, cap: usize },
}

impl RewardSpec {
    pub fn evaluate(&self, condition_id: usize, body: &[Token]) -> f64 {
        match self {
            RewardSpec::Mode { patterns, r_hi, r_lo } => {
                let hit = patterns.iter().any(|p| p.applies_to(condition_id) && p.occurs_in(body));
                if hit {
                    *r_hi
                } else {
                    *r_lo
                }
            }
            RewardSpec::Count { alpha, token, cap } => {
                let n = body.iter().filter(|&&t| t == *token).count().min(*cap);
                alpha * n as f64
            }
        }
    }

    pub fn max_reward(&self) -> f64 {
        match self {
            RewardSpec::Mode { r_hi, r_lo, .. } => r_hi.max(*r_lo),
            RewardSpec::Count { alpha, cap, .. } => (alpha * *cap as f64).max(0.0),
        }
    }
}

/// Log-domain bigram rows for one condition.
#[derive(Clone, Debug)]
struct LogRows {
    start: Vec<f64>,
    transitions: Vec<Vec<f64>>,
    /// `ln(1 - p(eos))` per row (start first), used when eos is disallowed.
    start_no_eos: f64,
    transitions_no_eos: Vec<f64>,
}

/// A tabular reference model plus terminal reward: the full target definition.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: TaskSpec,
    vocab: Vocabulary,
    conditions: Vec<Condition>,
    rows: Vec<LogRows>,
}

impl SyntheticTask {
    pub fn from_spec(spec: TaskSpec) -> Result<Self> {
        let vocab = Vocabulary::new(spec.vocab_size, spec.max_len)?.with_eos_rule(spec.eos);
        if !(spec.beta.is_finite() && spec.beta > 0.0) {
            return Err(Error::InvalidTask(format!("beta must be positive and finite, got {}", spec.beta)));
        }
        if spec.conditions.is_empty() {
            return Err(Error::InvalidTask("at least one condition is required".into()));
        }
        let mut conditions = spec.conditions.clone();
        conditions.sort_by_key(|c| c.id);
        for (i, c) in conditions.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidTask(format!(
                    "condition ids must be exactly 0..{} (found {})",
                    conditions.len(),
                    c.id
                )));
            }
            if let Some(t) = c.tokens.iter().find(|&&t| t >= vocab.size()) {
                return Err(Error::InvalidTask(format!("condition {} has token {t} >= vocab size", c.id)));
            }
        }
        validate_reward(&spec.reward, &vocab, conditions.len())?;

        let alphabet = vocab.alphabet();
        let raw: Vec<BigramRows> = match &spec.ref_model {
            RefModelSpec::Uniform => {
                let row = vec![1.0 / alphabet as f64; alphabet];
                let rows = BigramRows { start: row.clone(), transitions: vec![row; vocab.size() as usize] };
                vec![rows; conditions.len()]
            }
            RefModelSpec::Seeded { seed, spread } => {
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(Error::InvalidTask(format!("spread must be finite and >= 0, got {spread}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..conditions.len())
                    .map(|_| BigramRows {
                        start: seeded_row(&mut rng, alphabet, *spread),
                        transitions: (0..vocab.size()).map(|_| seeded_row(&mut rng, alphabet, *spread)).collect(),
                    })
                    .collect()
            }
            RefModelSpec::Explicit { rows } => match rows.len() {
                1 => vec![rows[0].clone(); conditions.len()],
                n if n == conditions.len() => rows.clone(),
                n => {
                    return Err(Error::InvalidTask(format!(
                        "explicit ref model has {n} row sets for {} conditions",
                        conditions.len()
                    )))
                }
            },
        };
        let rows = raw
            .iter()
            .enumerate()
            .map(|(c, r)| to_log_rows(c, r, &vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, vocab, conditions, rows })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_spec(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn beta(&self) -> f64 {
        self.spec.beta
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.spec.reward
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn condition(&self, id: usize) -> Result<&Condition> {
        self.conditions
            .get(id)
            .ok_or_else(|| Error::Precondition(format!("unknown condition id {id}")))
    }

    /// Reference-model next-token distribution after `prefix` (alphabet-sized, eos last).
    pub fn ref_row(&self, condition_id: usize, prefix: &[Token]) -> Vec<f64> {
        (0..self.vocab.alphabet() as Token)
            .map(|t| self.ref_log_step(condition_id, prefix, t).exp())
            .collect()
    }

    /// `log p_ref(next | prefix, x)` under the bigram model and the eos rule.
    pub fn ref_log_step(&self, condition_id: usize, prefix: &[Token], next: Token) -> f64 {
        let rows = &self.rows[condition_id];
        let eos = self.vocab.eos();
        let eos_ok = self.vocab.eos_allowed(prefix.len());
        if next == eos && !eos_ok {
            return f64::NEG_INFINITY;
        }
        let (row, no_eos) = match prefix.last() {
            None => (&rows.start, rows.start_no_eos),
            Some(&t) => (&rows.transitions[t as usize], rows.transitions_no_eos[t as usize]),
        };
        if eos_ok {
            row[next as usize]
        } else {
            row[next as usize] - no_eos
        }
    }

    /// `log p_ref(y_{0:t} | x)`; includes the eos factor when present. Empty prefix gives 0.
    pub fn ref_log_prob(&self, x: &Condition, prefix: &TokenSequence) -> f64 {
        let tokens = prefix.tokens();
        (0..tokens.len()).map(|i| self.ref_log_step(x.id, &tokens[..i], tokens[i])).sum()
    }

    pub fn terminal_reward(&self, x: &Condition, y: &TokenSequence) -> Result<f64> {
        if !y.is_terminal() {
            return Err(Error::Contract(format!("terminal reward requested for non-terminal {:?}", y.tokens())));
        }
        Ok(self.spec.reward.evaluate(x.id, y.body(&self.vocab)))
    }

    /// `log R(x, y) = log p_ref(y | x) + r(x, y) / beta`.
    pub fn log_shaped_reward(&self, x: &Condition, y: &TokenSequence) -> Result<f64> {
        Ok(self.ref_log_prob(x, y) + self.terminal_reward(x, y)? / self.beta())
    }

    /// Prefix-extended log reward: reference log-likelihood before termination, shaped reward at it.
    pub fn log_prefix_reward(&self, x: &Condition, prefix: &TokenSequence) -> f64 {
        let base = self.ref_log_prob(x, prefix);
        if prefix.is_terminal() {
            base + self.spec.reward.evaluate(x.id, prefix.body(&self.vocab)) / self.beta()
        } else {
            base
        }
    }

    /// Draws one terminal sequence from the reference model.
    pub fn sample_reference<R: Rng + ?Sized>(&self, x: &Condition, rng: &mut R) -> TokenSequence {
        let mut seq = TokenSequence::empty();
        while !seq.is_terminal() {
            let probs = self.ref_row(x.id, seq.tokens());
            let token = sample_index(&probs, rng) as Token;
            seq.push(&self.vocab, token).expect("reference model only proposes legal tokens");
        }
        seq
    }
}

/// Inverse-CDF draw from unnormalized nonnegative weights.
pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

fn seeded_row(rng: &mut ChaCha8Rng, alphabet: usize, spread: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..alphabet).map(|_| rng.gen_range(-1.0..=1.0) * spread).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn normalized_log_row(condition: usize, what: &str, row: &[f64], alphabet: usize) -> Result<(Vec<f64>, f64)> {
    if row.len() != alphabet {
        return Err(Error::InvalidTask(format!(
            "condition {condition} {what}: row has {} entries, alphabet is {alphabet}",
            row.len()
        )));
    }
    if let Some(p) = row.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::InvalidTask(format!(
            "condition {condition} {what}: entry {p} is not strictly positive (full support required)"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::InvalidTask(format!("condition {condition} {what}: row sums to {sum}")));
    }
    let probs: Vec<f64> = row.iter().map(|p| p / sum).collect();
    let no_eos = (1.0 - probs[alphabet - 1]).ln();
    Ok((probs.iter().map(|p| p.ln()).collect(), no_eos))
}

fn to_log_rows(condition: usize, rows: &BigramRows, vocab: &Vocabulary) -> Result<LogRows> {
    let alphabet = vocab.alphabet();
    if rows.transitions.len() != vocab.size() as usize {
        return Err(Error::InvalidTask(format!(
            "condition {condition}: {} transition rows for {} tokens",
            rows.transitions.len(),
            vocab.size()
        )));
    }
    let (start, start_no_eos) = normalized_log_row(condition, "start", &rows.start, alphabet)?;
    let mut transitions = Vec::with_capacity(rows.transitions.len());
    let mut transitions_no_eos = Vec::with_capacity(rows.transitions.len());
    for (t, row) in rows.transitions.iter().enumerate() {
        let (r, n) = normalized_log_row(condition, &format!("transition {t}"), row, alphabet)?;
        transitions.push(r);
        transitions_no_eos.push(n);
    }
    Ok(LogRows { start, transitions, start_no_eos, transitions_no_eos })
}

fn validate_reward(reward: &RewardSpec, vocab: &Vocabulary, n_conditions: usize) -> Result<()> {
    match reward {
        RewardSpec::Mode { patterns, r_hi, r_lo } => {
            if !(r_hi.is_finite() && r_lo.is_finite()) {
                return Err(Error::InvalidTask("mode rewards must be finite".into()));
            }
            for p in patterns {
                if p.tokens.is_empty() {
                    return Err(Error::InvalidTask("empty mode pattern".into()));
                }
                if p.tokens.iter().any(|&t| t >= vocab.size()) {
                    return Err(Error::InvalidTask(format!("mode pattern {:?} uses a non-ordinary token", p.tokens)));
                }
                if p.condition.is_some_and(|c| c >= n_conditions) {
                    return Err(Error::InvalidTask(format!("mode pattern {:?} names an unknown condition", p.tokens)));
                }
            }
        }
        RewardSpec::Count { alpha, token, .. } => {
            if !alpha.is_finite() {
                return Err(Error::InvalidTask("count reward alpha must be finite".into()));
            }
            if *token >= vocab.size() {
                return Err(Error::InvalidTask(format!("count token {token} is not an ordinary token")));
            }
        }
    }
    Ok(())
}
