//! Plasticity and distribution-match measurements: dormant-neuron scores, exact
//! terminal distributions of a policy, total variation, diversity and mode coverage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_budget, enumerate, Condition, EnumerationResult, RewardSpec, SyntheticTask, Token, TokenSequence, Vocabulary, DEFAULT_ENUMERATION_LIMIT};
use crate::error::{Error, Result};
use crate::nn::{ActivationTrace, SequenceModel};
use crate::scalar::Scalar;
use crate::training::rollout;

/// Minimum probe batch accepted by [`dormant_ratio`].
pub const MIN_PROBE_SIZE: usize = 32;
/// Probe prefixes drawn per run.
pub const PROBE_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDormancy {
    pub name: String,
    /// `mean|h_i|` divided by the layer average of that quantity.
    pub scores: Vec<f64>,
    pub dormant_fraction: f64,
    /// Set when every activation in the layer is exactly zero; all neurons then count as dormant.
    pub all_zero: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DormantReport {
    pub tau: f64,
    pub probe_size: usize,
    pub layers: Vec<LayerDormancy>,
    /// Dormant neurons over all layers divided by total neurons.
    pub overall_fraction: f64,
}

impl DormantReport {
    pub fn layer(&self, name: &str) -> Option<&LayerDormancy> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Normalized activity scores from per-neuron mean absolute activations.
/// Returns `None` for a layer with no activity at all.
pub fn dormancy_scores(mean_abs: &[f64]) -> Option<Vec<f64>> {
    let layer_mean = mean_abs.iter().sum::<f64>() / mean_abs.len() as f64;
    if layer_mean > 0.0 {
        Some(mean_abs.iter().map(|m| m / layer_mean).collect())
    } else {
        None
    }
}

pub fn dormant_ratio(trace: &ActivationTrace, tau: f64) -> Result<DormantReport> {
    let probe_size = trace.layers.first().map_or(0, |l| l.rows.len());
    if probe_size < MIN_PROBE_SIZE {
        return Err(Error::Precondition(format!("probe batch of {probe_size} is below {MIN_PROBE_SIZE}")));
    }
    let mut layers = Vec::with_capacity(trace.layers.len());
    let (mut dormant, mut total) = (0usize, 0usize);
    for layer in &trace.layers {
        let width = layer.width();
        if layer.rows.len() != probe_size || layer.rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape(format!("ragged activation trace in layer {}", layer.name)));
        }
        let mut mean_abs = vec![0.0; width];
        for row in &layer.rows {
            for (m, h) in mean_abs.iter_mut().zip(row) {
                *m += h.abs();
            }
        }
        mean_abs.iter_mut().for_each(|m| *m /= probe_size as f64);
        let (scores, all_zero) = match dormancy_scores(&mean_abs) {
            Some(s) => (s, false),
            None => (vec![0.0; width], true),
        };
        let n_dormant = scores.iter().filter(|&&s| s <= tau).count();
        dormant += n_dormant;
        total += width;
        layers.push(LayerDormancy {
            name: layer.name.clone(),
            dormant_fraction: n_dormant as f64 / width.max(1) as f64,
            scores,
            all_zero,
        });
    }
    Ok(DormantReport { tau, probe_size, layers, overall_fraction: dormant as f64 / total.max(1) as f64 })
}

/// `n` non-terminal prefixes (with their conditions) drawn from the reference model:
/// a uniform condition, a reference rollout, then a uniform cut point before termination.
pub fn probe_set(task: &SyntheticTask, seed: u64, n: usize) -> Vec<(Condition, Vec<Token>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = &task.conditions()[rng.gen_range(0..task.conditions().len())];
            let y = task.sample_reference(x, &mut rng);
            let cut = rng.gen_range(0..y.len());
            (x.clone(), y.tokens()[..cut].to_vec())
        })
        .collect()
}

/// A distribution over the full terminal set of one condition, in enumeration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub condition_id: usize,
    pub sequences: Vec<TokenSequence>,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn from_enumeration(oracle: &EnumerationResult) -> Self {
        Self {
            condition_id: oracle.condition_id,
            sequences: oracle.entries.iter().map(|e| e.sequence.clone()).collect(),
            probs: oracle.p_star(),
        }
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Terminal probabilities `exp(sum_t log P_F)` of every sequence, by walking the prefix tree.
pub fn exact_policy_distribution<S: Scalar, M: SequenceModel<S>>(
    model: &M,
    task: &SyntheticTask,
    x: &Condition,
) -> Result<Distribution> {
    check_budget(task, DEFAULT_ENUMERATION_LIMIT)?;
    let vocab = *task.vocab();
    let mut out = Distribution { condition_id: x.id, sequences: Vec::new(), probs: Vec::new() };
    let mut prefix = Vec::with_capacity(vocab.max_len() + 1);
    walk(model, &vocab, x, &mut prefix, 0.0, &mut out)?;
    Ok(out)
}

fn walk<S: Scalar, M: SequenceModel<S>>(
    model: &M,
    vocab: &Vocabulary,
    x: &Condition,
    prefix: &mut Vec<Token>,
    log_p: f64,
    out: &mut Distribution,
) -> Result<()> {
    if vocab.is_terminal(prefix) {
        out.sequences.push(TokenSequence::from_tokens(vocab, prefix.clone())?);
        out.probs.push(log_p.exp());
        return Ok(());
    }
    let row = model.log_policy(x, prefix)?;
    for t in 0..vocab.alphabet() as Token {
        if t == vocab.eos() && !vocab.eos_allowed(prefix.len()) {
            continue;
        }
        prefix.push(t);
        walk(model, vocab, x, prefix, log_p + row[t as usize].as_f64(), out)?;
        prefix.pop();
    }
    Ok(())
}

/// Half the L1 distance between two distributions over the same terminal index.
pub fn tvd(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.sequences != q.sequences {
        return Err(Error::Precondition(format!(
            "distributions index different terminal sets ({} vs {} sequences)",
            p.sequences.len(),
            q.sequences.len()
        )));
    }
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn token_counts(vocab: &Vocabulary, y: &TokenSequence) -> Vec<usize> {
    let mut counts = vec![0; vocab.size() as usize];
    for &t in y.body(vocab) {
        counts[t as usize] += 1;
    }
    counts
}

/// Multiset Jaccard distance between the ordinary tokens of two sequences.
pub fn jaccard_distance(vocab: &Vocabulary, a: &TokenSequence, b: &TokenSequence) -> f64 {
    let (ca, cb) = (token_counts(vocab, a), token_counts(vocab, b));
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in ca.iter().zip(&cb) {
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Mean pairwise multiset Jaccard distance, eos excluded.
pub fn diversity(vocab: &Vocabulary, samples: &[TokenSequence]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Precondition(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    let counts: Vec<Vec<usize>> = samples.iter().map(|y| token_counts(vocab, y)).collect();
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..counts.len() {
        for j in i + 1..counts.len() {
            let (mut inter, mut union) = (0usize, 0usize);
            for (x, y) in counts[i].iter().zip(&counts[j]) {
                inter += x.min(y);
                union += x.max(y);
            }
            if union > 0 {
                total += 1.0 - inter as f64 / union as f64;
            }
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Number of mode patterns found in at least one sample of a condition they apply to.
pub fn mode_coverage(task: &SyntheticTask, samples: &[(usize, TokenSequence)]) -> Result<(usize, usize)> {
    let RewardSpec::Mode { patterns, .. } = task.reward_spec() else {
        return Err(Error::Precondition(format!("task `{}` has no mode patterns", task.name())));
    };
    let vocab = task.vocab();
    let covered = patterns
        .iter()
        .filter(|p| samples.iter().any(|(c, y)| p.applies_to(*c) && p.occurs_in(y.body(vocab))))
        .count();
    Ok((covered, patterns.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEval {
    pub condition_id: usize,
    /// Present when the task is small enough to enumerate.
    pub tvd: Option<f64>,
    /// Entropy of the policy's exact terminal distribution, when enumerable.
    pub entropy: Option<f64>,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples_per_condition: usize,
    pub conditions: Vec<ConditionEval>,
    pub mean_tvd: Option<f64>,
    pub max_tvd: Option<f64>,
    #[serde(rename = "mean_logR")]
    pub mean_log_r: f64,
    #[serde(rename = "max_logR")]
    pub max_log_r: f64,
    pub mean_reward: f64,
    pub max_reward: f64,
    /// Mean over conditions of per-condition diversity.
    pub diversity: f64,
    pub diversity_metric: String,
    pub modes_covered: Option<usize>,
    pub modes_total: Option<usize>,
}

/// Samples `n` sequences per condition at temperature 1 and, for enumerable tasks,
/// compares the exact terminal distribution against `oracles` (computed when absent).
pub fn evaluate<S: Scalar, M: SequenceModel<S>, R: Rng + ?Sized>(
    model: &M,
    task: &SyntheticTask,
    n: usize,
    rng: &mut R,
    oracles: Option<&[EnumerationResult]>,
) -> Result<EvalReport> {
    if n < 2 {
        return Err(Error::Precondition(format!("evaluation needs at least 2 samples per condition, got {n}")));
    }
    let enumerable = check_budget(task, DEFAULT_ENUMERATION_LIMIT).is_ok();
    let computed;
    let oracles = match oracles {
        Some(o) => Some(o),
        None if enumerable => {
            computed = task.conditions().iter().map(|x| enumerate(task, x)).collect::<Result<Vec<_>>>()?;
            Some(computed.as_slice())
        }
        None => None,
    };
    let mut conditions = Vec::new();
    let mut all = Vec::new();
    let (mut sum_log_r, mut max_log_r, mut sum_r, mut max_r) = (0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY);
    for x in task.conditions() {
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let (y, log_r) = rollout(model, task, x, rng, 1.0)?;
            let r = task.terminal_reward(x, &y)?;
            sum_log_r += log_r;
            max_log_r = max_log_r.max(log_r);
            sum_r += r;
            max_r = max_r.max(r);
            ys.push(y);
        }
        let (tvd_x, entropy) = match oracles {
            Some(o) => {
                let oracle = o
                    .iter()
                    .find(|e| e.condition_id == x.id)
                    .ok_or_else(|| Error::Precondition(format!("no oracle for condition {}", x.id)))?;
                let p = exact_policy_distribution(model, task, x)?;
                (Some(tvd(&p, &Distribution::from_enumeration(oracle))?), Some(p.entropy()))
            }
            None => (None, None),
        };
        conditions.push(ConditionEval { condition_id: x.id, tvd: tvd_x, entropy, diversity: diversity(task.vocab(), &ys)? });
        all.extend(ys.into_iter().map(|y| (x.id, y)));
    }
    let tvds: Vec<f64> = conditions.iter().filter_map(|c| c.tvd).collect();
    let (modes_covered, modes_total) = match mode_coverage(task, &all) {
        Ok((c, t)) => (Some(c), Some(t)),
        Err(_) => (None, None),
    };
    let count = all.len() as f64;
    Ok(EvalReport {
        samples_per_condition: n,
        mean_tvd: (!tvds.is_empty()).then(|| tvds.iter().sum::<f64>() / tvds.len() as f64),
        max_tvd: tvds.iter().copied().reduce(f64::max),
        mean_log_r: sum_log_r / count,
        max_log_r,
        mean_reward: sum_r / count,
        max_reward: max_r,
        diversity: conditions.iter().map(|c| c.diversity).sum::<f64>() / conditions.len() as f64,
        diversity_metric: "multiset-jaccard".into(),
        modes_covered,
        modes_total,
        conditions,
    })
}
