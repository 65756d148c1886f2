#![allow(dead_code)]

use flowtune::env::{
    enumerate, presets, Condition, EnumerationResult, EosRule, ModePattern, RefModelSpec, RewardSpec, SyntheticTask,
    TaskSpec, Token, TokenSequence,
};
use flowtune::nn::{Model, NetworkConfig, SequenceModel, Tape};
use flowtune::objectives::{db_trajectory_loss, fl_db_loss, tb_loss, vargrad_loss, Objective};
use flowtune::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn task(spec: TaskSpec) -> SyntheticTask {
    SyntheticTask::from_spec(spec).unwrap()
}

/// V=4, T=4, two conditions, condition-specific bigram modes.
pub fn v4t4() -> SyntheticTask {
    task(TaskSpec {
        name: "v4t4".into(),
        vocab_size: 4,
        max_len: 4,
        eos: EosRule::Anywhere,
        beta: 0.5,
        conditions: vec![Condition { id: 0, tokens: vec![0] }, Condition { id: 1, tokens: vec![3] }],
        ref_model: RefModelSpec::Seeded { seed: 21, spread: 1.5 },
        reward: RewardSpec::Mode {
            patterns: vec![
                ModePattern { tokens: vec![0, 1], condition: Some(0) },
                ModePattern { tokens: vec![2, 3], condition: None },
            ],
            r_hi: 0.8,
            r_lo: 0.1,
        },
    })
}

pub fn two_token() -> SyntheticTask {
    task(presets::two_token())
}

pub fn oracles(task: &SyntheticTask) -> Vec<EnumerationResult> {
    task.conditions().iter().map(|x| enumerate(task, x).unwrap()).collect()
}

/// Brute-force terminal list, independent of the enumerator's traversal.
pub fn all_terminals(task: &SyntheticTask) -> Vec<TokenSequence> {
    let v = task.vocab();
    let mut out = Vec::new();
    let mut frontier = vec![Vec::<Token>::new()];
    while let Some(p) = frontier.pop() {
        if v.is_terminal(&p) {
            out.push(TokenSequence::from_tokens(v, p).unwrap());
            continue;
        }
        for t in 0..v.alphabet() as Token {
            if t == v.eos() && !v.eos_allowed(p.len()) {
                continue;
            }
            let mut c = p.clone();
            c.push(t);
            frontier.push(c);
        }
    }
    out
}

pub fn small_network() -> NetworkConfig {
    NetworkConfig { embed_dim: 2, hidden: 6, flow_hidden: 5, window: 2 }
}

/// A small double-precision model with every parameter (including the zero-initialized
/// heads) drawn from `U(-scale, scale)`.
pub fn random_model(task: &SyntheticTask, rng: &mut ChaCha8Rng, scale: f64) -> Model<f64> {
    let mut m = Model::<f64>::new(small_network(), *task.vocab(), task.conditions().len(), rng).unwrap();
    let n = m.store().parameter_count();
    let flat: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    m.store_mut().set_flat_values(&flat).unwrap();
    m
}

/// One loss instance over a model: the objective, its condition and its sequences.
pub struct Instance {
    pub objective: Objective,
    pub condition: Condition,
    pub batch: Vec<(TokenSequence, f64)>,
}

impl Instance {
    pub fn random(objective: Objective, task: &SyntheticTask, rng: &mut ChaCha8Rng) -> Self {
        let x = task.conditions()[rng.gen_range(0..task.conditions().len())].clone();
        let k = if objective == Objective::Vargrad { 4 } else { 1 };
        let batch = (0..k)
            .map(|_| {
                let y = task.sample_reference(&x, rng);
                let log_r = task.log_shaped_reward(&x, &y).unwrap();
                (y, log_r)
            })
            .collect();
        Self { objective, condition: x, batch }
    }

    pub fn loss(&self, model: &Model<f64>, task: &SyntheticTask) -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new(model.store());
        let (y, log_r) = &self.batch[0];
        let x = &self.condition;
        let term = match self.objective {
            Objective::Tb => tb_loss(&mut tape, model, x, y, *log_r)?,
            Objective::Db => db_trajectory_loss(&mut tape, model, x, y, *log_r)?,
            Objective::Fldb => fl_db_loss(&mut tape, model, task, x, y)?,
            Objective::Vargrad => vargrad_loss(&mut tape, model, x, &self.batch)?,
        };
        let grads = tape.backward(term.node)?;
        Ok((term.report.loss, Some(grads.flat())))
    }

    pub fn value(&self, model: &Model<f64>, task: &SyntheticTask) -> f64 {
        self.loss(model, task).unwrap().0
    }
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over all parameters,
/// with central differences of step `eps`.
pub fn gradient_error(model: &Model<f64>, task: &SyntheticTask, inst: &Instance, eps: f64, floor: f64) -> f64 {
    let (_, grads) = inst.loss(model, task).unwrap();
    let analytic = grads.unwrap();
    let base = model.store().flat_values();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        probe.store_mut().set_flat_values(&v).unwrap();
        let up = inst.value(&probe, task);
        v[i] = base[i] - eps;
        probe.store_mut().set_flat_values(&v).unwrap();
        let down = inst.value(&probe, task);
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
