//! Balance objectives in log domain. Every state has a unique parent in a prefix
//! tree, so the backward policy is identically one and drops out of each loss.

use serde::{Deserialize, Serialize};

use crate::env::{Condition, SyntheticTask, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{NodeId, SequenceModel, Tape};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Trajectory balance with a learned per-condition `log Z`.
    Tb,
    /// Trajectory balance with `log Z` replaced by the batch mean of implicit estimates.
    Vargrad,
    /// Detailed balance with the flow head predicting `log F(s)`.
    Db,
    /// Forward-looking detailed balance over the prefix-decomposed reward.
    Fldb,
}

impl Objective {
    pub fn uses_flow(self) -> bool {
        matches!(self, Objective::Db | Objective::Fldb)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tb" => Ok(Objective::Tb),
            "vargrad" => Ok(Objective::Vargrad),
            "db" => Ok(Objective::Db),
            "fldb" => Ok(Objective::Fldb),
            other => Err(Error::Config(format!("unknown objective `{other}` (tb | vargrad | db | fldb)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Per-edge residuals (DB, FL-DB) or the single trajectory residual (TB).
    pub residuals: Vec<f64>,
    /// Implicit `log Z` estimates (VarGrad).
    pub log_z_estimates: Vec<f64>,
}

/// A recorded loss node with its values.
#[derive(Clone, Debug)]
pub struct LossTerm {
    pub node: NodeId,
    pub report: LossReport,
}

struct TrajectoryNodes {
    /// `log P_F(y_{t+1} | y_{0:t})` per step.
    log_probs: Vec<NodeId>,
    /// Flow output at each non-terminal state `y_{0:t}`.
    log_flows: Vec<Option<NodeId>>,
}

fn require_terminal(y: &TokenSequence) -> Result<()> {
    if !y.is_terminal() {
        return Err(Error::Contract(format!("loss needs a terminal sequence, got {:?}", y.tokens())));
    }
    Ok(())
}

fn record_trajectory<S: Scalar, M: SequenceModel<S>>(
    tape: &mut Tape<'_, S>,
    model: &M,
    x: &Condition,
    y: &TokenSequence,
    with_flow: bool,
) -> Result<TrajectoryNodes> {
    let tokens = y.tokens();
    let mut log_probs = Vec::with_capacity(tokens.len());
    let mut log_flows = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let step = model.record_step(tape, x, &tokens[..t], with_flow)?;
        log_probs.push(tape.pick(step.log_probs, tokens[t] as usize));
        log_flows.push(step.log_flow);
    }
    Ok(TrajectoryNodes { log_probs, log_flows })
}

fn finish<S: Scalar>(tape: &mut Tape<'_, S>, residuals: &[NodeId], estimates: Vec<f64>) -> LossTerm {
    let squares: Vec<NodeId> = residuals.iter().map(|&r| tape.square(r)).collect();
    let node = tape.sum(&squares);
    LossTerm {
        node,
        report: LossReport {
            loss: tape.scalar(node).as_f64(),
            residuals: residuals.iter().map(|&r| tape.scalar(r).as_f64()).collect(),
            log_z_estimates: estimates,
        },
    }
}

/// `(log Z(x) + sum_t log P_F - log R(x, y))^2`.
pub fn tb_loss<S: Scalar, M: SequenceModel<S>>(
    tape: &mut Tape<'_, S>,
    model: &M,
    x: &Condition,
    y: &TokenSequence,
    log_r: f64,
) -> Result<LossTerm> {
    require_terminal(y)?;
    let traj = record_trajectory(tape, model, x, y, false)?;
    let log_z = model.record_log_z(tape, x);
    let mut parts = traj.log_probs;
    parts.push(log_z);
    let total = tape.sum(&parts);
    let residual = tape.offset(total, S::of(-log_r));
    Ok(finish(tape, &[residual], Vec::new()))
}

/// Sample variance of `log R - sum_t log P_F` over `k >= 2` sequences sharing `x`.
pub fn vargrad_loss<S: Scalar, M: SequenceModel<S>>(
    tape: &mut Tape<'_, S>,
    model: &M,
    x: &Condition,
    batch: &[(TokenSequence, f64)],
) -> Result<LossTerm> {
    if batch.len() < 2 {
        return Err(Error::Precondition(format!("vargrad needs at least 2 sequences, got {}", batch.len())));
    }
    let mut estimates = Vec::with_capacity(batch.len());
    for (y, log_r) in batch {
        require_terminal(y)?;
        let traj = record_trajectory(tape, model, x, y, false)?;
        let log_pf = tape.sum(&traj.log_probs);
        let neg = tape.scale(log_pf, -S::one());
        estimates.push(tape.offset(neg, S::of(*log_r)));
    }
    let k = S::of(batch.len() as f64);
    let total = tape.sum(&estimates);
    let mean = tape.scale(total, S::one() / k);
    let deviations: Vec<NodeId> = estimates.iter().map(|&e| tape.sub(e, mean)).collect();
    let values = estimates.iter().map(|&e| tape.scalar(e).as_f64()).collect();
    let squares: Vec<NodeId> = deviations.iter().map(|&d| tape.square(d)).collect();
    let sum = tape.sum(&squares);
    let node = tape.scale(sum, S::one() / k);
    Ok(LossTerm {
        node,
        report: LossReport {
            loss: tape.scalar(node).as_f64(),
            residuals: deviations.iter().map(|&d| tape.scalar(d).as_f64()).collect(),
            log_z_estimates: values,
        },
    })
}

/// One detailed-balance edge `prefix -> next`. `log_r_next` is required when `next` is
/// terminal and replaces its flow.
pub fn db_loss<S: Scalar, M: SequenceModel<S>>(
    tape: &mut Tape<'_, S>,
    model: &M,
    x: &Condition,
    prefix: &TokenSequence,
    next: &TokenSequence,
    log_r_next: Option<f64>,
) -> Result<LossTerm> {
    let vocab = model.vocab();
    let (&token, head) = next
        .tokens()
        .split_last()
        .ok_or_else(|| Error::Contract("edge target cannot be the empty prefix".into()))?;
    if head != prefix.tokens() {
        return Err(Error::Contract(format!("{:?} is not a child of {:?}", next.tokens(), prefix.tokens())));
    }
    let step = model.record_step(tape, x, prefix.tokens(), true)?;
    let log_p = tape.pick(step.log_probs, token as usize);
    let lhs = tape.add(step.log_flow.expect("flow requested"), log_p);
    let residual = if vocab.is_terminal(next.tokens()) {
        let log_r = log_r_next.ok_or_else(|| Error::Precondition("terminal edge needs log R".into()))?;
        tape.offset(lhs, S::of(-log_r))
    } else {
        let child = model.record_step(tape, x, next.tokens(), true)?;
        tape.sub(lhs, child.log_flow.expect("flow requested"))
    };
    Ok(finish(tape, &[residual], Vec::new()))
}

/// Detailed balance summed over every edge of a terminal trajectory.
pub fn db_trajectory_loss<S: Scalar, M: SequenceModel<S>>(
    tape: &mut Tape<'_, S>,
    model: &M,
    x: &Condition,
    y: &TokenSequence,
    log_r: f64,
) -> Result<LossTerm> {
    require_terminal(y)?;
    let traj = record_trajectory(tape, model, x, y, true)?;
    let n = traj.log_probs.len();
    let mut residuals = Vec::with_capacity(n);
    for t in 0..n {
        let lhs = tape.add(traj.log_flows[t].expect("flow requested"), traj.log_probs[t]);
        let r = if t + 1 == n {
            tape.offset(lhs, S::of(-log_r))
        } else {
            tape.sub(lhs, traj.log_flows[t + 1].expect("flow requested"))
        };
        residuals.push(r);
    }
    Ok(finish(tape, &residuals, Vec::new()))
}

/// Forward-looking detailed balance with the prefix reward
/// `log R(x, y_{0:t})` (reference log-likelihood, shaped at termination):
/// per step `log F~(s_t) + log P_F + log R(s_t) - log F~(s_{t+1}) - log R(s_{t+1})`,
/// with `log F~ = 0` at the terminal state. Loss is the sum of squared residuals.
pub fn fl_db_loss<S: Scalar, M: SequenceModel<S>>(
    tape: &mut Tape<'_, S>,
    model: &M,
    task: &SyntheticTask,
    x: &Condition,
    y: &TokenSequence,
) -> Result<LossTerm> {
    require_terminal(y)?;
    let traj = record_trajectory(tape, model, x, y, true)?;
    let states = y.states(task.vocab());
    let log_rewards: Vec<f64> = states.iter().map(|s| task.log_prefix_reward(x, s)).collect();
    let n = traj.log_probs.len();
    let mut residuals = Vec::with_capacity(n);
    for t in 0..n {
        let lhs = tape.add(traj.log_flows[t].expect("flow requested"), traj.log_probs[t]);
        let lhs = if t + 1 == n { lhs } else { tape.sub(lhs, traj.log_flows[t + 1].expect("flow requested")) };
        residuals.push(tape.offset(lhs, S::of(log_rewards[t] - log_rewards[t + 1])));
    }
    Ok(finish(tape, &residuals, Vec::new()))
}

/// Per-trajectory loss for the objectives that do not need a batch (`tb`, `db`, `fldb`).
pub fn trajectory_loss<S: Scalar, M: SequenceModel<S>>(
    objective: Objective,
    tape: &mut Tape<'_, S>,
    model: &M,
    task: &SyntheticTask,
    x: &Condition,
    y: &TokenSequence,
    log_r: f64,
) -> Result<LossTerm> {
    match objective {
        Objective::Tb => tb_loss(tape, model, x, y, log_r),
        Objective::Db => db_trajectory_loss(tape, model, x, y, log_r),
        Objective::Fldb => fl_db_loss(tape, model, task, x, y),
        Objective::Vargrad => Err(Error::Precondition("vargrad is a batch objective".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{enumerate, presets, Token};
    use crate::nn::{FlowTarget, TabularModel};

    fn seq(task: &SyntheticTask, t: &[Token]) -> TokenSequence {
        TokenSequence::from_tokens(task.vocab(), t.to_vec()).unwrap()
    }

    fn two_token() -> SyntheticTask {
        SyntheticTask::from_spec(presets::two_token()).unwrap()
    }

    #[test]
    fn tb_balanced_case_is_zero() {
        let task = two_token();
        let x = &task.conditions()[0];
        let o = enumerate(&task, x).unwrap();
        let m = TabularModel::<f64>::from_oracle(&task, &[o], FlowTarget::Absolute).unwrap();
        let y = seq(&task, &[0, 0]);
        assert!((m.sequence_log_prob(x, &y).unwrap().exp() - 0.5).abs() < 1e-12);
        let mut tape = Tape::new(m.store());
        let l = tb_loss(&mut tape, &m, x, &y, 0.75f64.ln()).unwrap();
        assert!(l.report.loss < 1e-24);
    }

    #[test]
    fn tb_unbalanced_arithmetic() {
        let task = two_token();
        let x = &task.conditions()[0];
        let m = TabularModel::<f64>::uniform(&task).unwrap();
        let mut tape = Tape::new(m.store());
        let l = tb_loss(&mut tape, &m, x, &seq(&task, &[0, 1]), 0.0).unwrap();
        assert!((l.report.loss - 0.25f64.ln().powi(2)).abs() < 1e-12);
        assert!((l.report.loss - 1.9218).abs() < 1e-4);
    }

    #[test]
    fn vargrad_zero_for_equal_estimates_and_known_value() {
        let task = two_token();
        let x = &task.conditions()[0];
        let m = TabularModel::<f64>::uniform(&task).unwrap();
        // uniform policy: log P_F = ln 0.25 for every sequence, so estimates are log R - ln 0.25
        let lp = 0.25f64.ln();
        let a = seq(&task, &[0, 1]);
        let b = seq(&task, &[1, 1]);
        let mut tape = Tape::new(m.store());
        let l = vargrad_loss(&mut tape, &m, x, &[(a.clone(), 0.3), (b.clone(), 0.3)]).unwrap();
        assert!(l.report.loss.abs() < 1e-24);

        let mut tape = Tape::new(m.store());
        let l = vargrad_loss(&mut tape, &m, x, &[(a.clone(), 2f64.ln() + lp), (b.clone(), 8f64.ln() + lp)]).unwrap();
        assert!((l.report.loss - 0.4805).abs() < 1e-4);
        assert!((l.report.log_z_estimates[0] - 2f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new(m.store());
        assert!(vargrad_loss(&mut tape, &m, x, &[(a, 0.0)]).is_err());
    }

    #[test]
    fn db_single_edge_balanced() {
        // log F(prefix) = ln 2, step prob 0.5, terminal R = 1
        let task = two_token();
        let x = &task.conditions()[0];
        let mut m = TabularModel::<f64>::uniform(&task).unwrap();
        let r = m.row(x, &[0]).unwrap();
        let ft = m.flow_table();
        m.store_mut().get_mut(ft).values[r] = 2f64.ln();
        let mut tape = Tape::new(m.store());
        let l = db_loss(&mut tape, &m, x, &seq(&task, &[0]), &seq(&task, &[0, 1]), Some(0.0)).unwrap();
        assert!(l.report.residuals[0].abs() < 1e-12);
    }

    #[test]
    fn db_non_terminal_edge_is_ratio_invariant() {
        let task = SyntheticTask::from_spec(presets::count()).unwrap();
        let x = &task.conditions()[0];
        let mut rng = rand::rngs::mock::StepRng::new(1, 7919);
        let mut m = TabularModel::<f64>::random(&task, &mut rng, 1.0).unwrap();
        let (p, c) = (seq(&task, &[1]), seq(&task, &[1, 2]));
        let mut tape = Tape::new(m.store());
        let before = db_loss(&mut tape, &m, x, &p, &c, None).unwrap().report.residuals[0];
        let (rp, rc) = (m.row(x, p.tokens()).unwrap(), m.row(x, c.tokens()).unwrap());
        let ft = m.flow_table();
        m.store_mut().get_mut(ft).values[rp] += 2f64.ln();
        m.store_mut().get_mut(ft).values[rc] += 2f64.ln();
        let mut tape = Tape::new(m.store());
        let after = db_loss(&mut tape, &m, x, &p, &c, None).unwrap().report.residuals[0];
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn fl_db_zero_reward_reference_policy_telescopes() {
        let task = SyntheticTask::from_spec(presets::zero_reward()).unwrap();
        let x = &task.conditions()[0];
        let m = TabularModel::<f64>::reference(&task).unwrap();
        for y in [vec![3], vec![0, 3], vec![1, 2, 0], vec![2, 2, 2]] {
            let mut tape = Tape::new(m.store());
            let l = fl_db_loss(&mut tape, &m, &task, x, &seq(&task, &y)).unwrap();
            assert!(l.report.residuals.iter().all(|r| r.abs() < 1e-12), "{y:?}: {:?}", l.report);
        }
    }

    #[test]
    fn fl_db_single_step_collapses_to_tb_residual() {
        let task = SyntheticTask::from_spec(presets::count()).unwrap();
        let x = &task.conditions()[1];
        let mut rng = rand::rngs::mock::StepRng::new(3, 104729);
        let m = TabularModel::<f64>::random(&task, &mut rng, 1.0).unwrap();
        let y = seq(&task, &[3]);
        let log_r = task.log_shaped_reward(x, &y).unwrap();
        let mut tape = Tape::new(m.store());
        let l = fl_db_loss(&mut tape, &m, &task, x, &y).unwrap();
        // log F~(empty) + log R(empty) plays the role of log Z; log R(empty) = 0
        let log_z = m.log_flow(x, &[]).unwrap();
        let tb = log_z + m.sequence_log_prob(x, &y).unwrap() - log_r;
        assert_eq!(l.report.residuals.len(), 1);
        assert!((l.report.residuals[0] - tb).abs() < 1e-12);
    }

    #[test]
    fn losses_reject_prefixes() {
        let task = two_token();
        let x = &task.conditions()[0];
        let m = TabularModel::<f64>::uniform(&task).unwrap();
        let mut tape = Tape::new(m.store());
        assert!(tb_loss(&mut tape, &m, x, &seq(&task, &[0]), 0.0).is_err());
        assert!(fl_db_loss(&mut tape, &m, &task, x, &seq(&task, &[0])).is_err());
    }
}
