mod common;

use common::*;
use flowtune::diagnostics::{exact_policy_distribution, tvd, Distribution};
use flowtune::env::{presets, SyntheticTask, TokenSequence};
use flowtune::nn::{FlowTarget, Model, NetworkConfig, SequenceModel, TabularModel, Tape};
use flowtune::objectives::{db_loss, db_trajectory_loss, fl_db_loss, tb_loss, vargrad_loss};
use rand::Rng;

fn prefix(task: &SyntheticTask, y: &TokenSequence, t: usize) -> TokenSequence {
    TokenSequence::from_tokens(task.vocab(), y.tokens()[..t].to_vec()).unwrap()
}

#[test]
fn oracle_parameters_zero_every_loss() {
    for task in [two_token(), v4t4(), task(presets::count())] {
        let oracles = oracles(&task);
        let abs = TabularModel::<f64>::from_oracle(&task, &oracles, FlowTarget::Absolute).unwrap();
        let fl = TabularModel::<f64>::from_oracle(&task, &oracles, FlowTarget::ForwardLooking).unwrap();
        for x in task.conditions() {
            for y in all_terminals(&task) {
                let log_r = task.log_shaped_reward(x, &y).unwrap();
                let mut tape = Tape::new(abs.store());
                assert!(tb_loss(&mut tape, &abs, x, &y, log_r).unwrap().report.loss <= 1e-10);
                for t in 0..y.len() {
                    let next = prefix(&task, &y, t + 1);
                    let r_next = next.is_terminal().then_some(log_r);
                    let l = db_loss(&mut tape, &abs, x, &prefix(&task, &y, t), &next, r_next).unwrap();
                    assert!(l.report.loss <= 1e-10, "{}: edge {t} of {:?}", task.name(), y.tokens());
                }
                let mut tape = Tape::new(fl.store());
                assert!(fl_db_loss(&mut tape, &fl, &task, x, &y).unwrap().report.loss <= 1e-10);
            }
        }
    }
}

#[test]
fn vargrad_is_shift_invariant() {
    let task = v4t4();
    let mut r = rng(4);
    let model = random_model(&task, &mut r, 0.7);
    let x = &task.conditions()[1];
    let batch: Vec<(TokenSequence, f64)> =
        (0..6).map(|_| (task.sample_reference(x, &mut r), r.gen_range(-3.0..3.0))).collect();
    let shifted: Vec<_> = batch.iter().map(|(y, l)| (y.clone(), l + 5.0)).collect();
    let mut tape = Tape::new(model.store());
    let a = vargrad_loss(&mut tape, &model, x, &batch).unwrap().report.loss;
    let b = vargrad_loss(&mut tape, &model, x, &shifted).unwrap().report.loss;
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
}

#[test]
fn db_on_reward_scaled_flows_equals_fl_db() {
    let task = v4t4();
    let mut r = rng(8);
    for _ in 0..5 {
        let fl = TabularModel::<f64>::random(&task, &mut r, 1.5).unwrap();
        let mut abs = fl.clone();
        let flows = abs.flow_table();
        for x in task.conditions() {
            for y in all_terminals(&task) {
                for t in 0..y.len() {
                    let p = prefix(&task, &y, t);
                    let row = abs.row(x, p.tokens()).unwrap();
                    let lifted = fl.store().get(flows).values[row] + task.log_prefix_reward(x, &p);
                    abs.store_mut().get_mut(flows).values[row] = lifted;
                }
            }
        }
        for x in task.conditions() {
            for y in all_terminals(&task) {
                let log_r = task.log_shaped_reward(x, &y).unwrap();
                let mut t1 = Tape::new(abs.store());
                let d = db_trajectory_loss(&mut t1, &abs, x, &y, log_r).unwrap().report.residuals;
                let mut t2 = Tape::new(fl.store());
                let f = fl_db_loss(&mut t2, &fl, &task, x, &y).unwrap().report.residuals;
                assert_eq!(d.len(), f.len());
                for (a, b) in d.iter().zip(&f) {
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn zero_trajectory_loss_implies_matching_distribution() {
    // Parameters found by the oracle are the only ones with zero TB loss everywhere;
    // confirm the sound direction on the policy they induce.
    for task in [two_token(), v4t4()] {
        let oracles = oracles(&task);
        let m = TabularModel::<f64>::from_oracle(&task, &oracles, FlowTarget::Absolute).unwrap();
        for (x, o) in task.conditions().iter().zip(&oracles) {
            let worst = all_terminals(&task)
                .iter()
                .map(|y| {
                    let mut tape = Tape::new(m.store());
                    tb_loss(&mut tape, &m, x, y, task.log_shaped_reward(x, y).unwrap()).unwrap().report.loss
                })
                .fold(0.0, f64::max);
            assert!(worst <= 1e-10);
            let p = exact_policy_distribution(&m, &task, x).unwrap();
            assert!(tvd(&p, &Distribution::from_enumeration(o)).unwrap() <= 1e-4);
        }
    }
}

#[test]
fn exact_distributions_are_normalized() {
    let task = v4t4();
    let mut r = rng(12);
    for _ in 0..50 {
        let m = TabularModel::<f64>::random(&task, &mut r, 3.0).unwrap();
        for x in task.conditions() {
            let d = exact_policy_distribution(&m, &task, x).unwrap();
            assert!((d.total() - 1.0).abs() <= 1e-6);
        }
    }
    let v3 = task_v3t3();
    let m = random_model(&v3, &mut r, 1.0);
    let total: f64 = all_terminals(&v3).iter().map(|y| m.sequence_log_prob(&v3.conditions()[0], y).unwrap().exp()).sum();
    assert!((total - 1.0).abs() <= 1e-6);
}

fn task_v3t3() -> SyntheticTask {
    task(presets::zero_reward())
}

#[test]
fn sequence_log_prob_recomputes_from_steps() {
    let task = v4t4();
    let mut r = rng(13);
    let m = random_model(&task, &mut r, 1.0);
    let x = &task.conditions()[0];
    for _ in 0..20 {
        let y = task.sample_reference(x, &mut r);
        let direct: f64 = (0..y.len()).map(|t| m.forward(x, &y.tokens()[..t]).unwrap().log_probs[y.tokens()[t] as usize]).sum();
        assert!((m.sequence_log_prob(x, &y).unwrap() - direct).abs() < 1e-12);
    }
    let zero = Model::<f64>::new(NetworkConfig::default(), *task.vocab(), 2, &mut r).unwrap();
    let y = TokenSequence::from_tokens(task.vocab(), vec![1, 4]).unwrap();
    assert!((zero.sequence_log_prob(x, &y).unwrap() - 2.0 * (1.0f64 / 5.0).ln()).abs() < 1e-12);
}

#[test]
fn untrained_policy_tvd_matches_independent_uniform_computation() {
    let task = task(presets::eight_modes());
    let mut r = rng(0);
    let model = Model::<f32>::new(NetworkConfig::default(), *task.vocab(), 2, &mut r).unwrap();
    let alphabet = task.vocab().alphabet() as f64;
    for (x, o) in task.conditions().iter().zip(oracles(&task)) {
        let expected: f64 =
            0.5 * o.entries.iter().map(|e| (alphabet.powi(-(e.sequence.len() as i32)) - e.p_star).abs()).sum::<f64>();
        let p = exact_policy_distribution(&model, &task, x).unwrap();
        let got = tvd(&p, &Distribution::from_enumeration(&o)).unwrap();
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }
}
