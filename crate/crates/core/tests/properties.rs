mod common;

use common::*;
use flowtune::diagnostics::{diversity, jaccard_distance, tvd, Distribution};
use flowtune::env::{TokenSequence, Vocabulary};
use flowtune::training::{Prioritization, ReplayBuffer};
use proptest::prelude::*;
use rand::Rng;

fn sequences() -> (Vocabulary, Vec<TokenSequence>) {
    let task = v4t4();
    (*task.vocab(), all_terminals(&task))
}

fn distribution(all: &[TokenSequence], weights: &[f64]) -> Distribution {
    let total: f64 = weights.iter().sum();
    Distribution { condition_id: 0, sequences: all.to_vec(), probs: weights.iter().map(|w| w / total).collect() }
}

proptest! {
    #[test]
    fn buffer_never_exceeds_capacity(capacity in 1usize..40, inserts in prop::collection::vec(-5.0f64..5.0, 0..200)) {
        let (_, all) = sequences();
        let mut b = ReplayBuffer::new(capacity, 1.0, Prioritization::SoftmaxLogR).unwrap();
        for (i, r) in inserts.iter().enumerate() {
            b.insert(0, all[i % all.len()].clone(), *r);
            prop_assert!(b.len() <= capacity);
        }
        prop_assert_eq!(b.len(), inserts.len().min(capacity));
        let kept: Vec<f64> = b.entries().map(|e| e.log_r).collect();
        prop_assert_eq!(&kept[..], &inserts[inserts.len() - b.len()..]);
    }

    #[test]
    fn tvd_is_a_bounded_symmetric_metric(seed in any::<u64>()) {
        let (_, all) = sequences();
        let mut r = rng(seed);
        let wp: Vec<f64> = (0..all.len()).map(|_| r.gen_range(0.0..1.0)).collect();
        let wq: Vec<f64> = (0..all.len()).map(|_| r.gen_range(0.0..1.0)).collect();
        let (p, q) = (distribution(&all, &wp), distribution(&all, &wq));
        let (pq, qp) = (tvd(&p, &q).unwrap(), tvd(&q, &p).unwrap());
        prop_assert!((pq - qp).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!(tvd(&p, &p).unwrap() < 1e-15);
    }

    #[test]
    fn diversity_ignores_sample_order(picks in prop::collection::vec(0usize..200, 2..12), rot in 0usize..12) {
        let (v, all) = sequences();
        let samples: Vec<TokenSequence> = picks.iter().map(|i| all[i % all.len()].clone()).collect();
        let mut shuffled = samples.clone();
        shuffled.rotate_left(rot % samples.len());
        shuffled.reverse();
        let (d1, d2) = (diversity(&v, &samples).unwrap(), diversity(&v, &shuffled).unwrap());
        prop_assert!((d1 - d2).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d1));
    }

    #[test]
    fn jaccard_is_symmetric(i in 0usize..500, j in 0usize..500) {
        let (v, all) = sequences();
        let (a, b) = (&all[i % all.len()], &all[j % all.len()]);
        prop_assert_eq!(jaccard_distance(&v, a, b), jaccard_distance(&v, b, a));
        prop_assert_eq!(jaccard_distance(&v, a, a), 0.0);
    }
}
