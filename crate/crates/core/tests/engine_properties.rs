use std::sync::Arc;

use expertmix::oracle::{strategy_mixture_reference, trajectory_reference, DEFAULT_PATH_LIMIT};
use expertmix::{
    cyclic_kernel, fixed_kernel, switching_kernel, Aggregator, ClassParams, LossVector, SparseKernel,
    TransitionKernel,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kernel(which: u8, m: usize) -> Arc<dyn TransitionKernel> {
    Arc::new(match which % 3 {
        0 => fixed_kernel(m).unwrap(),
        1 => cyclic_kernel(m).unwrap(),
        _ => switching_kernel(m, 0.05).unwrap(),
    })
}

/// Probabilities before every round and after the last one.
fn trace(kernel: Arc<dyn TransitionKernel>, gamma: f64, table: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut engine = Aggregator::new(kernel, gamma).unwrap();
    let mut out = Vec::new();
    for l in table {
        out.push(engine.begin_round().into_inner());
        engine.observe(&LossVector::untagged(l.clone()).unwrap()).unwrap();
    }
    out.push(engine.probabilities().into_inner());
    out
}

fn max_rel(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| {
            let s = x.abs().max(y.abs());
            if s == 0.0 { 0.0 } else { (x - y).abs() / s }
        })
        .fold(0.0, f64::max)
}

fn table_strategy(m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, m), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translations_leave_probabilities_unchanged(
        which in 0u8..3,
        table in (2usize..5).prop_flat_map(table_strategy),
        shifts in prop::collection::vec(-1e3f64..1e3, 40),
    ) {
        let m = table[0].len();
        let moved: Vec<Vec<f64>> = table
            .iter()
            .zip(&shifts)
            .map(|(row, c)| row.iter().map(|x| x + c).collect())
            .collect();
        let a = trace(kernel(which, m), 1.3, &table);
        let b = trace(kernel(which, m), 1.3, &moved);
        prop_assert!(max_rel(&a, &b) <= 1e-9, "{}", max_rel(&a, &b));
    }

    #[test]
    fn scaling_leaves_probabilities_unchanged(
        which in 0u8..3,
        table in table_strategy(3),
        exponent in -6i32..=6,
    ) {
        let s = 10f64.powi(exponent);
        let scaled: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|x| s * x).collect()).collect();
        let a = trace(kernel(which, 3), 0.8, &table);
        let b = trace(kernel(which, 3), 0.8, &scaled);
        prop_assert!(max_rel(&a, &b) <= 1e-9, "{}", max_rel(&a, &b));
    }

    #[test]
    fn common_log_weight_shift_is_invisible(
        which in 0u8..3,
        table in table_strategy(3),
        shift in -500.0f64..500.0,
        at in 0usize..40,
    ) {
        let at = at % table.len();
        let k = kernel(which, 3);
        let mut plain = Aggregator::new(k.clone(), 1.0).unwrap();
        let mut shifted = Aggregator::new(k, 1.0).unwrap();
        for (t, l) in table.iter().enumerate() {
            if t == at {
                shifted.shift_log_weights(shift);
            }
            let p = plain.begin_round().into_inner();
            let q = shifted.begin_round().into_inner();
            prop_assert!(max_rel(&[p], &[q]) <= 1e-9);
            let l = LossVector::untagged(l.clone()).unwrap();
            plain.observe(&l).unwrap();
            shifted.observe(&l).unwrap();
        }
    }

    #[test]
    fn every_emitted_vector_is_a_simplex_point(which in 0u8..3, table in table_strategy(4)) {
        for p in trace(kernel(which, 4), 2.0, &table) {
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn cyclic_two_experts_matches_trajectories_every_round() {
    let k = Arc::new(cyclic_kernel(2).unwrap());
    let table: Vec<Vec<f64>> = (0..8)
        .map(|t| vec![(t as f64 * 0.7).sin(), (t as f64 * 1.3).cos()])
        .collect();
    let gamma = 1.288_841_672_781_120_8;
    let reference = trajectory_reference(k.as_ref(), &table, gamma).unwrap();
    let engine_probs = trace(k.clone(), gamma, &table);
    for (t, log_w) in reference.iter().enumerate() {
        let classes = k.classes(t + 1);
        let mut mass = [0.0; 2];
        for (c, w) in classes.iter().zip(log_w) {
            mass[c.expert()] += w.exp();
        }
        let total = mass[0] + mass[1];
        for m in 0..2 {
            approx::assert_relative_eq!(engine_probs[t][m], mass[m] / total, max_relative = 1e-9);
        }
    }
}

#[test]
fn single_expert_rounds() {
    let mut engine = Aggregator::new(Arc::new(fixed_kernel(1).unwrap()), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for x in [3.0, -7.5, 1e6, 0.0] {
        let (p, i, _) = engine.run_round(&LossVector::untagged(vec![x]).unwrap(), &mut rng).unwrap();
        assert_eq!(p.values(), &[1.0]);
        assert_eq!(i, 0);
    }
}

#[test]
fn stochastic_dense_kernel_matches_strategy_mixture_at_constant_rate() {
    // Three experts, classes = experts, a lazy random walk on a triangle.
    let matrix = vec![
        vec![0.5, 0.25, 0.25],
        vec![0.1, 0.8, 0.1],
        vec![0.3, 0.3, 0.4],
    ];
    let classes = (0..3).map(|m| ClassParams::new(vec![m])).collect();
    let k = Arc::new(
        SparseKernel::from_dense("triangle", 3, classes, vec![0.2, 0.3, 0.5], &matrix, None).unwrap(),
    );
    let table = vec![
        vec![0.3, -1.0, 2.0],
        vec![1.5, 0.2, -0.4],
        vec![0.0, 0.9, 0.1],
        vec![-2.0, 0.5, 0.5],
    ];
    let eta = 0.7;
    let reference = strategy_mixture_reference(k.as_ref(), &table, eta, DEFAULT_PATH_LIMIT).unwrap();
    let mut engine = Aggregator::with_constant_rate(k, eta).unwrap();
    for (t, l) in table.iter().enumerate() {
        let p = engine.begin_round();
        for (a, b) in p.values().iter().zip(reference[t].values()) {
            approx::assert_relative_eq!(*a, *b, max_relative = 1e-9);
        }
        engine.observe(&LossVector::untagged(l.clone()).unwrap()).unwrap();
    }
}
