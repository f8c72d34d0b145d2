use expertmix::kernels::path_loss;
use expertmix::oracle::{count_paths, exhaustive_best, DEFAULT_PATH_LIMIT};
use expertmix::{best_competitor, class_budget, cyclic_kernel, fixed_kernel, switching_kernel, TransitionKernel};
use proptest::prelude::*;

fn table(m: usize, t: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, m), t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dp_equals_enumeration_for_switching(sw in 0.01f64..0.99, losses in table(3, 1..6)) {
        let k = switching_kernel(3, sw).unwrap();
        let dp = best_competitor(&k, &losses).unwrap();
        let brute = exhaustive_best(&k, &losses, DEFAULT_PATH_LIMIT).unwrap();
        prop_assert_eq!(&dp.classes, &brute.classes);
        prop_assert_eq!(dp.cumulative_loss, brute.cumulative_loss);
    }

    #[test]
    fn dp_path_is_in_class_and_no_worse_than_a_walk(
        losses in table(4, 1..30),
        walk in prop::collection::vec(0usize..4, 30),
    ) {
        let k = cyclic_kernel(4).unwrap();
        let dp = best_competitor(&k, &losses).unwrap();
        prop_assert!(class_budget(&k, &dp.classes).is_ok());
        approx::assert_relative_eq!(path_loss(&dp.classes, &losses), dp.cumulative_loss, epsilon = 1e-12);

        // Any successor-following walk is an in-class path.
        let mut path = vec![walk[0] % k.classes(1).len()];
        for t in 1..losses.len() {
            let succ = k.successors(t, path[t - 1]);
            path.push(succ[walk[t] % succ.len()].0);
        }
        let classes: Vec<_> = path.iter().enumerate().map(|(t, c)| k.classes(t + 1)[*c].clone()).collect();
        prop_assert!(dp.cumulative_loss <= path_loss(&classes, &losses) + 1e-12);
    }
}

#[test]
fn fixed_competitor_is_the_best_column() {
    let k = fixed_kernel(3).unwrap();
    let losses = vec![vec![1.0, 0.5, 0.9], vec![0.0, 0.7, 0.2], vec![0.4, 0.1, 0.0]];
    let dp = best_competitor(&k, &losses).unwrap();
    assert_eq!(dp.selections(), vec![2, 2, 2]);
    assert_eq!(dp.cumulative_loss, 1.1);
}

#[test]
fn path_counts() {
    assert_eq!(count_paths(&fixed_kernel(3).unwrap(), 10), 3);
    assert_eq!(count_paths(&cyclic_kernel(3).unwrap(), 10), 9);
    assert_eq!(count_paths(&switching_kernel(2, 0.1).unwrap(), 2), 4);
    assert_eq!(count_paths(&switching_kernel(3, 0.1).unwrap(), 5), 3u128.pow(5));
}
