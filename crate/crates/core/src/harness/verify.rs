//! Desk-scale oracle suite: the engine against every brute-force reference
//! on random tables. Backs the `verify` subcommand.

use std::sync::Arc;

use rand::Rng;

use crate::aggregator::Aggregator;
use crate::error::Result;
use crate::kernels::{
    best_competitor, cyclic_kernel, fixed_kernel, switching_kernel, SparseKernel, TransitionKernel,
};
use crate::oracle::{ewa_reference, exhaustive_best, strategy_mixture_reference, trajectory_reference, DEFAULT_PATH_LIMIT};
use crate::stats::LossVector;

use super::experiment::stream_rng;

/// Agreement tolerance between engine and references.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest relative (probabilities) or absolute (log weights) error seen.
    pub max_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn random_table<R: Rng>(rng: &mut R, rounds: usize, experts: usize) -> Vec<Vec<f64>> {
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    let offset = rng.random_range(-5.0..5.0);
    (0..rounds)
        .map(|_| (0..experts).map(|_| offset + scale * rng.random::<f64>()).collect())
        .collect()
}

fn play(engine: &mut Aggregator, l: &[f64]) -> Result<()> {
    engine.begin_round();
    engine.observe(&LossVector::untagged(l.to_vec())?)?;
    Ok(())
}

/// Fixed kernel with a constant rate against the exponentially weighted
/// average forecaster.
pub fn check_ewa(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = stream_rng(seed, 11);
    let mut out = CheckOutcome { name: "ewa-reduction", cases, failures: 0, max_error: 0.0 };
    for _ in 0..cases {
        let m = rng.random_range(1..=5);
        let t = rng.random_range(1..=50);
        let eta = rng.random_range(0.01..2.0);
        let table = random_table(&mut rng, t, m);
        let reference = ewa_reference(&table, eta)?;
        let mut engine = Aggregator::with_constant_rate(Arc::new(fixed_kernel(m)?), eta)?;
        let mut worst: f64 = 0.0;
        for (k, l) in table.iter().enumerate() {
            play(&mut engine, l)?;
            for (a, b) in engine.probabilities().values().iter().zip(reference[k + 1].values()) {
                worst = worst.max(relative_error(*a, *b));
            }
        }
        out.max_error = out.max_error.max(worst);
        out.failures += usize::from(worst > ORACLE_TOLERANCE);
    }
    Ok(out)
}

/// Cyclic kernel with the adaptive rate against per-trajectory recursion.
pub fn check_trajectories(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = stream_rng(seed, 12);
    let mut out = CheckOutcome { name: "trajectory-equivalence", cases, failures: 0, max_error: 0.0 };
    for _ in 0..cases {
        let m = rng.random_range(1..=4);
        let t = rng.random_range(1..=32);
        let gamma = rng.random_range(0.1..3.0);
        let table = random_table(&mut rng, t, m);
        let kernel = Arc::new(cyclic_kernel(m)?);
        let reference = trajectory_reference(kernel.as_ref(), &table, gamma)?;
        let mut engine = Aggregator::new(kernel, gamma)?;
        let mut worst: f64 = 0.0;
        for (k, l) in table.iter().enumerate() {
            play(&mut engine, l)?;
            for (a, b) in engine.log_weights().iter().zip(&reference[k + 1]) {
                worst = worst.max((a - b).abs());
            }
        }
        out.max_error = out.max_error.max(worst);
        out.failures += usize::from(worst > ORACLE_TOLERANCE);
    }
    Ok(out)
}

fn random_builtin<R: Rng>(rng: &mut R, m: usize) -> Result<SparseKernel> {
    match rng.random_range(0..3) {
        0 => fixed_kernel(m),
        1 => cyclic_kernel(m),
        _ => switching_kernel(m.max(2), rng.random_range(0.01..0.99)),
    }
}

/// Dynamic-programming competitor against exhaustive enumeration.
pub fn check_dp(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = stream_rng(seed, 13);
    let mut out = CheckOutcome { name: "dp-vs-enumeration", cases, failures: 0, max_error: 0.0 };
    for _ in 0..cases {
        let m = rng.random_range(1..=3);
        let t = rng.random_range(1..=6);
        let kernel = random_builtin(&mut rng, m)?;
        let table = random_table(&mut rng, t, kernel.num_experts());
        let dp = best_competitor(&kernel, &table)?;
        let brute = exhaustive_best(&kernel, &table, DEFAULT_PATH_LIMIT)?;
        let same = dp.classes == brute.classes && dp.cumulative_loss == brute.cumulative_loss;
        out.failures += usize::from(!same);
        out.max_error = out.max_error.max((dp.cumulative_loss - brute.cumulative_loss).abs());
    }
    Ok(out)
}

/// Any built-in kernel with a constant rate against the explicit mixture of
/// all in-class strategies.
pub fn check_strategy_mixture(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = stream_rng(seed, 14);
    let mut out = CheckOutcome { name: "strategy-mixture", cases, failures: 0, max_error: 0.0 };
    for _ in 0..cases {
        let m = rng.random_range(2..=3);
        let t = rng.random_range(1..=5);
        let eta = rng.random_range(0.05..2.0);
        let kernel = Arc::new(random_builtin(&mut rng, m)?);
        let table = random_table(&mut rng, t, m);
        let reference = strategy_mixture_reference(kernel.as_ref(), &table, eta, DEFAULT_PATH_LIMIT)?;
        let mut engine = Aggregator::with_constant_rate(kernel, eta)?;
        let mut worst: f64 = 0.0;
        for (k, l) in table.iter().enumerate() {
            play(&mut engine, l)?;
            for (a, b) in engine.probabilities().values().iter().zip(reference[k + 1].values()) {
                worst = worst.max(relative_error(*a, *b));
            }
        }
        out.max_error = out.max_error.max(worst);
        out.failures += usize::from(worst > ORACLE_TOLERANCE);
    }
    Ok(out)
}

/// Runs every check with `cases` random instances each.
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_ewa(seed, cases)?,
        check_trajectories(seed, cases)?,
        check_dp(seed, cases)?,
        check_strategy_mixture(seed, cases)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_small_scale() {
        for outcome in run_suite(5, 10).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
        }
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.5), 0.5);
    }
}
