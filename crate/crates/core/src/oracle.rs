//! Brute-force references used to validate the engine, and the regret bound
//! evaluators.
//!
//! The references only share the scalar helpers of [`crate::stats`] with the
//! engine. None of them touches `Aggregator` or its grouped log-sum-exp
//! mixing.

use crate::error::{Error, Result};
use crate::kernels::{check_table, ClassParams, TransitionKernel};
use crate::stats::{center_losses, learning_rate, round_stats, LearningRate, LossVector, ProbabilityVector, RoundStats};

/// Coefficient of the variance term, `2 sqrt(2(e-2))` rounded up.
pub const VARIANCE_BOUND_FACTOR: f64 = 2.4;
/// Coefficient of the range term; half of [`VARIANCE_BOUND_FACTOR`] since a
/// variance never exceeds a quarter of the squared range.
pub const RANGE_BOUND_FACTOR: f64 = 1.2;
/// Default refusal threshold for [`exhaustive_best`].
pub const DEFAULT_PATH_LIMIT: u128 = 100_000;

fn normalize_linear(log_w: &[f64]) -> Vec<f64> {
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|x| (x - top).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn row(losses: &[f64]) -> Result<LossVector> {
    LossVector::untagged(losses.to_vec())
}

/// Classic exponentially weighted average with constant rate `eta`.
///
/// Returns `p_1, ..., p_{T+1}`; `p_{t+1,m}` is proportional to
/// `exp(-eta * sum_{s<=t} phi_{s,m})`, each `phi_s` centered on the
/// reference's own `p_s`.
pub fn ewa_reference(losses: &[Vec<f64>], eta: f64) -> Result<Vec<ProbabilityVector>> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::Config(format!("eta must be positive, got {eta}")));
    }
    let m = losses.first().ok_or(Error::EmptyTable)?.len();
    let mut cumulative = vec![0.0; m];
    let mut out = Vec::with_capacity(losses.len() + 1);
    let mut p = ProbabilityVector::uniform(m);
    out.push(p.clone());
    for l in losses {
        let phi = center_losses(&row(l)?, &p)?;
        for (c, x) in cumulative.iter_mut().zip(phi.values()) {
            *c += x;
        }
        let log_w: Vec<f64> = cumulative.iter().map(|c| -eta * c).collect();
        p = ProbabilityVector::from_raw(normalize_linear(&log_w));
        out.push(p.clone());
    }
    Ok(out)
}

/// Follows every class trajectory of a deterministic, injective kernel on
/// its own, applying the performance step and the rate-ratio exponent per
/// trajectory.
///
/// Returns `T + 1` vectors of class log weights (initial state first), each
/// shifted so that its maximum is `0` and aligned with the classes of the
/// following round.
pub fn trajectory_reference(
    kernel: &dyn TransitionKernel,
    losses: &[Vec<f64>],
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    check_table(kernel, losses)?;
    let horizon = losses.len();
    for t in 1..=horizon {
        let mut hit = vec![false; kernel.classes(t + 1).len()];
        for i in 0..kernel.classes(t).len() {
            match kernel.successors(t, i) {
                [(j, _)] if !hit[*j] => hit[*j] = true,
                [_] => {
                    return Err(Error::Unsupported(
                        "trajectory reference needs an injective successor map".into(),
                    ))
                }
                _ => {
                    return Err(Error::Unsupported(
                        "trajectory reference needs a deterministic kernel".into(),
                    ))
                }
            }
        }
    }

    struct Trajectory {
        class: usize,
        log_weight: f64,
    }
    let mut trajectories: Vec<Trajectory> = kernel
        .initial()
        .iter()
        .enumerate()
        .map(|(class, w)| Trajectory { class, log_weight: w.ln() })
        .collect();

    let m = kernel.num_experts();
    let mut stats = RoundStats::zero();
    let mut prev_eta: Option<LearningRate> = None;
    let snapshot = |round: usize, trajectories: &[Trajectory]| {
        let mut w = vec![f64::NEG_INFINITY; kernel.classes(round).len()];
        for tr in trajectories {
            w[tr.class] = tr.log_weight;
        }
        let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        w.into_iter().map(|x| x - top).collect::<Vec<f64>>()
    };
    let mut out = vec![snapshot(1, &trajectories)];

    for (k, l) in losses.iter().enumerate() {
        let round = k + 1;
        let classes = kernel.classes(round);
        let top = trajectories
            .iter()
            .map(|tr| tr.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut mass = vec![0.0; m];
        for tr in &trajectories {
            mass[classes[tr.class].expert()] += (tr.log_weight - top).exp();
        }
        let total: f64 = mass.iter().sum();
        let p = ProbabilityVector::from_raw(mass.iter().map(|x| x / total).collect());

        let phi = center_losses(&row(l)?, &p)?;
        stats = round_stats(&phi, &p, &stats)?;
        let eta = learning_rate(&stats, gamma)?;
        let before = match prev_eta {
            Some(LearningRate::Rate(e)) => Some(e),
            _ => eta.value(),
        };
        let ratio = match (eta.value(), before) {
            (Some(now), Some(before)) => now / before,
            _ => 1.0,
        };
        for tr in trajectories.iter_mut() {
            let gain = before.map_or(0.0, |e| e * phi.values()[classes[tr.class].expert()]);
            let (next, weight) = kernel.successors(round, tr.class)[0];
            tr.log_weight = ratio * (tr.log_weight - gain) + weight.ln();
            tr.class = next;
        }
        prev_eta = Some(eta);
        out.push(snapshot(round + 1, &trajectories));
    }
    Ok(out)
}

/// An explicit strategy with its cumulative loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyPath {
    pub classes: Vec<ClassParams>,
    pub selections: Vec<usize>,
    pub cumulative_loss: f64,
}

/// Number of in-class paths of length `horizon`, saturating.
pub fn count_paths(kernel: &dyn TransitionKernel, horizon: usize) -> u128 {
    if horizon == 0 {
        return 0;
    }
    let mut ways: Vec<u128> = kernel
        .initial()
        .iter()
        .map(|w| u128::from(*w > 0.0))
        .collect();
    for t in 1..horizon {
        let mut next = vec![0u128; kernel.classes(t + 1).len()];
        for (i, n) in ways.iter().enumerate() {
            for &(j, _) in kernel.successors(t, i) {
                next[j] = next[j].saturating_add(*n);
            }
        }
        ways = next;
    }
    ways.iter().fold(0u128, |a, b| a.saturating_add(*b))
}

/// Minimum-loss in-class path by enumerating every path. Ties go to the
/// lexicographically smallest class sequence.
pub fn exhaustive_best(
    kernel: &dyn TransitionKernel,
    losses: &[Vec<f64>],
    limit: u128,
) -> Result<StrategyPath> {
    check_table(kernel, losses)?;
    let horizon = losses.len();
    let count = count_paths(kernel, horizon);
    if count > limit {
        return Err(Error::EnumerationLimit { count, limit });
    }

    let mut best: Option<(f64, Vec<ClassParams>)> = None;
    let mut stack: Vec<Vec<usize>> = (0..kernel.initial().len())
        .filter(|&i| kernel.initial()[i] > 0.0)
        .map(|i| vec![i])
        .collect();
    while let Some(path) = stack.pop() {
        let t = path.len();
        if t == horizon {
            let classes: Vec<ClassParams> = path
                .iter()
                .enumerate()
                .map(|(k, &i)| kernel.classes(k + 1)[i].clone())
                .collect();
            let mut cost = 0.0;
            for (c, l) in classes.iter().zip(losses) {
                cost += l[c.expert()];
            }
            let better = match &best {
                None => true,
                Some((b, bc)) => cost < *b || (cost == *b && classes < *bc),
            };
            if better {
                best = Some((cost, classes));
            }
            continue;
        }
        for &(j, _) in kernel.successors(t, path[t - 1]) {
            let mut next = path.clone();
            next.push(j);
            stack.push(next);
        }
    }
    let (cumulative_loss, classes) = best.ok_or(Error::EmptyTable)?;
    Ok(StrategyPath {
        selections: classes.iter().map(ClassParams::expert).collect(),
        classes,
        cumulative_loss,
    })
}

/// Mixture over every explicit in-class strategy with a constant rate: a
/// strategy's weight is `T(path) * exp(-eta * sum phi)` along its own
/// selections, and `p_t` sums strategies by their current expert. With a
/// constant rate this equals the class-weight recursion for any kernel.
///
/// Returns `p_1, ..., p_{T+1}`. Exponential in `T`; desk scale only.
pub fn strategy_mixture_reference(
    kernel: &dyn TransitionKernel,
    losses: &[Vec<f64>],
    eta: f64,
    limit: u128,
) -> Result<Vec<ProbabilityVector>> {
    check_table(kernel, losses)?;
    let horizon = losses.len();
    let count = count_paths(kernel, horizon + 1);
    if count > limit {
        return Err(Error::EnumerationLimit { count, limit });
    }
    let m = kernel.num_experts();

    // every strategy prefix of the current length with its log weight
    // (transition product only; performance is added once p_t is known)
    let mut strategies: Vec<(Vec<usize>, f64)> = kernel
        .initial()
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| (vec![i], w.ln()))
        .collect();
    let mut cumulative_gain: Vec<f64> = vec![0.0; strategies.len()];
    let mut out = Vec::with_capacity(horizon + 1);

    for round in 1..=horizon + 1 {
        let classes = kernel.classes(round);
        let log_w: Vec<f64> = strategies
            .iter()
            .zip(&cumulative_gain)
            .map(|((_, lt), g)| lt - eta * g)
            .collect();
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut mass = vec![0.0; m];
        for ((path, _), lw) in strategies.iter().zip(&log_w) {
            mass[classes[*path.last().unwrap()].expert()] += (lw - top).exp();
        }
        let total: f64 = mass.iter().sum();
        let p = ProbabilityVector::from_raw(mass.iter().map(|x| x / total).collect());
        out.push(p.clone());
        if round > horizon {
            break;
        }

        let phi = center_losses(&row(&losses[round - 1])?, &p)?;
        let mut next = Vec::new();
        let mut next_gain = Vec::new();
        for ((path, lt), g) in strategies.iter().zip(&cumulative_gain) {
            let here = *path.last().unwrap();
            let gain = g + phi.values()[classes[here].expert()];
            for &(j, w) in kernel.successors(round, here) {
                let mut extended = path.clone();
                extended.push(j);
                next.push((extended, lt + w.ln()));
                next_gain.push(gain);
            }
        }
        strategies = next;
        cumulative_gain = next_gain;
    }
    Ok(out)
}

/// Second-order regret bounds of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    /// Class budget `W_T`.
    pub budget: f64,
    /// `D_T`, largest per-round loss range.
    pub max_range: f64,
    /// `V_T*`, summed loss variances under the selection probabilities.
    pub total_variance: f64,
    /// `sum_t d_t^2`.
    pub sum_sq_range: f64,
    /// `W_T D_T + 2.4 sqrt(W_T V_T*)`.
    pub bound_var: f64,
    /// `W_T D_T + 1.2 sqrt(W_T sum d_t^2)`.
    pub bound_range: f64,
}

impl BoundReport {
    pub fn from_totals(budget: f64, max_range: f64, total_variance: f64, sum_sq_range: f64) -> Self {
        Self {
            budget,
            max_range,
            total_variance,
            sum_sq_range,
            bound_var: variance_bound(budget, max_range, total_variance),
            bound_range: range_bound(budget, max_range, sum_sq_range),
        }
    }
}

pub fn variance_bound(budget: f64, max_range: f64, total_variance: f64) -> f64 {
    budget * max_range + VARIANCE_BOUND_FACTOR * (budget * total_variance).sqrt()
}

pub fn range_bound(budget: f64, max_range: f64, sum_sq_range: f64) -> f64 {
    budget * max_range + RANGE_BOUND_FACTOR * (budget * sum_sq_range).sqrt()
}

/// One round of telemetry: the declared probabilities and observed losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub probs: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Recomputes the bounds from raw telemetry and checks
/// `V_T* <= sum d_t^2 / 4`.
pub fn bound_report(budget: f64, telemetry: &[TelemetryRow]) -> Result<BoundReport> {
    if !(budget.is_finite() && budget >= 1.0) {
        return Err(Error::Config(format!("budget must be at least 1, got {budget}")));
    }
    let mut max_range: f64 = 0.0;
    let mut total_variance = 0.0;
    let mut sum_sq_range = 0.0;
    for (k, r) in telemetry.iter().enumerate() {
        if r.probs.len() != r.losses.len() {
            return Err(Error::LengthMismatch { expected: r.probs.len(), actual: r.losses.len() });
        }
        let lo = r.losses.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let d = hi - lo;
        let mean: f64 = r.probs.iter().zip(&r.losses).map(|(p, l)| p * l).sum();
        let var: f64 = r
            .probs
            .iter()
            .zip(&r.losses)
            .map(|(p, l)| p * (l - mean) * (l - mean))
            .sum();
        if var > d * d / 4.0 * (1.0 + 1e-12) + f64::MIN_POSITIVE {
            return Err(Error::Invariant {
                round: k + 1,
                detail: format!("variance {var} exceeds a quarter of the squared range {d}"),
            });
        }
        max_range = max_range.max(d);
        total_variance += var;
        sum_sq_range += d * d;
    }
    Ok(BoundReport::from_totals(budget, max_range, total_variance, sum_sq_range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{best_competitor, cyclic_kernel, fixed_kernel, switching_kernel};
    use approx::assert_relative_eq;

    #[test]
    fn ewa_identical_columns_stay_uniform() {
        let table = vec![vec![0.3, 0.3, 0.3], vec![-1.0, -1.0, -1.0]];
        for p in ewa_reference(&table, 0.7).unwrap() {
            for x in p.values() {
                assert_relative_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn ewa_two_point_closed_form() {
        let eta = 0.8;
        let p = ewa_reference(&[vec![0.0, 1.0]], eta).unwrap();
        let a = (eta / 2.0).exp();
        let b = (-eta / 2.0).exp();
        assert_relative_eq!(p[1].values()[0], a / (a + b), epsilon = 1e-15);
        assert_relative_eq!(p[1].values()[1], b / (a + b), epsilon = 1e-15);
        assert!(ewa_reference(&[vec![0.0, 1.0]], 0.0).is_err());
    }

    #[test]
    fn trajectory_single_class() {
        let k = cyclic_kernel(1).unwrap();
        let w = trajectory_reference(&k, &[vec![3.0], vec![-2.0]], 1.0).unwrap();
        assert!(w.iter().all(|r| r == &vec![0.0]));
    }

    #[test]
    fn trajectory_constant_losses_keep_equal_weights() {
        let k = cyclic_kernel(3).unwrap();
        let table = vec![vec![1.5; 3]; 6];
        for w in trajectory_reference(&k, &table, 0.9).unwrap() {
            assert!(w.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn trajectory_rejects_stochastic_kernels() {
        let k = switching_kernel(2, 0.1).unwrap();
        assert!(matches!(
            trajectory_reference(&k, &[vec![0.0, 1.0]], 1.0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn exhaustive_examples() {
        let table = vec![vec![0.2, 0.1], vec![0.5, 0.9], vec![0.4, 0.3]];
        let best = exhaustive_best(&fixed_kernel(2).unwrap(), &table, DEFAULT_PATH_LIMIT).unwrap();
        assert_eq!(best.selections, vec![0, 0, 0]);
        assert_relative_eq!(best.cumulative_loss, 1.1, epsilon = 1e-15);

        let k = switching_kernel(2, 0.3).unwrap();
        assert_eq!(count_paths(&k, 4), 16);
        let table = vec![vec![0.2, 0.1], vec![0.5, 0.9], vec![0.4, 0.3], vec![1.0, 0.0]];
        let best = exhaustive_best(&k, &table, DEFAULT_PATH_LIMIT).unwrap();
        assert_eq!(best.selections, vec![1, 0, 1, 1]);
        let dp = best_competitor(&k, &table).unwrap();
        assert_eq!(dp.classes, best.classes);
    }

    #[test]
    fn exhaustive_refuses_large_enumerations() {
        let k = switching_kernel(4, 0.1).unwrap();
        let table = vec![vec![0.0; 4]; 12];
        match exhaustive_best(&k, &table, 1000) {
            Err(Error::EnumerationLimit { count, limit }) => {
                assert_eq!(count, 4u128.pow(12));
                assert_eq!(limit, 1000);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn strategy_mixture_matches_ewa_for_fixed_kernel() {
        let table = vec![vec![0.2, 0.9, 0.4], vec![0.7, 0.1, 0.3], vec![0.0, 0.5, 1.0]];
        let a = strategy_mixture_reference(&fixed_kernel(3).unwrap(), &table, 0.6, DEFAULT_PATH_LIMIT).unwrap();
        let b = ewa_reference(&table, 0.6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.values().iter().zip(y.values()) {
                assert_relative_eq!(*u, *v, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn bound_examples() {
        let flat = vec![TelemetryRow { probs: vec![0.5, 0.5], losses: vec![2.0, 2.0] }; 3];
        let r = bound_report(1.7, &flat).unwrap();
        assert_eq!(r.total_variance, 0.0);
        assert_eq!(r.bound_var, 1.7 * r.max_range);

        let r = BoundReport::from_totals(1.0, 1.0, 1.0, 4.0);
        assert_relative_eq!(r.bound_var, 3.4, epsilon = 1e-15);
        assert_relative_eq!(r.bound_range, 1.0 + 1.2 * 2.0, epsilon = 1e-15);

        let k = cyclic_kernel(8).unwrap();
        let rows = vec![TelemetryRow { probs: vec![0.125; 8], losses: (0..8).map(f64::from).collect() }];
        let r = bound_report(k.budget(1).unwrap(), &rows).unwrap();
        assert_relative_eq!(r.budget, 5.158_883_083_359_672, max_relative = 1e-15);
        assert_relative_eq!(r.total_variance, 5.25, epsilon = 1e-12);
        assert_relative_eq!(
            r.bound_var,
            r.budget * 7.0 + 2.4 * (r.budget * 5.25).sqrt(),
            max_relative = 1e-15
        );
        assert!(r.total_variance <= r.sum_sq_range / 4.0);
        assert!(bound_report(0.5, &rows).is_err());
    }
}
