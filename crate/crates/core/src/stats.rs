//! Per-round scalar mathematics: loss centering, range and variance
//! statistics, the adaptive learning rate and the choice of its scale `gamma`.
//!
//! Everything here is a pure function over small value types. The
//! aggregator and the oracles both build on these, so a bug here shows up in
//! both routes; keep this module small and heavily unit-tested.

use crate::error::{Error, Result};

/// `2(e - 2)`, the constant of the `e^x <= 1 + x + (e-2) x^2` inequality
/// (valid for `x <= 1`) that drives the second-order bound.
pub const TWO_E_MINUS_TWO: f64 = 2.0 * (std::f64::consts::E - 2.0);

/// Tolerance used when validating a user-supplied simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Losses of all `M` experts for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    values: Vec<f64>,
    round: usize,
}

impl LossVector {
    /// Losses tagged with their 1-based round. A round of `0` means "untagged"
    /// and is accepted by the engine at any round.
    pub fn new(round: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::rejected("loss vector must have at least one expert"));
        }
        if let Some(m) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::rejected(format!(
                "loss of expert {m} is not finite ({})",
                values[m]
            )));
        }
        Ok(Self { values, round })
    }

    pub fn untagged(values: Vec<f64>) -> Result<Self> {
        Self::new(0, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `max_m l - min_m l`.
    pub fn range(&self) -> f64 {
        spread(&self.values)
    }
}

/// Selection probabilities over the experts.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::rejected("probability vector is empty"));
        }
        if values.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::rejected(
                "probabilities must be finite and nonnegative",
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::rejected(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0, "uniform simplex needs at least one expert");
        Self(vec![1.0 / m as f64; m])
    }

    /// Skips validation; callers guarantee the simplex invariant.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `sum_m p_m x_m`.
    pub fn expectation(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(p, x)| p * x).sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Centered losses `phi_m = l_m - mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceVector {
    values: Vec<f64>,
    baseline: f64,
}

impl PerformanceVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The baseline `mu` that was subtracted.
    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn range(&self) -> f64 {
        spread(&self.values)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn spread(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    hi - lo
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// Centers `losses` on their expectation under `probs`.
///
/// The output has zero `probs`-weighted mean, so at least one entry is
/// nonnegative. A second pass removes the residual of the first subtraction.
pub fn center_losses(losses: &LossVector, probs: &ProbabilityVector) -> Result<PerformanceVector> {
    check_len(probs.len(), losses.len())?;
    let l = losses.values();
    if losses.range() == 0.0 {
        // Exact: rounding in the expectation would otherwise leave a
        // nonzero variance with a zero range.
        return Ok(PerformanceVector { values: vec![0.0; l.len()], baseline: l[0] });
    }
    let mu = probs.expectation(l);
    let mut values: Vec<f64> = l.iter().map(|x| x - mu).collect();
    let residual = probs.expectation(&values);
    if residual != 0.0 {
        values.iter_mut().for_each(|x| *x -= residual);
    }
    Ok(PerformanceVector {
        values,
        baseline: mu + residual,
    })
}

/// Centers on an arbitrary baseline. Only the zero baseline and the
/// expectation are meaningful to the engine; this exists for oracle tests.
pub fn center_on(losses: &LossVector, baseline: f64) -> PerformanceVector {
    PerformanceVector {
        values: losses.values().iter().map(|x| x - baseline).collect(),
        baseline,
    }
}

/// Running range/variance statistics after `rounds` observations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundStats {
    /// Number of rounds accumulated.
    pub rounds: usize,
    /// `d_t`: range of the centered losses this round.
    pub range: f64,
    /// `v_t`: second moment of the centered losses under `p_t`.
    pub variance: f64,
    /// `D_t`: running maximum of `range`.
    pub max_range: f64,
    /// `V_t`: running sum of `variance`.
    pub total_variance: f64,
    // Kahan compensation for `total_variance`.
    compensation: f64,
}

impl RoundStats {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Builds statistics directly from running totals.
    pub fn from_totals(max_range: f64, total_variance: f64) -> Self {
        Self {
            max_range,
            total_variance,
            ..Self::default()
        }
    }
}

/// Folds one round of centered losses into the running statistics.
pub fn round_stats(
    phi: &PerformanceVector,
    probs: &ProbabilityVector,
    prev: &RoundStats,
) -> Result<RoundStats> {
    check_len(probs.len(), phi.len())?;
    let range = phi.range();
    let variance: f64 = probs
        .values()
        .iter()
        .zip(phi.values())
        .map(|(p, x)| p * x * x)
        .sum();

    let y = variance - prev.compensation;
    let sum = prev.total_variance + y;
    let compensation = (sum - prev.total_variance) - y;

    Ok(RoundStats {
        rounds: prev.rounds + 1,
        range,
        variance,
        max_range: prev.max_range.max(range),
        total_variance: sum.max(prev.total_variance),
        compensation,
    })
}

/// The adaptive learning rate `eta_t = gamma / sqrt(V_t + gamma^2 D_t^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    Rate(f64),
    /// `V_t + gamma^2 D_t^2 = 0`: every centered loss so far was zero, so the
    /// update does not depend on the rate. Treated as `+inf` when ordering.
    Unconstrained,
}

impl LearningRate {
    pub fn value(self) -> Option<f64> {
        match self {
            LearningRate::Rate(eta) => Some(eta),
            LearningRate::Unconstrained => None,
        }
    }

    /// Value with the sentinel mapped to `+inf`.
    pub fn as_f64(self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }

    pub fn is_unconstrained(self) -> bool {
        matches!(self, LearningRate::Unconstrained)
    }
}

pub fn validate_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::config(format!("gamma must be positive and finite, got {gamma}")));
    }
    Ok(())
}

pub fn learning_rate(stats: &RoundStats, gamma: f64) -> Result<LearningRate> {
    validate_gamma(gamma)?;
    let denom = stats.total_variance + gamma * gamma * stats.max_range * stats.max_range;
    if denom > 0.0 {
        Ok(LearningRate::Rate(gamma / denom.sqrt()))
    } else {
        Ok(LearningRate::Unconstrained)
    }
}

/// `gamma = sqrt(W_T / (2(e-2)))` for a class budget `W_T >= 1`.
pub fn gamma_from_budget(budget: f64) -> Result<f64> {
    if !(budget.is_finite() && budget >= 1.0) {
        return Err(Error::config(format!(
            "class budget must be finite and at least 1, got {budget}"
        )));
    }
    Ok((budget / TWO_E_MINUS_TWO).sqrt())
}
