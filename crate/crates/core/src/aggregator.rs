//! The expert-selection engine.
//!
//! State is a log-domain weight per equivalence class. Each round:
//!
//! 1. losses are centered on their expectation under the declared `p_t`;
//! 2. range/variance statistics and the learning rate `eta_t` are updated;
//! 3. `log z = log w - eta_{t-1} * phi[expert]` (performance step);
//! 4. `log w' = logsumexp over predecessors of (log T + (eta_t / eta_{t-1}) * log z)`
//!    (transition mixing);
//! 5. weights are shifted so that the largest is `0`.
//!
//! The first observation uses `eta_0 = eta_1`. While the rate is still
//! unconstrained (all centered losses so far were zero) the previous rate is
//! likewise taken equal to the current one.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{ClassParams, TransitionKernel};
use crate::stats::{
    center_losses, learning_rate, round_stats, validate_gamma, LearningRate, LossVector,
    PerformanceVector, ProbabilityVector, RoundStats,
};

/// Slack allowed on the `-eta_t * phi <= 1` runtime check.
pub const BOUNDEDNESS_SLACK: f64 = 1e-12;

/// Emitted probabilities must sum to 1 within this tolerance.
pub const SIMPLEX_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateSchedule {
    /// `eta_t = gamma / sqrt(V_t + gamma^2 D_t^2)`.
    Adaptive { gamma: f64 },
    /// Fixed rate. Test hook: reduces the fixed kernel to classic
    /// exponentially weighted averaging. The runtime boundedness check is
    /// skipped because a constant rate does not guarantee it.
    Constant { eta: f64 },
}

/// What happened during one `observe` call.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub probs: ProbabilityVector,
    pub phi: PerformanceVector,
    /// `E_p l`, the baseline subtracted from the losses.
    pub expected_loss: f64,
    pub stats: RoundStats,
    pub eta: LearningRate,
    /// Rate used in the performance step (`eta_{t-1}` after conventions).
    pub eta_prev: LearningRate,
    /// `max_m -eta_t * phi_m`; must not exceed 1.
    pub max_scaled_gain: f64,
    /// `max_m -eta_{t-1} * phi_m`; informational.
    pub max_prev_scaled_gain: f64,
}

/// Intermediate log weights `log z` of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateWeights {
    pub log_z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    kernel: Arc<dyn TransitionKernel>,
    schedule: RateSchedule,
    log_weights: Vec<f64>,
    round: usize,
    stats: RoundStats,
    prev_eta: Option<LearningRate>,
    round_open: bool,
}

impl Aggregator {
    pub fn new(kernel: Arc<dyn TransitionKernel>, gamma: f64) -> Result<Self> {
        validate_gamma(gamma)?;
        Ok(Self::with_schedule(kernel, RateSchedule::Adaptive { gamma }))
    }

    /// Engine with a constant learning rate. Intended for tests only.
    pub fn with_constant_rate(kernel: Arc<dyn TransitionKernel>, eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::config(format!("constant rate must be positive, got {eta}")));
        }
        Ok(Self::with_schedule(kernel, RateSchedule::Constant { eta }))
    }

    fn with_schedule(kernel: Arc<dyn TransitionKernel>, schedule: RateSchedule) -> Self {
        let log_weights = kernel.initial().iter().map(|w| w.ln()).collect();
        Self {
            kernel,
            schedule,
            log_weights,
            round: 0,
            stats: RoundStats::zero(),
            prev_eta: None,
            round_open: false,
        }
    }

    pub fn kernel(&self) -> &Arc<dyn TransitionKernel> {
        &self.kernel
    }

    pub fn schedule(&self) -> RateSchedule {
        self.schedule
    }

    /// Number of completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn stats(&self) -> &RoundStats {
        &self.stats
    }

    /// Most recent `eta_t`, `None` before the first observation.
    pub fn eta(&self) -> Option<LearningRate> {
        self.prev_eta
    }

    /// Classes of the upcoming round, aligned with [`Self::log_weights`].
    pub fn classes(&self) -> &[ClassParams] {
        self.kernel.classes(self.round + 1)
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Adds `c` to every log weight. Probabilities are unaffected.
    pub fn shift_log_weights(&mut self, c: f64) {
        self.log_weights.iter_mut().for_each(|w| *w += c);
    }

    /// Replaces the class weights, e.g. to resume from a snapshot.
    pub fn set_log_weights(&mut self, log_weights: Vec<f64>) -> Result<()> {
        let n = self.classes().len();
        if log_weights.len() != n {
            return Err(Error::LengthMismatch { expected: n, actual: log_weights.len() });
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY)
            || log_weights.iter().all(|w| *w == f64::NEG_INFINITY)
        {
            return Err(Error::rejected("log weights must be finite or -inf, not all -inf"));
        }
        self.log_weights = log_weights;
        Ok(())
    }

    /// `p_t`, grouping class weights by expert. Read-only.
    pub fn probabilities(&self) -> ProbabilityVector {
        let m = self.kernel.num_experts();
        let classes = self.classes();
        let mut max = vec![f64::NEG_INFINITY; m];
        for (c, &w) in classes.iter().zip(&self.log_weights) {
            let e = c.expert();
            max[e] = max[e].max(w);
        }
        let top = max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut mass = vec![0.0; m];
        for (c, &w) in classes.iter().zip(&self.log_weights) {
            mass[c.expert()] += (w - top).exp();
        }
        let total: f64 = mass.iter().sum();
        ProbabilityVector::from_raw(mass.into_iter().map(|x| x / total).collect())
    }

    /// Declares `p_t` for the current round and opens it for `observe`.
    pub fn begin_round(&mut self) -> ProbabilityVector {
        self.round_open = true;
        self.probabilities()
    }

    /// Draws `i_t ~ p_t`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probabilities(), rng)
    }

    /// Consumes the losses of the open round and advances the state.
    pub fn observe(&mut self, losses: &LossVector) -> Result<RoundRecord> {
        let round = self.round + 1;
        if !self.round_open {
            return Err(Error::Protocol(format!(
                "observe for round {round} without an open round (call begin_round first)"
            )));
        }
        if losses.round() != 0 && losses.round() != round {
            return Err(Error::Protocol(format!(
                "losses tagged for round {} delivered in round {round}",
                losses.round()
            )));
        }
        let m = self.kernel.num_experts();
        if losses.len() != m {
            return Err(Error::LengthMismatch { expected: m, actual: losses.len() });
        }

        let probs = self.probabilities();
        let total: f64 = probs.values().iter().sum();
        if probs.values().iter().any(|p| p.is_nan() || *p < 0.0) || (total - 1.0).abs() > SIMPLEX_SUM_TOLERANCE {
            return Err(Error::Invariant {
                round,
                detail: format!("selection probabilities sum to {total}"),
            });
        }

        let phi = center_losses(losses, &probs)?;
        let stats = round_stats(&phi, &probs, &self.stats)?;
        let eta = match self.schedule {
            RateSchedule::Adaptive { gamma } => learning_rate(&stats, gamma)?,
            RateSchedule::Constant { eta } => LearningRate::Rate(eta),
        };
        let eta_prev = match self.prev_eta {
            None | Some(LearningRate::Unconstrained) => eta,
            Some(prev) => prev,
        };

        if eta.as_f64() > eta_prev.as_f64() {
            return Err(Error::Invariant {
                round,
                detail: format!(
                    "learning rate increased from {} to {}",
                    eta_prev.as_f64(),
                    eta.as_f64()
                ),
            });
        }
        let max_scaled_gain = scaled_gain(eta, &phi);
        let max_prev_scaled_gain = scaled_gain(eta_prev, &phi);
        if matches!(self.schedule, RateSchedule::Adaptive { .. })
            && max_scaled_gain > 1.0 + BOUNDEDNESS_SLACK
        {
            return Err(Error::Invariant {
                round,
                detail: format!("-eta_t * phi reached {max_scaled_gain}"),
            });
        }

        let z = self.performance_step(&phi, eta_prev);
        let ratio = match (eta, eta_prev) {
            (LearningRate::Rate(now), LearningRate::Rate(before)) => now / before,
            _ => 1.0,
        };
        self.log_weights = self.mix(round, &z.log_z, ratio);

        self.stats = stats;
        self.prev_eta = Some(eta);
        self.round = round;
        self.round_open = false;

        Ok(RoundRecord {
            round,
            probs,
            expected_loss: phi.baseline(),
            phi,
            stats,
            eta,
            eta_prev,
            max_scaled_gain,
            max_prev_scaled_gain,
        })
    }

    /// `log z = log w - eta_{t-1} phi[expert]`.
    pub fn performance_step(&self, phi: &PerformanceVector, eta_prev: LearningRate) -> IntermediateWeights {
        let phi = phi.values();
        let log_z = match eta_prev {
            LearningRate::Rate(eta) => self
                .classes()
                .iter()
                .zip(&self.log_weights)
                .map(|(c, w)| w - eta * phi[c.expert()])
                .collect(),
            LearningRate::Unconstrained => self.log_weights.clone(),
        };
        IntermediateWeights { log_z }
    }

    fn mix(&self, round: usize, log_z: &[f64], ratio: f64) -> Vec<f64> {
        let next = self.kernel.classes(round + 1).len();
        let mut out: Vec<f64> = (0..next)
            .map(|j| {
                let preds = self.kernel.predecessors(round, j);
                log_sum_exp(preds.iter().map(|&(i, w)| w.ln() + ratio * log_z[i]))
            })
            .collect();
        let top = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top.is_finite() {
            out.iter_mut().for_each(|w| *w -= top);
        }
        out
    }

    /// `begin_round`, `sample`, `observe` in order.
    pub fn run_round<R: Rng + ?Sized>(
        &mut self,
        losses: &LossVector,
        rng: &mut R,
    ) -> Result<(ProbabilityVector, usize, RoundRecord)> {
        let p = self.begin_round();
        let choice = sample_index(&p, rng);
        let record = self.observe(losses)?;
        Ok((p, choice, record))
    }
}

fn scaled_gain(eta: LearningRate, phi: &PerformanceVector) -> f64 {
    match eta {
        LearningRate::Rate(eta) => phi
            .values()
            .iter()
            .map(|x| -eta * x)
            .fold(f64::NEG_INFINITY, f64::max),
        // only reachable when phi is identically zero
        LearningRate::Unconstrained => 0.0,
    }
}

/// `log(sum exp(x))`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let top = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return top;
    }
    top + xs.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// Inverse-CDF draw over expert index order. Rounding residue in the
/// cumulative sum falls to the last expert with positive probability.
pub fn sample_index<R: Rng + ?Sized>(p: &ProbabilityVector, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.values().iter().enumerate() {
        if pi > 0.0 {
            last_positive = i;
            cumulative += pi;
            if u < cumulative {
                return i;
            }
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{cyclic_kernel, fixed_kernel, switching_kernel};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lv(v: &[f64]) -> LossVector {
        LossVector::untagged(v.to_vec()).unwrap()
    }

    fn engine(kernel: impl TransitionKernel + 'static, gamma: f64) -> Aggregator {
        Aggregator::new(Arc::new(kernel), gamma).unwrap()
    }

    fn step(agg: &mut Aggregator, l: &[f64]) -> RoundRecord {
        agg.begin_round();
        agg.observe(&lv(l)).unwrap()
    }

    #[test]
    fn init_is_uniform() {
        let agg = engine(fixed_kernel(4).unwrap(), 1.0);
        assert_eq!(agg.round(), 0);
        assert!(agg.eta().is_none());
        for w in agg.log_weights() {
            assert_relative_eq!(*w, 0.25f64.ln());
        }
        for p in agg.probabilities().values() {
            assert_relative_eq!(*p, 0.25, epsilon = 1e-15);
        }

        let agg = engine(cyclic_kernel(2).unwrap(), 1.0);
        assert_eq!(agg.log_weights().len(), 4);
        for w in agg.log_weights() {
            assert_relative_eq!(*w, 0.25f64.ln());
        }
        assert_eq!(agg.probabilities().values(), &[0.5, 0.5]);
        assert!(Aggregator::new(Arc::new(fixed_kernel(2).unwrap()), 0.0).is_err());
    }

    #[test]
    fn probabilities_group_by_expert() {
        let mut agg = engine(fixed_kernel(2).unwrap(), 1.0);
        agg.set_log_weights(vec![0.3, 0.3]).unwrap();
        assert_eq!(agg.probabilities().values(), &[0.5, 0.5]);

        let mut agg = engine(fixed_kernel(3).unwrap(), 1.0);
        agg.set_log_weights(vec![2f64.ln(), 0.0, 0.0]).unwrap();
        let p = agg.probabilities();
        assert_relative_eq!(p.values()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.values()[1], 0.25, epsilon = 1e-15);

        let mut agg = engine(cyclic_kernel(2).unwrap(), 1.0);
        let two = 2f64.ln();
        agg.set_log_weights(vec![two, two, 0.0, 0.0]).unwrap();
        let p = agg.probabilities();
        assert_relative_eq!(p.values()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p.values()[1], 1.0 / 3.0, epsilon = 1e-15);

        assert!(agg.set_log_weights(vec![0.0]).is_err());
        assert!(agg.set_log_weights(vec![f64::NEG_INFINITY; 4]).is_err());
    }

    #[test]
    fn sampling_point_mass_and_determinism() {
        let p = ProbabilityVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| sample_index(&p, &mut rng) == 0));

        let p = ProbabilityVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert!((0..1000).all(|_| sample_index(&p, &mut rng) == 1));

        let p = ProbabilityVector::uniform(5);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| sample_index(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn sampling_frequencies_match_binomial_bands() {
        let n = 100_000usize;
        let m = 4;
        let p = ProbabilityVector::uniform(m);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = vec![0usize; m];
        for _ in 0..n {
            counts[sample_index(&p, &mut rng)] += 1;
        }
        let q = 1.0 / m as f64;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * q).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn protocol_is_enforced() {
        let mut agg = engine(fixed_kernel(2).unwrap(), 1.0);
        assert!(matches!(agg.observe(&lv(&[0.0, 1.0])), Err(Error::Protocol(_))));
        step(&mut agg, &[0.0, 1.0]);
        assert!(matches!(agg.observe(&lv(&[0.0, 1.0])), Err(Error::Protocol(_))));
        agg.begin_round();
        assert!(matches!(
            agg.observe(&LossVector::new(7, vec![0.0, 1.0]).unwrap()),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(agg.observe(&lv(&[0.0])), Err(Error::LengthMismatch { .. })));
        agg.observe(&LossVector::new(2, vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(agg.round(), 2);
    }

    #[test]
    fn constant_losses_keep_initial_distribution() {
        let mut agg = engine(switching_kernel(3, 0.2).unwrap(), 0.7);
        for t in 0..50 {
            let r = step(&mut agg, &[t as f64, t as f64, t as f64]);
            assert_eq!(r.eta, LearningRate::Unconstrained);
            for p in agg.probabilities().values() {
                assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn first_informative_round_after_zero_rounds_acts_as_first_round() {
        // leading constant rounds must not change what follows
        let mut a = engine(fixed_kernel(3).unwrap(), 1.3);
        let mut b = engine(fixed_kernel(3).unwrap(), 1.3);
        for _ in 0..5 {
            step(&mut a, &[2.0, 2.0, 2.0]);
        }
        let seq = [[0.1, 0.9, 0.4], [0.5, 0.2, 0.7], [1.0, 0.0, 0.3]];
        for l in &seq {
            let ra = step(&mut a, l);
            let rb = step(&mut b, l);
            assert_eq!(ra.eta, rb.eta);
        }
        for (x, y) in a.probabilities().values().iter().zip(b.probabilities().values()) {
            assert_relative_eq!(*x, *y, epsilon = 1e-15);
        }
    }

    #[test]
    fn fixed_kernel_constant_rate_is_exponential_weighting() {
        let eta = 0.4;
        let table = [[0.3, 1.0, -0.2], [0.9, 0.1, 0.5], [0.0, 0.0, 1.0], [2.0, -1.0, 0.5]];
        let mut agg = Aggregator::with_constant_rate(Arc::new(fixed_kernel(3).unwrap()), eta).unwrap();
        let mut cum = [0.0f64; 3];
        for l in &table {
            step(&mut agg, l);
            for m in 0..3 {
                cum[m] += l[m];
            }
            let w: Vec<f64> = cum.iter().map(|c| (-eta * c).exp()).collect();
            let s: f64 = w.iter().sum();
            for (p, wm) in agg.probabilities().values().iter().zip(&w) {
                assert_relative_eq!(*p, wm / s, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn cyclic_two_experts_one_step() {
        let mut agg = engine(cyclic_kernel(2).unwrap(), 1.0);
        let r = step(&mut agg, &[0.0, 1.0]);
        // phi = [-1/2, 1/2], V = 1/4, D = 1, eta_1 = eta_0 = 1/sqrt(5/4)
        let eta = 1.0 / 1.25f64.sqrt();
        assert_relative_eq!(r.eta.as_f64(), eta, max_relative = 1e-15);
        assert_eq!(r.eta_prev, r.eta);
        // [0,0] keeps its tilt, [0,1] inherits [1,1], [1,0] stays, [1,1] inherits [0,1]
        let want = [0.0, -eta, -eta, 0.0];
        for (got, want) in agg.log_weights().iter().zip(want) {
            assert_relative_eq!(*got, want, epsilon = 1e-14);
        }
        for p in agg.probabilities().values() {
            assert_relative_eq!(*p, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_expert_always_selected() {
        let mut agg = engine(fixed_kernel(1).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 0..20 {
            let (p, i, r) = agg.run_round(&lv(&[t as f64 * 3.1 - 7.0]), &mut rng).unwrap();
            assert_eq!(p.values(), &[1.0]);
            assert_eq!(i, 0);
            assert_eq!(r.phi.values(), &[0.0]);
        }
    }

    #[test]
    fn run_round_is_deterministic() {
        let run = || {
            let mut agg = engine(cyclic_kernel(3).unwrap(), 0.9);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut out = Vec::new();
            for t in 0..30 {
                let l = [(t % 3) as f64, 0.5, (t % 5) as f64 * 0.2];
                let (p, i, _) = agg.run_round(&lv(&l), &mut rng).unwrap();
                out.push((p, i));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(std::iter::empty()), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert_relative_eq!(log_sum_exp([1000.0, 1000.0]), 1000.0 + 2f64.ln());
        assert_relative_eq!(log_sum_exp([0.0, f64::NEG_INFINITY]), 0.0);
    }
}
