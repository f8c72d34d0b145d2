use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{sample_index, Aggregator};
use crate::error::{Error, Result};
use crate::kernels::{best_competitor, Competitor, PrefixCompetitor, TransitionKernel};
use crate::oracle::{range_bound, variance_bound, BoundReport};
use crate::stats::{gamma_from_budget, LossVector};

use super::config::{ExperimentConfig, GammaMode, Transform};

const LOSS_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const SHIFT_STREAM: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One round of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretRow {
    pub round: usize,
    /// `E_{p_t} l_t`.
    pub expected_loss: f64,
    /// `l_{t, i_t}`.
    pub realized_loss: f64,
    /// Best in-class cumulative loss over rounds `1..=t`.
    pub best_cumloss: f64,
    pub exp_regret: f64,
    pub real_regret: f64,
    pub bound_var: f64,
    pub bound_range: f64,
    /// `eta_t`; `inf` while unconstrained.
    pub eta: f64,
    /// Rate used in this round's performance step.
    pub eta_prev: f64,
    pub max_range: f64,
    pub total_variance: f64,
    pub range: f64,
    pub sum_sq_range: f64,
    pub max_scaled_gain: f64,
    pub max_prev_scaled_gain: f64,
    pub choice: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RegretReport {
    pub kernel: String,
    pub experts: usize,
    pub gamma: f64,
    pub budget: Option<f64>,
    pub rows: Vec<RegretRow>,
    pub competitor: Competitor,
    pub losses: Vec<Vec<f64>>,
    pub debug_probs: bool,
}

impl RegretReport {
    pub fn last(&self) -> &RegretRow {
        self.rows.last().expect("reports have at least one round")
    }

    /// Bounds at the final round.
    pub fn bounds(&self) -> Option<BoundReport> {
        let last = self.last();
        self.budget.map(|w| {
            BoundReport::from_totals(w, last.max_range, last.total_variance, last.sum_sq_range)
        })
    }

    pub fn probabilities(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| r.probs.as_slice())
    }
}

/// Applies `l' = scale * (l + c_t)`, `c_t ~ U[-shift, shift]`.
pub(crate) fn apply_transform(table: &mut [Vec<f64>], transform: Transform, seed: u64) {
    if transform.is_identity() {
        return;
    }
    let mut rng = stream_rng(seed, SHIFT_STREAM);
    for row in table.iter_mut() {
        let c = if transform.shift > 0.0 {
            rng.random_range(-transform.shift..=transform.shift)
        } else {
            0.0
        };
        row.iter_mut().for_each(|x| *x = transform.scale * (*x + c));
    }
}

/// Loss table of a config, after its transform.
pub fn generate_table(config: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    let mut table: Vec<Vec<f64>> = config
        .generator
        .stream(config.experts, stream_rng(config.seed, LOSS_STREAM))?
        .take(config.rounds)
        .map(|l| l.values().to_vec())
        .collect();
    apply_transform(&mut table, config.transform, config.seed);
    Ok(table)
}

/// Generates the losses of `config` and plays them.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RegretReport> {
    let kernel: Arc<dyn TransitionKernel> = Arc::new(config.kernel.build(config.experts)?);
    let table = generate_table(config)?;
    let mut report = run_on_table(kernel, config.gamma, &table, config.seed)?;
    report.debug_probs = config.debug_probs;
    Ok(report)
}

/// Plays a fixed loss table, sampling with the stream derived from `seed`.
/// Any runtime invariant breach aborts with the offending round.
pub fn run_on_table(
    kernel: Arc<dyn TransitionKernel>,
    gamma: GammaMode,
    table: &[Vec<f64>],
    seed: u64,
) -> Result<RegretReport> {
    crate::kernels::check_table(kernel.as_ref(), table)?;
    let horizon = table.len();
    let budget = kernel.budget(horizon);
    let gamma = match gamma {
        GammaMode::Explicit(g) => g,
        GammaMode::Auto => gamma_from_budget(budget.ok_or_else(|| {
            Error::Config(format!("kernel '{}' declares no budget; set gamma explicitly", kernel.name()))
        })?)?,
    };

    let mut engine = Aggregator::new(kernel.clone(), gamma)?;
    let mut prefix = PrefixCompetitor::new(kernel.as_ref());
    let mut rng = stream_rng(seed, SAMPLE_STREAM);

    let mut rows = Vec::with_capacity(horizon);
    let mut expected_total = 0.0;
    let mut realized_total = 0.0;
    let mut sum_sq_range = 0.0;
    let mut last_max_range: f64 = 0.0;
    let mut last_total_variance: f64 = 0.0;

    for (k, l) in table.iter().enumerate() {
        let round = k + 1;
        let losses = LossVector::new(round, l.clone())?;
        let probs = engine.begin_round();
        let choice = sample_index(&probs, &mut rng);
        let record = engine.observe(&losses)?;

        let s = record.stats;
        if s.max_range < last_max_range || s.total_variance < last_total_variance {
            return Err(Error::Invariant { round, detail: "running statistics decreased".into() });
        }
        if s.variance > s.range * s.range / 4.0 * (1.0 + 1e-12) + f64::MIN_POSITIVE {
            return Err(Error::Invariant {
                round,
                detail: format!("variance {} exceeds a quarter of the squared range {}", s.variance, s.range),
            });
        }
        last_max_range = s.max_range;
        last_total_variance = s.total_variance;
        sum_sq_range += s.range * s.range;

        expected_total += record.expected_loss;
        realized_total += l[choice];
        let best = prefix.push(l)?;
        let w = kernel.budget(round).unwrap_or(f64::NAN);

        rows.push(RegretRow {
            round,
            expected_loss: record.expected_loss,
            realized_loss: l[choice],
            best_cumloss: best,
            exp_regret: expected_total - best,
            real_regret: realized_total - best,
            bound_var: variance_bound(w, s.max_range, s.total_variance),
            bound_range: range_bound(w, s.max_range, sum_sq_range),
            eta: record.eta.as_f64(),
            eta_prev: record.eta_prev.as_f64(),
            max_range: s.max_range,
            total_variance: s.total_variance,
            range: s.range,
            sum_sq_range,
            max_scaled_gain: record.max_scaled_gain,
            max_prev_scaled_gain: record.max_prev_scaled_gain,
            choice,
            probs: record.probs.into_inner(),
        });
    }

    let competitor = best_competitor(kernel.as_ref(), table)?;
    let streamed = rows.last().map_or(0.0, |r| r.best_cumloss);
    let scale = 1.0 + table.iter().flatten().map(|x| x.abs()).sum::<f64>();
    if (competitor.cumulative_loss - streamed).abs() > 1e-12 * scale {
        return Err(Error::Invariant {
            round: horizon,
            detail: format!(
                "best competitor loss {} disagrees with the streamed minimum {streamed}",
                competitor.cumulative_loss
            ),
        });
    }

    Ok(RegretReport {
        kernel: kernel.name().to_string(),
        experts: kernel.num_experts(),
        gamma,
        budget,
        rows,
        competitor,
        losses: table.to_vec(),
        debug_probs: false,
    })
}

/// One line of a sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub kernel: String,
    pub experts: usize,
    pub rounds: usize,
    pub gamma: f64,
    pub exp_regret: f64,
    pub real_regret: f64,
    pub bound_var: f64,
    pub bound_range: f64,
    /// Expected regret stayed below both bounds at every round.
    pub within_bounds: bool,
}

impl RunSummary {
    pub const HEADER: [&'static str; 10] = [
        "seed",
        "kernel",
        "experts",
        "rounds",
        "gamma",
        "exp_regret",
        "real_regret",
        "bound_var",
        "bound_range",
        "within_bounds",
    ];

    pub fn from_report(seed: u64, report: &RegretReport) -> Self {
        let last = report.last();
        Self {
            seed,
            kernel: report.kernel.clone(),
            experts: report.experts,
            rounds: report.rows.len(),
            gamma: report.gamma,
            exp_regret: last.exp_regret,
            real_regret: last.real_regret,
            bound_var: last.bound_var,
            bound_range: last.bound_range,
            within_bounds: report
                .rows
                .iter()
                .all(|r| r.exp_regret <= r.bound_var && r.exp_regret <= r.bound_range),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ConfigBuilder;
    use approx::assert_relative_eq;

    fn config(kv: &[(&str, &str)]) -> ExperimentConfig {
        let mut b = ConfigBuilder::new();
        for (k, v) in kv {
            b.set(k, v).unwrap();
        }
        b.build().unwrap()
    }

    #[test]
    fn single_expert_has_no_regret() {
        let c = config(&[("experts", "1"), ("rounds", "40"), ("loss-gen", "gaussian-drift")]);
        let r = run_experiment(&c).unwrap();
        for row in &r.rows {
            assert_eq!(row.exp_regret, 0.0);
            assert_eq!(row.real_regret, 0.0);
            assert_eq!(row.probs, vec![1.0]);
        }
    }

    #[test]
    fn constant_losses_have_no_regret() {
        let c = config(&[
            ("experts", "3"),
            ("rounds", "25"),
            ("kernel", "switching"),
            ("loss-gen", "constant"),
            ("loss-param", "value=1.25"),
        ]);
        let r = run_experiment(&c).unwrap();
        for row in &r.rows {
            assert_eq!(row.exp_regret, 0.0);
            for p in &row.probs {
                assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn final_regret_uses_best_competitor_path() {
        let c = config(&[("experts", "3"), ("rounds", "60"), ("kernel", "cyclic"), ("seed", "8")]);
        let r = run_experiment(&c).unwrap();
        let expected: f64 = r.rows.iter().map(|x| x.expected_loss).sum();
        assert_relative_eq!(
            r.last().exp_regret,
            expected - r.competitor.cumulative_loss,
            epsilon = 1e-9
        );
        for w in r.rows.windows(2) {
            assert!(w[1].max_range >= w[0].max_range);
            assert!(w[1].total_variance >= w[0].total_variance);
            assert!(w[1].eta <= w[0].eta);
        }
    }

    #[test]
    fn auto_gamma_follows_budget() {
        let c = config(&[("experts", "8"), ("rounds", "5"), ("kernel", "cyclic")]);
        let r = run_experiment(&c).unwrap();
        // sqrt((1 + 2 log 8) / (2(e-2))), mpmath
        assert_relative_eq!(r.gamma, 1.895_027_013_346_875_8, max_relative = 1e-15);
    }

    #[test]
    fn transform_is_affine_per_round() {
        let mut table = vec![vec![1.0, 2.0], vec![3.0, 5.0]];
        apply_transform(&mut table, Transform { scale: 2.0, shift: 10.0 }, 1);
        assert_relative_eq!(table[0][1] - table[0][0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(table[1][1] - table[1][0], 4.0, epsilon = 1e-12);
    }
}
