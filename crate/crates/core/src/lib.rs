//! Translation- and scale-invariant prediction with expert advice.
//!
//! The learner competes against a class of expert-selection strategies
//! described by a [`kernels::TransitionKernel`] over equivalence classes.
//! Losses are centered on the learner's own expected loss and the learning
//! rate adapts to the observed ranges and variances, so the selection
//! probabilities do not change when losses are shifted per round or scaled
//! globally.
//!
//! ```
//! use std::sync::Arc;
//! use expertmix::{cyclic_kernel, gamma_from_budget, Aggregator, LossVector, TransitionKernel};
//!
//! let kernel = Arc::new(cyclic_kernel(3).unwrap());
//! let gamma = gamma_from_budget(kernel.budget(100).unwrap()).unwrap();
//! let mut engine = Aggregator::new(kernel, gamma).unwrap();
//! let p = engine.begin_round();
//! assert_eq!(p.len(), 3);
//! engine.observe(&LossVector::new(1, vec![0.2, 0.9, 0.4]).unwrap()).unwrap();
//! ```

pub mod aggregator;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod oracle;
pub mod stats;

pub use aggregator::{sample_index, Aggregator, RateSchedule, RoundRecord};
pub use error::{Error, Result};
pub use kernels::{
    best_competitor, class_budget, cyclic_kernel, fixed_kernel, switching_kernel, ClassBudget,
    ClassParams, Competitor, KernelSpec, SparseKernel, TransitionKernel,
};
pub use oracle::{bound_report, BoundReport, StrategyPath};
pub use stats::{
    center_losses, gamma_from_budget, learning_rate, round_stats, LearningRate, LossVector,
    PerformanceVector, ProbabilityVector, RoundStats,
};
