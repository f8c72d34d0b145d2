//! Competition classes as equivalence-class spaces with stochastic
//! transition maps.
//!
//! A class parameter vector `[m, ...]` groups every strategy that selects
//! expert `m` now and agrees on the remaining kernel-specific coordinates.
//! The kernel says how class weight flows from one round to the next; the
//! product of the weights along a path measures how hard that competitor is
//! to track.

use std::collections::HashMap;
use std::fmt;

use log::warn;

use crate::error::{Error, Result};

/// Row sums of a kernel must equal 1 within this tolerance.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Coordinates of an equivalence class; `coords[0]` is the selected expert.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassParams(Vec<usize>);

impl ClassParams {
    pub fn new(coords: Vec<usize>) -> Self {
        assert!(!coords.is_empty(), "class parameters need an expert coordinate");
        Self(coords)
    }

    pub fn expert(&self) -> usize {
        self.0[0]
    }

    pub fn coords(&self) -> &[usize] {
        &self.0
    }
}

impl fmt::Display for ClassParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("]")
    }
}

impl<const N: usize> From<[usize; N]> for ClassParams {
    fn from(c: [usize; N]) -> Self {
        Self::new(c.to_vec())
    }
}

/// A stochastic map between equivalence classes of consecutive rounds.
///
/// Rounds are 1-based. `successors(t, i)` lists `(j, weight)` with `i`
/// indexing `classes(t)` and `j` indexing `classes(t + 1)`;
/// `predecessors(t, j)` is the same relation read backwards.
pub trait TransitionKernel: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;

    fn num_experts(&self) -> usize;

    fn classes(&self, round: usize) -> &[ClassParams];

    /// Weight of each class of round 1, read from a single virtual root.
    fn initial(&self) -> &[f64];

    fn successors(&self, round: usize, from: usize) -> &[(usize, f64)];

    fn predecessors(&self, round: usize, to: usize) -> &[(usize, f64)];

    /// Upper bound `W_T` on the class budget of every competitor of length
    /// `horizon`, or `None` when the kernel does not declare one.
    fn budget(&self, horizon: usize) -> Option<f64>;

    /// True when every class has exactly one successor, for every round.
    fn is_deterministic(&self) -> bool;

    fn class_index(&self, round: usize, params: &ClassParams) -> Option<usize> {
        self.classes(round).iter().position(|c| c == params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BudgetRule {
    Constant(f64),
    /// Worst case over all paths of the horizon.
    Switching { experts: usize, switch_weight: f64 },
    Undeclared,
}

/// Time-homogeneous kernel with sparse successor lists.
#[derive(Debug, Clone)]
pub struct SparseKernel {
    name: String,
    experts: usize,
    classes: Vec<ClassParams>,
    initial: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
    predecessors: Vec<Vec<(usize, f64)>>,
    index: HashMap<ClassParams, usize>,
    budget: BudgetRule,
}

impl SparseKernel {
    /// Builds a user kernel. Rows and the initial distribution must sum to 1
    /// and list only strictly positive weights. A declared `budget` must be
    /// at least 1.
    ///
    /// Experts that appear in no class get probability zero forever; this is
    /// allowed but logged as a warning.
    pub fn new(
        name: impl Into<String>,
        experts: usize,
        classes: Vec<ClassParams>,
        initial: Vec<f64>,
        successors: Vec<Vec<(usize, f64)>>,
        budget: Option<f64>,
    ) -> Result<Self> {
        let budget = match budget {
            Some(w) if !(w.is_finite() && w >= 1.0) => {
                return Err(Error::config(format!("declared budget {w} is below 1")))
            }
            Some(w) => BudgetRule::Constant(w),
            None => BudgetRule::Undeclared,
        };
        Self::build(name.into(), experts, classes, initial, successors, budget, ROW_TOLERANCE)
    }

    /// Builds a user kernel from a dense `|Omega| x |Omega|` row-stochastic
    /// matrix; zero entries are dropped.
    pub fn from_dense(
        name: impl Into<String>,
        experts: usize,
        classes: Vec<ClassParams>,
        initial: Vec<f64>,
        matrix: &[Vec<f64>],
        budget: Option<f64>,
    ) -> Result<Self> {
        if matrix.len() != classes.len() {
            return Err(Error::LengthMismatch {
                expected: classes.len(),
                actual: matrix.len(),
            });
        }
        let mut successors = Vec::with_capacity(matrix.len());
        for row in matrix {
            if row.len() != classes.len() {
                return Err(Error::LengthMismatch {
                    expected: classes.len(),
                    actual: row.len(),
                });
            }
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::config("dense kernel entries must be finite and nonnegative"));
            }
            successors.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(j, w)| (j, *w))
                    .collect(),
            );
        }
        Self::new(name, experts, classes, initial, successors, budget)
    }

    fn build(
        name: String,
        experts: usize,
        classes: Vec<ClassParams>,
        initial: Vec<f64>,
        successors: Vec<Vec<(usize, f64)>>,
        budget: BudgetRule,
        tolerance: f64,
    ) -> Result<Self> {
        let n = classes.len();
        if experts == 0 || n == 0 {
            return Err(Error::config("a kernel needs at least one expert and one class"));
        }
        if initial.len() != n {
            return Err(Error::LengthMismatch { expected: n, actual: initial.len() });
        }
        if successors.len() != n {
            return Err(Error::LengthMismatch { expected: n, actual: successors.len() });
        }
        let mut index = HashMap::with_capacity(n);
        for (i, c) in classes.iter().enumerate() {
            if c.expert() >= experts {
                return Err(Error::config(format!(
                    "class {c} selects expert {} but the kernel has {experts}",
                    c.expert()
                )));
            }
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::config(format!("class {c} is listed twice")));
            }
        }
        if initial.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("initial distribution must be nonnegative"));
        }
        let total: f64 = initial.iter().sum();
        if (total - 1.0).abs() > tolerance {
            return Err(Error::config(format!("initial distribution sums to {total}")));
        }

        let mut predecessors = vec![Vec::new(); n];
        for (i, row) in successors.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::config(format!("class {} has no successor", classes[i])));
            }
            let mut sum = 0.0;
            for &(j, w) in row {
                if j >= n {
                    return Err(Error::config(format!("successor index {j} out of range")));
                }
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::config(format!(
                        "transition {} -> {} has weight {w}",
                        classes[i], classes[j]
                    )));
                }
                sum += w;
                predecessors[j].push((i, w));
            }
            if (sum - 1.0).abs() > tolerance {
                return Err(Error::config(format!(
                    "row of class {} sums to {sum}",
                    classes[i]
                )));
            }
        }

        let kernel = Self {
            name,
            experts,
            classes,
            initial,
            successors,
            predecessors,
            index,
            budget,
        };
        let missing = kernel.uncovered_experts();
        if !missing.is_empty() {
            warn!(
                "kernel '{}' has no class for experts {:?}; they will never be selected",
                kernel.name, missing
            );
        }
        Ok(kernel)
    }

    /// Experts that no class selects.
    pub fn uncovered_experts(&self) -> Vec<usize> {
        let mut seen = vec![false; self.experts];
        for c in &self.classes {
            seen[c.expert()] = true;
        }
        (0..self.experts).filter(|m| !seen[*m]).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

impl TransitionKernel for SparseKernel {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_experts(&self) -> usize {
        self.experts
    }

    fn classes(&self, _round: usize) -> &[ClassParams] {
        &self.classes
    }

    fn initial(&self) -> &[f64] {
        &self.initial
    }

    fn successors(&self, _round: usize, from: usize) -> &[(usize, f64)] {
        &self.successors[from]
    }

    fn predecessors(&self, _round: usize, to: usize) -> &[(usize, f64)] {
        &self.predecessors[to]
    }

    fn budget(&self, horizon: usize) -> Option<f64> {
        match self.budget {
            BudgetRule::Constant(w) => Some(w),
            BudgetRule::Switching { experts, switch_weight } => {
                let m = experts as f64;
                let worst = (switch_weight / (m - 1.0)).ln().min((1.0 - switch_weight).ln());
                let transitions = horizon.saturating_sub(1) as f64;
                Some(1.0 + m.ln() - transitions * worst)
            }
            BudgetRule::Undeclared => None,
        }
    }

    fn is_deterministic(&self) -> bool {
        self.successors.iter().all(|row| row.len() == 1)
    }

    fn class_index(&self, _round: usize, params: &ClassParams) -> Option<usize> {
        self.index.get(params).copied()
    }
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn require_experts(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::config("number of experts must be at least 1"));
    }
    Ok(())
}

/// Competes against every constant expert: `[m] -> [m]` with weight 1.
pub fn fixed_kernel(m: usize) -> Result<SparseKernel> {
    require_experts(m)?;
    let classes = (0..m).map(|e| ClassParams::new(vec![e])).collect();
    let successors = (0..m).map(|e| vec![(e, 1.0)]).collect();
    SparseKernel::build(
        "fixed".into(),
        m,
        classes,
        uniform(m),
        successors,
        BudgetRule::Constant(1.0 + (m as f64).ln()),
        ROW_TOLERANCE,
    )
}

/// Competes against every moving-rate strategy: class `[m, sigma]` moves to
/// `[(m + sigma) mod M, sigma]` with weight 1. Class `[m, sigma]` has index
/// `m * M + sigma`.
pub fn cyclic_kernel(m: usize) -> Result<SparseKernel> {
    require_experts(m)?;
    let mut classes = Vec::with_capacity(m * m);
    let mut successors = Vec::with_capacity(m * m);
    for e in 0..m {
        for sigma in 0..m {
            classes.push(ClassParams::new(vec![e, sigma]));
            let next = (e + sigma) % m;
            successors.push(vec![(next * m + sigma, 1.0)]);
        }
    }
    SparseKernel::build(
        "cyclic".into(),
        m,
        classes,
        uniform(m * m),
        successors,
        BudgetRule::Constant(1.0 + 2.0 * (m as f64).ln()),
        ROW_TOLERANCE,
    )
}

/// Fixed-share style class: stay with probability `1 - switch_weight`, move
/// to each other expert with `switch_weight / (M - 1)`.
pub fn switching_kernel(m: usize, switch_weight: f64) -> Result<SparseKernel> {
    if m < 2 {
        return Err(Error::config("switching kernel needs at least 2 experts"));
    }
    if !(switch_weight > 0.0 && switch_weight < 1.0) {
        return Err(Error::config(format!(
            "switch weight must lie in (0, 1), got {switch_weight}"
        )));
    }
    let classes = (0..m).map(|e| ClassParams::new(vec![e])).collect();
    let other = switch_weight / (m - 1) as f64;
    let successors = (0..m)
        .map(|e| {
            (0..m)
                .map(|j| (j, if j == e { 1.0 - switch_weight } else { other }))
                .collect()
        })
        .collect();
    SparseKernel::build(
        "switching".into(),
        m,
        classes,
        uniform(m),
        successors,
        BudgetRule::Switching { experts: m, switch_weight },
        ROW_TOLERANCE,
    )
}

/// `W` of a switching-class competitor with `switches` switches over
/// `rounds` rounds.
pub fn switching_budget(m: usize, switch_weight: f64, rounds: usize, switches: usize) -> f64 {
    let m_f = m as f64;
    let stays = rounds.saturating_sub(1 + switches) as f64;
    1.0 + m_f.ln()
        - switches as f64 * (switch_weight / (m_f - 1.0)).ln()
        - stays * (1.0 - switch_weight).ln()
}

/// Named kernel choice with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Fixed,
    Cyclic,
    Switching { switch_weight: f64 },
}

impl KernelSpec {
    pub fn build(self, m: usize) -> Result<SparseKernel> {
        match self {
            KernelSpec::Fixed => fixed_kernel(m),
            KernelSpec::Cyclic => cyclic_kernel(m),
            KernelSpec::Switching { switch_weight } => switching_kernel(m, switch_weight),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Fixed => "fixed",
            KernelSpec::Cyclic => "cyclic",
            KernelSpec::Switching { .. } => "switching",
        }
    }
}

/// `W(Lambda_T)` of one competitor path.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ClassBudget(pub f64);

impl ClassBudget {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Class budget `1 + log max|Omega| - log T(path)` of a competitor path.
///
/// The initial weight of the first class enters relative to the uniform
/// prior, so a uniformly initialized kernel charges `log |Omega|` once.
pub fn class_budget(kernel: &dyn TransitionKernel, path: &[ClassParams]) -> Result<ClassBudget> {
    if path.is_empty() {
        return Err(Error::rejected("competitor path is empty"));
    }
    let first = kernel
        .class_index(1, &path[0])
        .ok_or(Error::OutOfClass { round: 1 })?;
    let init = kernel.initial()[first];
    if init <= 0.0 {
        return Err(Error::OutOfClass { round: 1 });
    }
    let mut max_size = kernel.classes(1).len();
    let mut neg_log_weight = -(init * max_size as f64).ln();
    let mut prev = first;
    for (k, class) in path.iter().enumerate().skip(1) {
        let round = k + 1;
        max_size = max_size.max(kernel.classes(round).len());
        let next = kernel
            .class_index(round, class)
            .ok_or(Error::OutOfClass { round })?;
        let w = kernel
            .successors(round - 1, prev)
            .iter()
            .find(|(j, _)| *j == next)
            .map(|(_, w)| *w)
            .ok_or(Error::OutOfClass { round })?;
        neg_log_weight -= w.ln();
        prev = next;
    }
    Ok(ClassBudget(1.0 + (max_size as f64).ln() + neg_log_weight))
}

/// A minimum-loss competitor.
#[derive(Debug, Clone, PartialEq)]
pub struct Competitor {
    pub classes: Vec<ClassParams>,
    pub cumulative_loss: f64,
}

impl Competitor {
    pub fn selections(&self) -> Vec<usize> {
        self.classes.iter().map(ClassParams::expert).collect()
    }
}

pub(crate) fn check_table(kernel: &dyn TransitionKernel, losses: &[Vec<f64>]) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::EmptyTable);
    }
    let m = kernel.num_experts();
    for row in losses {
        if row.len() != m {
            return Err(Error::LengthMismatch { expected: m, actual: row.len() });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::rejected("loss table contains a non-finite entry"));
        }
    }
    Ok(())
}

/// Sum of `losses[t][path[t].expert()]` in round order.
pub fn path_loss(path: &[ClassParams], losses: &[Vec<f64>]) -> f64 {
    path.iter().zip(losses).map(|(c, row)| row[c.expert()]).sum()
}

/// Minimum cumulative loss over every in-class path, by backward dynamic
/// programming over the class space. Among optimal paths the one with the
/// lexicographically smallest class sequence is returned.
pub fn best_competitor(kernel: &dyn TransitionKernel, losses: &[Vec<f64>]) -> Result<Competitor> {
    check_table(kernel, losses)?;
    let horizon = losses.len();

    // cost_to_go[t][i]: best loss from round t+1 to the end, starting in class i
    let mut cost_to_go: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let last: Vec<f64> = kernel
        .classes(horizon)
        .iter()
        .map(|c| losses[horizon - 1][c.expert()])
        .collect();
    cost_to_go.push(last);
    for t in (1..horizon).rev() {
        let next = cost_to_go.last().unwrap();
        let row: Vec<f64> = kernel
            .classes(t)
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let tail = kernel
                    .successors(t, i)
                    .iter()
                    .map(|&(j, _)| next[j])
                    .fold(f64::INFINITY, f64::min);
                losses[t - 1][c.expert()] + tail
            })
            .collect();
        cost_to_go.push(row);
    }
    cost_to_go.reverse();

    let pick = |round: usize, candidates: &mut dyn Iterator<Item = usize>| -> usize {
        let classes = kernel.classes(round);
        let costs = &cost_to_go[round - 1];
        candidates
            .min_by(|&a, &b| {
                costs[a]
                    .total_cmp(&costs[b])
                    .then_with(|| classes[a].cmp(&classes[b]))
            })
            .expect("every class has a successor")
    };

    let init = kernel.initial();
    let mut current = pick(1, &mut (0..init.len()).filter(|&i| init[i] > 0.0));
    let mut path = vec![kernel.classes(1)[current].clone()];
    for t in 1..horizon {
        current = pick(t + 1, &mut kernel.successors(t, current).iter().map(|&(j, _)| j));
        path.push(kernel.classes(t + 1)[current].clone());
    }
    let cumulative_loss = path_loss(&path, losses);
    Ok(Competitor { classes: path, cumulative_loss })
}

/// Streaming forward DP: after each pushed round, the minimum cumulative
/// loss of any in-class path over the rounds seen so far.
#[derive(Debug, Clone)]
pub struct PrefixCompetitor<'k> {
    kernel: &'k dyn TransitionKernel,
    round: usize,
    best_ending_in: Vec<f64>,
}

impl<'k> PrefixCompetitor<'k> {
    pub fn new(kernel: &'k dyn TransitionKernel) -> Self {
        Self { kernel, round: 0, best_ending_in: Vec::new() }
    }

    pub fn push(&mut self, losses: &[f64]) -> Result<f64> {
        let m = self.kernel.num_experts();
        if losses.len() != m {
            return Err(Error::LengthMismatch { expected: m, actual: losses.len() });
        }
        let round = self.round + 1;
        let classes = self.kernel.classes(round);
        let next: Vec<f64> = if self.round == 0 {
            let init = self.kernel.initial();
            classes
                .iter()
                .zip(init)
                .map(|(c, w)| if *w > 0.0 { losses[c.expert()] } else { f64::INFINITY })
                .collect()
        } else {
            classes
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let best_prev = self
                        .kernel
                        .predecessors(self.round, j)
                        .iter()
                        .map(|&(i, _)| self.best_ending_in[i])
                        .fold(f64::INFINITY, f64::min);
                    best_prev + losses[c.expert()]
                })
                .collect()
        };
        self.best_ending_in = next;
        self.round = round;
        Ok(self.best())
    }

    pub fn best(&self) -> f64 {
        self.best_ending_in.iter().copied().fold(f64::INFINITY, f64::min)
    }
}
