//! Controlled Markov chains with payoffs and the direct (planning) problem.
//!
//! Indices are 0-based throughout. A strategy written `[1 2]ᵀ` in 1-based
//! textbook notation is `Strategy(vec![0, 1])` here.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::stationary::stationary_distribution;

/// Tolerance for row sums and the initial distribution.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Default upper bound on `K^m` for exhaustive strategy search.
pub const DEFAULT_STRATEGY_CAP: u64 = 1_000_000;

/// The full controlled chain: per-decision transition and payoff matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovPayoffModel {
    pub num_states: usize,
    pub num_decisions: usize,
    pub initial_distribution: Vec<f64>,
    /// `transitions[k][i][j]`: probability of `i → j` under decision `k`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `payoffs[k][i][j]`: payoff collected on `i → j` under decision `k`.
    pub payoffs: Vec<Vec<Vec<f64>>>,
}

impl MarkovPayoffModel {
    /// Builds a model and rejects it if any invariant is violated.
    pub fn new(
        initial_distribution: Vec<f64>,
        transitions: Vec<Vec<Vec<f64>>>,
        payoffs: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let model = MarkovPayoffModel {
            num_states: initial_distribution.len(),
            num_decisions: transitions.len(),
            initial_distribution,
            transitions,
            payoffs,
        };
        model.ensure_valid()?;
        Ok(model)
    }

    /// The two-state, two-decision robot model used throughout the docs and
    /// tests (sensor left/right, back up turning left/right). The start
    /// distribution is uniform.
    pub fn table1() -> Self {
        MarkovPayoffModel {
            num_states: 2,
            num_decisions: 2,
            initial_distribution: vec![0.5, 0.5],
            transitions: vec![
                vec![vec![0.05, 0.95], vec![0.19, 0.81]],
                vec![vec![0.27, 0.73], vec![0.48, 0.52]],
            ],
            payoffs: vec![
                vec![vec![45.0, 79.0], vec![44.0, 31.0]],
                vec![vec![25.0, 23.0], vec![93.0, 45.0]],
            ],
        }
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn validate(&self) -> Vec<String> {
        validate_model(self)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = validate_model(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(violations))
        }
    }
}

/// Lists every invariant violation of `model`, each prefixed with the index
/// path of the offending entry. An empty list means the model is valid.
pub fn validate_model(model: &MarkovPayoffModel) -> Vec<String> {
    let mut out = Vec::new();
    let m = model.num_states;
    let k = model.num_decisions;
    if m == 0 {
        out.push("num_states: must be positive".to_string());
    }
    if k == 0 {
        out.push("num_decisions: must be positive".to_string());
    }

    if model.initial_distribution.len() != m {
        out.push(format!(
            "initial_distribution: length {} != num_states {m}",
            model.initial_distribution.len()
        ));
    }
    check_probability_row(
        &model.initial_distribution,
        "initial_distribution",
        &mut out,
    );

    check_stack(&model.transitions, "transitions", m, k, &mut out);
    check_stack(&model.payoffs, "payoffs", m, k, &mut out);

    for (d, matrix) in model.transitions.iter().enumerate() {
        for (i, row) in matrix.iter().enumerate() {
            check_probability_row(row, &format!("transitions[{d}][{i}]"), &mut out);
        }
    }
    for (d, matrix) in model.payoffs.iter().enumerate() {
        for (i, row) in matrix.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if !r.is_finite() {
                    out.push(format!("payoffs[{d}][{i}][{j}]: not finite"));
                }
            }
        }
    }
    out
}

fn check_stack(stack: &[Vec<Vec<f64>>], name: &str, m: usize, k: usize, out: &mut Vec<String>) {
    if stack.len() != k {
        out.push(format!(
            "{name}: {} matrices != num_decisions {k}",
            stack.len()
        ));
    }
    for (d, matrix) in stack.iter().enumerate() {
        if matrix.len() != m {
            out.push(format!(
                "{name}[{d}]: {} rows != num_states {m}",
                matrix.len()
            ));
        }
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != m {
                out.push(format!(
                    "{name}[{d}][{i}]: {} columns != num_states {m}",
                    row.len()
                ));
            }
        }
    }
}

fn check_probability_row(row: &[f64], path: &str, out: &mut Vec<String>) {
    for (j, &p) in row.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            out.push(format!("{path}[{j}]: probability {p} outside [0, 1]"));
        }
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
        out.push(format!("{path}: sums to {sum}, expected 1"));
    }
}

/// A pure stationary strategy: `decisions[i]` is the decision taken in state `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Strategy(pub Vec<usize>);

impl Strategy {
    pub fn new(decisions: Vec<usize>) -> Self {
        Strategy(decisions)
    }

    /// Every state takes decision `k`.
    pub fn constant(num_states: usize, k: usize) -> Self {
        Strategy(vec![k; num_states])
    }

    pub fn decision(&self, state: usize) -> usize {
        self.0[state]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn decisions(&self) -> &[usize] {
        &self.0
    }

    /// Position in the lexicographic enumeration of all `K^m` strategies
    /// (state 0 is the most significant digit).
    pub fn index(&self, num_decisions: usize) -> u64 {
        self.0
            .iter()
            .fold(0u64, |acc, &k| acc * num_decisions as u64 + k as u64)
    }

    /// Inverse of [`Strategy::index`].
    pub fn from_index(mut index: u64, num_states: usize, num_decisions: usize) -> Self {
        let base = num_decisions as u64;
        let mut decisions = vec![0; num_states];
        for slot in decisions.iter_mut().rev() {
            *slot = (index % base) as usize;
            index /= base;
        }
        Strategy(decisions)
    }

    pub fn check(&self, num_states: usize, num_decisions: usize) -> Result<()> {
        if self.0.len() != num_states {
            return Err(Error::StrategyLength {
                expected: num_states,
                got: self.0.len(),
            });
        }
        for (state, &decision) in self.0.iter().enumerate() {
            if decision >= num_decisions {
                return Err(Error::DecisionOutOfRange {
                    state,
                    decision,
                    num_decisions,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (n, k) in self.0.iter().enumerate() {
            if n > 0 {
                write!(f, " ")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, "]")
    }
}

/// Accepts the `Display` form and looser spellings: `[0 1]`, `0 1`, `0,1`.
impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        let decisions = inner
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>().map_err(|_| {
                    Error::InvalidParameter(format!("bad decision {t:?} in strategy {s:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if decisions.is_empty() {
            return Err(Error::InvalidParameter(format!("empty strategy {s:?}")));
        }
        Ok(Strategy(decisions))
    }
}

/// Transition matrices plus expected one-step payoffs `r_i^k`.
///
/// This is what the direct solver needs, and it can be built either from a
/// known [`MarkovPayoffModel`] or from estimates recovered from episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainModel {
    /// `transitions[k][i][j]`, K matrices of shape m×m.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `step_payoffs[i][k]`, shape m×K.
    pub step_payoffs: Vec<Vec<f64>>,
}

impl GainModel {
    pub fn from_model(model: &MarkovPayoffModel) -> Result<Self> {
        Ok(GainModel {
            transitions: model.transitions.clone(),
            step_payoffs: expected_step_payoffs(model)?,
        })
    }

    pub fn num_states(&self) -> usize {
        self.step_payoffs.len()
    }

    pub fn num_decisions(&self) -> usize {
        self.transitions.len()
    }

    pub fn validate(&self) -> Vec<String> {
        let m = self.num_states();
        let k = self.num_decisions();
        let mut out = Vec::new();
        if m == 0 || k == 0 {
            out.push("gain model must have at least one state and one decision".into());
        }
        check_stack(&self.transitions, "transitions", m, k, &mut out);
        for (d, matrix) in self.transitions.iter().enumerate() {
            for (i, row) in matrix.iter().enumerate() {
                check_probability_row(row, &format!("transitions[{d}][{i}]"), &mut out);
            }
        }
        for (i, row) in self.step_payoffs.iter().enumerate() {
            if row.len() != k {
                out.push(format!(
                    "step_payoffs[{i}]: {} columns != num_decisions {k}",
                    row.len()
                ));
            }
            for (d, r) in row.iter().enumerate() {
                if !r.is_finite() {
                    out.push(format!("step_payoffs[{i}][{d}]: not finite"));
                }
            }
        }
        out
    }

    fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(violations))
        }
    }
}

/// `r_i^k = Σ_j p_ij^k · r_ij^k`, returned as an m×K matrix.
pub fn expected_step_payoffs(model: &MarkovPayoffModel) -> Result<Vec<Vec<f64>>> {
    model.ensure_valid()?;
    Ok((0..model.num_states)
        .map(|i| {
            (0..model.num_decisions)
                .map(|k| {
                    model.transitions[k][i]
                        .iter()
                        .zip(&model.payoffs[k][i])
                        .map(|(p, r)| p * r)
                        .sum()
                })
                .collect()
        })
        .collect())
}

type Matrix = Vec<Vec<f64>>;

/// Assembles the working matrices `(P^s, R^s)`: row `i` of each is copied from
/// the matrix of the decision the strategy takes in state `i`.
pub fn working_matrices(
    model: &MarkovPayoffModel,
    strategy: &Strategy,
) -> Result<(Matrix, Matrix)> {
    model.ensure_valid()?;
    strategy.check(model.num_states, model.num_decisions)?;
    Ok((
        select_rows(&model.transitions, strategy),
        select_rows(&model.payoffs, strategy),
    ))
}

fn select_rows(stack: &[Vec<Vec<f64>>], strategy: &Strategy) -> Vec<Vec<f64>> {
    strategy
        .decisions()
        .iter()
        .enumerate()
        .map(|(i, &k)| stack[k][i].clone())
        .collect()
}

/// Steady-state quantities of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEvaluation {
    pub strategy: Strategy,
    pub working_transition: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
    pub state_payoffs: Vec<f64>,
    pub mean_gain: f64,
}

/// Computes `V^s = Σ_i p_i^N · r_i^{k_i}` for `strategy`.
pub fn evaluate_strategy(gm: &GainModel, strategy: &Strategy) -> Result<GainEvaluation> {
    gm.ensure_valid()?;
    evaluate_unchecked(gm, strategy)
}

fn evaluate_unchecked(gm: &GainModel, strategy: &Strategy) -> Result<GainEvaluation> {
    strategy.check(gm.num_states(), gm.num_decisions())?;
    let working_transition = select_rows(&gm.transitions, strategy);
    let stationary = stationary_distribution(&working_transition)?;
    let state_payoffs: Vec<f64> = strategy
        .decisions()
        .iter()
        .enumerate()
        .map(|(i, &k)| gm.step_payoffs[i][k])
        .collect();
    let mean_gain = stationary
        .iter()
        .zip(&state_payoffs)
        .map(|(p, r)| p * r)
        .sum();
    Ok(GainEvaluation {
        strategy: strategy.clone(),
        working_transition,
        stationary,
        state_payoffs,
        mean_gain,
    })
}

fn strategy_count(m: usize, k: usize, cap: u64) -> Result<u64> {
    let too_large = || Error::StrategySpaceTooLarge {
        states: m,
        decisions: k,
        cap,
    };
    let exp = u32::try_from(m).map_err(|_| too_large())?;
    match (k as u64).checked_pow(exp) {
        Some(n) if n <= cap => Ok(n),
        _ => Err(too_large()),
    }
}

/// All `K^m` pure strategies in lexicographic order.
pub fn enumerate_strategies(m: usize, k: usize) -> Result<Vec<Strategy>> {
    enumerate_strategies_capped(m, k, DEFAULT_STRATEGY_CAP)
}

pub fn enumerate_strategies_capped(m: usize, k: usize, cap: u64) -> Result<Vec<Strategy>> {
    let n = strategy_count(m, k, cap)?;
    Ok((0..n).map(|s| Strategy::from_index(s, m, k)).collect())
}

/// Gains closer than this (relative) count as ties.
const TIE_TOLERANCE: f64 = 1e-12;

fn beats(candidate: f64, incumbent: f64) -> bool {
    candidate - incumbent > TIE_TOLERANCE * incumbent.abs().max(1.0)
}

/// One row of the exhaustive search table. `evaluation` is `None` when the
/// strategy's chain has no unique stationary law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub evaluation: Option<GainEvaluation>,
}

impl StrategyRow {
    pub fn non_ergodic(&self) -> bool {
        self.evaluation.is_none()
    }

    pub fn mean_gain(&self) -> Option<f64> {
        self.evaluation.as_ref().map(|e| e.mean_gain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectSolution {
    pub best: GainEvaluation,
    pub table: Vec<StrategyRow>,
}

/// Brute-force search for the gain-maximizing stationary strategy.
pub fn solve_direct(gm: &GainModel) -> Result<DirectSolution> {
    let (m, k) = (gm.num_states(), gm.num_decisions());
    let exec = match strategy_count(m, k, DEFAULT_STRATEGY_CAP) {
        Ok(n) if n < PARALLEL_SWEEP_MIN => Execution::Sequential,
        _ => Execution::default(),
    };
    solve_direct_with(gm, exec, DEFAULT_STRATEGY_CAP)
}

/// Below this many strategies the sweep is cheaper than a rayon dispatch.
const PARALLEL_SWEEP_MIN: u64 = 4096;

/// [`solve_direct`] with an explicit execution mode and strategy-space cap.
///
/// Ties go to the lexicographically smallest strategy; non-ergodic strategies
/// stay in the table but never win.
pub fn solve_direct_with(gm: &GainModel, exec: Execution, cap: u64) -> Result<DirectSolution> {
    gm.ensure_valid()?;
    let (m, k) = (gm.num_states(), gm.num_decisions());
    let n = strategy_count(m, k, cap)?;
    let rows: Vec<Result<StrategyRow>> = exec.map_range(n as usize, |s| {
        let strategy = Strategy::from_index(s as u64, m, k);
        match evaluate_unchecked(gm, &strategy) {
            Ok(e) => Ok(StrategyRow {
                strategy,
                evaluation: Some(e),
            }),
            Err(Error::NonErgodic) => Ok(StrategyRow {
                strategy,
                evaluation: None,
            }),
            Err(e) => Err(e),
        }
    });
    let table = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let mut best: Option<&GainEvaluation> = None;
    for eval in table.iter().filter_map(|r| r.evaluation.as_ref()) {
        if best.is_none_or(|b| beats(eval.mean_gain, b.mean_gain)) {
            best = Some(eval);
        }
    }
    let best = best.ok_or(Error::NoFeasibleStrategy)?.clone();
    Ok(DirectSolution { best, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn strategy_parses_its_display_form() {
        let s = Strategy::new(vec![1, 0, 2]);
        assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        assert_eq!("1,0, 2".parse::<Strategy>().unwrap(), s);
        assert!("".parse::<Strategy>().is_err());
        assert!("0 x".parse::<Strategy>().is_err());
    }

    #[test]
    fn table1_is_valid() {
        assert!(validate_model(&MarkovPayoffModel::table1()).is_empty());
    }

    #[test]
    fn bad_row_sum_names_the_row() {
        let mut model = MarkovPayoffModel::table1();
        model.transitions[1][0] = vec![0.5, 0.6];
        let v = validate_model(&model);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].starts_with("transitions[1][0]"), "{v:?}");
    }

    #[test]
    fn negative_probability_flagged() {
        let mut model = MarkovPayoffModel::table1();
        model.transitions[0][1] = vec![-0.1, 1.1];
        let v = validate_model(&model);
        assert!(
            v.iter().any(|s| s.starts_with("transitions[0][1][0]")),
            "{v:?}"
        );
    }

    #[test]
    fn shape_mismatch_flagged() {
        let mut model = MarkovPayoffModel::table1();
        model.payoffs[0].pop();
        assert!(!validate_model(&model).is_empty());
        assert!(matches!(
            expected_step_payoffs(&model),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn step_payoffs_by_hand() {
        let r = expected_step_payoffs(&MarkovPayoffModel::table1()).unwrap();
        assert_abs_diff_eq!(r[0][0], 0.05 * 45.0 + 0.95 * 79.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[0][0], 77.30, epsilon = 1e-9);
        assert_abs_diff_eq!(r[1][0], 33.47, epsilon = 1e-9);
        assert_abs_diff_eq!(r[0][1], 23.54, epsilon = 1e-9);
        assert_abs_diff_eq!(r[1][1], 68.04, epsilon = 1e-9);
    }

    #[test]
    fn constant_payoff_row_gives_that_constant() {
        let mut model = MarkovPayoffModel::table1();
        model.payoffs[1][0] = vec![12.5, 12.5];
        let r = expected_step_payoffs(&model).unwrap();
        assert_abs_diff_eq!(r[0][1], 12.5, epsilon = 1e-12);
    }

    #[test]
    fn working_matrices_follow_strategy() {
        let model = MarkovPayoffModel::table1();
        let (p, r) = working_matrices(&model, &Strategy::new(vec![0, 1])).unwrap();
        assert_eq!(p, vec![vec![0.05, 0.95], vec![0.48, 0.52]]);
        assert_eq!(r, vec![vec![45.0, 79.0], vec![93.0, 45.0]]);

        let (p, _) = working_matrices(&model, &Strategy::new(vec![0, 0])).unwrap();
        assert_eq!(p, model.transitions[0]);

        assert!(matches!(
            working_matrices(&model, &Strategy::new(vec![0])),
            Err(Error::StrategyLength { .. })
        ));
    }

    #[test]
    fn single_decision_model() {
        let model = MarkovPayoffModel::new(
            vec![1.0, 0.0],
            vec![vec![vec![0.3, 0.7], vec![0.6, 0.4]]],
            vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]]],
        )
        .unwrap();
        let only = enumerate_strategies(2, 1).unwrap();
        assert_eq!(only, vec![Strategy::new(vec![0, 0])]);
        let (p, _) = working_matrices(&model, &only[0]).unwrap();
        assert_eq!(p, model.transitions[0]);
    }

    #[test]
    fn evaluate_table1_optimum() {
        let gm = GainModel::from_model(&MarkovPayoffModel::table1()).unwrap();
        let e = evaluate_strategy(&gm, &Strategy::new(vec![0, 1])).unwrap();
        let p0 = 0.48 / 1.43;
        assert_abs_diff_eq!(e.mean_gain, p0 * 77.30 + (1.0 - p0) * 68.04, epsilon = 1e-9);
        assert_abs_diff_eq!(e.mean_gain, 71.1, epsilon = 0.05);

        let e = evaluate_strategy(&gm, &Strategy::new(vec![0, 0])).unwrap();
        assert_abs_diff_eq!(e.stationary[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.mean_gain, 77.30 / 6.0 + 33.47 * 5.0 / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_step_payoffs_give_constant_gain() {
        let mut gm = GainModel::from_model(&MarkovPayoffModel::table1()).unwrap();
        gm.step_payoffs = vec![vec![4.25; 2]; 2];
        let sol = solve_direct(&gm).unwrap();
        for row in &sol.table {
            assert_abs_diff_eq!(row.mean_gain().unwrap(), 4.25, epsilon = 1e-12);
        }
        assert_eq!(sol.best.strategy, Strategy::new(vec![0, 0]));
    }

    #[test]
    fn enumeration_order_and_counts() {
        let s = enumerate_strategies(2, 2).unwrap();
        let raw: Vec<Vec<usize>> = s.into_iter().map(|s| s.0).collect();
        assert_eq!(raw, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert_eq!(enumerate_strategies(1, 3).unwrap().len(), 3);
        let eight = enumerate_strategies(3, 2).unwrap();
        assert_eq!(eight.len(), 8);
        assert!(eight.windows(2).all(|w| w[0] < w[1]));
        for (n, s) in eight.iter().enumerate() {
            assert_eq!(s.index(2), n as u64);
        }
    }

    #[test]
    fn strategy_cap_enforced() {
        assert!(matches!(
            enumerate_strategies(21, 2),
            Err(Error::StrategySpaceTooLarge { .. })
        ));
        assert!(enumerate_strategies_capped(3, 3, 27).is_ok());
        assert!(enumerate_strategies_capped(3, 3, 26).is_err());
        assert!(matches!(
            enumerate_strategies(usize::MAX, 2),
            Err(Error::StrategySpaceTooLarge { .. })
        ));
    }

    #[test]
    fn non_ergodic_strategies_are_flagged_not_fatal() {
        // Decision 0 is the identity (two closed classes); decision 1 mixes.
        let gm = GainModel {
            transitions: vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
            step_payoffs: vec![vec![100.0, 1.0], vec![100.0, 2.0]],
        };
        let sol = solve_direct(&gm).unwrap();
        assert!(sol.table[0].non_ergodic());
        assert!(!sol.table[3].non_ergodic());
        assert!(sol.best.mean_gain.is_finite());

        let all_stuck = GainModel {
            transitions: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
            step_payoffs: vec![vec![1.0], vec![2.0]],
        };
        assert_eq!(solve_direct(&all_stuck), Err(Error::NoFeasibleStrategy));
    }

    #[test]
    fn display_is_compact() {
        assert_eq!(Strategy::new(vec![0, 1]).to_string(), "[0 1]");
    }
}
