//! Episode ("presentation") generation from a known model.
//!
//! All sampling goes through an explicitly passed generator. Batches derive
//! one ChaCha8 stream per episode from `base_seed + episode_index`, so a batch
//! is reproducible and can be generated in parallel.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mdp::{MarkovPayoffModel, Strategy};

/// One chain transition together with the decision that caused it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub decision: usize,
    pub next_state: usize,
    /// Only present in full-knowledge simulation logs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_payoff: Option<f64>,
}

/// What an observer of the decision taker sees for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: usize,
    pub decision: usize,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Step>,
    pub total_payoff: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// States, decisions and successors only; per-step payoffs are not exposed.
    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.steps.iter().map(|s| Transition {
            state: s.state,
            decision: s.decision,
            next_state: s.next_state,
        })
    }

    /// Copy with per-step payoffs removed (observation-grade log record).
    pub fn observed(&self) -> Episode {
        Episode {
            steps: self
                .steps
                .iter()
                .map(|s| Step {
                    step_payoff: None,
                    ..s.clone()
                })
                .collect(),
            total_payoff: self.total_payoff,
        }
    }

    /// Checks index ranges, chain consistency and, when step payoffs are
    /// present, that they add up to the total.
    pub fn check(&self, num_states: usize, num_decisions: usize) -> Result<()> {
        if !self.total_payoff.is_finite() {
            return Err(Error::NonFinite("total_payoff"));
        }
        for s in &self.steps {
            for idx in [s.state, s.next_state] {
                if idx >= num_states {
                    return Err(Error::StateOutOfRange {
                        state: idx,
                        num_states,
                    });
                }
            }
            if s.decision >= num_decisions {
                return Err(Error::DecisionOutOfRange {
                    state: s.state,
                    decision: s.decision,
                    num_decisions,
                });
            }
        }
        for (n, pair) in self.steps.windows(2).enumerate() {
            if pair[0].next_state != pair[1].state {
                return Err(Error::BrokenChain(n + 1));
            }
        }
        if self.steps.iter().all(|s| s.step_payoff.is_some()) && !self.steps.is_empty() {
            let sum: f64 = self.steps.iter().filter_map(|s| s.step_payoff).sum();
            if (sum - self.total_payoff).abs() > 1e-9 * sum.abs().max(1.0) {
                return Err(Error::InvalidParameter(format!(
                    "step payoffs sum to {sum}, total_payoff is {}",
                    self.total_payoff
                )));
            }
        }
        Ok(())
    }
}

/// Anything that picks a decision for the current state.
pub trait Policy {
    fn decide(&mut self, state: usize) -> usize;
}

impl Policy for Strategy {
    fn decide(&mut self, state: usize) -> usize {
        self.decision(state)
    }
}

impl Policy for &Strategy {
    fn decide(&mut self, state: usize) -> usize {
        self.decision(state)
    }
}

/// Adapts a closure (for example a human at a console) into a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<F: FnMut(usize) -> usize> Policy for FnPolicy<F> {
    fn decide(&mut self, state: usize) -> usize {
        (self.0)(state)
    }
}

/// Inverse-CDF draw from a probability row.
pub fn sample_from_row<R: RngCore + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    for (j, &p) in row.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return j;
        }
    }
    // u landed in the rounding gap above the last partial sum.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

pub fn sample_next<R: RngCore + ?Sized>(
    model: &MarkovPayoffModel,
    state: usize,
    decision: usize,
    rng: &mut R,
) -> Result<usize> {
    check_indices(model, state, decision)?;
    Ok(sample_from_row(&model.transitions[decision][state], rng))
}

fn check_indices(model: &MarkovPayoffModel, state: usize, decision: usize) -> Result<()> {
    if state >= model.num_states {
        return Err(Error::StateOutOfRange {
            state,
            num_states: model.num_states,
        });
    }
    if decision >= model.num_decisions {
        return Err(Error::DecisionOutOfRange {
            state,
            decision,
            num_decisions: model.num_decisions,
        });
    }
    Ok(())
}

/// Generator stream for episode `index` of a batch seeded with `base_seed`.
pub fn episode_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(index))
}

/// An episode being built one decision at a time. Used by the batch
/// simulator and by interactive sessions, so both consume the generator in
/// the same order: start state first, then one draw per step.
#[derive(Debug, Clone)]
pub struct ChainCursor<R> {
    rng: R,
    state: usize,
    steps: Vec<Step>,
}

impl<R: RngCore> ChainCursor<R> {
    /// Starts at `start_state`, or draws it from the initial distribution.
    pub fn start(
        model: &MarkovPayoffModel,
        start_state: Option<usize>,
        mut rng: R,
    ) -> Result<Self> {
        let state = match start_state {
            Some(s) if s >= model.num_states => {
                return Err(Error::StateOutOfRange {
                    state: s,
                    num_states: model.num_states,
                })
            }
            Some(s) => s,
            None => sample_from_row(&model.initial_distribution, &mut rng),
        };
        Ok(ChainCursor {
            rng,
            state,
            steps: Vec::new(),
        })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Applies `decision` in the current state and samples the successor.
    pub fn step(&mut self, model: &MarkovPayoffModel, decision: usize) -> Result<&Step> {
        let next_state = sample_next(model, self.state, decision, &mut self.rng)?;
        self.steps.push(Step {
            state: self.state,
            decision,
            next_state,
            step_payoff: Some(model.payoffs[decision][self.state][next_state]),
        });
        self.state = next_state;
        Ok(self.steps.last().expect("just pushed"))
    }

    /// Closes the episode; the total is the sum of the step payoffs.
    pub fn finish(self) -> Episode {
        let total_payoff = self.steps.iter().filter_map(|s| s.step_payoff).sum();
        Episode {
            steps: self.steps,
            total_payoff,
        }
    }
}

pub fn simulate_episode<P: Policy + ?Sized, R: RngCore + ?Sized>(
    model: &MarkovPayoffModel,
    policy: &mut P,
    num_steps: usize,
    start_state: Option<usize>,
    rng: &mut R,
) -> Result<Episode> {
    if num_steps == 0 {
        return Err(Error::InvalidParameter(
            "num_steps must be at least 1".into(),
        ));
    }
    model.ensure_valid()?;
    let mut cursor = ChainCursor::start(model, start_state, rng)?;
    for _ in 0..num_steps {
        let decision = policy.decide(cursor.state());
        cursor.step(model, decision)?;
    }
    Ok(cursor.finish())
}

/// Which pure strategy the teacher uses for each generated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSchedule {
    pub entries: Vec<(Strategy, usize)>,
}

impl TeacherSchedule {
    pub fn new(entries: Vec<(Strategy, usize)>) -> Self {
        TeacherSchedule { entries }
    }

    /// Cycles through `strategies` one episode at a time for `episodes` episodes.
    pub fn round_robin(strategies: &[Strategy], episodes: usize) -> Self {
        TeacherSchedule {
            entries: (0..episodes)
                .map(|n| (strategies[n % strategies.len()].clone(), 1))
                .collect(),
        }
    }

    pub fn num_episodes(&self) -> usize {
        self.entries.iter().map(|(_, n)| n).sum()
    }

    /// One strategy per episode, in schedule order.
    pub fn expand(&self) -> Vec<&Strategy> {
        self.entries
            .iter()
            .flat_map(|(s, n)| std::iter::repeat_n(s, *n))
            .collect()
    }

    pub fn check(&self, model: &MarkovPayoffModel) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidParameter("empty teacher schedule".into()));
        }
        for (strategy, count) in &self.entries {
            if *count == 0 {
                return Err(Error::InvalidParameter(
                    "schedule entries need an episode count of at least 1".into(),
                ));
            }
            strategy.check(model.num_states, model.num_decisions)?;
        }
        Ok(())
    }
}

pub fn simulate_batch(
    model: &MarkovPayoffModel,
    schedule: &TeacherSchedule,
    steps_per_episode: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    simulate_batch_with(
        model,
        schedule,
        steps_per_episode,
        seed,
        Execution::default(),
    )
}

pub fn simulate_batch_with(
    model: &MarkovPayoffModel,
    schedule: &TeacherSchedule,
    steps_per_episode: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Episode>> {
    model.ensure_valid()?;
    schedule.check(model)?;
    let plan = schedule.expand();
    exec.map_range(plan.len(), |n| {
        let mut rng = episode_rng(seed, n as u64);
        let mut policy = plan[n];
        simulate_episode(model, &mut policy, steps_per_episode, None, &mut rng)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_hot_model() -> MarkovPayoffModel {
        MarkovPayoffModel::new(
            vec![1.0, 0.0],
            vec![
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
            vec![
                vec![vec![1.0, 2.0], vec![3.0, 4.0]],
                vec![vec![5.0, 6.0], vec![7.0, 8.0]],
            ],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_rows() {
        let model = one_hot_model();
        let mut rng = episode_rng(1, 0);
        for _ in 0..100 {
            assert_eq!(sample_next(&model, 0, 0, &mut rng).unwrap(), 1);
            assert_eq!(sample_next(&model, 1, 0, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn row_frequency_matches() {
        let model = MarkovPayoffModel::table1();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_next(&model, 0, 0, &mut rng).unwrap() == 0)
            .count();
        assert_abs_diff_eq!(zeros as f64 / n as f64, 0.05, epsilon = 0.01);
    }

    #[test]
    fn out_of_range_indices() {
        let model = MarkovPayoffModel::table1();
        let mut rng = episode_rng(0, 0);
        assert!(sample_next(&model, 2, 0, &mut rng).is_err());
        assert!(sample_next(&model, 0, 2, &mut rng).is_err());
    }

    #[test]
    fn one_hot_model_is_seed_independent() {
        let model = one_hot_model();
        let strategy = Strategy::new(vec![0, 0]);
        let reference =
            simulate_episode(&model, &mut &strategy, 6, None, &mut episode_rng(0, 0)).unwrap();
        for seed in 1..20 {
            let e = simulate_episode(&model, &mut &strategy, 6, None, &mut episode_rng(seed, 0))
                .unwrap();
            assert_eq!(e, reference);
        }
        // 0 -> 1 -> 0 ... payoffs 2, 3, 2, 3, 2, 3
        assert_eq!(reference.total_payoff, 15.0);
    }

    #[test]
    fn thirty_step_episode_is_consistent() {
        let model = MarkovPayoffModel::table1();
        let e = simulate_episode(
            &model,
            &mut Strategy::new(vec![0, 1]),
            30,
            None,
            &mut episode_rng(3, 0),
        )
        .unwrap();
        assert_eq!(e.len(), 30);
        e.check(2, 2).unwrap();
        assert!(e.steps.iter().all(|s| s.decision == s.state));
    }

    #[test]
    fn bad_policy_decision_is_an_error() {
        let model = MarkovPayoffModel::table1();
        let got = simulate_episode(
            &model,
            &mut FnPolicy(|_| 7),
            3,
            Some(0),
            &mut episode_rng(0, 0),
        );
        assert!(matches!(
            got,
            Err(Error::DecisionOutOfRange { decision: 7, .. })
        ));
        let got = simulate_episode(
            &model,
            &mut FnPolicy(|_| 0),
            0,
            Some(0),
            &mut episode_rng(0, 0),
        );
        assert!(got.is_err());
    }

    #[test]
    fn batch_shape_and_determinism() {
        let model = MarkovPayoffModel::table1();
        let all = crate::mdp::enumerate_strategies(2, 2).unwrap();
        let schedule = TeacherSchedule::round_robin(&all, 100);
        let a = simulate_batch(&model, &schedule, 30, 7).unwrap();
        let b = simulate_batch_with(&model, &schedule, 30, 7, Execution::Sequential).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_ne!(a, simulate_batch(&model, &schedule, 30, 8).unwrap());

        let single = TeacherSchedule::new(vec![(Strategy::new(vec![0, 1]), 1)]);
        let one = simulate_batch(&model, &single, 1, 7).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 1);
    }

    #[test]
    fn schedule_validation() {
        let model = MarkovPayoffModel::table1();
        let zero = TeacherSchedule::new(vec![(Strategy::new(vec![0, 1]), 0)]);
        assert!(simulate_batch(&model, &zero, 5, 0).is_err());
        let bad = TeacherSchedule::new(vec![(Strategy::new(vec![0, 3]), 1)]);
        assert!(simulate_batch(&model, &bad, 5, 0).is_err());
    }

    #[test]
    fn observed_copy_drops_step_payoffs() {
        let model = MarkovPayoffModel::table1();
        let e = simulate_episode(
            &model,
            &mut Strategy::new(vec![1, 1]),
            5,
            None,
            &mut episode_rng(0, 0),
        )
        .unwrap();
        let o = e.observed();
        assert!(o.steps.iter().all(|s| s.step_payoff.is_none()));
        assert_eq!(o.total_payoff, e.total_payoff);
        let line = serde_json::to_string(&o).unwrap();
        assert!(!line.contains("step_payoff"));
    }

    #[test]
    fn broken_chain_detected() {
        let e = Episode {
            steps: vec![
                Step {
                    state: 0,
                    decision: 0,
                    next_state: 1,
                    step_payoff: None,
                },
                Step {
                    state: 0,
                    decision: 0,
                    next_state: 1,
                    step_payoff: None,
                },
            ],
            total_payoff: 1.0,
        };
        assert_eq!(e.check(2, 2), Err(Error::BrokenChain(1)));
    }
}
