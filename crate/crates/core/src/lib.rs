//! Controlled Markov chains with payoffs.
//!
//! * [`mdp`]: the model, working matrices and exhaustive search for the
//!   stationary strategy with the best steady-state mean payoff.
//! * [`simulate`]: episode generation under fixed, scheduled or external policies.
//! * [`inverse`] and [`rls`]: recovering transition probabilities and expected
//!   step payoffs from observed episodes.
//! * [`controller`]: the closed loop that re-plans after every episode.
//! * [`gridworld`]: a bump-sensor coverage robot that emits episodes in the
//!   same two-state, two-decision event space.
//! * [`experiment`]: the seeded teacher-and-learner study used by the CLI and
//!   the acceptance tests.
//!
//! Batch loops run on rayon when the `parallel` feature is on (the default).

pub mod controller;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod gridworld;
pub mod inverse;
pub mod io;
pub mod mdp;
pub mod rls;
pub mod simulate;
pub mod stationary;

pub use controller::{
    batch_fit, export_trace, parse_trace, AdaptiveController, ControllerConfig, ControllerSnapshot,
    ConvergenceTrace, EstimatorSnapshot, EstimatorState, TraceRow,
};
pub use error::{Error, Result};
pub use exec::Execution;
pub use mdp::{
    enumerate_strategies, evaluate_strategy, expected_step_payoffs, solve_direct, validate_model,
    working_matrices, DirectSolution, GainEvaluation, GainModel, MarkovPayoffModel, Strategy,
};
pub use simulate::{simulate_batch, simulate_episode, Episode, Policy, Step, TeacherSchedule};
pub use stationary::stationary_distribution;
