//! The teacher/learner study: a simulated decision taker plays pure
//! strategies on a known model, the controller learns from the episodes, and
//! the outcome is scored against the truth.

use serde::{Deserialize, Serialize};

use crate::controller::{batch_fit, ControllerConfig, ControllerSnapshot, ConvergenceTrace};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inverse::{identify_strategy, PayoffRegressor};
use crate::mdp::{
    enumerate_strategies, expected_step_payoffs, solve_direct, GainModel, MarkovPayoffModel,
    Strategy,
};
use crate::rls::{DEFAULT_DELTA, DEFAULT_LAMBDA};
use crate::simulate::{simulate_batch_with, Episode, TeacherSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub seed: u64,
    /// Defaults to cycling through every pure strategy, one per episode.
    pub schedule: Option<TeacherSchedule>,
    pub delta: f64,
    pub lambda: f64,
    #[serde(default)]
    pub regressor: PayoffRegressor,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            episodes: 100,
            steps_per_episode: 30,
            seed: 7,
            schedule: None,
            delta: DEFAULT_DELTA,
            lambda: DEFAULT_LAMBDA,
            regressor: PayoffRegressor::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Headline numbers of one run. Every field except the identification rate
/// can be recomputed from the run's trace and the true model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub seed: u64,
    pub optimal_strategy: Strategy,
    pub optimal_id: u64,
    pub optimal_gain: f64,
    pub final_recommended_id: u64,
    pub final_v_hat: f64,
    /// Max |p̂ − p| over all transition entries at the last episode.
    pub final_p_error: f64,
    /// Max |r̂ − r| over all (state, decision) pairs at the last episode.
    pub final_r_error: f64,
    /// 1-based episode count from which the recommendation is optimal and stays so.
    pub first_stable_optimal_q: Option<u64>,
    /// Fraction of episodes whose identified strategy equals the teacher's.
    pub identification_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub teacher: Vec<Strategy>,
    pub episodes: Vec<Episode>,
    pub snapshot: ControllerSnapshot,
    pub trace: ConvergenceTrace,
    pub summary: ExperimentSummary,
}

pub fn run_experiment(
    model: &MarkovPayoffModel,
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    run_experiment_with(model, config, Execution::default())
}

pub fn run_experiment_with(
    model: &MarkovPayoffModel,
    config: &ExperimentConfig,
    exec: Execution,
) -> Result<ExperimentOutcome> {
    if config.episodes == 0 {
        return Err(Error::InvalidParameter(
            "episodes must be at least 1".into(),
        ));
    }
    if config.steps_per_episode == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    model.ensure_valid()?;
    let (m, k) = (model.num_states, model.num_decisions);
    let schedule = match &config.schedule {
        Some(s) => s.clone(),
        None => TeacherSchedule::round_robin(&enumerate_strategies(m, k)?, config.episodes),
    };
    let teacher: Vec<Strategy> = schedule.expand().into_iter().cloned().collect();
    let episodes = simulate_batch_with(
        model,
        &schedule,
        config.steps_per_episode,
        config.seed,
        exec,
    )?;

    let truth = GainModel::from_model(model)?;
    let controller = ControllerConfig::new(m, k)
        .with_delta(config.delta)
        .with_lambda(config.lambda)
        .with_regressor(config.regressor);
    let (snapshot, trace) = batch_fit(controller, &episodes, Some(truth))?;

    let identified = episodes
        .iter()
        .zip(&teacher)
        .filter(|(e, t)| identify_strategy(e, m, k).is_ok_and(|id| &id.strategy == *t))
        .count();

    let mut summary = summarize_trace(model, &trace)?;
    summary.steps_per_episode = config.steps_per_episode;
    summary.seed = config.seed;
    summary.identification_rate = identified as f64 / episodes.len() as f64;
    Ok(ExperimentOutcome {
        teacher,
        episodes,
        snapshot,
        trace,
        summary,
    })
}

/// Scores a trace against the true model. `steps_per_episode`, `seed` and
/// `identification_rate` are not recoverable from a trace and are left at 0.
pub fn summarize_trace(
    model: &MarkovPayoffModel,
    trace: &ConvergenceTrace,
) -> Result<ExperimentSummary> {
    let last = trace
        .rows
        .last()
        .ok_or_else(|| Error::InvalidParameter("empty trace".into()))?;
    let (m, k) = (model.num_states, model.num_decisions);
    let best = solve_direct(&GainModel::from_model(model)?)?.best;
    let optimal_id = best.strategy.index(k);

    let mut final_p_error: f64 = 0.0;
    let mut cursor = last.p_independent.iter();
    for d in 0..k {
        for i in 0..m {
            let mut rest = 1.0;
            for j in 0..m {
                let p_hat = if j + 1 < m {
                    let v = *cursor.next().expect("trace width");
                    rest -= v;
                    v
                } else {
                    rest
                };
                final_p_error = final_p_error.max((p_hat - model.transitions[d][i][j]).abs());
            }
        }
    }
    let r_true = expected_step_payoffs(model)?;
    let final_r_error = last
        .r_hat
        .iter()
        .enumerate()
        .map(|(n, r)| (r - r_true[n / k][n % k]).abs())
        .fold(0.0, f64::max);

    let first_stable_optimal_q = trace
        .rows
        .iter()
        .rposition(|r| r.recommended_id != optimal_id)
        .map_or(Some(trace.rows[0].q), |n| {
            trace.rows.get(n + 1).map(|r| r.q)
        });

    Ok(ExperimentSummary {
        episodes: trace.len(),
        steps_per_episode: 0,
        seed: 0,
        optimal_strategy: best.strategy,
        optimal_id,
        optimal_gain: best.mean_gain,
        final_recommended_id: last.recommended_id,
        final_v_hat: last.v_hat,
        final_p_error,
        final_r_error,
        first_stable_optimal_q,
        identification_rate: 0.0,
    })
}

/// Per-seed scores for repeated-run studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub identified_episodes: usize,
    pub episodes: usize,
    pub max_p_error: f64,
    pub max_r_error: f64,
    pub final_optimal: bool,
    /// Recommendation optimal at every `q >= episodes / 2`.
    pub optimal_second_half: bool,
    pub first_stable_optimal_q: Option<u64>,
}

/// Runs the experiment once per seed; seeds are processed in parallel.
pub fn seed_study(
    model: &MarkovPayoffModel,
    config: &ExperimentConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<SeedOutcome>> {
    exec.map_slice(seeds, |&seed| {
        let cfg = config.clone().with_seed(seed);
        // Inner loops stay sequential; the parallelism is across seeds.
        let out = run_experiment_with(model, &cfg, Execution::Sequential)?;
        let s = &out.summary;
        let half = (cfg.episodes as u64).div_ceil(2);
        Ok(SeedOutcome {
            seed,
            identified_episodes: (s.identification_rate * cfg.episodes as f64).round() as usize,
            episodes: cfg.episodes,
            max_p_error: s.final_p_error,
            max_r_error: s.final_r_error,
            final_optimal: s.final_recommended_id == s.optimal_id,
            optimal_second_half: s.first_stable_optimal_q.is_some_and(|q| q <= half),
            first_stable_optimal_q: s.first_stable_optimal_q,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{export_trace_string, parse_trace};

    #[test]
    fn default_run_recommends_the_optimum() {
        let model = MarkovPayoffModel::table1();
        let out = run_experiment(&model, &ExperimentConfig::default()).unwrap();
        assert_eq!(out.episodes.len(), 100);
        assert_eq!(out.snapshot.recommended, Strategy::new(vec![0, 1]));
        assert_eq!(out.summary.optimal_id, 1);
        assert_eq!(out.summary.identification_rate, 1.0);
    }

    #[test]
    fn summary_recomputes_from_csv() {
        let model = MarkovPayoffModel::table1();
        let out = run_experiment(&model, &ExperimentConfig::default().with_seed(21)).unwrap();
        let csv = export_trace_string(&out.trace);
        let reparsed = parse_trace(csv.as_bytes(), 2, 2).unwrap();
        let again = summarize_trace(&model, &reparsed).unwrap();
        let s = &out.summary;
        assert_eq!(again.final_p_error, s.final_p_error);
        assert_eq!(again.final_r_error, s.final_r_error);
        assert_eq!(again.first_stable_optimal_q, s.first_stable_optimal_q);
        assert_eq!(again.final_recommended_id, s.final_recommended_id);
    }

    #[test]
    fn zero_episodes_rejected() {
        let cfg = ExperimentConfig {
            episodes: 0,
            ..ExperimentConfig::default()
        };
        assert!(run_experiment(&MarkovPayoffModel::table1(), &cfg).is_err());
    }
}
