//! Closed-loop estimation: every episode updates the frequency and payoff
//! estimates, then the direct problem is re-solved on the estimated model.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inverse::{
    identify_strategy, transition_estimates, Identification, PayoffRegressor, TransitionCounts,
};
use crate::mdp::{evaluate_strategy, solve_direct, GainModel, Strategy};
use crate::rls::{
    check_lambda, estimated_gain_model_for, rls_init, rls_update_with_forgetting, RlsState,
    DEFAULT_DELTA, DEFAULT_LAMBDA,
};
use crate::simulate::Episode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub num_states: usize,
    pub num_decisions: usize,
    /// Initial `Q = delta·I`.
    pub delta: f64,
    /// Forgetting factor in `(0, 1]`; 1 keeps all history.
    pub lambda: f64,
    #[serde(default)]
    pub regressor: PayoffRegressor,
}

impl ControllerConfig {
    pub fn new(num_states: usize, num_decisions: usize) -> Self {
        ControllerConfig {
            num_states,
            num_decisions,
            delta: DEFAULT_DELTA,
            lambda: DEFAULT_LAMBDA,
            regressor: PayoffRegressor::default(),
        }
    }

    pub fn with_regressor(mut self, regressor: PayoffRegressor) -> Self {
        self.regressor = regressor;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    /// Length of the regression coefficient vector.
    pub fn dim(&self) -> usize {
        self.regressor.dim(self.num_states, self.num_decisions)
    }
}

/// Transition counts plus the payoff regression state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub counts: TransitionCounts,
    pub rls: RlsState,
    pub regressor: PayoffRegressor,
}

impl EstimatorState {
    pub fn new(config: &ControllerConfig) -> Result<Self> {
        check_lambda(config.lambda)?;
        if config.num_states == 0 || config.num_decisions == 0 {
            return Err(Error::InvalidParameter(
                "need at least one state and one decision".into(),
            ));
        }
        Ok(EstimatorState {
            counts: TransitionCounts::new(config.num_states, config.num_decisions),
            rls: rls_init(config.dim(), config.delta)?,
            regressor: config.regressor,
        })
    }

    /// Expected step payoffs `r̂[i·K + k]` implied by the current estimates.
    pub fn step_payoffs(&self) -> Vec<f64> {
        let p_hat = transition_estimates(&self.counts).p_hat;
        self.regressor
            .step_payoffs(&self.rls.r_hat, &p_hat)
            .expect("estimator dimensions are fixed at construction")
    }

    /// The persisted form: `{q, r_hat, Q, counts, p_hat}` plus the raw
    /// regression coefficients and the regressor kind they belong to.
    pub fn snapshot(&self) -> EstimatorSnapshot {
        EstimatorSnapshot {
            q: self.rls.q,
            r_hat: self.step_payoffs(),
            q_matrix: self.rls.q_matrix.clone(),
            counts: self.counts.counts.clone(),
            p_hat: transition_estimates(&self.counts).p_hat,
            regressor: self.regressor,
            coefficients: self.rls.r_hat.clone(),
        }
    }
}

/// Estimator file contents, used for persistence and hot reload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSnapshot {
    pub q: u64,
    pub r_hat: Vec<f64>,
    #[serde(rename = "Q")]
    pub q_matrix: Vec<Vec<f64>>,
    pub counts: Vec<Vec<Vec<u64>>>,
    pub p_hat: Vec<Vec<Vec<f64>>>,
    pub regressor: PayoffRegressor,
    /// Regression coefficients; equal to `r_hat` for the visit-count regressor.
    pub coefficients: Vec<f64>,
}

impl From<EstimatorSnapshot> for EstimatorState {
    fn from(s: EstimatorSnapshot) -> Self {
        EstimatorState {
            counts: TransitionCounts { counts: s.counts },
            rls: RlsState {
                r_hat: s.coefficients,
                q_matrix: s.q_matrix,
                q: s.q,
            },
            regressor: s.regressor,
        }
    }
}

/// State of the loop after one ingested episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSnapshot {
    pub q: u64,
    pub p_hat: Vec<Vec<Vec<f64>>>,
    /// Observed transitions per `(decision, state)` row.
    pub sample_sizes: Vec<Vec<u64>>,
    /// Expected step payoffs, `r_hat[i·K + k]`.
    pub r_hat: Vec<f64>,
    pub recommended: Strategy,
    /// Lexicographic index of `recommended` (0-based).
    pub recommended_id: u64,
    pub recommended_gain: f64,
    /// Strategy label of the episode just ingested.
    pub identified_strategy: Strategy,
    pub identification_complete: bool,
    /// `(decision, state)` rows still planned on the uniform fallback.
    pub unsampled_rows: Vec<(usize, usize)>,
    /// Set when no strategy of the estimated model was ergodic and the
    /// previous recommendation was kept.
    pub recommendation_stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub q: u64,
    /// `p̂^k_{i,j}` for `j < m − 1`, ordered by decision, then state, then successor.
    pub p_independent: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub recommended_id: u64,
    pub v_hat: f64,
    pub v_true: Option<f64>,
}

/// Per-episode history of the estimates and recommendations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub num_states: usize,
    pub num_decisions: usize,
    pub has_truth: bool,
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn new(num_states: usize, num_decisions: usize, has_truth: bool) -> Self {
        ConvergenceTrace {
            num_states,
            num_decisions,
            has_truth,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn header(&self) -> Vec<String> {
        let (m, k) = (self.num_states, self.num_decisions);
        let mut cols = vec!["q".to_string()];
        for d in 0..k {
            for i in 0..m {
                for j in 0..m.saturating_sub(1) {
                    cols.push(format!("p_hat_k{}_i{}_j{}", d + 1, i + 1, j + 1));
                }
            }
        }
        cols.extend((0..m * k).map(|n| format!("r_hat_{n}")));
        cols.push("recommended_id".into());
        cols.push("V_hat".into());
        if self.has_truth {
            cols.push("V_true_of_recommended".into());
        }
        cols
    }
}

/// Writes the trace as CSV: header plus one row per episode, floats in
/// shortest round-trip form.
pub fn export_trace<W: io::Write>(trace: &ConvergenceTrace, destination: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(destination);
    w.write_record(trace.header())?;
    for row in &trace.rows {
        let mut rec = vec![row.q.to_string()];
        rec.extend(row.p_independent.iter().map(f64::to_string));
        rec.extend(row.r_hat.iter().map(f64::to_string));
        rec.push(row.recommended_id.to_string());
        rec.push(row.v_hat.to_string());
        if trace.has_truth {
            rec.push(row.v_true.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_trace_string(trace: &ConvergenceTrace) -> String {
    let mut buf = Vec::new();
    export_trace(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Parses a trace written by [`export_trace`] for an `m`-state, `K`-decision chain.
pub fn parse_trace<R: io::Read>(
    source: R,
    num_states: usize,
    num_decisions: usize,
) -> Result<ConvergenceTrace> {
    let bad = |msg: String| Error::InvalidParameter(format!("trace csv: {msg}"));
    let mut rdr = csv::Reader::from_reader(source);
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let has_truth = headers.iter().next_back() == Some("V_true_of_recommended");
    let mut trace = ConvergenceTrace::new(num_states, num_decisions, has_truth);
    let expected = trace.header();
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(bad("unexpected header".into()));
    }
    let n_p = num_decisions * num_states * num_states.saturating_sub(1);
    let d = num_states * num_decisions;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |n: usize| -> Result<f64> {
            rec[n]
                .parse::<f64>()
                .map_err(|e| bad(format!("column {n}: {e}")))
        };
        let q = rec[0].parse::<u64>().map_err(|e| bad(e.to_string()))?;
        let p_independent = (1..=n_p).map(num).collect::<Result<Vec<_>>>()?;
        let r_hat = (1 + n_p..1 + n_p + d)
            .map(num)
            .collect::<Result<Vec<_>>>()?;
        let id_col = 1 + n_p + d;
        let recommended_id = rec[id_col].parse::<u64>().map_err(|e| bad(e.to_string()))?;
        let v_hat = num(id_col + 1)?;
        let v_true = if has_truth && !rec[id_col + 2].is_empty() {
            Some(num(id_col + 2)?)
        } else {
            None
        };
        trace.rows.push(TraceRow {
            q,
            p_independent,
            r_hat,
            recommended_id,
            v_hat,
            v_true,
        });
    }
    Ok(trace)
}

/// One estimation stream. Calls to [`AdaptiveController::process_episode`]
/// must be serialized; snapshots and traces are plain values.
#[derive(Debug, Clone)]
pub struct AdaptiveController {
    config: ControllerConfig,
    estimator: EstimatorState,
    truth: Option<GainModel>,
    last: Option<ControllerSnapshot>,
    trace: ConvergenceTrace,
}

impl AdaptiveController {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        Ok(AdaptiveController {
            estimator: EstimatorState::new(&config)?,
            trace: ConvergenceTrace::new(config.num_states, config.num_decisions, false),
            config,
            truth: None,
            last: None,
        })
    }

    /// Attaches the true model so the trace reports the real gain of each
    /// recommendation. Only meaningful in simulation studies.
    pub fn with_truth(mut self, truth: GainModel) -> Result<Self> {
        if truth.num_states() != self.config.num_states
            || truth.num_decisions() != self.config.num_decisions
        {
            return Err(Error::DimensionMismatch {
                expected: self.config.num_states * self.config.num_decisions,
                got: truth.num_states() * truth.num_decisions(),
            });
        }
        self.truth = Some(truth);
        self.trace.has_truth = true;
        Ok(self)
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    pub fn last_snapshot(&self) -> Option<&ControllerSnapshot> {
        self.last.as_ref()
    }

    pub fn trace(&self) -> &ConvergenceTrace {
        &self.trace
    }

    /// Labels the episode, folds it into the transition counts and the
    /// payoff regression, and re-plans on the updated estimates.
    pub fn process_episode(&mut self, episode: &Episode) -> Result<ControllerSnapshot> {
        let (m, k) = (self.config.num_states, self.config.num_decisions);
        let Identification {
            strategy: identified_strategy,
            unvisited,
        } = identify_strategy(episode, m, k)?;
        let phi = self.config.regressor.regressor(episode, m, k)?;

        let mut counts = self.estimator.counts.clone();
        counts.record(episode)?;
        let rls = rls_update_with_forgetting(
            &self.estimator.rls,
            &phi,
            episode.total_payoff,
            self.config.lambda,
        )?;
        let estimates = transition_estimates(&counts);
        let gm = estimated_gain_model_for(&estimates, &rls, self.config.regressor)?;
        let r_hat: Vec<f64> = gm.step_payoffs.iter().flatten().copied().collect();

        let (recommended, recommended_gain, stale) = match solve_direct(&gm) {
            Ok(sol) => (sol.best.strategy, sol.best.mean_gain, false),
            Err(Error::NoFeasibleStrategy) => match &self.last {
                Some(prev) => (prev.recommended.clone(), prev.recommended_gain, true),
                None => (Strategy::constant(m, 0), 0.0, true),
            },
            Err(e) => return Err(e),
        };

        let v_true = match &self.truth {
            Some(truth) => evaluate_strategy(truth, &recommended)
                .ok()
                .map(|e| e.mean_gain),
            None => None,
        };

        self.estimator = EstimatorState {
            counts,
            rls,
            regressor: self.config.regressor,
        };
        let snapshot = ControllerSnapshot {
            q: self.estimator.rls.q,
            unsampled_rows: estimates.unsampled_rows(),
            p_hat: estimates.p_hat,
            sample_sizes: estimates.sample_sizes,
            r_hat,
            recommended_id: recommended.index(k),
            recommended,
            recommended_gain,
            identified_strategy,
            identification_complete: !unvisited.iter().any(|&u| u),
            recommendation_stale: stale,
        };
        self.trace.rows.push(trace_row(&snapshot, v_true));
        self.last = Some(snapshot.clone());
        Ok(snapshot)
    }
}

fn trace_row(s: &ControllerSnapshot, v_true: Option<f64>) -> TraceRow {
    let p_independent = s
        .p_hat
        .iter()
        .flat_map(|matrix| {
            matrix
                .iter()
                .flat_map(|row| row[..row.len().saturating_sub(1)].iter().copied())
        })
        .collect();
    TraceRow {
        q: s.q,
        p_independent,
        r_hat: s.r_hat.clone(),
        recommended_id: s.recommended_id,
        v_hat: s.recommended_gain,
        v_true,
    }
}

/// Folds [`AdaptiveController::process_episode`] over `episodes`.
pub fn batch_fit(
    config: ControllerConfig,
    episodes: &[Episode],
    truth: Option<GainModel>,
) -> Result<(ControllerSnapshot, ConvergenceTrace)> {
    if episodes.is_empty() {
        return Err(Error::InvalidParameter(
            "batch_fit needs at least one episode".into(),
        ));
    }
    let mut controller = AdaptiveController::new(config)?;
    if let Some(t) = truth {
        controller = controller.with_truth(t)?;
    }
    let mut last = None;
    for e in episodes {
        last = Some(controller.process_episode(e)?);
    }
    Ok((last.expect("non-empty"), controller.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{enumerate_strategies, MarkovPayoffModel};
    use crate::simulate::{simulate_batch, TeacherSchedule};

    fn table1_batch(seed: u64, n: usize) -> Vec<Episode> {
        let model = MarkovPayoffModel::table1();
        let schedule = TeacherSchedule::round_robin(&enumerate_strategies(2, 2).unwrap(), n);
        simulate_batch(&model, &schedule, 30, seed).unwrap()
    }

    #[test]
    fn first_episode_sets_counter() {
        let mut c = AdaptiveController::new(ControllerConfig::new(2, 2)).unwrap();
        assert!(c.trace().is_empty());
        let s = c.process_episode(&table1_batch(1, 1)[0]).unwrap();
        assert_eq!(s.q, 1);
        assert_eq!(c.trace().len(), 1);
    }

    #[test]
    fn batch_equals_sequential_fold() {
        let eps = table1_batch(7, 100);
        let (snap, trace) = batch_fit(ControllerConfig::new(2, 2), &eps, None).unwrap();
        assert_eq!(trace.len(), 100);
        let mut c = AdaptiveController::new(ControllerConfig::new(2, 2)).unwrap();
        let mut last = None;
        for e in &eps {
            last = Some(c.process_episode(e).unwrap());
        }
        assert_eq!(last.unwrap(), snap);
        assert_eq!(snap.recommended, Strategy::new(vec![0, 1]));
        assert!(trace.rows.windows(2).all(|w| w[0].q < w[1].q));
    }

    #[test]
    fn single_strategy_stream_keeps_unused_rows_flagged() {
        let model = MarkovPayoffModel::table1();
        let schedule = TeacherSchedule::new(vec![(Strategy::new(vec![0, 0]), 20)]);
        let eps = simulate_batch(&model, &schedule, 30, 3).unwrap();
        let mut c = AdaptiveController::new(ControllerConfig::new(2, 2)).unwrap();
        for e in &eps {
            let s = c.process_episode(e).unwrap();
            assert!(s.unsampled_rows.contains(&(1, 0)));
            assert!(s.unsampled_rows.contains(&(1, 1)));
        }
    }

    #[test]
    fn visit_count_regressor_is_still_available() {
        let cfg = ControllerConfig::new(2, 2).with_regressor(PayoffRegressor::VisitCounts);
        let (snap, _) = batch_fit(cfg, &table1_batch(7, 40), None).unwrap();
        assert_eq!(snap.r_hat.len(), 4);
        assert_eq!(cfg.dim(), 4);
        assert_eq!(ControllerConfig::new(2, 2).dim(), 8);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(batch_fit(ControllerConfig::new(2, 2), &[], None).is_err());
    }

    #[test]
    fn trace_csv_shape_and_round_trip() {
        let model = MarkovPayoffModel::table1();
        let truth = GainModel::from_model(&model).unwrap();
        let (_, trace) = batch_fit(
            ControllerConfig::new(2, 2),
            &table1_batch(5, 100),
            Some(truth),
        )
        .unwrap();
        let text = export_trace_string(&trace);
        assert_eq!(text.lines().count(), 101);
        assert_eq!(
            text.lines().next().unwrap(),
            "q,p_hat_k1_i1_j1,p_hat_k1_i2_j1,p_hat_k2_i1_j1,p_hat_k2_i2_j1,\
             r_hat_0,r_hat_1,r_hat_2,r_hat_3,recommended_id,V_hat,V_true_of_recommended"
        );
        let back = parse_trace(text.as_bytes(), 2, 2).unwrap();
        assert_eq!(back, trace);

        let empty = ConvergenceTrace::new(2, 2, false);
        let text = export_trace_string(&empty);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(parse_trace(text.as_bytes(), 2, 2).unwrap(), empty);
    }

    #[test]
    fn estimator_snapshot_round_trips() {
        let eps = table1_batch(11, 12);
        let mut c = AdaptiveController::new(ControllerConfig::new(2, 2)).unwrap();
        for e in &eps {
            c.process_episode(e).unwrap();
        }
        let snap = c.estimator().snapshot();
        assert_eq!(snap.r_hat, c.last_snapshot().unwrap().r_hat);
        let json = serde_json::to_string(&snap).unwrap();
        for key in ["\"q\"", "\"r_hat\"", "\"Q\"", "\"counts\"", "\"p_hat\""] {
            assert!(json.contains(key), "{key} missing");
        }
        let back: EstimatorSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(EstimatorState::from(back), *c.estimator());
    }
}
