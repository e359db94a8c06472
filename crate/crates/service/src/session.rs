//! One teaching session: an environment that emits events, the human (or the
//! recommended strategy) deciding, and the estimator fed with every finished
//! episode. Everything here is synchronous; locking and persistence live in
//! [`crate::store`].

use cmc_core::controller::{AdaptiveController, ControllerConfig, ControllerSnapshot};
use cmc_core::controller::{ConvergenceTrace, EstimatorSnapshot};
use cmc_core::gridworld::{
    random_start_pose, GridCursor, GridWorld, RobotPose, Room, RoomSpec, Sensor,
};
use cmc_core::inverse::PayoffRegressor;
use cmc_core::rls::{check_lambda, DEFAULT_DELTA, DEFAULT_LAMBDA};
use cmc_core::simulate::{episode_rng, ChainCursor};
use cmc_core::{Episode, MarkovPayoffModel, Step, Strategy};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

/// Mixed into the session seed so autopilot runs never reuse a teaching stream.
const AUTOPILOT_STREAM: u64 = 0x6175_746f_7069_6c6f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentConfig {
    Model {
        model: MarkovPayoffModel,
    },
    /// Bump sensor robot: state 0/1 = left/right bump, decision 0/1 =
    /// back-left/back-right. Without `start` every episode draws its own pose.
    Gridworld {
        room: RoomSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start: Option<RobotPose>,
    },
}

impl EnvironmentConfig {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            EnvironmentConfig::Model { model } => (model.num_states, model.num_decisions),
            EnvironmentConfig::Gridworld { .. } => (2, 2),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EnvironmentConfig::Model { .. } => "model",
            EnvironmentConfig::Gridworld { .. } => "gridworld",
        }
    }
}

/// Body of `POST /sessions`; also the persisted `config.json`, with `delta`
/// and `lambda` filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub regressor: PayoffRegressor,
}

/// Server-wide estimator settings used when a session does not set its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceDefaults {
    pub delta: f64,
    pub lambda: f64,
}

impl Default for ServiceDefaults {
    fn default() -> Self {
        ServiceDefaults {
            delta: DEFAULT_DELTA,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl SessionConfig {
    pub fn model(model: MarkovPayoffModel, seed: u64) -> Self {
        SessionConfig {
            environment: EnvironmentConfig::Model { model },
            seed,
            delta: None,
            lambda: None,
            regressor: PayoffRegressor::default(),
        }
    }

    pub fn gridworld(room: RoomSpec, seed: u64) -> Self {
        SessionConfig {
            environment: EnvironmentConfig::Gridworld { room, start: None },
            seed,
            delta: None,
            lambda: None,
            regressor: PayoffRegressor::default(),
        }
    }

    pub fn resolved(mut self, defaults: &ServiceDefaults) -> Self {
        self.delta.get_or_insert(defaults.delta);
        self.lambda.get_or_insert(defaults.lambda);
        self
    }

    pub fn controller_config(&self) -> ControllerConfig {
        let (m, k) = self.environment.dims();
        ControllerConfig::new(m, k)
            .with_delta(self.delta.unwrap_or(DEFAULT_DELTA))
            .with_lambda(self.lambda.unwrap_or(DEFAULT_LAMBDA))
            .with_regressor(self.regressor)
    }

    /// Everything wrong with the config, as readable index paths.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        match &self.environment {
            EnvironmentConfig::Model { model } => {
                out.extend(model.validate().into_iter().map(|v| format!("model.{v}")));
            }
            EnvironmentConfig::Gridworld { room, start } => match Room::new(room) {
                Err(e) => out.push(format!("room: {e}")),
                Ok(r) => match start {
                    Some(pose) => {
                        if let Err(e) = r.check_pose(pose) {
                            out.push(format!("start: {e}"));
                        } else if r.is_boxed_in(pose.cell) {
                            out.push("start: robot is boxed in on all headings".into());
                        }
                    }
                    None => {
                        let mut rng = episode_rng(self.seed, 0);
                        if let Err(e) = random_start_pose(room, &mut rng) {
                            out.push(format!("room: {e}"));
                        }
                    }
                },
            },
        }
        if let Some(d) = self.delta {
            if !(d.is_finite() && d > 0.0) {
                out.push(format!("delta: must be positive and finite, got {d}"));
            }
        }
        if let Some(l) = self.lambda {
            if let Err(e) = check_lambda(l) {
                out.push(format!("lambda: {e}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Teaching,
    Autopilot,
}

/// An episode in progress in either environment.
#[derive(Debug, Clone)]
enum Cursor {
    Chain(Box<ChainCursor<ChaCha8Rng>>),
    Grid(GridCursor),
}

impl Cursor {
    fn start(env: &EnvironmentConfig, mut rng: ChaCha8Rng) -> ServiceResult<Cursor> {
        Ok(match env {
            EnvironmentConfig::Model { model } => {
                Cursor::Chain(Box::new(ChainCursor::start(model, None, rng)?))
            }
            EnvironmentConfig::Gridworld { room, start } => {
                let pose = match start {
                    Some(p) => *p,
                    None => random_start_pose(room, &mut rng)?,
                };
                Cursor::Grid(GridCursor::start(GridWorld::new(Room::new(room)?, pose)?)?)
            }
        })
    }

    fn state(&self) -> usize {
        match self {
            Cursor::Chain(c) => c.state(),
            Cursor::Grid(c) => c.state(),
        }
    }

    fn steps(&self) -> &[Step] {
        match self {
            Cursor::Chain(c) => c.steps(),
            Cursor::Grid(c) => c.steps(),
        }
    }

    fn step(&mut self, env: &EnvironmentConfig, decision: usize) -> ServiceResult<Step> {
        let step = match (self, env) {
            (Cursor::Chain(c), EnvironmentConfig::Model { model }) => c.step(model, decision)?,
            (Cursor::Grid(c), _) => c.step(decision)?,
            _ => unreachable!("cursor built from this environment"),
        };
        Ok(step.clone())
    }

    fn finish(self) -> Episode {
        match self {
            Cursor::Chain(c) => (*c).finish(),
            Cursor::Grid(c) => c.finish(),
        }
    }

    fn room_view(&self) -> Option<RoomView> {
        let Cursor::Grid(c) = self else { return None };
        let world = c.world();
        Some(RoomView {
            pose: world.pose,
            scanned_cells: c.payoff_so_far(),
            scanned: world.room.visited_cells(),
        })
    }
}

#[derive(Debug, Clone)]
struct Autopilot {
    strategy: Strategy,
    run: u64,
    run_length: usize,
    cursor: Cursor,
}

/// What the decision taker is asked to react to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventView {
    pub mode: Mode,
    /// Teaching: index of the episode being taught. Autopilot: run index.
    pub episode: u64,
    /// Steps already taken in this episode.
    pub step: usize,
    pub state: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<Sensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<RobotPose>,
    /// Grid-world: cells scanned so far in this episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scanned_cells: Option<usize>,
    /// Autopilot: the step that was just played to reach this event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub played: Option<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomView {
    pub pose: RobotPose,
    pub scanned_cells: usize,
    pub scanned: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub mode: Mode,
    pub environment: String,
    pub num_states: usize,
    pub num_decisions: usize,
    pub seed: u64,
    pub delta: f64,
    pub lambda: f64,
    pub regressor: PayoffRegressor,
    pub episodes: u64,
    /// Steps of the teaching episode in progress, payoffs withheld.
    pub buffer: Vec<Step>,
    pub event: EventView,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<RoomSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot: Option<RoomView>,
    pub recommended: Option<Strategy>,
    pub recommended_id: Option<u64>,
    pub recommended_gain: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: usize,
    /// Optional guard: the event being answered. A mismatch is a conflict,
    /// so a repeated post cannot land on the following event.
    #[serde(default)]
    pub episode: Option<u64>,
    #[serde(default)]
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub step: Step,
    pub event: EventView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub snapshot: ControllerSnapshot,
    /// The finished episode with its payoffs revealed.
    pub episode: Episode,
    pub event: EventView,
}

/// Read-side state, replaced as a whole after every committed episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub snapshot: Option<ControllerSnapshot>,
    pub estimator: EstimatorSnapshot,
    pub trace: ConvergenceTrace,
}

/// An ended episode whose effects are computed but not yet applied.
pub struct Commit {
    pub episode: Episode,
    pub snapshot: ControllerSnapshot,
    controller: AdaptiveController,
    next: Cursor,
}

#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    config: SessionConfig,
    controller: AdaptiveController,
    episodes: u64,
    cursor: Cursor,
    mode: Mode,
    autopilot: Option<Autopilot>,
    autopilot_runs: u64,
    last_len: usize,
}

impl Session {
    /// `config` must already be resolved and valid.
    pub fn new(id: String, config: SessionConfig) -> ServiceResult<Session> {
        let violations = config.validate();
        if !violations.is_empty() {
            return Err(ServiceError::InvalidConfig(violations));
        }
        let controller = AdaptiveController::new(config.controller_config())?;
        let cursor = Cursor::start(&config.environment, episode_rng(config.seed, 0))?;
        Ok(Session {
            id,
            config,
            controller,
            episodes: 0,
            cursor,
            mode: Mode::Teaching,
            autopilot: None,
            autopilot_runs: 0,
            last_len: 0,
        })
    }

    /// Rebuilds a session from its episode log.
    pub fn replay(id: String, config: SessionConfig, log: &[Episode]) -> ServiceResult<Session> {
        let mut s = Session::new(id, config)?;
        for e in log {
            s.controller.process_episode(e)?;
        }
        s.episodes = log.len() as u64;
        s.last_len = log.last().map_or(0, Episode::len);
        s.cursor = Cursor::start(
            &s.config.environment,
            episode_rng(s.config.seed, s.episodes),
        )?;
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn controller(&self) -> &AdaptiveController {
        &self.controller
    }

    pub fn estimates(&self) -> Estimates {
        Estimates {
            snapshot: self.controller.last_snapshot().cloned(),
            estimator: self.controller.estimator().snapshot(),
            trace: self.controller.trace().clone(),
        }
    }

    fn event_of(&self, cursor: &Cursor, episode: u64, played: Option<Step>) -> EventView {
        let room = cursor.room_view();
        let grid = matches!(self.config.environment, EnvironmentConfig::Gridworld { .. });
        EventView {
            mode: self.mode,
            episode,
            step: cursor.steps().len(),
            state: cursor.state(),
            sensor: grid.then(|| {
                if cursor.state() == 0 {
                    Sensor::Left
                } else {
                    Sensor::Right
                }
            }),
            pose: room.as_ref().map(|r| r.pose),
            scanned_cells: room.map(|r| r.scanned_cells),
            played,
        }
    }

    /// The current event without advancing anything.
    pub fn current_event(&self) -> EventView {
        match &self.autopilot {
            Some(a) => self.event_of(&a.cursor, a.run, None),
            None => self.event_of(&self.cursor, self.episodes, None),
        }
    }

    /// Teaching: the pending event. Autopilot: plays one step with the
    /// recommended strategy and returns the event that follows.
    pub fn next_event(&mut self) -> ServiceResult<EventView> {
        let Some(mut a) = self.autopilot.take() else {
            return Ok(self.current_event());
        };
        let played = self.autopilot_step(&mut a);
        let event = played.map(|step| self.event_of(&a.cursor, a.run, Some(step)));
        self.autopilot = Some(a);
        event
    }

    fn autopilot_step(&mut self, a: &mut Autopilot) -> ServiceResult<Step> {
        if a.cursor.steps().len() >= a.run_length {
            a.run = self.autopilot_runs;
            self.autopilot_runs += 1;
            a.cursor = Cursor::start(&self.config.environment, self.autopilot_rng(a.run))?;
        }
        let decision = a.strategy.decision(a.cursor.state());
        a.cursor.step(&self.config.environment, decision)
    }

    fn autopilot_rng(&self, run: u64) -> ChaCha8Rng {
        episode_rng(self.config.seed ^ AUTOPILOT_STREAM, run)
    }

    pub fn post_decision(&mut self, req: DecisionRequest) -> ServiceResult<DecisionOutcome> {
        if self.mode == Mode::Autopilot {
            return Err(ServiceError::Conflict(
                "session is on autopilot; switch to teaching to post decisions".into(),
            ));
        }
        let (episode, step) = (self.episodes, self.cursor.steps().len());
        if req.episode.is_some_and(|e| e != episode) || req.step.is_some_and(|s| s != step) {
            return Err(ServiceError::Conflict(format!(
                "decision answers episode {:?} step {:?}, but the pending event is episode {episode} step {step}",
                req.episode, req.step
            )));
        }
        let (_, k) = self.config.environment.dims();
        if req.decision >= k {
            return Err(cmc_core::Error::DecisionOutOfRange {
                state: self.cursor.state(),
                decision: req.decision,
                num_decisions: k,
            }
            .into());
        }
        let mut step = self.cursor.step(&self.config.environment, req.decision)?;
        step.step_payoff = None;
        Ok(DecisionOutcome {
            step,
            event: self.current_event(),
        })
    }

    /// Closes the teaching episode and runs the estimator on a copy, leaving
    /// the session untouched until [`Session::commit`].
    pub fn prepare_end(&self) -> ServiceResult<Commit> {
        if self.mode == Mode::Autopilot {
            return Err(ServiceError::Conflict("session is on autopilot".into()));
        }
        if self.cursor.steps().is_empty() {
            return Err(ServiceError::BadRequest(
                "no decisions in the current episode".into(),
            ));
        }
        let episode = self.cursor.clone().finish();
        let mut controller = self.controller.clone();
        let snapshot = controller.process_episode(&episode)?;
        let next = Cursor::start(
            &self.config.environment,
            episode_rng(self.config.seed, self.episodes + 1),
        )?;
        Ok(Commit {
            episode,
            snapshot,
            controller,
            next,
        })
    }

    pub fn commit(&mut self, c: Commit) -> EpisodeOutcome {
        self.controller = c.controller;
        self.cursor = c.next;
        self.episodes += 1;
        self.last_len = c.episode.len();
        EpisodeOutcome {
            snapshot: c.snapshot,
            episode: c.episode,
            event: self.current_event(),
        }
    }

    /// Hands decisions to the current recommendation.
    pub fn hot_swap(&mut self) -> ServiceResult<()> {
        let Some(snapshot) = self.controller.last_snapshot() else {
            return Err(ServiceError::BadRequest(
                "no snapshot yet; finish at least one episode first".into(),
            ));
        };
        if !self.cursor.steps().is_empty() {
            return Err(ServiceError::Conflict(
                "a teaching episode is in progress; end it before swapping".into(),
            ));
        }
        let strategy = snapshot.recommended.clone();
        // An autopilot run lasts as long as the last taught episode.
        let run_length = self.last_len.max(1);
        let run = self.autopilot_runs;
        self.autopilot_runs += 1;
        let cursor = Cursor::start(&self.config.environment, self.autopilot_rng(run))?;
        self.autopilot = Some(Autopilot {
            strategy,
            run,
            run_length,
            cursor,
        });
        self.mode = Mode::Autopilot;
        Ok(())
    }

    pub fn set_mode(&mut self, mode: Mode) -> ServiceResult<()> {
        match mode {
            Mode::Autopilot => self.hot_swap(),
            Mode::Teaching => {
                self.autopilot = None;
                self.mode = Mode::Teaching;
                Ok(())
            }
        }
    }

    pub fn view(&self) -> SessionView {
        let (m, k) = self.config.environment.dims();
        let snapshot = self.controller.last_snapshot();
        let active = self.autopilot.as_ref().map_or(&self.cursor, |a| &a.cursor);
        let room = match &self.config.environment {
            EnvironmentConfig::Gridworld { room, .. } => Some(room.clone()),
            EnvironmentConfig::Model { .. } => None,
        };
        let cc = self.controller.config();
        SessionView {
            id: self.id.clone(),
            mode: self.mode,
            environment: self.config.environment.kind().into(),
            num_states: m,
            num_decisions: k,
            seed: self.config.seed,
            delta: cc.delta,
            lambda: cc.lambda,
            regressor: cc.regressor,
            episodes: self.episodes,
            buffer: self
                .cursor
                .steps()
                .iter()
                .map(|s| Step {
                    step_payoff: None,
                    ..s.clone()
                })
                .collect(),
            event: self.current_event(),
            room,
            robot: active.room_view(),
            recommended: snapshot.map(|s| s.recommended.clone()),
            recommended_id: snapshot.map(|s| s.recommended_id),
            recommended_gain: snapshot.map(|s| s.recommended_gain),
        }
    }
}
