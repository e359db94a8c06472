//! HTTP/JSON teaching sessions.
//!
//! A session wraps an environment (a known payoff model, or the bump-sensor
//! robot), an [`AdaptiveController`](cmc_core::AdaptiveController), and a
//! decision taker. In teaching mode a human answers each pending event; in
//! autopilot the current recommendation plays. Finished episodes are appended
//! to a per-session log, which is enough to rebuild the session after a
//! restart.

pub mod error;
pub mod http;
pub mod session;
pub mod store;

pub use error::{ServiceError, ServiceResult};
pub use http::{router, serve};
pub use session::{
    DecisionOutcome, DecisionRequest, EnvironmentConfig, EpisodeOutcome, Estimates, EventView,
    Mode, ServiceDefaults, Session, SessionConfig, SessionView,
};
pub use store::{replay_dir, snapshot_bytes, SessionSlot, SessionStore, SnapshotFile};
