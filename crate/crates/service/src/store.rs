//! Session registry with event-sourced persistence.
//!
//! Each session lives in `<data_dir>/sessions/<id>/`:
//!
//! * `config.json`: the resolved session config, written once;
//! * `episodes.jsonl`: one finished episode per line, append only;
//! * `snapshot.json`: controller and estimator state after the last line.
//!
//! The log is the source of truth. On startup every session is replayed from
//! its log, and the snapshot file is rewritten if it does not match the
//! replay byte for byte.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError, RwLock, TryLockError};

use cmc_core::controller::{ControllerSnapshot, EstimatorSnapshot};
use cmc_core::io::read_episodes;
use cmc_core::Episode;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::session::{
    DecisionOutcome, DecisionRequest, EpisodeOutcome, Estimates, EventView, Mode, ServiceDefaults,
    Session, SessionConfig, SessionView,
};

const CONFIG_FILE: &str = "config.json";
const LOG_FILE: &str = "episodes.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

/// Contents of `snapshot.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub snapshot: ControllerSnapshot,
    pub estimator: EstimatorSnapshot,
}

/// Canonical bytes of the snapshot file for `session`, if it has one.
pub fn snapshot_bytes(session: &Session) -> Option<Vec<u8>> {
    let snapshot = session.controller().last_snapshot()?.clone();
    let file = SnapshotFile {
        snapshot,
        estimator: session.controller().estimator().snapshot(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("snapshot serializes");
    out.push(b'\n');
    Some(out)
}

fn corrupt(path: &Path, reason: impl ToString) -> ServiceError {
    ServiceError::Corrupt {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Rebuilds a session from `dir` without touching any file.
pub fn replay_dir(dir: &Path) -> ServiceResult<Session> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| corrupt(dir, "directory name is not a session id"))?
        .to_string();
    let config_path = dir.join(CONFIG_FILE);
    let config: SessionConfig =
        serde_json::from_slice(&fs::read(&config_path)?).map_err(|e| corrupt(&config_path, e))?;
    let log_path = dir.join(LOG_FILE);
    let log = match File::open(&log_path) {
        Ok(f) => read_episodes(BufReader::new(f)).map_err(|e| corrupt(&log_path, e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let (m, k) = config.environment.dims();
    for (n, e) in log.iter().enumerate() {
        e.check(m, k)
            .map_err(|err| corrupt(&log_path, format!("line {}: {err}", n + 1)))?;
    }
    Session::replay(id, config, &log)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn append_episode(path: &Path, episode: &Episode) -> std::io::Result<()> {
    let mut line = serde_json::to_string(episode).expect("episode serializes");
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

/// One live session: the single writer behind a mutex, plus the last
/// committed estimates for readers.
pub struct SessionSlot {
    session: Mutex<Session>,
    published: RwLock<Arc<Estimates>>,
    dir: Option<PathBuf>,
}

impl SessionSlot {
    fn new(session: Session, dir: Option<PathBuf>) -> Self {
        SessionSlot {
            published: RwLock::new(Arc::new(session.estimates())),
            session: Mutex::new(session),
            dir,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(PoisonError::into_inner)
    }

    /// Mutations never queue behind each other.
    fn try_lock(&self) -> ServiceResult<MutexGuard<'_, Session>> {
        match self.session.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
            Err(TryLockError::WouldBlock) => Err(ServiceError::Conflict(
                "another request is changing this session".into(),
            )),
        }
    }

    pub fn view(&self) -> SessionView {
        self.lock().view()
    }

    /// Last committed estimates; never waits for a writer.
    pub fn estimates(&self) -> Arc<Estimates> {
        self.published
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .clone()
    }

    pub fn event(&self) -> ServiceResult<EventView> {
        let mut s = self.lock();
        if s.mode() == Mode::Teaching {
            return Ok(s.current_event());
        }
        s.next_event()
    }

    pub fn post_decision(&self, req: DecisionRequest) -> ServiceResult<DecisionOutcome> {
        self.try_lock()?.post_decision(req)
    }

    /// Logs the episode, writes the snapshot, then makes both visible.
    pub fn end_episode(&self) -> ServiceResult<EpisodeOutcome> {
        let mut s = self.try_lock()?;
        let commit = s.prepare_end()?;
        if let Some(dir) = &self.dir {
            append_episode(&dir.join(LOG_FILE), &commit.episode)?;
        }
        let outcome = s.commit(commit);
        if let Some(dir) = &self.dir {
            let bytes = snapshot_bytes(&s).expect("committed session has a snapshot");
            write_atomic(&dir.join(SNAPSHOT_FILE), &bytes)?;
        }
        *self
            .published
            .write()
            .unwrap_or_else(PoisonError::into_inner) = Arc::new(s.estimates());
        Ok(outcome)
    }

    pub fn hot_swap(&self) -> ServiceResult<SessionView> {
        let mut s = self.try_lock()?;
        s.hot_swap()?;
        Ok(s.view())
    }

    pub fn set_mode(&self, mode: Mode) -> ServiceResult<SessionView> {
        let mut s = self.try_lock()?;
        s.set_mode(mode)?;
        Ok(s.view())
    }

    pub fn snapshot_bytes(&self) -> Option<Vec<u8>> {
        snapshot_bytes(&self.lock())
    }
}

pub struct SessionStore {
    root: Option<PathBuf>,
    defaults: ServiceDefaults,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

impl SessionStore {
    /// Sessions live only as long as the process.
    pub fn in_memory(defaults: ServiceDefaults) -> Self {
        SessionStore {
            root: None,
            defaults,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Opens (creating if needed) a data directory and replays every session
    /// found in it.
    pub fn open(root: impl Into<PathBuf>, defaults: ServiceDefaults) -> ServiceResult<Self> {
        let root = root.into();
        let sessions_dir = root.join("sessions");
        fs::create_dir_all(&sessions_dir)?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&sessions_dir)? {
            let dir = entry?.path();
            if !dir.is_dir() {
                continue;
            }
            let session = replay_dir(&dir)?;
            let snap_path = dir.join(SNAPSHOT_FILE);
            if let Some(bytes) = snapshot_bytes(&session) {
                if fs::read(&snap_path).ok().as_deref() != Some(&bytes[..]) {
                    tracing::warn!(
                        session = session.id(),
                        "snapshot file disagrees with the log; rewriting"
                    );
                    write_atomic(&snap_path, &bytes)?;
                }
            }
            tracing::info!(
                session = session.id(),
                episodes = session.episodes(),
                "replayed"
            );
            sessions.insert(
                session.id().to_string(),
                Arc::new(SessionSlot::new(session, Some(dir))),
            );
        }
        Ok(SessionStore {
            root: Some(root),
            defaults,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn defaults(&self) -> &ServiceDefaults {
        &self.defaults
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn session_dir(&self, id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join("sessions").join(id))
    }

    pub fn create(&self, config: SessionConfig) -> ServiceResult<SessionView> {
        let config = config.resolved(&self.defaults);
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::new(id.clone(), config)?;
        let dir = self.session_dir(&id);
        if let Some(dir) = &dir {
            fs::create_dir_all(dir)?;
            let mut bytes = serde_json::to_vec_pretty(session.config()).expect("config serializes");
            bytes.push(b'\n');
            write_atomic(&dir.join(CONFIG_FILE), &bytes)?;
            File::create(dir.join(LOG_FILE))?;
        }
        let view = session.view();
        tracing::info!(session = %id, environment = %view.environment, "created");
        self.sessions
            .write()
            .unwrap_or_else(PoisonError::into_inner)
            .insert(id, Arc::new(SessionSlot::new(session, dir)));
        Ok(view)
    }

    pub fn get(&self, id: &str) -> ServiceResult<Arc<SessionSlot>> {
        self.sessions
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }
}
