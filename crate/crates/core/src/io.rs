//! File formats: model JSON, room JSON / ASCII art, and JSON Lines episode logs.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::gridworld::RoomSpec;
use crate::mdp::MarkovPayoffModel;
use crate::simulate::Episode;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: String, source: io::Error },
    #[error("{context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] crate::error::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })
}

/// Loads and validates a model file.
pub fn read_model(path: &Path) -> Result<MarkovPayoffModel, IoError> {
    let text = read_to_string(path)?;
    let model = MarkovPayoffModel::from_json(&text).map_err(|source| IoError::Json {
        context: path.display().to_string(),
        source,
    })?;
    model.ensure_valid()?;
    Ok(model)
}

/// Loads a room from JSON, or from ASCII art when the file does not start
/// with `{`.
pub fn read_room(path: &Path) -> Result<RoomSpec, IoError> {
    let text = read_to_string(path)?;
    let spec = if text.trim_start().starts_with('{') {
        serde_json::from_str(&text).map_err(|source| IoError::Json {
            context: path.display().to_string(),
            source,
        })?
    } else {
        RoomSpec::from_ascii(&text)?
    };
    crate::gridworld::Room::new(&spec)?;
    Ok(spec)
}

/// One JSON object per line. `observed` strips per-step payoffs.
pub fn write_episodes<W: Write>(
    mut out: W,
    episodes: &[Episode],
    observed: bool,
) -> Result<(), IoError> {
    for e in episodes {
        let line = if observed {
            serde_json::to_string(&e.observed())
        } else {
            serde_json::to_string(e)
        }
        .map_err(|source| IoError::Json {
            context: "episode".into(),
            source,
        })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<Episode>, IoError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| IoError::Json {
            context: format!("episode log line {}", n + 1),
            source,
        })?);
    }
    Ok(out)
}
