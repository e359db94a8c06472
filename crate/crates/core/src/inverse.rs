//! Recovering the chain from observed episodes: which strategy each episode
//! followed, conditional transition frequencies, and the per-episode
//! regressor that links visit counts to the episode's total payoff.
//!
//! Everything here reads episodes through [`Episode::transitions`] and
//! `total_payoff` only; per-step payoffs are never consulted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Strategy;
use crate::simulate::Episode;

/// Modal decision per state, with states the episode never visited flagged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identification {
    pub strategy: Strategy,
    /// `unvisited[i]` is true when state `i` never appeared, in which case
    /// its decision defaults to 0.
    pub unvisited: Vec<bool>,
}

impl Identification {
    pub fn is_complete(&self) -> bool {
        !self.unvisited.iter().any(|&u| u)
    }
}

/// Labels an episode with the pure strategy closest to its decision
/// frequencies. Ties go to the lower decision index.
pub fn identify_strategy(episode: &Episode, m: usize, k: usize) -> Result<Identification> {
    if episode.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    episode.check(m, k)?;
    let mut freq = vec![vec![0u64; k]; m];
    for t in episode.transitions() {
        freq[t.state][t.decision] += 1;
    }
    let mut unvisited = vec![false; m];
    let decisions = freq
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut best = 0;
            for (d, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = d;
                }
            }
            unvisited[i] = row.iter().all(|&c| c == 0);
            best
        })
        .collect();
    Ok(Identification {
        strategy: Strategy::new(decisions),
        unvisited,
    })
}

/// `counts[k][i][j]`: number of observed `i → j` transitions under decision `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl TransitionCounts {
    pub fn new(m: usize, k: usize) -> Self {
        TransitionCounts {
            counts: vec![vec![vec![0; m]; m]; k],
        }
    }

    pub fn num_decisions(&self) -> usize {
        self.counts.len()
    }

    pub fn num_states(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().flatten().sum()
    }

    /// Sample size of row `(k, i)`.
    pub fn row_size(&self, k: usize, i: usize) -> u64 {
        self.counts[k][i].iter().sum()
    }

    pub(crate) fn record(&mut self, episode: &Episode) -> Result<()> {
        episode.check(self.num_states(), self.num_decisions())?;
        for t in episode.transitions() {
            self.counts[t.decision][t.state][t.next_state] += 1;
        }
        Ok(())
    }
}

/// Returns `counts` with one increment per step of `episode`.
pub fn ingest_transitions(
    counts: &TransitionCounts,
    episode: &Episode,
) -> Result<TransitionCounts> {
    let mut next = counts.clone();
    next.record(episode)?;
    Ok(next)
}

/// Conditional transition frequencies with their row sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEstimates {
    /// `p_hat[k][i][j]`.
    pub p_hat: Vec<Vec<Vec<f64>>>,
    /// `sample_sizes[k][i]`; zero marks a row that fell back to uniform.
    pub sample_sizes: Vec<Vec<u64>>,
}

impl TransitionEstimates {
    /// `(k, i)` pairs never observed.
    pub fn unsampled_rows(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, sizes) in self.sample_sizes.iter().enumerate() {
            for (i, &n) in sizes.iter().enumerate() {
                if n == 0 {
                    out.push((k, i));
                }
            }
        }
        out
    }
}

/// Row-normalized counts. Rows without samples become uniform `1/m`.
pub fn transition_estimates(counts: &TransitionCounts) -> TransitionEstimates {
    let m = counts.num_states();
    let mut sample_sizes = Vec::with_capacity(counts.num_decisions());
    let p_hat = counts
        .counts
        .iter()
        .map(|matrix| {
            let mut sizes = Vec::with_capacity(m);
            let rows = matrix
                .iter()
                .map(|row| {
                    let n: u64 = row.iter().sum();
                    sizes.push(n);
                    if n == 0 {
                        vec![1.0 / m as f64; m]
                    } else {
                        row.iter().map(|&c| c as f64 / n as f64).collect()
                    }
                })
                .collect();
            sample_sizes.push(sizes);
            rows
        })
        .collect();
    TransitionEstimates {
        p_hat,
        sample_sizes,
    }
}

/// Per-episode visit counts of each (state, decision) pair, flattened as
/// `state * K + decision`. The expected episode total is `phi · r` where
/// `r[i*K + k]` is the expected one-step payoff of decision `k` in state `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Regressor(pub Vec<u64>);

impl Regressor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| c as f64).collect()
    }
}

pub fn episode_regressor(episode: &Episode, m: usize, k: usize) -> Result<Regressor> {
    if episode.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    episode.check(m, k)?;
    let mut phi = vec![0u64; m * k];
    for t in episode.transitions() {
        phi[t.state * k + t.decision] += 1;
    }
    Ok(Regressor(phi))
}

/// Per-episode transition counts flattened as `k·m·m + i·m + j`.
///
/// The episode total is exactly `phi · R` where `R` stacks the payoff
/// matrices, so regressing on this vector carries no endogeneity bias. The
/// expected step payoffs follow as `r_i^k = Σ_j p̂_ij^k R̂_ij^k`.
pub fn transition_regressor(episode: &Episode, m: usize, k: usize) -> Result<Regressor> {
    if episode.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    episode.check(m, k)?;
    let mut phi = vec![0u64; k * m * m];
    for t in episode.transitions() {
        phi[t.decision * m * m + t.state * m + t.next_state] += 1;
    }
    Ok(Regressor(phi))
}

/// Which per-episode regressor feeds the payoff regression.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffRegressor {
    /// (state, decision) visit counts; coefficients are `r_i^k` directly.
    /// Biased when the payoff depends on the successor state, because the
    /// successor also drives later visit counts.
    VisitCounts,
    /// (decision, state, successor) counts; coefficients are `R^k` entries.
    #[default]
    TransitionCounts,
}

impl PayoffRegressor {
    pub fn dim(self, m: usize, k: usize) -> usize {
        match self {
            PayoffRegressor::VisitCounts => m * k,
            PayoffRegressor::TransitionCounts => k * m * m,
        }
    }

    pub fn regressor(self, episode: &Episode, m: usize, k: usize) -> Result<Regressor> {
        match self {
            PayoffRegressor::VisitCounts => episode_regressor(episode, m, k),
            PayoffRegressor::TransitionCounts => transition_regressor(episode, m, k),
        }
    }

    /// Maps regression coefficients to expected step payoffs, `[i·K + k]`.
    pub fn step_payoffs(self, coefficients: &[f64], p_hat: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
        let k = p_hat.len();
        let m = p_hat.first().map_or(0, Vec::len);
        let d = self.dim(m, k);
        if coefficients.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: coefficients.len(),
            });
        }
        Ok(match self {
            PayoffRegressor::VisitCounts => coefficients.to_vec(),
            PayoffRegressor::TransitionCounts => (0..m * k)
                .map(|n| {
                    let (i, d) = (n / k, n % k);
                    (0..m)
                        .map(|j| p_hat[d][i][j] * coefficients[d * m * m + i * m + j])
                        .sum()
                })
                .collect(),
        })
    }
}
