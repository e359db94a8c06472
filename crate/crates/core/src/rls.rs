//! Recursive least squares for the expected one-step payoffs.
//!
//! Each episode contributes one scalar observation `v = phiᵀ r + noise`.
//! With gain denominator `s = λ + phiᵀ Q phi` the updates are
//!
//! ```text
//! r ← r + Q phi (v − phiᵀ r) / s
//! Q ← (Q − Q phi phiᵀ Q / s) / λ
//! ```
//!
//! With `λ = 1` (no forgetting) and `Q₀ = δI`, `r₀ = 0`, the estimate after
//! `q` episodes equals the ridge solution `(ΦᵀΦ + δ⁻¹I)⁻¹ Φᵀ v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inverse::{PayoffRegressor, Regressor, TransitionEstimates};
use crate::mdp::GainModel;

pub const DEFAULT_DELTA: f64 = 1e6;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub r_hat: Vec<f64>,
    #[serde(rename = "Q")]
    pub q_matrix: Vec<Vec<f64>>,
    /// Episodes absorbed so far.
    pub q: u64,
}

impl RlsState {
    pub fn dim(&self) -> usize {
        self.r_hat.len()
    }
}

/// Diffuse start: `r = 0`, `Q = delta·I`.
pub fn rls_init(d: usize, delta: f64) -> Result<RlsState> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive and finite, got {delta}"
        )));
    }
    let q_matrix = (0..d)
        .map(|i| (0..d).map(|j| if i == j { delta } else { 0.0 }).collect())
        .collect();
    Ok(RlsState {
        r_hat: vec![0.0; d],
        q_matrix,
        q: 0,
    })
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "forgetting factor must lie in (0, 1], got {lambda}"
        )))
    }
}

/// One recursive update with unit noise weight and no forgetting.
pub fn rls_update(state: &RlsState, phi: &Regressor, v: f64) -> Result<RlsState> {
    rls_update_with_forgetting(state, phi, v, DEFAULT_LAMBDA)
}

pub fn rls_update_with_forgetting(
    state: &RlsState,
    phi: &Regressor,
    v: f64,
    lambda: f64,
) -> Result<RlsState> {
    let d = state.dim();
    if phi.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: phi.dim(),
        });
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("episode payoff"));
    }
    check_lambda(lambda)?;

    let x = phi.to_f64();
    let q = &state.q_matrix;
    let u: Vec<f64> = q
        .iter()
        .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
        .collect();
    let s = lambda + x.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gain denominator {s} is not a positive scalar; Q lost definiteness"
        )));
    }
    let innovation = v - x.iter().zip(&state.r_hat).map(|(a, b)| a * b).sum::<f64>();

    let r_hat = state
        .r_hat
        .iter()
        .zip(&u)
        .map(|(r, ui)| r + ui * innovation / s)
        .collect();
    let q_matrix = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (q[i][j] - u[i] * u[j] / s) / lambda)
                .collect()
        })
        .collect();
    Ok(RlsState {
        r_hat,
        q_matrix,
        q: state.q + 1,
    })
}

/// Planning model from the current estimates: `P̂^k` and `r̂[i·K + k]`,
/// with the regression state holding `r̂` directly (visit-count regressor).
pub fn estimated_gain_model(p_hat: &TransitionEstimates, rls: &RlsState) -> Result<GainModel> {
    estimated_gain_model_for(p_hat, rls, PayoffRegressor::VisitCounts)
}

/// Like [`estimated_gain_model`], interpreting the coefficients according
/// to `regressor`.
pub fn estimated_gain_model_for(
    p_hat: &TransitionEstimates,
    rls: &RlsState,
    regressor: PayoffRegressor,
) -> Result<GainModel> {
    let k = p_hat.p_hat.len();
    let r_hat = regressor.step_payoffs(&rls.r_hat, &p_hat.p_hat)?;
    Ok(GainModel {
        transitions: p_hat.p_hat.clone(),
        step_payoffs: r_hat.chunks(k).map(<[f64]>::to_vec).collect(),
    })
}
