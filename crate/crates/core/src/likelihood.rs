//! Heteroscedastic negative log-likelihoods.
//!
//! The surrogate network predicts `r = log σ²`. The Gaussian loss consumes
//! `r` directly; the Student-t loss uses `σ² = e^r` and a global
//! `ν = 2 + softplus(nu_rho)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::special::{lgamma, softplus, softplus_inv};

/// Log-variance floor `ln(1e-12)` applied before the likelihood.
pub const LOG_VARIANCE_FLOOR: f64 = -27.631_021_115_928_547;
pub const DEFAULT_NU: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodKind {
    Gaussian,
    StudentT { nu_rho: f64 },
}

impl LikelihoodKind {
    pub fn student_t(nu: f64) -> Result<Self> {
        if !(nu > 2.0) {
            return Err(Error::domain(format!("student-t requires nu > 2, got {nu}")));
        }
        Ok(Self::StudentT {
            nu_rho: softplus_inv(nu - 2.0),
        })
    }

    pub fn nu(&self) -> Option<f64> {
        match self {
            Self::Gaussian => None,
            Self::StudentT { nu_rho } => Some(2.0 + softplus(*nu_rho)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::StudentT { .. } => "student_t",
        }
    }
}

fn check_lengths(u: &[f64], u_hat: &[f64], other: &[f64]) -> Result<()> {
    if u.len() != u_hat.len() {
        return Err(Error::Length {
            what: "predictions",
            left: u.len(),
            right: u_hat.len(),
        });
    }
    if u.len() != other.len() {
        return Err(Error::Length {
            what: "variances",
            left: u.len(),
            right: other.len(),
        });
    }
    if u.is_empty() {
        return Err(Error::domain("likelihood over an empty set"));
    }
    Ok(())
}

/// `(1/N) Σ ½(e^{−r}(u − û)² + r)`.
pub fn gaussian_nll(u: &[f64], u_hat: &[f64], r: &[f64]) -> Result<f64> {
    check_lengths(u, u_hat, r)?;
    if let Some(bad) = r.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite log-variance {bad}")));
    }
    let total: f64 = u
        .iter()
        .zip(u_hat)
        .zip(r)
        .map(|((a, b), r)| 0.5 * ((-r).exp() * (a - b) * (a - b) + r))
        .sum();
    Ok(total / u.len() as f64)
}

/// Per-sample Student-t negative log-density, averaged.
pub fn student_t_nll(u: &[f64], u_hat: &[f64], sigma2: &[f64], nu: f64) -> Result<f64> {
    check_lengths(u, u_hat, sigma2)?;
    if !(nu > 0.0) {
        return Err(Error::domain(format!("nu must be positive, got {nu}")));
    }
    if let Some(bad) = sigma2.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::domain(format!("variance must be positive, got {bad}")));
    }
    let head = -lgamma(0.5 * (nu + 1.0)) + lgamma(0.5 * nu);
    let total: f64 = u
        .iter()
        .zip(u_hat)
        .zip(sigma2)
        .map(|((a, b), s2)| {
            let res2 = (a - b) * (a - b);
            head + 0.5 * (nu * PI * s2).ln() + 0.5 * (nu + 1.0) * (res2 / (nu * s2)).ln_1p()
        })
        .sum();
    Ok(total / u.len() as f64)
}

/// Clamps log-variances from below; returns the clamped node and the number of
/// entries that hit the floor.
pub fn floor_log_variance(tape: &mut Tape, r: NodeId) -> Result<(NodeId, usize)> {
    let hits = tape.value(r).data().iter().filter(|v| **v < LOG_VARIANCE_FLOOR).count();
    Ok((tape.floor_at(r, LOG_VARIANCE_FLOOR)?, hits))
}

fn residual_node(tape: &mut Tape, u: &[f64], u_hat: NodeId) -> Result<NodeId> {
    let shape = tape.value(u_hat).shape().to_vec();
    if u.len() != tape.value(u_hat).len() {
        return Err(Error::Length {
            what: "targets",
            left: u.len(),
            right: tape.value(u_hat).len(),
        });
    }
    let target = tape.leaf(Tensor::new(u.to_vec(), shape)?);
    tape.sub(u_hat, target)
}

/// Gaussian NLL on the tape. `u_hat` and `r` must share a shape.
pub fn gaussian_nll_node(tape: &mut Tape, u: &[f64], u_hat: NodeId, r: NodeId) -> Result<NodeId> {
    let res = residual_node(tape, u, u_hat)?;
    let res2 = tape.square(res)?;
    let neg_r = tape.neg(r)?;
    let prec = tape.exp(neg_r)?;
    let scaled = tape.mul(prec, res2)?;
    let terms = tape.add(scaled, r)?;
    let m = tape.mean(terms)?;
    tape.scale(m, 0.5)
}

/// Student-t NLL on the tape with `σ² = e^r` and `ν = 2 + softplus(nu_rho)`.
pub fn student_t_nll_node(tape: &mut Tape, u: &[f64], u_hat: NodeId, r: NodeId, nu_rho: NodeId) -> Result<NodeId> {
    let res = residual_node(tape, u, u_hat)?;
    let res2 = tape.square(res)?;
    let sp = tape.softplus(nu_rho)?;
    let nu = tape.offset(sp, 2.0)?;

    let half_nu = tape.scale(nu, 0.5)?;
    let half_nu1 = tape.offset(half_nu, 0.5)?;
    let lg_num = tape.lgamma(half_nu1)?;
    let lg_den = tape.lgamma(half_nu)?;
    let head = tape.sub(lg_den, lg_num)?;
    let log_nu = tape.log(nu)?;
    let log_nu = tape.scale(log_nu, 0.5)?;
    let head = tape.add(head, log_nu)?;
    let head = tape.offset(head, 0.5 * PI.ln())?;

    let mean_r = tape.mean(r)?;
    let mean_r = tape.scale(mean_r, 0.5)?;

    let neg_r = tape.neg(r)?;
    let prec = tape.exp(neg_r)?;
    let z = tape.mul(res2, prec)?;
    let z = tape.div(z, nu)?;
    let z = tape.offset(z, 1.0)?;
    let log_z = tape.log(z)?;
    let tail = tape.mean(log_z)?;
    let tail = tape.mul(tail, half_nu1)?;

    let total = tape.add(head, mean_r)?;
    tape.add(total, tail)
}

/// Dispatches on the likelihood kind. `nu_rho` is required for Student-t.
pub fn nll_node(
    tape: &mut Tape,
    kind: &LikelihoodKind,
    u: &[f64],
    u_hat: NodeId,
    r: NodeId,
    nu_rho: Option<NodeId>,
) -> Result<NodeId> {
    match (kind, nu_rho) {
        (LikelihoodKind::Gaussian, _) => gaussian_nll_node(tape, u, u_hat, r),
        (LikelihoodKind::StudentT { .. }, Some(nu_rho)) => student_t_nll_node(tape, u, u_hat, r, nu_rho),
        (LikelihoodKind::StudentT { .. }, None) => Err(Error::Config("student-t likelihood needs a bound nu".into())),
    }
}
