//! Condition number, the Guggenheimer complexity measure μ, and the
//! attention-specific bound built on top of it.
//!
//! μ(A) = (2 / ∏σᵢ) · (‖A‖_F / √k)^k grows exponentially with k, so every
//! quantity here is assembled in log space and only exponentiated when the
//! result is representable.

use std::fmt;

use super::matrix::{frobenius_norm, matmul, matmul_nt, softmax_rows};
use super::svd::{svd_values, SingularSpectrum};
use super::Matrix;
use crate::error::{Error, Result};

/// Logs at or beyond this magnitude are not exponentiated.
pub const LN_OVERFLOW: f64 = 700.0;

/// A non-negative quantity that may be unrepresentable or undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Finite(f64),
    /// Too large for `f64`; carries the natural log of the value.
    Overflow { ln: f64 },
    /// The source matrix is numerically rank deficient.
    RankDeficient,
}

impl Estimate {
    pub fn from_ln(ln: f64) -> Self {
        if ln.abs() < LN_OVERFLOW {
            Estimate::Finite(ln.exp())
        } else {
            Estimate::Overflow { ln }
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Estimate::Finite(v) => Some(v),
            _ => None,
        }
    }

    pub fn ln(self) -> Option<f64> {
        match self {
            Estimate::Finite(v) => Some(v.ln()),
            Estimate::Overflow { ln } => Some(ln),
            Estimate::RankDeficient => None,
        }
    }

    pub fn is_defined(self) -> bool {
        !matches!(self, Estimate::RankDeficient)
    }

    /// `self <= other * (1 + rel_slack)`, compared in log space. `None`
    /// when either side is undefined.
    pub fn le_with_slack(self, other: Estimate, rel_slack: f64) -> Option<bool> {
        Some(self.ln()? <= other.ln()? + rel_slack.ln_1p())
    }

    pub fn flag(self) -> &'static str {
        match self {
            Estimate::Finite(_) => "ok",
            Estimate::Overflow { .. } => "overflow",
            Estimate::RankDeficient => "rank_deficient",
        }
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimate::Finite(v) => write!(f, "{v:.6e}"),
            Estimate::Overflow { ln } => write!(f, "exp({ln:.3})"),
            Estimate::RankDeficient => write!(f, "inf (rank deficient)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningReport {
    pub kappa: Estimate,
    pub mu: Estimate,
    pub frobenius: f64,
    /// κ ≤ μ, or vacuously true when the matrix is rank deficient.
    pub guggenheimer_bound_holds: bool,
}

pub fn kappa_from_spectrum(s: &SingularSpectrum) -> Estimate {
    if !s.is_full_rank() {
        return Estimate::RankDeficient;
    }
    Estimate::Finite(s.largest() / s.smallest())
}

/// ln μ given the spectrum and Frobenius norm of the same matrix.
pub fn ln_mu_from_parts(s: &SingularSpectrum, frobenius: f64) -> Option<f64> {
    if !s.is_full_rank() {
        return None;
    }
    let k = s.len() as f64;
    let ln_prod: f64 = s.values.iter().map(|v| v.ln()).sum();
    Some(std::f64::consts::LN_2 - ln_prod + k * (frobenius.ln() - 0.5 * k.ln()))
}

pub fn mu_from_parts(s: &SingularSpectrum, frobenius: f64) -> Estimate {
    ln_mu_from_parts(s, frobenius).map_or(Estimate::RankDeficient, Estimate::from_ln)
}

/// σ₁/σ_k with k = min(rows, cols).
pub fn condition_number(m: &Matrix) -> Result<Estimate> {
    Ok(kappa_from_spectrum(&svd_values(m)?))
}

pub fn mu_measure(m: &Matrix) -> Result<Estimate> {
    Ok(mu_from_parts(&svd_values(m)?, frobenius_norm(m)))
}

/// Right-hand side of the Guggenheimer bound κ(A) ≤ μ(A). Numerically the
/// same quantity as [`mu_measure`].
pub fn guggenheimer_bound(m: &Matrix) -> Result<Estimate> {
    mu_measure(m)
}

pub fn conditioning_report(m: &Matrix) -> Result<ConditioningReport> {
    let spectrum = svd_values(m)?;
    let frobenius = frobenius_norm(m);
    let kappa = kappa_from_spectrum(&spectrum);
    let mu = mu_from_parts(&spectrum, frobenius);
    let guggenheimer_bound_holds = kappa.le_with_slack(mu, 1e-8).unwrap_or(true);
    Ok(ConditioningReport {
        kappa,
        mu,
        frobenius,
        guggenheimer_bound_holds,
    })
}

/// softmax(q kᵀ) v, without score scaling.
pub fn attention_output(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let scores = matmul_nt(q, k).map_err(|_| Error::shape("attention_scores", q.shape(), k.shape()))?;
    matmul(&softmax_rows(&scores), v)
}

/// Bound on κ(softmax(q kᵀ) v) that depends only on ‖v‖_F and the
/// spectrum of the attention output:
/// (2 / ∏σᵢ(A)) · ((√n / √r) ‖v‖_F)^r with r = min(n, d).
pub fn attention_kappa_bound(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Estimate> {
    if k.rows() != v.rows() {
        return Err(Error::shape("attention_kappa_bound", k.shape(), v.shape()));
    }
    let a = attention_output(q, k, v)?;
    let spectrum = svd_values(&a)?;
    if !spectrum.is_full_rank() {
        return Ok(Estimate::RankDeficient);
    }
    let n = a.rows() as f64;
    let r = spectrum.len() as f64;
    let ln_prod: f64 = spectrum.values.iter().map(|s| s.ln()).sum();
    let ln_base = 0.5 * n.ln() - 0.5 * r.ln() + frobenius_norm(v).ln();
    Ok(Estimate::from_ln(std::f64::consts::LN_2 - ln_prod + r * ln_base))
}
