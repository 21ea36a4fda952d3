//! Singular values by one-sided (Hestenes) Jacobi.
//!
//! The iteration orthogonalises the columns of the narrower orientation of
//! the input, so the implicit Gram matrix is `min(rows, cols)` square. Pairs
//! are visited in a fixed cyclic order, which makes the result a
//! deterministic function of the input bits.

use super::Matrix;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
/// A pair is treated as orthogonal once `|a_p·a_q| <= TOL * ‖a_p‖‖a_q‖`.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;
/// Singular values at or below `RANK_TOL * σ₁` do not count toward rank.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum {
    /// Non-increasing, length `min(rows, cols)`.
    pub values: Vec<f64>,
    pub rank: usize,
}

impl SingularSpectrum {
    pub fn largest(&self) -> f64 {
        self.values[0]
    }

    pub fn smallest(&self) -> f64 {
        *self.values.last().expect("spectrum is never empty")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.values.len()
    }
}

pub fn svd_values(m: &Matrix) -> Result<SingularSpectrum> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Input("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::Input("svd of a non-finite matrix".into()));
    }

    // One contiguous Vec per orthogonalised column.
    let tall = m.rows() >= m.cols();
    let (len, k) = if tall {
        (m.rows(), m.cols())
    } else {
        (m.cols(), m.rows())
    };
    let mut cols: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..len)
                .map(|r| if tall { m.get(r, c) } else { m.get(c, r) })
                .collect()
        })
        .collect();

    // Columns that collapse to rounding noise keep rotating forever against
    // their neighbours; treat them as exact zeros.
    let negligible = {
        let frob2: f64 = m.data().iter().map(|x| x * x).sum();
        frob2 * f64::EPSILON * f64::EPSILON
    };
    let mut converged = k == 1;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..k - 1 {
            for q in p + 1..k {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= ORTHOGONALITY_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let xp = *x;
                    let yq = *y;
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numerical {
            message: format!("one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"),
            residual,
        });
    }

    let mut values: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let cutoff = RANK_TOL * values[0];
    let rank = values.iter().filter(|&&s| s > cutoff).count();
    Ok(SingularSpectrum { values, rank })
}
