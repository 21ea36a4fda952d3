use std::fmt::{self, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{
    attention_kappa_bound, attention_output, build_preconditioner, conditioning_report, has_floored_rows,
    preconditioner_diagonal, row_norms, ConditioningReport, Estimate, Matrix,
};

/// Parses `rows cols` followed by `rows · cols` whitespace-separated
/// floats in row-major order.
pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut words = text.split_whitespace();
    let mut dim = |name: &str| -> Result<usize> {
        words
            .next()
            .ok_or_else(|| Error::Input(format!("missing {name}")))?
            .parse()
            .map_err(|_| Error::Input(format!("{name} is not an integer")))
    };
    let rows = dim("rows")?;
    let cols = dim("cols")?;
    let data = words
        .map(|w| w.parse::<f64>().map_err(|_| Error::Input(format!("bad entry {w:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_vec(rows, cols, data)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Uniform entries in [-1, 1] with each row scaled by 10^u, u ~ U[-1, 1],
/// so row norms span about two orders of magnitude.
pub fn random_row_scaled(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    for i in 0..rows {
        let s = 10f64.powf(rng.random_range(-1.0..1.0));
        m.row_mut(i).iter_mut().for_each(|x| *x *= s);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnsembleStats {
    pub samples: usize,
    /// κ(CA) < κ(A).
    pub kappa_reduced: usize,
    /// μ(CA) ≤ μ(A).
    pub mu_reduced: usize,
    /// Rank-deficient before or after preconditioning.
    pub skipped: usize,
}

impl EnsembleStats {
    pub fn kappa_fraction(&self) -> f64 {
        self.kappa_reduced as f64 / (self.samples - self.skipped).max(1) as f64
    }

    pub fn mu_fraction(&self) -> f64 {
        self.mu_reduced as f64 / (self.samples - self.skipped).max(1) as f64
    }
}

/// Effect of row preconditioning on `count` draws of
/// [`random_row_scaled`].
pub fn ensemble_stats(rows: usize, cols: usize, count: usize, seed: u64) -> Result<EnsembleStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = EnsembleStats {
        samples: count,
        ..EnsembleStats::default()
    };
    for _ in 0..count {
        let a = random_row_scaled(rows, cols, &mut rng);
        let ca = build_preconditioner(&a).matmul(&a)?;
        let before = conditioning_report(&a)?;
        let after = conditioning_report(&ca)?;
        match (before.kappa.value(), after.kappa.value()) {
            (Some(kb), Some(ka)) => {
                stats.kappa_reduced += usize::from(ka < kb);
                stats.mu_reduced += usize::from(after.mu.le_with_slack(before.mu, 0.0).unwrap_or(false));
            }
            _ => stats.skipped += 1,
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub shape: (usize, usize),
    pub before: ConditioningReport,
    pub preconditioner: Vec<f64>,
    pub floored: bool,
    pub after: ConditioningReport,
    pub after_row_norms: Vec<f64>,
    /// Present when the input was built from q, k, v.
    pub attention_bound: Option<Estimate>,
    pub ensemble: Option<EnsembleStats>,
}

pub fn analyze_matrix(a: &Matrix) -> Result<Analysis> {
    let c = build_preconditioner(a);
    let ca = c.matmul(a)?;
    Ok(Analysis {
        shape: a.shape(),
        before: conditioning_report(a)?,
        preconditioner: preconditioner_diagonal(a),
        floored: has_floored_rows(a),
        after: conditioning_report(&ca)?,
        after_row_norms: row_norms(&ca),
        attention_bound: None,
        ensemble: None,
    })
}

pub fn analyze_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Analysis> {
    let bound = attention_kappa_bound(q, k, v)?;
    let mut a = analyze_matrix(&attention_output(q, k, v)?)?;
    a.attention_bound = Some(bound);
    Ok(a)
}

fn list(v: &[f64]) -> String {
    const SHOWN: usize = 12;
    let mut s: Vec<String> = v.iter().take(SHOWN).map(|x| format!("{x:.6}")).collect();
    if v.len() > SHOWN {
        s.push(format!("... ({} more)", v.len() - SHOWN));
    }
    s.join(" ")
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let _ = writeln!(out, "matrix {}x{}", self.shape.0, self.shape.1);
        let ln_mu = |e: Estimate| e.ln().map_or_else(|| "inf".to_string(), |l| format!("{l:.6}"));
        for (label, r) in [("input", &self.before), ("preconditioned", &self.after)] {
            let _ = writeln!(out, "[{label}]");
            let _ = writeln!(out, "  kappa        {}", r.kappa);
            let _ = writeln!(out, "  mu           {}", r.mu);
            let _ = writeln!(out, "  ln mu        {}", ln_mu(r.mu));
            let _ = writeln!(out, "  frobenius    {:.6}", r.frobenius);
            let _ = writeln!(out, "  kappa <= mu  {}", r.guggenheimer_bound_holds);
        }
        if let Some(b) = self.attention_bound {
            let _ = writeln!(out, "attention kappa bound  {b}");
        }
        let _ = writeln!(out, "preconditioner diag    {}", list(&self.preconditioner));
        if self.floored {
            let _ = writeln!(out, "  (some rows hit the norm floor)");
        }
        let _ = writeln!(out, "row norms after        {}", list(&self.after_row_norms));
        if let Some(e) = &self.ensemble {
            let _ = writeln!(
                out,
                "ensemble of {} random row-scaled {}x{}: kappa reduced {:.3}, mu not increased {:.3}, skipped {}",
                e.samples,
                self.shape.0,
                self.shape.1,
                e.kappa_fraction(),
                e.mu_fraction(),
                e.skipped
            );
        }
        f.write_str(&out)
    }
}
