//! Diagonal row-norm preconditioner.
//!
//! `C = diag(1 / ‖A_{i,}‖₂)` rescales every row of `A` to unit length, so
//! `‖C·A‖_F = √n` regardless of how `A` was scaled.

use super::Matrix;

/// Row norms below this are clamped before inversion.
pub const ROW_NORM_FLOOR: f64 = 1e-12;

/// Scalar operations issued while building a preconditioner.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub mul: u64,
    pub add: u64,
    pub sqrt: u64,
    pub div: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.mul + self.add + self.sqrt + self.div
    }
}

impl std::ops::AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: FlopCount) {
        self.mul += rhs.mul;
        self.add += rhs.add;
        self.sqrt += rhs.sqrt;
        self.div += rhs.div;
    }
}

/// Diagonal entries of the preconditioner, tallying every multiply, add,
/// square root and division into `flops`. The floor comparison is not an
/// arithmetic operation and is not counted.
pub fn preconditioner_diagonal_counted(a: &Matrix, flops: &mut FlopCount) -> Vec<f64> {
    a.iter_rows()
        .map(|row| {
            let mut acc = row[0] * row[0];
            flops.mul += 1;
            for x in &row[1..] {
                let sq = x * x;
                flops.mul += 1;
                acc += sq;
                flops.add += 1;
            }
            let norm = acc.sqrt();
            flops.sqrt += 1;
            let inv = 1.0 / norm.max(ROW_NORM_FLOOR);
            flops.div += 1;
            inv
        })
        .collect()
}

pub fn preconditioner_diagonal(a: &Matrix) -> Vec<f64> {
    preconditioner_diagonal_counted(a, &mut FlopCount::default())
}

/// The n×n diagonal matrix `C` with `C_ii = 1 / max(‖A_{i,}‖₂, ε)`.
pub fn build_preconditioner(a: &Matrix) -> Matrix {
    Matrix::diag(&preconditioner_diagonal(a))
}

/// Whether any row of `a` is short enough to hit [`ROW_NORM_FLOOR`].
pub fn has_floored_rows(a: &Matrix) -> bool {
    super::row_norms(a).iter().any(|&r| r < ROW_NORM_FLOOR)
}
