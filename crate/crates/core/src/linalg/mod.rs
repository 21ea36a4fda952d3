//! Dense kernels and conditioning mathematics.

mod conditioning;
mod matrix;
mod precond;
mod svd;

pub use conditioning::{
    attention_kappa_bound, attention_output, condition_number, conditioning_report,
    guggenheimer_bound, kappa_from_spectrum, ln_mu_from_parts, mu_from_parts, mu_measure,
    ConditioningReport, Estimate, LN_OVERFLOW,
};
pub use matrix::{frobenius_norm, matmul, row_norms, softmax_rows, Matrix};
pub(crate) use matrix::{matmul_nt, matmul_tn};
pub use precond::{
    build_preconditioner, has_floored_rows, preconditioner_diagonal,
    preconditioner_diagonal_counted, FlopCount, ROW_NORM_FLOOR,
};
pub use svd::{svd_values, SingularSpectrum, MAX_SWEEPS, ORTHOGONALITY_TOL, RANK_TOL};
