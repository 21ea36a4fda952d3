//! Oracles and helpers shared by the integration tests. Everything here is
//! written against plain slices so it does not lean on the code under test.

#![allow(dead_code)]

pub mod gradcheck;

use precond_attn::autodiff::{Tape, Var};
use precond_attn::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(i, p) * b.get(p, j);
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix (row-major, n×n) by the classical
/// cyclic Jacobi method, sorted descending.
pub fn jacobi_eigenvalues(sym: &[f64], n: usize) -> Vec<f64> {
    let mut a = sym.to_vec();
    for _sweep in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Gram matrix of the narrower side: AᵀA when cols ≤ rows, else AAᵀ.
pub fn small_gram(a: &Matrix) -> (Vec<f64>, usize) {
    let (r, c) = a.shape();
    if c <= r {
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                g[i * c + j] = (0..r).map(|k| a.get(k, i) * a.get(k, j)).sum();
            }
        }
        (g, c)
    } else {
        let mut g = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                g[i * r + j] = (0..c).map(|k| a.get(i, k) * a.get(j, k)).sum();
            }
        }
        (g, r)
    }
}

/// Singular values from the Jacobi eigen oracle of the Gram matrix.
pub fn oracle_singular_values(a: &Matrix) -> Vec<f64> {
    let (g, n) = small_gram(a);
    jacobi_eigenvalues(&g, n)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect()
}

/// Singular values from nalgebra's symmetric eigensolver on the Gram
/// matrix.
pub fn nalgebra_singular_values(a: &Matrix) -> Vec<f64> {
    let (g, n) = small_gram(a);
    let m = nalgebra::DMatrix::from_row_slice(n, n, &g);
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm-wise relative error ‖a − b‖ / max(‖a‖, ‖b‖); absolute when both
/// are below 1e-8.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

/// Analytic gradients of `build` at `inputs` (all registered as leaves),
/// together with central finite differences of the same function.
pub fn gradient_pair<F>(inputs: &[Matrix], build: F) -> Vec<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).into_data()).collect();

    let eval = |inputs: &[Matrix]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).get(0, 0)
    };
    let mut out = Vec::new();
    for (t, a) in analytic.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for idx in 0..a.len() {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[idx] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
        out.push((a, numeric));
    }
    out
}

/// Worst per-input relative error of [`gradient_pair`].
pub fn worst_gradient_error<F>(inputs: &[Matrix], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    gradient_pair(inputs, build)
        .iter()
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
