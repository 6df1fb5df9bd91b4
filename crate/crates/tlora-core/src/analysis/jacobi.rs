//! Cyclic Jacobi eigendecomposition for small dense symmetric matrices.
//!
//! Sweeps annihilate every off-diagonal element in turn with plane rotations
//! until the off-diagonal Frobenius norm of the (norm-scaled) matrix falls
//! below [`JACOBI_TOL`]. Matrices up to a few hundred rows converge in a
//! handful of sweeps, which covers every square update this crate analyzes.

use crate::error::{Error, Result};
use crate::tensor::matops;

/// Convergence threshold on the off-diagonal Frobenius norm after the input
/// is scaled to unit Frobenius norm.
pub const JACOBI_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 100;

/// Off-diagonal Frobenius norm of a square matrix.
pub fn off_diag_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[i * n + j] * a[i * n + j];
            }
        }
    }
    sum.sqrt()
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetric_part(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
        }
    }
    out
}

/// Eigendecomposition `S = Q·diag(λ)·Qᵀ` of a symmetric matrix.
///
/// Returns unsorted eigenvalues and `Q` in row-major layout with
/// eigenvectors in the columns. The input is scaled to unit Frobenius norm
/// internally, so the tolerance is effectively relative.
pub fn eigen_sym(mat: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if mat.len() != n * n {
        return Err(Error::dim("eigen_sym", &[mat.len()], &[n, n]));
    }
    let scale = matops::frob_norm(mat);
    let mut q = identity(n);
    if scale == 0.0 || n == 1 {
        return Ok((if n == 1 { vec![mat[0]] } else { vec![0.0; n] }, q));
    }
    let mut a: Vec<f64> = mat.iter().map(|v| v / scale).collect();

    for _ in 0..MAX_SWEEPS {
        if off_diag_norm(&a, n) < JACOBI_TOL {
            let eigvals: Vec<f64> = (0..n).map(|i| a[i * n + i] * scale).collect();
            return Ok((eigvals, q));
        }
        for p in 0..n - 1 {
            for row_q in p + 1..n {
                let apq = a[p * n + row_q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[row_q * n + row_q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut a, &mut q, n, p, row_q, c, s);
            }
        }
    }
    Err(Error::Numerical(format!(
        "Jacobi eigensolver did not converge for a {n}x{n} matrix (off-diagonal norm {})",
        off_diag_norm(&a, n)
    )))
}

fn identity(n: usize) -> Vec<f64> {
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    q
}

/// Apply the (p,q) plane rotation `A ← JᵀAJ` and accumulate `Q ← QJ`.
fn rotate(a: &mut [f64], q: &mut [f64], n: usize, p: usize, qq: usize, c: f64, s: f64) {
    for i in 0..n {
        let aip = a[i * n + p];
        let aiq = a[i * n + qq];
        a[i * n + p] = c * aip - s * aiq;
        a[i * n + qq] = s * aip + c * aiq;
    }
    for j in 0..n {
        let apj = a[p * n + j];
        let aqj = a[qq * n + j];
        a[p * n + j] = c * apj - s * aqj;
        a[qq * n + j] = s * apj + c * aqj;
    }
    for i in 0..n {
        let qip = q[i * n + p];
        let qiq = q[i * n + qq];
        q[i * n + p] = c * qip - s * qiq;
        q[i * n + qq] = s * qip + c * qiq;
    }
}

/// Singular values of a `rows × cols` matrix, sorted descending: square
/// roots of the eigenvalues of the smaller Gram matrix.
///
/// Gram eigenvalues below `n·eps·λ_max` are rounding residue (forming
/// `MᵀM` already perturbs entries at that level) and are clamped to zero,
/// so an exactly low-rank product reports exact zeros instead of
/// `~√eps·σ₁` noise.
pub fn singular_values(m: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if m.len() != rows * cols {
        return Err(Error::dim("singular_values", &[m.len()], &[rows, cols]));
    }
    let small = rows.min(cols);
    let gram = if rows <= cols {
        matops::mm_nt(m, m, rows, cols, rows) // M·Mᵀ
    } else {
        matops::mm_tn(m, m, rows, cols, cols) // Mᵀ·M
    };
    let (eigvals, _) = eigen_sym(&gram, small)?;
    let lambda_max = eigvals.iter().copied().fold(0.0f64, f64::max);
    let cutoff = lambda_max * small as f64 * f64::EPSILON;
    let mut sv: Vec<f64> = eigvals
        .iter()
        .map(|&l| if l < cutoff { 0.0 } else { l.sqrt() })
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(sv)
}

/// Count of singular values at or above `tol_rel · σ₁`; 0 for a zero matrix.
pub fn numerical_rank(m: &[f64], rows: usize, cols: usize, tol_rel: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&tol_rel) || tol_rel == 0.0 {
        return Err(Error::Config(format!(
            "numerical_rank tolerance must be in (0,1), got {tol_rel}"
        )));
    }
    let sv = singular_values(m, rows, cols)?;
    let s1 = sv.first().copied().unwrap_or(0.0);
    if s1 == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s >= tol_rel * s1).count())
}
