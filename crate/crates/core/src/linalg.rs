use nalgebra::{DMatrix, DVector, SymmetricEigen};

const MAX_SWEEPS: usize = 12;

/// Eigendecomposition of the symmetric part of `m`, as `(values, vectors)`
/// with `values[j]` belonging to column `j` of `vectors`.
///
/// nalgebra 0.33's result can leave `Vᵀ M V` off-diagonal at ~1e-8 of the
/// norm and can attach eigenvalues to the wrong columns when they cluster,
/// so it is used as the starting basis for cyclic Jacobi sweeps on
/// `Vᵀ M V`, which converge quadratically from there.
pub(crate) fn symmetric_eigen(m: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let n = sym.nrows();
    if n == 0 {
        return Some((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let tol = f64::EPSILON * sym.norm() / (n.max(1) as f64);
    let mut v = SymmetricEigen::try_new(sym.clone(), f64::EPSILON, 0)?.eigenvectors;
    let mut d = v.transpose() * &sym * &v;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = d[(p, q)];
                if apq.abs() <= tol {
                    continue;
                }
                rotated = true;
                let tau = (d[(q, q)] - d[(p, p)]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate_columns(&mut d, p, q, c, s);
                rotate_rows(&mut d, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    Some((d.diagonal(), v))
}

fn rotate_columns(a: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..a.nrows() {
        let (x, y) = (a[(k, p)], a[(k, q)]);
        a[(k, p)] = c * x - s * y;
        a[(k, q)] = s * x + c * y;
    }
}

fn rotate_rows(a: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..a.ncols() {
        let (x, y) = (a[(p, k)], a[(q, k)]);
        a[(p, k)] = c * x - s * y;
        a[(q, k)] = s * x + c * y;
    }
}
