//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Jacobi is unconditionally robust for the sizes used here (observation
//! dimension at most a few hundred), converges quadratically, and delivers
//! orthonormal eigenvectors to near machine precision.

use super::{Mat, NumericsError};

const MAX_SWEEPS: usize = 64;
const SYM_TOL_REL: f64 = 1e-10;

/// Eigenvalues (descending) and paired orthonormal eigenvectors (columns).
#[derive(Clone, Debug)]
pub struct EigSolution {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl EigSolution {
    /// First `k` eigenvector columns.
    pub fn top_vectors(&self, k: usize) -> Mat {
        self.vectors.take_cols(k)
    }
}

/// Full eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted descending; each eigenvector column is sign-fixed
/// so its largest-magnitude entry is positive, making repeated runs and
/// cross-implementation comparisons reproducible.
pub fn sym_eig(s: &Mat) -> Result<EigSolution, NumericsError> {
    let (rows, cols) = s.shape();
    if rows != cols {
        return Err(NumericsError::NotSquare { rows, cols });
    }
    let n = rows;
    let scale = s.max_abs().max(1.0);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((s.at(i, j) - s.at(j, i)).abs());
        }
    }
    if max_asym > SYM_TOL_REL * scale {
        return Err(NumericsError::NotSymmetric { max_asym, tol: SYM_TOL_REL * scale });
    }

    // Work on a symmetrized copy so tiny input asymmetry cannot bias rotations.
    let mut a = Mat::from_fn(n, n, |i, j| 0.5 * (s.at(i, j) + s.at(j, i)));
    let mut v = Mat::identity(n);
    let frob = a.frob_norm();
    if frob == 0.0 {
        return Ok(EigSolution { values: vec![0.0; n], vectors: v });
    }
    let tol = 1e-14 * frob;

    let mut converged = false;
    let mut off = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.at(p, q) * a.at(p, q);
            }
        }
        off = (2.0 * off).sqrt();
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq.abs() <= 1e-300 * scale {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sgn = t * c;
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for j in 0..n {
                    if j != p && j != q {
                        let ajp = a.at(j, p);
                        let ajq = a.at(j, q);
                        let np = c * ajp - sgn * ajq;
                        let nq = sgn * ajp + c * ajq;
                        a.set(j, p, np);
                        a.set(p, j, np);
                        a.set(j, q, nq);
                        a.set(q, j, nq);
                    }
                }
                for j in 0..n {
                    let vjp = v.at(j, p);
                    let vjq = v.at(j, q);
                    v.set(j, p, c * vjp - sgn * vjq);
                    v.set(j, q, sgn * vjp + c * vjq);
                }
            }
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence { max_sweeps: MAX_SWEEPS, offdiag: off });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(j, j).partial_cmp(&a.at(i, i)).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        // Sign convention: largest-magnitude entry positive.
        let mut best = 0;
        for i in 1..n {
            if v.at(i, old_col).abs() > v.at(best, old_col).abs() {
                best = i;
            }
        }
        let flip = if v.at(best, old_col) < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors.set(i, new_col, flip * v.at(i, old_col));
        }
    }
    Ok(EigSolution { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn reconstruct(e: &EigSolution) -> Mat {
        let lam = Mat::diag(&e.values);
        e.vectors.matmul(&lam).matmul_nt(&e.vectors)
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eig(&Mat::identity(3)).unwrap();
        for v in &e.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_is_sorted_with_permuted_axes() {
        let e = sym_eig(&Mat::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 2.0).abs() < 1e-14);
        assert!((e.values[2] - 1.0).abs() < 1e-14);
        // Axis eigenvectors: eigenvalue 3 pairs with axis 1, 2 with axis 2, 1 with axis 0.
        assert!((e.vectors.at(1, 0) - 1.0).abs() < 1e-14);
        assert!((e.vectors.at(2, 1) - 1.0).abs() < 1e-14);
        assert!((e.vectors.at(0, 2) - 1.0).abs() < 1e-14);
    }

    // Expected eigenvalues computed offline with numpy.linalg.eigh on the
    // hand-fixed matrix below.
    #[test]
    fn random_symmetric_4x4_matches_reference_solver() {
        let s = Mat::from_vec(
            4,
            4,
            vec![
                1.3, -0.7, 0.2, 0.5, //
                -0.7, 2.1, 0.9, -0.3, //
                0.2, 0.9, 0.8, 0.4, //
                0.5, -0.3, 0.4, 1.6,
            ],
        );
        let expected = [2.85516162227569, 2.01938112646178, 0.86392459695750, 0.06153265430503];
        let e = sym_eig(&s).unwrap();
        for (got, want) in e.values.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-10, "eigenvalue {got} vs reference {want}");
        }
        assert!(reconstruct(&e).sub(&s).frob_norm() <= 1e-12 * s.frob_norm().max(1.0));
    }

    #[test]
    fn orthonormality_reconstruction_and_trace() {
        let mut rng = Rng::new(11);
        for n in [2usize, 5, 16, 64] {
            let g = rng.normal_mat(n, n);
            let s = g.add(&g.transpose()).scale(0.5);
            let e = sym_eig(&s).unwrap();
            let vtv = e.vectors.matmul_tn(&e.vectors);
            assert!(vtv.sub(&Mat::identity(n)).frob_norm() <= 1e-8);
            assert!(reconstruct(&e).sub(&s).frob_norm() <= 1e-6 * s.frob_norm());
            let tr: f64 = e.values.iter().sum();
            assert!((tr - s.trace()).abs() <= 1e-8 * s.trace().abs().max(1.0));
            for w in e.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn rejects_non_square_and_non_symmetric() {
        assert!(matches!(sym_eig(&Mat::zeros(2, 3)), Err(NumericsError::NotSquare { .. })));
        let mut s = Mat::identity(3);
        s.set(0, 1, 0.5);
        assert!(matches!(sym_eig(&s), Err(NumericsError::NotSymmetric { .. })));
    }
}
