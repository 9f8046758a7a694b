//! Regularized least squares via the Gram-matrix eigendecomposition.

use super::{sym_eig, Mat, NumericsError};

/// Relative eigenvalue cutoff below which Gram directions are treated as null.
const PINV_CUTOFF: f64 = 1e-12;

/// Solve `min_W ‖Xin Wᵀ − Yout‖_F² + ridge ‖W‖_F²`.
///
/// Returns W with shape (Yout cols × Xin cols), so predictions are `x · Wᵀ`.
/// The solve goes through the eigendecomposition of `XᵀX + ridge·I` with a
/// pseudo-inverse cutoff on small eigenvalues, so rank-deficient inputs are
/// handled even at ridge = 0.
pub fn solve_lse(xin: &Mat, yout: &Mat, ridge: f64) -> Result<Mat, NumericsError> {
    if xin.rows() != yout.rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "solve_lse",
            left: format!("{}x{}", xin.rows(), xin.cols()),
            right: format!("{}x{}", yout.rows(), yout.cols()),
        });
    }
    assert!(ridge >= 0.0, "ridge must be non-negative");
    let p = xin.cols();
    let mut gram = xin.matmul_tn(xin);
    for i in 0..p {
        let v = gram.at(i, i) + ridge;
        gram.set(i, i, v);
    }
    let e = sym_eig(&gram)?;
    let lmax = e.values.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = PINV_CUTOFF * lmax;
    // Wᵀ = V diag(1/λ) Vᵀ XᵀY, dropping near-null directions.
    let xty = xin.matmul_tn(yout);
    let vt_xty = e.vectors.matmul_tn(&xty);
    let scaled = Mat::from_fn(p, yout.cols(), |i, j| {
        if e.values[i] > cutoff {
            vt_xty.at(i, j) / e.values[i]
        } else {
            0.0
        }
    });
    Ok(e.vectors.matmul(&scaled).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn identity_regression() {
        let mut rng = Rng::new(1);
        let x = rng.normal_mat(20, 4);
        let w = solve_lse(&x, &x, 0.0).unwrap();
        assert!(w.sub(&Mat::identity(4)).max_abs() < 1e-10);
    }

    #[test]
    fn orthogonal_target_gives_zero() {
        // Columns of Xin live on axes 0..2, target on axis 3: exactly orthogonal.
        let x = Mat::from_fn(6, 2, |i, j| if i % 4 == j { 1.0 } else { 0.0 });
        let y = Mat::from_fn(6, 1, |i, _| if i % 4 == 3 { 1.0 } else { 0.0 });
        let w = solve_lse(&x, &y, 0.0).unwrap();
        assert!(w.max_abs() < 1e-12);
    }

    // Independent oracle: dense normal equations solved by Gaussian elimination
    // with partial pivoting, written here without reusing the library solver.
    fn normal_equations_oracle(x: &Mat, y: &Mat) -> Mat {
        let p = x.cols();
        let g = x.matmul_tn(x);
        let h = x.matmul_tn(y);
        let m = y.cols();
        let mut aug = Mat::from_fn(p, p + m, |i, j| if j < p { g.at(i, j) } else { h.at(i, j - p) });
        for k in 0..p {
            let mut piv = k;
            for i in k + 1..p {
                if aug.at(i, k).abs() > aug.at(piv, k).abs() {
                    piv = i;
                }
            }
            if piv != k {
                for j in 0..p + m {
                    let tmp = aug.at(k, j);
                    aug.set(k, j, aug.at(piv, j));
                    aug.set(piv, j, tmp);
                }
            }
            let d = aug.at(k, k);
            for i in 0..p {
                if i != k && aug.at(i, k) != 0.0 {
                    let f = aug.at(i, k) / d;
                    for j in k..p + m {
                        let v = aug.at(i, j) - f * aug.at(k, j);
                        aug.set(i, j, v);
                    }
                }
            }
        }
        Mat::from_fn(m, p, |i, j| aug.at(j, p + i) / aug.at(j, j))
    }

    #[test]
    fn matches_normal_equations_on_well_conditioned_system() {
        let mut rng = Rng::new(7);
        let x = rng.normal_mat(50, 6);
        let w_true = rng.normal_mat(3, 6);
        let noise = rng.normal_mat(50, 3).scale(0.05);
        let y = x.matmul_nt(&w_true).add(&noise);
        let w = solve_lse(&x, &y, 0.0).unwrap();
        let w_ref = normal_equations_oracle(&x, &y);
        assert!(w.sub(&w_ref).max_abs() < 1e-8);
        // Residual orthogonal to the column space of Xin.
        let resid = x.matmul_nt(&w).sub(&y);
        assert!(x.matmul_tn(&resid).max_abs() < 1e-8);
    }

    #[test]
    fn rank_deficient_input_is_handled() {
        let mut rng = Rng::new(9);
        let base = rng.normal_mat(30, 2);
        // Third column = sum of the first two: rank 2 of 3.
        let x = Mat::from_fn(30, 3, |i, j| {
            if j < 2 {
                base.at(i, j)
            } else {
                base.at(i, 0) + base.at(i, 1)
            }
        });
        let y = rng.normal_mat(30, 1);
        let w = solve_lse(&x, &y, 0.0).unwrap();
        assert!(w.is_finite());
        let resid = x.matmul_nt(&w).sub(&y);
        assert!(x.matmul_tn(&resid).max_abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = Mat::zeros(4, 2);
        let y = Mat::zeros(5, 2);
        assert!(solve_lse(&x, &y, 0.0).is_err());
    }
}
