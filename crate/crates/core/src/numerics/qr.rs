//! Householder QR, Haar-random orthogonal matrices, and subspace utilities.

use super::{sym_eig, Mat, NumericsError, Rng};

/// Thin QR factorization `a = Q R` with Householder reflections.
///
/// `a` must be tall or square (rows ≥ cols). Q is rows×cols with orthonormal
/// columns, R is cols×cols upper triangular.
pub fn householder_qr(a: &Mat) -> Result<(Mat, Mat), NumericsError> {
    let (m, n) = a.shape();
    if m < n {
        return Err(NumericsError::TallRequired { rows: m, cols: n });
    }
    let mut r = a.clone();
    // Householder vectors, stored per column.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r.at(i, k)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vnorm > 0.0 {
                for x in v.iter_mut() {
                    *x /= vnorm;
                }
                // Apply I - 2vvᵀ to the trailing block of R.
                for j in k..n {
                    let dot: f64 = (k..m).map(|i| v[i - k] * r.at(i, j)).sum();
                    for i in k..m {
                        let val = r.at(i, j) - 2.0 * v[i - k] * dot;
                        r.set(i, j, val);
                    }
                }
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        vs.push(v);
    }
    // Accumulate thin Q by applying reflectors in reverse to the first n identity columns.
    let mut q = Mat::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &vs[k];
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        for j in 0..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * q.at(i, j)).sum();
            for i in k..m {
                let val = q.at(i, j) - 2.0 * v[i - k] * dot;
                q.set(i, j, val);
            }
        }
    }
    let r_out = Mat::from_fn(n, n, |i, j| if j >= i { r.at(i, j) } else { 0.0 });
    Ok((q, r_out))
}

/// Haar-distributed matrix with orthonormal columns (rows ≥ cols).
///
/// QR of an i.i.d. standard-Gaussian matrix, with each Q column flipped so
/// the corresponding R diagonal entry is positive.
pub fn random_orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Result<Mat, NumericsError> {
    if rows < cols {
        return Err(NumericsError::TallRequired { rows, cols });
    }
    let g = rng.normal_mat(rows, cols);
    let (mut q, r) = householder_qr(&g)?;
    for j in 0..cols {
        if r.at(j, j) < 0.0 {
            for i in 0..rows {
                let v = q.at(i, j);
                q.set(i, j, -v);
            }
        }
    }
    Ok(q)
}

/// Orthonormal basis for the column space of a full-column-rank matrix.
pub fn orthonormal_columns(a: &Mat) -> Result<Mat, NumericsError> {
    let (q, r) = householder_qr(a)?;
    let scale = r.max_abs().max(1e-300);
    for j in 0..r.cols() {
        if r.at(j, j).abs() <= 1e-12 * scale {
            return Err(NumericsError::RankDeficient { rank: j, cols: r.cols() });
        }
    }
    Ok(q)
}

/// Singular values of `a`, descending (via the Gram matrix of the smaller side).
pub fn singular_values(a: &Mat) -> Result<Vec<f64>, NumericsError> {
    let gram = if a.rows() >= a.cols() { a.matmul_tn(a) } else { a.matmul_nt(a) };
    let e = sym_eig(&gram)?;
    Ok(e.values.iter().map(|&l| l.max(0.0).sqrt()).collect())
}

/// Thin SVD `a = U diag(s) Vᵀ` for a tall full-column-rank matrix.
///
/// Computed from the eigendecomposition of `aᵀa`, which is small for the
/// shapes used here (columns ≤ a few hundred).
pub fn thin_svd(a: &Mat) -> Result<(Mat, Vec<f64>, Mat), NumericsError> {
    let (m, n) = a.shape();
    if m < n {
        return Err(NumericsError::TallRequired { rows: m, cols: n });
    }
    let e = sym_eig(&a.matmul_tn(a))?;
    let s: Vec<f64> = e.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    if s.iter().any(|&x| x <= 1e-12 * smax) || smax == 0.0 {
        let rank = s.iter().filter(|&&x| x > 1e-12 * smax).count();
        return Err(NumericsError::RankDeficient { rank, cols: n });
    }
    let v = e.vectors;
    // U = A V S⁻¹
    let av = a.matmul(&v);
    let u = Mat::from_fn(m, n, |i, j| av.at(i, j) / s[j]);
    Ok((u, s, v))
}

/// Principal angles (radians, ascending) between the column spaces of `a` and `b`.
pub fn principal_angles(a: &Mat, b: &Mat) -> Result<Vec<f64>, NumericsError> {
    let qa = orthonormal_columns(a)?;
    let qb = orthonormal_columns(b)?;
    let m = qa.matmul_tn(&qb);
    let mut cosines = singular_values(&m)?;
    cosines.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(cosines.iter().map(|&c| c.clamp(-1.0, 1.0).acos()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_reconstructs() {
        let mut rng = Rng::new(5);
        let a = rng.normal_mat(10, 4);
        let (q, r) = householder_qr(&a).unwrap();
        assert!(q.matmul(&r).sub(&a).max_abs() < 1e-12);
        let qtq = q.matmul_tn(&q);
        assert!(qtq.sub(&Mat::identity(4)).frob_norm() < 1e-12);
    }

    #[test]
    fn random_orthogonal_scalar_case() {
        let mut rng = Rng::new(1);
        let q = random_orthogonal(1, 1, &mut rng).unwrap();
        assert!((q.at(0, 0).abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_orthogonal_columns_orthonormal() {
        let mut rng = Rng::new(2);
        let q = random_orthogonal(128, 8, &mut rng).unwrap();
        let qtq = q.matmul_tn(&q);
        assert!(qtq.sub(&Mat::identity(8)).frob_norm() <= 1e-10);
        // Projection idempotence: ‖QQᵀQ − Q‖ tiny.
        let qqtq = q.matmul(&q.matmul_tn(&q));
        assert!(qqtq.sub(&q).frob_norm() <= 1e-9);
    }

    #[test]
    fn random_orthogonal_deterministic_given_seed() {
        let a = random_orthogonal(16, 3, &mut Rng::new(99)).unwrap();
        let b = random_orthogonal(16, 3, &mut Rng::new(99)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn random_orthogonal_rejects_wide() {
        assert!(random_orthogonal(3, 5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn thin_svd_reconstructs() {
        let mut rng = Rng::new(8);
        let a = rng.normal_mat(12, 5);
        let (u, s, v) = thin_svd(&a).unwrap();
        let us = Mat::from_fn(12, 5, |i, j| u.at(i, j) * s[j]);
        assert!(us.matmul_nt(&v).sub(&a).max_abs() < 1e-10);
    }

    #[test]
    fn principal_angles_of_identical_and_orthogonal_spaces() {
        let mut rng = Rng::new(4);
        let q = random_orthogonal(10, 3, &mut rng).unwrap();
        let angles = principal_angles(&q, &q).unwrap();
        assert!(angles.iter().all(|&t| t < 1e-7));

        let e1 = Mat::from_fn(4, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let e2 = Mat::from_fn(4, 1, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let angles = principal_angles(&e1, &e2).unwrap();
        assert!((angles[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
