use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Pseudo-inverse of a symmetric matrix; eigenvalues below `floor` are dropped.
pub(crate) fn pinv_sym(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let inv = eig.eigenvalues.map(|l| if l > floor { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// `D C D` factorization with `D` the square-root diagonal; scale-equivariant.
pub(crate) fn standardize(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let max_diag = (0..n).map(|k| m[(k, k)]).fold(0.0, f64::max);
    let scale = DVector::from_iterator(
        n,
        (0..n).map(|k| {
            let v = m[(k, k)];
            if v > 1e-300 * max_diag.max(1e-300) && v > 0.0 {
                v.sqrt()
            } else {
                0.0
            }
        }),
    );
    let mut c = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            if scale[a] > 0.0 && scale[b] > 0.0 {
                c[(a, b)] = m[(a, b)] / (scale[a] * scale[b]);
            }
        }
    }
    (scale, symmetrize(&c))
}

/// Symmetric square root with eigenvalues clipped at `rel_clip * max eigenvalue`.
/// Also returns the most negative eigenvalue seen relative to the largest.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>, rel_clip: f64) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.max().max(0.0);
    let min = eig.eigenvalues.min();
    let clip = rel_clip * max;
    let root = eig.eigenvalues.map(|l| if l > clip { l.sqrt() } else { 0.0 });
    let rel_min = if max > 0.0 { min / max } else { 0.0 };
    (&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose(), rel_min)
}

pub(crate) fn eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

/// Ratio of largest to smallest absolute eigenvalue (infinite when singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = eigenvalues(m).map(f64::abs);
    let (lo, hi) = (ev.min(), ev.max());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solve `a x = b` for symmetric positive (semi)definite `a`. When Cholesky
/// fails a ridge of `1e-10 * trace` is added, growing until it succeeds; the
/// flag reports whether a ridge was needed.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, bool)> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some((x, false));
        }
    }
    let tr = a.trace().abs().max(f64::MIN_POSITIVE);
    let mut ridge = 1e-10 * tr;
    for _ in 0..12 {
        let mut r = a.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += ridge;
        }
        if let Some(ch) = r.cholesky() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some((x, true));
            }
        }
        ridge *= 100.0;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = pinv_sym(&m, 1e-12);
        assert!((&m * &p - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn pinv_drops_null_space() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv_sym(&m, 1e-10);
        assert!((&m * &p * &m - &m).amax() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (r, rel_min) = psd_sqrt(&m, 1e-12);
        assert!((&r * &r - &m).amax() < 1e-12);
        assert!(rel_min > 0.0);
    }

    #[test]
    fn spd_solve_with_ridge() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 2.0]);
        let (x, ridged) = solve_spd(&a, &b).unwrap();
        assert!(ridged);
        assert!((&a * &x - &b).amax() < 1e-6);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let (x, ridged) = solve_spd(&a, &b).unwrap();
        assert!(!ridged);
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn condition_number_of_singular_is_huge() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(condition_number(&m) > 1e10);
        assert!((condition_number(&DMatrix::<f64>::identity(3, 3)) - 1.0).abs() < 1e-12);
    }
}
