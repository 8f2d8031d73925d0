//! Dense linear-algebra kernel: Cholesky factorization of SPD matrices,
//! column-equilibrated least squares, weighted quadratic forms, correlated
//! Gaussian sampling and central finite differences.
//!
//! Weighted norms of the form `rᵀ Q⁻¹ r` are always evaluated through the
//! Cholesky factor of `Q`; the inverse is never formed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative pivot tolerance: a pivot must exceed this times the largest
/// diagonal entry of the matrix being factored.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

/// Relative symmetry tolerance accepted by [`cholesky_spd`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Rank tolerance of [`least_squares`]: a diagonal entry of `R` below this
/// (columns scaled to unit norm) marks a rank-deficient system.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Reassembles `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        spd_solve(self, b)
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), b.nrows())?;
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let v = DVector::from_column_slice(col.as_slice());
            let s = self.solve_unchecked(v);
            col.copy_from(&s);
        }
        Ok(x)
    }

    /// `A⁻¹`, for reporting covariance bounds.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.solve_matrix(&DMatrix::identity(n, n))
            .expect("identity has matching dimension")
    }

    fn solve_unchecked(&self, mut x: DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let l = &self.l;
        // forward: L z = b
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= l[(i, k)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        // backward: Lᵀ x = z
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Cholesky factorization of a symmetric positive definite matrix.
///
/// Fails with [`Error::NotPositiveDefinite`] when a pivot does not exceed
/// `PIVOT_TOLERANCE` times the largest diagonal entry.
pub fn cholesky_spd(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    check_dim(n, a.ncols())?;
    if n == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    let scale = a.amax();
    let mut deviation: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            deviation = deviation.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if deviation > SYMMETRY_TOLERANCE * scale {
        return Err(Error::NotSymmetric { deviation });
    }

    let max_diag = (0..n).map(|i| a[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    let threshold = PIVOT_TOLERANCE * max_diag.max(0.0);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > threshold) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(CholeskyFactor { l })
}

/// Solves `A x = b` given the Cholesky factor of `A`.
pub fn spd_solve(f: &CholeskyFactor, b: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(f.dim(), b.len())?;
    Ok(f.solve_unchecked(b.clone()))
}

/// `‖r‖²_{A⁻¹} = rᵀ A⁻¹ r` for the matrix `A` factored in `f`.
pub fn weighted_sq_norm(r: &DVector<f64>, f: &CholeskyFactor) -> Result<f64> {
    check_dim(f.dim(), r.len())?;
    // rᵀ A⁻¹ r = ‖L⁻¹ r‖², which is nonnegative by construction.
    let n = f.dim();
    let l = &f.l;
    let mut z = r.clone();
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    Ok(z.norm_squared())
}

/// Draws `σ L z` with `z` i.i.d. standard normal, i.e. a sample of
/// `N(0, σ² A)`.
pub fn sample_correlated_gaussian<R: Rng + ?Sized>(
    f: &CholeskyFactor,
    sigma: f64,
    rng: &mut R,
) -> DVector<f64> {
    let n = f.dim();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&f.l * z) * sigma
}

/// Symmetric positive definite solver with diagonal equilibration.
///
/// Factors `D A D` with `D = diag(1/√a_ii)`, which leaves the solution
/// unchanged but removes the unit disparity between blocks (positions in
/// metres next to delays in seconds gives diagonals spanning 30+ orders of
/// magnitude).
#[derive(Debug, Clone)]
pub struct EquilibratedCholesky {
    factor: CholeskyFactor,
    scale: DVector<f64>,
}

impl EquilibratedCholesky {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_dim(n, a.ncols())?;
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let d = a[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: i, pivot: d });
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
        let factor = cholesky_spd(&scaled)?;
        Ok(Self { factor, scale })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), b.len())?;
        let scaled_b = b.component_mul(&self.scale);
        let z = self.factor.solve(&scaled_b)?;
        Ok(z.component_mul(&self.scale))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inner = self.factor.inverse();
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| inner[(i, j)] * self.scale[i] * self.scale[j])
    }
}

/// Minimizes `‖A x - b‖₂` by Householder QR with unit-norm columns.
///
/// Works on the stacked system directly, so the conditioning is that of
/// `A` rather than `AᵀA`. This matters for stiff weightings, e.g. a
/// nearly noiseless data block stacked on an O(1) prior block. Heavy rows
/// should come first.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    check_dim(m, b.len())?;
    if m < n {
        return Err(Error::DimensionMismatch { expected: n, got: m });
    }
    let mut scale = DVector::zeros(n);
    for j in 0..n {
        let norm = a.column(j).norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: norm * norm });
        }
        scale[j] = 1.0 / norm;
    }
    let scaled = DMatrix::from_fn(m, n, |i, j| a[(i, j)] * scale[j]);
    let qr = scaled.qr();
    let r = qr.r();
    for j in 0..n {
        let d = r[(j, j)].abs();
        if !(d > RANK_TOLERANCE) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d * d });
        }
    }
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let z = r
        .solve_upper_triangular(&qtb.rows(0, n).into_owned())
        .ok_or(Error::NotPositiveDefinite { index: 0, pivot: 0.0 })?;
    Ok(z.component_mul(&scale))
}

/// Default central-difference step for coordinate `x_j`.
pub fn default_step(xj: f64) -> f64 {
    1e-6 * (1.0 + xj.abs())
}

/// Central-difference Jacobian of `f` at `x`.
///
/// `step` maps each coordinate value to its step size; pass
/// [`default_step`] for the usual `1e-6 (1 + |x_j|)` rule.
pub fn finite_diff_jacobian<F, S>(f: F, x: &DVector<f64>, step: S) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    S: Fn(f64) -> f64,
{
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        let col = (fp - fm) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn q2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0])
    }

    #[test]
    fn identity_factor_is_identity() {
        let f = cholesky_spd(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(f.lower(), &DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn tridiagonal_2x2_factor() {
        let f = cholesky_spd(&q2()).unwrap();
        let l = f.lower();
        assert!((l[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert!((l[(1, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2.0 * 2f64.sqrt() / 3.0).abs() < 1e-15);
        assert!((f.reconstruct() - q2()).amax() < 1e-15);
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky_spd(&a),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(cholesky_spd(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn rounding_level_pivot_rejected() {
        // rank-one matrix: second pivot is rounding noise
        let v = DVector::from_vec(vec![1.0, 3.0]);
        let a = &v * v.transpose();
        assert!(cholesky_spd(&a).is_err());
    }

    #[test]
    fn solve_identity() {
        let f = cholesky_spd(&DMatrix::identity(3, 3)).unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(spd_solve(&f, &b).unwrap(), b);
    }

    #[test]
    fn solve_tridiagonal() {
        let f = cholesky_spd(&q2()).unwrap();
        let x = spd_solve(&f, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((x[0] - 9.0 / 8.0).abs() < 1e-14);
        assert!((x[1] + 3.0 / 8.0).abs() < 1e-14);
        let back = q2() * &x;
        assert!((back[0] - 1.0).abs() < 1e-14 && back[1].abs() < 1e-14);
    }

    #[test]
    fn solve_dimension_mismatch() {
        let f = cholesky_spd(&q2()).unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(
            spd_solve(&f, &b),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 3
            })
        );
        assert!(weighted_sq_norm(&b, &f).is_err());
    }

    #[test]
    fn weighted_norm_values() {
        let f = cholesky_spd(&q2()).unwrap();
        assert_eq!(weighted_sq_norm(&DVector::zeros(2), &f).unwrap(), 0.0);
        let v = weighted_sq_norm(&DVector::from_vec(vec![1.0, 0.0]), &f).unwrap();
        assert!((v - 9.0 / 8.0).abs() < 1e-14);
        let id = cholesky_spd(&DMatrix::identity(2, 2)).unwrap();
        let v = weighted_sq_norm(&DVector::from_vec(vec![1.0, 1.0]), &id).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_sample_is_zero() {
        let f = cholesky_spd(&q2()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(
            sample_correlated_gaussian(&f, 0.0, &mut rng),
            DVector::zeros(2)
        );
    }

    fn tridiag(m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| match i.abs_diff(j) {
            0 => 1.0,
            1 => 1.0 / 3.0,
            _ => 0.0,
        })
    }

    #[test]
    fn empirical_covariance_of_samples() {
        let m = 4;
        let f = cholesky_spd(&tridiag(m)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(m, m);
        for _ in 0..n {
            let w = sample_correlated_gaussian(&f, 1.0, &mut rng);
            acc += &w * w.transpose();
        }
        acc /= n as f64;
        for i in 0..m - 1 {
            let rho = acc[(i, i + 1)] / (acc[(i, i)] * acc[(i + 1, i + 1)]).sqrt();
            assert!((rho - 1.0 / 3.0).abs() < 0.01, "lag-1 corr {rho}");
        }
        for i in 0..m - 2 {
            assert!(acc[(i, i + 2)].abs() < 0.02);
        }
        for i in 0..m {
            assert!((acc[(i, i)] - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn identity_covariance_samples() {
        let m = 3;
        let f = cholesky_spd(&DMatrix::identity(m, m)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 50_000;
        let mut acc = DMatrix::<f64>::zeros(m, m);
        for _ in 0..n {
            let w = sample_correlated_gaussian(&f, 1.0, &mut rng);
            acc += &w * w.transpose();
        }
        acc /= n as f64;
        assert!((acc - DMatrix::<f64>::identity(m, m)).amax() < 0.03);
    }

    #[test]
    fn fd_jacobian_of_linear_map() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0]);
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let j = finite_diff_jacobian(|v| &a * v, &x, default_step);
        assert!((j - &a).amax() < 1e-9);
    }

    #[test]
    fn fd_jacobian_of_norm() {
        let x = DVector::from_vec(vec![3.0, 4.0]);
        let j = finite_diff_jacobian(|v| DVector::from_element(1, v.norm()), &x, default_step);
        assert!((j[(0, 0)] - 0.6).abs() < 1e-9);
        assert!((j[(0, 1)] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn equilibrated_solve_handles_unit_disparity() {
        // positions-in-metres block next to a seconds-scale block
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, 1e7, 0.3, 1.0, 2e7, 1e7, 2e7, 1e16],
        );
        let f = EquilibratedCholesky::factor(&a).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 3e-9]);
        let b = &a * &x;
        let sol = f.solve(&b).unwrap();
        for i in 0..3 {
            assert!(((sol[i] - x[i]) / x[i]).abs() < 1e-8);
        }
        let inv = f.inverse();
        let prod = &inv * &a;
        assert!((prod - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn equilibrated_rejects_zero_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(EquilibratedCholesky::factor(&a).is_err());
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 2.0, 4.0]);
        // fit of a line through (0,1), (1,2), (2,2), (3,4): intercept 0.9, slope 0.9
        let x = least_squares(&a, &b).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-14 && (x[1] - 0.9).abs() < 1e-14);
    }

    #[test]
    fn least_squares_stiff_weighting() {
        // constraint x0 + x1 = 1 weighted by 1e9 over a unit pull towards
        // (0, 0): the solution is (w²/(2w²+1), w²/(2w²+1))
        let w = 1e9;
        let a = DMatrix::from_row_slice(3, 2, &[w, w, 1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![w, 0.0, 0.0]);
        let x = least_squares(&a, &b).unwrap();
        let expected = w * w / (2.0 * w * w + 1.0);
        assert!((x[0] - expected).abs() < 1e-12 && (x[1] - expected).abs() < 1e-12, "{x}");
        // the normal matrix of the same problem is beyond the pivot tolerance
        assert!(cholesky_spd(&(a.transpose() * &a)).is_err());
    }

    #[test]
    fn least_squares_rank_deficient() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let b = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        assert!(matches!(least_squares(&a, &b), Err(Error::NotPositiveDefinite { index: 1, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn spd_strategy() -> impl Strategy<Value = DMatrix<f64>> {
            (2usize..8).prop_flat_map(|n| {
                proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
                    let b = DMatrix::from_vec(n, n, v);
                    &b * b.transpose() + DMatrix::identity(n, n) * 0.1
                })
            })
        }

        proptest! {
            #[test]
            fn factor_reconstructs(a in spd_strategy()) {
                let f = cholesky_spd(&a).unwrap();
                prop_assert!((f.reconstruct() - &a).amax() <= 1e-12 * a.amax());
            }

            #[test]
            fn solve_round_trips(a in spd_strategy(), seed in any::<u64>()) {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let b = DVector::from_fn(a.nrows(), |_, _| rng.random_range(-1.0..1.0));
                let f = cholesky_spd(&a).unwrap();
                let x = spd_solve(&f, &b).unwrap();
                let back = &a * x;
                prop_assert!((back - &b).norm() <= 1e-10 * b.norm().max(1e-300));
            }

            #[test]
            fn tridiagonal_q_norm_positive(m in 1usize..60, seed in any::<u64>()) {
                let f = cholesky_spd(&tridiag(m)).unwrap();
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let r = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                prop_assume!(r.norm() > 0.0);
                prop_assert!(weighted_sq_norm(&r, &f).unwrap() > 0.0);
            }
        }
    }
}
