//! Thin SVD via one-sided Jacobi rotations.
//!
//! Deterministic and dependency-free; adequate for the dimensions this crate
//! works at (d <= 256). Columns of the work matrix are rotated pairwise until
//! mutually orthogonal, then their norms are the singular values.

use crate::error::{CovError, Result};

use super::{matmul, Matrix};

/// Thin SVD `a = u * diag(singular_values) * vt` with `r = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// m x r, orthonormal columns.
    pub u: Matrix,
    /// Length r, non-negative, descending.
    pub singular_values: Vec<f64>,
    /// r x n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    /// Recomposed `u * diag(s) * vt`, for reconstruction checks.
    pub fn recompose(&self) -> Matrix {
        let r = self.singular_values.len();
        let mut us = self.u.clone();
        for j in 0..r {
            for i in 0..us.rows() {
                us.set(i, j, us.get(i, j) * self.singular_values[j]);
            }
        }
        matmul(&us, &self.vt).expect("recompose shapes agree by construction")
    }
}

const MAX_SWEEPS: usize = 10_000;
const PAIR_TOL: f64 = 1e-12;

/// Thin SVD of an arbitrary dense matrix.
///
/// Fails with a numeric error (carrying the residual) only if the rotation
/// sweeps do not converge within the iteration cap, and rejects non-finite
/// input up front.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(CovError::shape("svd", format!("empty matrix {}x{}", a.rows(), a.cols())));
    }
    if !a.is_finite() {
        return Err(CovError::numeric("svd", "non-finite input entry"));
    }
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        // A^T is tall; A = B^T = (U_b S V_b^T)^T = V_b S U_b^T.
        let b = svd_tall(&a.transpose())?;
        Ok(SvdResult {
            u: b.vt.transpose(),
            singular_values: b.singular_values,
            vt: b.u.transpose(),
        })
    }
}

/// One-sided Jacobi for m >= n.
fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let m = a.rows();
    let n = a.cols();
    let mut w = a.clone();
    let mut v = Matrix::identity(n);

    let mut converged = false;
    let mut worst = 0.0_f64;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = 0usize;
        worst = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue; // a zero column is orthogonal to everything
                }
                let norm = (alpha * beta).sqrt();
                worst = worst.max(gamma.abs() / norm);
                if gamma.abs() <= PAIR_TOL * norm {
                    continue;
                }
                // Rotation angle zeroing the (p, q) inner product.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + f64::hypot(1.0, zeta));
                let c = 1.0 / f64::hypot(1.0, t);
                let s = c * t;
                for i in 0..m {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    w.set(i, p, c * wp - s * wq);
                    w.set(i, q, s * wp + c * wq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
                rotated += 1;
            }
        }
        if rotated == 0 {
            converged = true;
            break;
        }
    }
    if !converged && n > 1 {
        // Re-measure: the final sweep may have finished the job.
        worst = max_pair_residual(&w);
        if worst > PAIR_TOL {
            return Err(CovError::numeric(
                "svd",
                format!("no convergence after {MAX_SWEEPS} sweeps, off-diagonal residual {worst:.3e}"),
            ));
        }
    }
    let _ = worst;

    // Column norms are the singular values; sort descending (ties keep index order).
    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap().then(x.cmp(&y)));
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let cutoff = (m.max(n) as f64) * f64::EPSILON * sigma_max;

    let mut u = Matrix::zeros(m, n);
    let mut filled: Vec<usize> = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if sigma[k] > cutoff && sigma[k] > 0.0 {
            for i in 0..m {
                u.set(i, k, w.get(i, j) / sigma[k]);
            }
            filled.push(k);
        }
    }
    // Columns below the cutoff carry no usable direction; complete the basis
    // by Gram-Schmidt against the established columns so u stays orthonormal.
    for k in 0..n {
        if filled.contains(&k) {
            continue;
        }
        let col = orthonormal_completion(&u, &filled, m).ok_or_else(|| {
            CovError::numeric("svd", "failed to complete an orthonormal basis")
        })?;
        for i in 0..m {
            u.set(i, k, col[i]);
        }
        filled.push(k);
    }

    let mut vt = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..n {
            vt.set(k, i, v.get(i, j));
        }
    }

    Ok(SvdResult { u, singular_values: sigma, vt })
}

fn max_pair_residual(w: &Matrix) -> f64 {
    let (m, n) = (w.rows(), w.cols());
    let mut worst = 0.0_f64;
    for p in 0..n.saturating_sub(1) {
        for q in (p + 1)..n {
            let mut alpha = 0.0;
            let mut beta = 0.0;
            let mut gamma = 0.0;
            for i in 0..m {
                alpha += w.get(i, p) * w.get(i, p);
                beta += w.get(i, q) * w.get(i, q);
                gamma += w.get(i, p) * w.get(i, q);
            }
            if alpha > 0.0 && beta > 0.0 {
                worst = worst.max(gamma.abs() / (alpha * beta).sqrt());
            }
        }
    }
    worst
}

/// First standard basis vector with a healthy component outside the span of
/// the established columns, orthogonalized (twice, for numerical hygiene) and
/// normalized.
fn orthonormal_completion(u: &Matrix, filled: &[usize], m: usize) -> Option<Vec<f64>> {
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for &j in filled {
                let proj: f64 = (0..m).map(|i| cand[i] * u.get(i, j)).sum();
                for (i, c) in cand.iter_mut().enumerate() {
                    *c -= proj * u.get(i, j);
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.1 {
            for c in &mut cand {
                *c /= norm;
            }
            return Some(cand);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{frobenius_norm_sq, Rng};
    use proptest::prelude::*;

    fn reconstruction_err(a: &Matrix, r: &SvdResult) -> f64 {
        let diff = r.recompose().minus(a).unwrap();
        frobenius_norm_sq(&diff).sqrt()
    }

    fn orthonormality_err(cols: &Matrix) -> f64 {
        let gram = matmul(&cols.transpose(), cols).unwrap();
        let diff = gram.minus(&Matrix::identity(cols.cols())).unwrap();
        frobenius_norm_sq(&diff).sqrt()
    }

    #[test]
    fn diagonal_case() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert!((r.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((r.singular_values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let mut a = Matrix::zeros(4, 3);
        for i in 0..4 {
            for j in 0..3 {
                a.set(i, j, u[i] * v[j]);
            }
        }
        let r = svd(&a).unwrap();
        let above: usize = r.singular_values.iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(above, 1, "singular values: {:?}", r.singular_values);
        // Basis completion for the null directions must keep U orthonormal.
        assert!(orthonormality_err(&r.u) <= 1e-8);
        assert!(reconstruction_err(&a, &r) <= 1e-8 * frobenius_norm_sq(&a).sqrt().max(1.0));
    }

    /// Eigenvalues of a symmetric 3x3 matrix by Cardano's closed form.
    /// Independent oracle for the 5x3 singular values below (squared singular
    /// values are the eigenvalues of the Gram matrix).
    fn sym3_eigenvalues(g: &Matrix) -> [f64; 3] {
        assert_eq!((g.rows(), g.cols()), (3, 3));
        let (a00, a01, a02) = (g.get(0, 0), g.get(0, 1), g.get(0, 2));
        let (a11, a12, a22) = (g.get(1, 1), g.get(1, 2), g.get(2, 2));
        let q = (a00 + a11 + a22) / 3.0;
        let p1 = a01 * a01 + a02 * a02 + a12 * a12;
        let p2 = ((a00 - q).powi(2) + (a11 - q).powi(2) + (a22 - q).powi(2) + 2.0 * p1) / 6.0;
        let p = p2.sqrt();
        if p < 1e-14 {
            return [q, q, q];
        }
        let b00 = (a00 - q) / p;
        let b11 = (a11 - q) / p;
        let b22 = (a22 - q) / p;
        let b01 = a01 / p;
        let b02 = a02 / p;
        let b12 = a12 / p;
        let det_b = b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02)
            + b02 * (b01 * b12 - b11 * b02);
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        let mut out = [e1, e2, e3];
        out.sort_by(|x, y| y.partial_cmp(x).unwrap());
        out
    }

    #[test]
    fn singular_values_match_gram_eigenvalue_oracle() {
        let mut rng = Rng::new(11, 0);
        for _ in 0..20 {
            let a = rng.normal_matrix(5, 3, 1.0);
            let gram = matmul(&a.transpose(), &a).unwrap();
            let eig = sym3_eigenvalues(&gram);
            let r = svd(&a).unwrap();
            for (s, lambda) in r.singular_values.iter().zip(eig) {
                assert!(
                    (s - lambda.max(0.0).sqrt()).abs() <= 1e-8,
                    "sigma {s} vs oracle {}",
                    lambda.max(0.0).sqrt()
                );
            }
        }
    }

    #[test]
    fn zero_matrix_has_zero_spectrum_and_orthonormal_factors() {
        let a = Matrix::zeros(4, 3);
        let r = svd(&a).unwrap();
        assert!(r.singular_values.iter().all(|&s| s == 0.0));
        assert!(orthonormality_err(&r.u) <= 1e-12);
        assert!(orthonormality_err(&r.vt.transpose()) <= 1e-12);
    }

    #[test]
    fn wide_matrices_transpose_correctly() {
        let mut rng = Rng::new(5, 1);
        let a = rng.normal_matrix(3, 7, 1.0);
        let r = svd(&a).unwrap();
        assert_eq!(r.u.rows(), 3);
        assert_eq!(r.u.cols(), 3);
        assert_eq!(r.vt.rows(), 3);
        assert_eq!(r.vt.cols(), 7);
        assert!(reconstruction_err(&a, &r) <= 1e-8 * frobenius_norm_sq(&a).sqrt().max(1.0));
        assert!(orthonormality_err(&r.u) <= 1e-8);
        assert!(orthonormality_err(&r.vt.transpose()) <= 1e-8);
    }

    #[test]
    fn rejects_non_finite_input() {
        let a = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&a), Err(CovError::Numeric { .. })));
    }

    fn arb_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0_f64..5.0, r * c)
                .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn reconstruction_and_orthonormality(a in arb_matrix()) {
            let r = svd(&a).unwrap();
            let scale = frobenius_norm_sq(&a).sqrt().max(1.0);
            prop_assert!(reconstruction_err(&a, &r) <= 1e-8 * scale);
            prop_assert!(orthonormality_err(&r.u) <= 1e-8);
            prop_assert!(orthonormality_err(&r.vt.transpose()) <= 1e-8);
            // descending, non-negative
            for w in r.singular_values.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            prop_assert!(r.singular_values.iter().all(|&s| s >= 0.0));
        }
    }
}
