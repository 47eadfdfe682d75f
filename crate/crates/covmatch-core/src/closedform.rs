//! Closed-form solution of the inner projection problem and checks that the
//! bi-level objective collapses to cross-covariance alignment.
//!
//! The inner problem picks projections minimizing
//! -Tr(G_v C G_l^T) + (rho/2) |G_v^T G_l|_F^2; its optimum fixes only the
//! product G_v^T G_l = C/rho, which an SVD factors directly. An independent
//! gradient-descent route exists purely to corroborate the algebra.

use crate::error::{CovError, Result};
use crate::numerics::{frobenius_inner, frobenius_norm_sq, matmul, svd, Matrix, Rng};
use crate::objectives::CrossCovStats;

/// Tolerance deciding whether a factorization reproduced its target product.
const PRODUCT_TOL: f64 = 1e-8;

/// Projections solving the inner problem, with the reconstruction they
/// actually achieve.
#[derive(Clone, Debug)]
pub struct InnerSolution {
    pub g_v: Matrix,
    pub g_l: Matrix,
    /// g_v^T g_l, recomputed from the returned factors.
    pub achieved_product: Matrix,
    /// True when z was too small to reach the target product exactly, i.e.
    /// the factors give the best rank-z approximation instead.
    pub truncated: bool,
    /// Frobenius distance between achieved_product and C/rho.
    pub residual: f64,
}

/// Inner objective value -Tr(K^T C) + (rho/2)|K|_F^2 with K = g_v^T g_l.
pub fn inner_loss(c: &Matrix, g_v: &Matrix, g_l: &Matrix, rho: f64) -> f64 {
    let k = matmul(&g_v.transpose(), g_l).expect("projection ranks must agree");
    -frobenius_inner(&k, c) + 0.5 * rho * frobenius_norm_sq(&k)
}

/// Factors C/rho = U S V^T and splits the square root of the top-z spectrum
/// between the two projections: G_v = S_z^{1/2} U_z^T, G_l = S_z^{1/2} V_z^T.
pub fn solve_inner(syn: &CrossCovStats, rho: f64, z: usize) -> Result<InnerSolution> {
    if !(rho > 0.0) {
        return Err(CovError::domain("solve_inner", format!("rho = {rho} must be > 0")));
    }
    if z == 0 {
        return Err(CovError::domain("solve_inner", "shared dim z must be >= 1"));
    }
    let target = syn.c.scaled(1.0 / rho);
    let dec = svd(&target)?;
    let take = z.min(dec.singular_values.len());
    let mut g_v = Matrix::zeros(z, target.rows());
    let mut g_l = Matrix::zeros(z, target.cols());
    for k in 0..take {
        let root = dec.singular_values[k].sqrt();
        for j in 0..target.rows() {
            g_v.set(k, j, root * dec.u.get(j, k));
        }
        for j in 0..target.cols() {
            g_l.set(k, j, root * dec.vt.get(k, j));
        }
    }
    let achieved_product = matmul(&g_v.transpose(), &g_l)?;
    let residual = frobenius_norm_sq(&achieved_product.minus(&target)?).sqrt();
    let truncated = residual > PRODUCT_TOL * frobenius_norm_sq(&target).sqrt().max(1.0);
    Ok(InnerSolution { g_v, g_l, achieved_product, truncated, residual })
}

/// Gradient descent on the inner objective from a small random init;
/// returns the final product residual |g_v^T g_l - C/rho|_F.
///
/// Each step retries with a halved rate while the proposed move would
/// increase the loss, so an aggressive `lr` degrades into smaller steps
/// instead of oscillation; a non-finite evaluation is a numeric error.
pub fn verify_inner_by_descent(
    syn: &CrossCovStats,
    rho: f64,
    z: usize,
    steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(CovError::domain("verify_inner_by_descent", format!("rho = {rho} must be > 0")));
    }
    if z == 0 || !(lr > 0.0) {
        return Err(CovError::domain(
            "verify_inner_by_descent",
            format!("need z >= 1 and lr > 0, got z = {z}, lr = {lr}"),
        ));
    }
    let target = syn.c.scaled(1.0 / rho);
    let mut g_v = rng.normal_matrix(z, syn.c.rows(), 0.1);
    let mut g_l = rng.normal_matrix(z, syn.c.cols(), 0.1);
    let mut current = inner_loss(&syn.c, &g_v, &g_l, rho);
    if !current.is_finite() {
        return Err(CovError::numeric("verify_inner_by_descent", "non-finite loss at init"));
    }

    for step in 0..steps {
        let k = matmul(&g_v.transpose(), &g_l)?;
        let err = k.scaled(rho).minus(&syn.c)?;
        let grad_v = matmul(&g_l, &err.transpose())?;
        let grad_l = matmul(&g_v, &err)?;
        if !grad_v.is_finite() || !grad_l.is_finite() {
            return Err(CovError::numeric(
                "verify_inner_by_descent",
                format!("diverged: non-finite gradient at step {step}"),
            ));
        }
        let mut t = lr;
        let mut moved = false;
        for _ in 0..40 {
            let cand_v = g_v.minus(&grad_v.scaled(t))?;
            let cand_l = g_l.minus(&grad_l.scaled(t))?;
            let f = inner_loss(&syn.c, &cand_v, &cand_l, rho);
            if f.is_finite() && f <= current {
                g_v = cand_v;
                g_l = cand_l;
                current = f;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // No decrease at any tried rate: stationary to machine precision.
            break;
        }
    }
    let k = matmul(&g_v.transpose(), &g_l)?;
    Ok(frobenius_norm_sq(&k.minus(&target)?).sqrt())
}

/// Alignment Tr((C_real)^T C_syn) between two cross-covariances.
pub fn trace_alignment(real: &CrossCovStats, syn: &CrossCovStats) -> Result<f64> {
    if real.c.rows() != syn.c.rows() || real.c.cols() != syn.c.cols() {
        return Err(CovError::shape(
            "trace_alignment",
            format!(
                "covariance shapes differ: {}x{} vs {}x{}",
                real.c.rows(),
                real.c.cols(),
                syn.c.rows(),
                syn.c.cols()
            ),
        ));
    }
    Ok(frobenius_inner(&real.c, &syn.c))
}

/// Both sides of the reduction identity: the outer loss at the inner optimum
/// and the scaled alignment it should equal.
#[derive(Clone, Copy, Debug)]
pub struct ReductionCheck {
    /// -Tr(G_v C_real G_l^T) evaluated at the closed-form inner solution.
    pub outer_loss: f64,
    /// -(1/rho) Tr((C_real)^T C_syn).
    pub reduced: f64,
    pub gap: f64,
}

/// Evaluates the outer loss at the closed-form inner optimum and the reduced
/// alignment form independently. The identity only holds when the inner
/// solution is exact, so a truncated solution is refused.
pub fn verify_reduction(
    real: &CrossCovStats,
    syn: &CrossCovStats,
    rho: f64,
    z: usize,
) -> Result<ReductionCheck> {
    if real.c.rows() != syn.c.rows() || real.c.cols() != syn.c.cols() {
        return Err(CovError::shape(
            "verify_reduction",
            format!(
                "covariance shapes differ: {}x{} vs {}x{}",
                real.c.rows(),
                real.c.cols(),
                syn.c.rows(),
                syn.c.cols()
            ),
        ));
    }
    let sol = solve_inner(syn, rho, z)?;
    if sol.truncated {
        return Err(CovError::precondition(
            "verify_reduction",
            format!(
                "inner solution is rank-truncated (residual {:.3e}); the identity needs z >= rank",
                sol.residual
            ),
        ));
    }
    let left = matmul(&sol.g_v, &real.c)?;
    let prod = matmul(&left, &sol.g_l.transpose())?;
    let outer_loss = -trace_of(&prod);
    let reduced = -trace_alignment(real, syn)? / rho;
    Ok(ReductionCheck { outer_loss, reduced, gap: (outer_loss - reduced).abs() })
}

fn trace_of(m: &Matrix) -> f64 {
    debug_assert_eq!(m.rows(), m.cols(), "trace of a non-square matrix");
    (0..m.rows()).map(|i| m.get(i, i)).sum()
}
