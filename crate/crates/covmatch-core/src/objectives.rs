//! Contrastive and covariance-matching losses with analytic gradients.
//!
//! Two routes to the linear contrastive objective are kept deliberately
//! separate: a literal pairwise double sum and a trace form driven by the
//! cross-covariance. Their agreement is a correctness check, so neither is
//! allowed to call the other.

use crate::error::{CovError, Result};
use crate::model::{self, Modality, ModelState};
use crate::numerics::{dot, frobenius_inner, frobenius_norm_sq, matmul, Matrix};

/// Sample cross-covariance between two feature sets, plus the feature means
/// that produced it.
#[derive(Clone, Debug)]
pub struct CrossCovStats {
    /// d_v x d_l cross-covariance with the n-1 normalizer.
    pub c: Matrix,
    pub mu_v: Vec<f64>,
    pub mu_l: Vec<f64>,
    /// Number of samples the statistics were computed from.
    pub n: usize,
}

/// A scalar loss together with its gradients on the two input matrices.
#[derive(Clone, Debug)]
pub struct LossValueAndGrads {
    pub value: f64,
    pub grad_v: Matrix,
    pub grad_l: Matrix,
}

/// Symmetric InfoNCE over cosine similarities of paired embeddings.
///
/// Row i of `z_v` and row i of `z_l` form the positive pair. With
/// `include_positive_in_denominator = false` (the default form) the softmax
/// normalizer runs over the negatives only, i.e. j != i.
pub fn infonce(
    z_v: &Matrix,
    z_l: &Matrix,
    tau: f64,
    include_positive_in_denominator: bool,
) -> Result<LossValueAndGrads> {
    if z_v.rows() != z_l.rows() || z_v.cols() != z_l.cols() {
        return Err(CovError::shape(
            "infonce",
            format!(
                "embedding shapes must match, got {}x{} vs {}x{}",
                z_v.rows(),
                z_v.cols(),
                z_l.rows(),
                z_l.cols()
            ),
        ));
    }
    let m = z_v.rows();
    if m < 2 {
        return Err(CovError::domain(
            "infonce",
            format!("need at least 2 pairs for negatives, got {m}"),
        ));
    }
    if !(tau > 0.0) {
        return Err(CovError::domain("infonce", format!("tau = {tau} must be > 0")));
    }

    let (unit_v, norms_v) = unit_rows(z_v, "z_v")?;
    let (unit_l, norms_l) = unit_rows(z_l, "z_l")?;
    let s = matmul(&unit_v, &unit_l.transpose())?;

    // Softmax weights for the row-wise (v anchors) and column-wise (l
    // anchors) terms; the excluded positive simply keeps weight zero.
    let mut p_row = Matrix::zeros(m, m);
    let mut p_col = Matrix::zeros(m, m);
    let mut value = 0.0;
    for i in 0..m {
        value += nce_term(&s, i, tau, include_positive_in_denominator, Axis::Row, &mut p_row);
        value += nce_term(&s, i, tau, include_positive_in_denominator, Axis::Col, &mut p_col);
    }
    value /= m as f64;

    // dL/ds_ij assembled from both softmaxes; the -2 on the diagonal is the
    // positive appearing once in each term.
    let mut ds = Matrix::zeros(m, m);
    let scale = 1.0 / (m as f64 * tau);
    for i in 0..m {
        for j in 0..m {
            let delta = if i == j { 2.0 } else { 0.0 };
            ds.set(i, j, scale * (p_row.get(i, j) + p_col.get(i, j) - delta));
        }
    }

    // Chain through the cosine: ds_ij/da_i = (b_j - s_ij a_i) / |a_i| with
    // unit a, b. The projection term uses the weighted similarity sums.
    let mut grad_v = matmul(&ds, &unit_l)?;
    let mut grad_l = matmul(&ds.transpose(), &unit_v)?;
    for i in 0..m {
        let coeff: f64 = (0..m).map(|j| ds.get(i, j) * s.get(i, j)).sum();
        let u = unit_v.row(i).to_vec();
        for (k, g) in grad_v.row_mut(i).iter_mut().enumerate() {
            *g = (*g - coeff * u[k]) / norms_v[i];
        }
    }
    for j in 0..m {
        let coeff: f64 = (0..m).map(|i| ds.get(i, j) * s.get(i, j)).sum();
        let u = unit_l.row(j).to_vec();
        for (k, g) in grad_l.row_mut(j).iter_mut().enumerate() {
            *g = (*g - coeff * u[k]) / norms_l[j];
        }
    }

    Ok(LossValueAndGrads { value, grad_v, grad_l })
}

enum Axis {
    Row,
    Col,
}

/// One anchor's -log softmax term; fills the anchor's softmax weights into
/// `probs` and returns the term's value.
fn nce_term(
    s: &Matrix,
    i: usize,
    tau: f64,
    include_positive: bool,
    axis: Axis,
    probs: &mut Matrix,
) -> f64 {
    let m = s.rows();
    let at = |j: usize| match axis {
        Axis::Row => s.get(i, j),
        Axis::Col => s.get(j, i),
    };
    let mut mx = f64::NEG_INFINITY;
    for j in 0..m {
        if include_positive || j != i {
            mx = mx.max(at(j) / tau);
        }
    }
    let mut z = 0.0;
    for j in 0..m {
        if include_positive || j != i {
            z += ((at(j) / tau) - mx).exp();
        }
    }
    let lse = mx + z.ln();
    for j in 0..m {
        if include_positive || j != i {
            let p = ((at(j) / tau) - lse).exp();
            match axis {
                Axis::Row => probs.set(i, j, p),
                Axis::Col => probs.set(j, i, p),
            }
        }
    }
    lse - at(i) / tau
}

fn unit_rows(x: &Matrix, name: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut unit = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = dot(x.row(i), x.row(i)).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(CovError::domain(
                "infonce",
                format!("row {i} of {name} has norm {n}; cosine needs nonzero finite rows"),
            ));
        }
        for v in unit.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Sample cross-covariance of paired features, with the n-1 normalizer.
pub fn cross_covariance(h_v: &Matrix, h_l: &Matrix) -> Result<CrossCovStats> {
    if h_v.rows() != h_l.rows() {
        return Err(CovError::shape(
            "cross_covariance",
            format!("paired features need equal row counts, got {} vs {}", h_v.rows(), h_l.rows()),
        ));
    }
    let n = h_v.rows();
    if n < 2 {
        return Err(CovError::degenerate(
            "cross_covariance",
            format!("covariance needs at least 2 samples, got {n}"),
        ));
    }
    let mu_v = h_v.col_means();
    let mu_l = h_l.col_means();
    let c = matmul(&centered(h_v, &mu_v).transpose(), &centered(h_l, &mu_l))?
        .scaled(1.0 / (n as f64 - 1.0));
    Ok(CrossCovStats { c, mu_v, mu_l, n })
}

fn centered(x: &Matrix, mu: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(mu) {
            *v -= m;
        }
    }
    out
}

/// Linear contrastive objective as a literal pairwise double sum over
/// unnormalized projected similarities, plus the alignment penalty.
pub fn linear_contrastive_pairwise(
    h_v: &Matrix,
    h_l: &Matrix,
    g_v: &Matrix,
    g_l: &Matrix,
    rho: f64,
) -> Result<f64> {
    check_projection_shapes("linear_contrastive_pairwise", h_v, h_l, g_v, g_l)?;
    let n = h_v.rows();
    if n < 2 {
        return Err(CovError::degenerate(
            "linear_contrastive_pairwise",
            format!("pairwise terms need at least 2 samples, got {n}"),
        ));
    }
    let zv = matmul(h_v, &g_v.transpose())?;
    let zl = matmul(h_l, &g_l.transpose())?;
    let s = matmul(&zv, &zl.transpose())?;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j != i {
                acc += s.get(i, j) - s.get(i, i);
                acc += s.get(j, i) - s.get(i, i);
            }
        }
    }
    let nf = n as f64;
    let k = matmul(&g_v.transpose(), g_l)?;
    Ok(acc / (2.0 * nf * (nf - 1.0)) + 0.5 * rho * frobenius_norm_sq(&k))
}

/// Same objective through the cross-covariance: -<G_v^T G_l, C> plus the
/// alignment penalty. Agrees with the pairwise route to rounding error.
pub fn linear_contrastive_trace(
    stats: &CrossCovStats,
    g_v: &Matrix,
    g_l: &Matrix,
    rho: f64,
) -> Result<f64> {
    if g_v.rows() != g_l.rows() {
        return Err(CovError::shape(
            "linear_contrastive_trace",
            format!("projection ranks must match, got {} vs {}", g_v.rows(), g_l.rows()),
        ));
    }
    if g_v.cols() != stats.c.rows() || g_l.cols() != stats.c.cols() {
        return Err(CovError::shape(
            "linear_contrastive_trace",
            format!(
                "projections {}x{} / {}x{} do not act on a {}x{} covariance",
                g_v.rows(),
                g_v.cols(),
                g_l.rows(),
                g_l.cols(),
                stats.c.rows(),
                stats.c.cols()
            ),
        ));
    }
    let k = matmul(&g_v.transpose(), g_l)?;
    Ok(-frobenius_inner(&k, &stats.c) + 0.5 * rho * frobenius_norm_sq(&k))
}

fn check_projection_shapes(
    op: &'static str,
    h_v: &Matrix,
    h_l: &Matrix,
    g_v: &Matrix,
    g_l: &Matrix,
) -> Result<()> {
    if h_v.rows() != h_l.rows() {
        return Err(CovError::shape(
            op,
            format!("paired features need equal row counts, got {} vs {}", h_v.rows(), h_l.rows()),
        ));
    }
    if g_v.rows() != g_l.rows() {
        return Err(CovError::shape(
            op,
            format!("projection ranks must match, got {} vs {}", g_v.rows(), g_l.rows()),
        ));
    }
    if h_v.cols() != g_v.cols() || h_l.cols() != g_l.cols() {
        return Err(CovError::shape(
            op,
            format!(
                "features {}x{} / {}x{} do not match projections {}x{} / {}x{}",
                h_v.rows(),
                h_v.cols(),
                h_l.rows(),
                h_l.cols(),
                g_v.rows(),
                g_v.cols(),
                g_l.rows(),
                g_l.cols()
            ),
        ));
    }
    Ok(())
}

/// Covariance-matching distance between a fixed real-side covariance and a
/// synthetic covariance, `|rho C_real - C_syn|_F^2`, given as a value only.
pub fn cov_match_value(real: &CrossCovStats, syn: &CrossCovStats, rho: f64) -> Result<f64> {
    let gap = syn.c.minus(&real.c.scaled(rho)).map_err(|_| {
        CovError::shape(
            "cov_match_value",
            format!(
                "covariance shapes differ: {}x{} vs {}x{}",
                real.c.rows(),
                real.c.cols(),
                syn.c.rows(),
                syn.c.cols()
            ),
        )
    })?;
    Ok(frobenius_norm_sq(&gap))
}

/// Covariance-matching loss `|rho C_real - C_syn|_F^2` with gradients on the
/// synthetic features that produced `C_syn` (the real side is held fixed).
///
/// The gradient chains through both the per-sample outer products and the
/// feature means; the mean terms cancel exactly because centered features sum
/// to zero, leaving `(D (h_l_k - mu_l)) / (n - 1)` per row and its transpose
/// counterpart, with `D = 2 (C_syn - rho C_real)`.
pub fn cov_match_loss(
    real: &CrossCovStats,
    syn_h_v: &Matrix,
    syn_h_l: &Matrix,
    rho: f64,
) -> Result<LossValueAndGrads> {
    let syn = cross_covariance(syn_h_v, syn_h_l)?;
    if syn.c.rows() != real.c.rows() || syn.c.cols() != real.c.cols() {
        return Err(CovError::shape(
            "cov_match_loss",
            format!(
                "synthetic features project to a {}x{} covariance but the real side is {}x{}",
                syn.c.rows(),
                syn.c.cols(),
                real.c.rows(),
                real.c.cols()
            ),
        ));
    }
    let gap = syn.c.minus(&real.c.scaled(rho))?;
    let value = frobenius_norm_sq(&gap);
    let d = gap.scaled(2.0);

    let n = syn.n as f64;
    let hv_c = centered(syn_h_v, &syn.mu_v);
    let hl_c = centered(syn_h_l, &syn.mu_l);
    let grad_v = matmul(&hl_c, &d.transpose())?.scaled(1.0 / (n - 1.0));
    let grad_l = matmul(&hv_c, &d)?.scaled(1.0 / (n - 1.0));
    Ok(LossValueAndGrads { value, grad_v, grad_l })
}

/// Mean-embedding matching between real and synthetic sides, per modality.
#[derive(Clone, Debug)]
pub struct FeatureMatchLoss {
    pub value: f64,
    pub value_v: f64,
    pub value_l: f64,
    /// Gradient of `value` on the synthetic mean embeddings.
    pub grad_syn_mean_v: Vec<f64>,
    pub grad_syn_mean_l: Vec<f64>,
}

/// Squared distance between real and synthetic mean embeddings, summed over
/// the two modalities.
pub fn feature_match_loss(
    real_mean_v: &[f64],
    syn_mean_v: &[f64],
    real_mean_l: &[f64],
    syn_mean_l: &[f64],
) -> Result<FeatureMatchLoss> {
    if real_mean_v.len() != syn_mean_v.len() || real_mean_l.len() != syn_mean_l.len() {
        return Err(CovError::shape(
            "feature_match_loss",
            format!(
                "mean lengths differ: v {} vs {}, l {} vs {}",
                real_mean_v.len(),
                syn_mean_v.len(),
                real_mean_l.len(),
                syn_mean_l.len()
            ),
        ));
    }
    let one_side = |real: &[f64], syn: &[f64]| {
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(syn.len());
        for (r, s) in real.iter().zip(syn) {
            value += (r - s) * (r - s);
            grad.push(2.0 * (s - r));
        }
        (value, grad)
    };
    let (value_v, grad_syn_mean_v) = one_side(real_mean_v, syn_mean_v);
    let (value_l, grad_syn_mean_l) = one_side(real_mean_l, syn_mean_l);
    Ok(FeatureMatchLoss {
        value: value_v + value_l,
        value_v,
        value_l,
        grad_syn_mean_v,
        grad_syn_mean_l,
    })
}

/// The combined distillation loss and its breakdown, with gradients on the
/// raw synthetic inputs only.
#[derive(Clone, Debug)]
pub struct CovMatchLoss {
    pub value: f64,
    pub l_cov: f64,
    pub l_feat_v: f64,
    pub l_feat_l: f64,
    pub grad_x_v: Matrix,
    pub grad_x_l: Matrix,
}

/// Covariance alignment plus lambda-weighted mean matching, chained through
/// the encoders to the raw synthetic inputs.
///
/// The real side enters as encoder features and is a constant, as are all
/// model parameters; only the synthetic inputs receive gradients. The
/// covariance term compares encoder features; the mean-matching term
/// compares projected embeddings under the current projection heads.
pub fn covmatch_loss(
    real_h_v: &Matrix,
    real_h_l: &Matrix,
    syn_x_v: &Matrix,
    syn_x_l: &Matrix,
    ms: &ModelState,
    rho: f64,
    lambda: f64,
) -> Result<CovMatchLoss> {
    if syn_x_v.rows() != syn_x_l.rows() {
        return Err(CovError::shape(
            "covmatch_loss",
            format!(
                "synthetic modalities need equal row counts, got {} vs {}",
                syn_x_v.rows(),
                syn_x_l.rows()
            ),
        ));
    }
    let real = cross_covariance(real_h_v, real_h_l)?;
    let (syn_h_v, syn_h_l) = model::forward_features(ms, syn_x_v, syn_x_l)?;
    let cov = cov_match_loss(&real, &syn_h_v, &syn_h_l, rho)?;

    let (real_z_v, real_z_l) = model::project(ms, real_h_v, real_h_l)?;
    let (syn_z_v, syn_z_l) = model::project(ms, &syn_h_v, &syn_h_l)?;
    let feat = feature_match_loss(
        &real_z_v.col_means(),
        &syn_z_v.col_means(),
        &real_z_l.col_means(),
        &syn_z_l.col_means(),
    )?;

    let mut grad_h_v = cov.grad_v;
    let mut grad_h_l = cov.grad_l;
    if lambda != 0.0 {
        // Every synthetic row shares the mean-matching pull:
        // dL/dh_k = (lambda / N) * grad_mean^T G.
        let n = syn_x_v.rows() as f64;
        let pull_v = vec_times_matrix(&feat.grad_syn_mean_v, &ms.g_v);
        let pull_l = vec_times_matrix(&feat.grad_syn_mean_l, &ms.g_l);
        for i in 0..grad_h_v.rows() {
            for (g, p) in grad_h_v.row_mut(i).iter_mut().zip(&pull_v) {
                *g += lambda * p / n;
            }
            for (g, p) in grad_h_l.row_mut(i).iter_mut().zip(&pull_l) {
                *g += lambda * p / n;
            }
        }
    }

    let grad_x_v = model::backprop_to_inputs(ms, Modality::Vision, &grad_h_v, syn_x_v)?;
    let grad_x_l = model::backprop_to_inputs(ms, Modality::Language, &grad_h_l, syn_x_l)?;
    Ok(CovMatchLoss {
        value: cov.value + lambda * feat.value,
        l_cov: cov.value,
        l_feat_v: feat.value_v,
        l_feat_l: feat.value_l,
        grad_x_v,
        grad_x_l,
    })
}

/// v^T M for a z-length vector and a z x d matrix.
fn vec_times_matrix(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (k, vk) in v.iter().enumerate() {
        if *vk == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row(k)) {
            *o += vk * w;
        }
    }
    out
}
