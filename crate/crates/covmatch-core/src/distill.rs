//! Distillation outer loop and coreset-selection baselines.
//!
//! The loop alternates three moves per iteration: match the synthetic
//! cross-covariance (plus mean features) against a real batch, step the
//! synthetic pairs by SGD with momentum, and give the model one contrastive
//! step on fresh real data so the matching target keeps moving. Encoders
//! snap back to their pretrained weights on a fixed cadence, with fresh
//! projections each time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{self, MultimodalDataset};
use crate::error::{CovError, Result};
use crate::model::{self, ModelState, SgdMomentumState};
use crate::numerics::{Matrix, Rng};
use crate::objectives;

/// One outer-loop iteration record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub l_cov: f64,
    pub l_feat_v: f64,
    pub l_feat_l: f64,
    pub total: f64,
    /// True when the model was reset to its pretrained reference (with fresh
    /// projections) at the start of this iteration.
    pub reinit: bool,
}

/// Per-iteration loss history of one distillation run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DistillTrace {
    pub records: Vec<TraceRecord>,
}

impl DistillTrace {
    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }
}

/// A learnable set of synthetic pairs with its optimizer state.
///
/// Distillation needs at least two pairs (cross-covariance is undefined for
/// one sample); the selection baselines also produce this type and allow a
/// single pair.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub x_v_hat: Matrix,
    pub x_l_hat: Matrix,
    /// SGD momentum buffers, one per modality tensor.
    pub vel_v: Matrix,
    pub vel_l: Matrix,
    /// Indices of the real pairs that seeded each row.
    pub origin: Vec<u32>,
}

impl SyntheticSet {
    fn from_rows(ds: &MultimodalDataset, idx: &[usize]) -> SyntheticSet {
        let x_v_hat = ds.x_v.select_rows(idx);
        let x_l_hat = ds.x_l.select_rows(idx);
        let vel_v = Matrix::zeros(x_v_hat.rows(), x_v_hat.cols());
        let vel_l = Matrix::zeros(x_l_hat.rows(), x_l_hat.cols());
        let origin = idx.iter().map(|&i| i as u32).collect();
        SyntheticSet { x_v_hat, x_l_hat, vel_v, vel_l, origin }
    }

    pub fn len(&self) -> usize {
        self.x_v_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Hyper-parameters of one distillation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Synthetic pair count.
    pub n: usize,
    /// Scale applied to the real cross-covariance target.
    pub rho: f64,
    /// Weight of the mean-feature matching terms.
    pub lambda: f64,
    pub real_batch: usize,
    /// Synthetic batch size; None uses the whole set every iteration.
    pub syn_batch: Option<usize>,
    /// Learning rate on the synthetic pairs.
    pub lr_syn: f64,
    pub momentum_syn: f64,
    /// Encoders reset to the pretrained snapshot every this many iterations.
    pub reinit_period: u64,
    pub total_iters: u64,
    /// One contrastive model step per iteration uses these.
    pub online_lr: f64,
    pub online_momentum: f64,
    pub online_weight_decay: f64,
    pub tau: f64,
    pub seed: u64,
    /// Clip synthetic gradients at global norm 1e3 before the momentum
    /// update. Off by default; the un-clipped update is the reference
    /// behavior.
    pub robust_mode: bool,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig::defaults_for(2000, 20)
    }
}

impl DistillConfig {
    /// Defaults scaled to a dataset of `m` pairs distilled down to `n`.
    ///
    /// The small-budget regime (n at most m/100) matches covariances more
    /// aggressively and leans less on mean features.
    pub fn defaults_for(m: usize, n: usize) -> DistillConfig {
        let small = (n as f64) <= (m as f64) / 100.0;
        DistillConfig {
            n,
            rho: if small { 2.0 } else { 1.0 },
            lambda: if small { 0.1 } else { 0.5 },
            real_batch: 128,
            syn_batch: if n > 256 { Some(256) } else { None },
            lr_syn: 1.0,
            momentum_syn: 0.5,
            reinit_period: 50,
            total_iters: 2000,
            online_lr: 0.01,
            online_momentum: 0.9,
            online_weight_decay: 5e-4,
            tau: 0.07,
            seed: 7,
            robust_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CovError::Config(msg));
        if self.n < 2 {
            return fail(format!("n = {} but cross-covariance needs at least 2 pairs", self.n));
        }
        if !(self.rho > 0.0) {
            return fail(format!("rho = {} must be > 0", self.rho));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda = {} must be >= 0", self.lambda));
        }
        if self.real_batch < 2 {
            return fail(format!("real_batch = {} must be >= 2", self.real_batch));
        }
        if let Some(b) = self.syn_batch {
            if b < 2 || b > self.n {
                return fail(format!("syn_batch = {b} must be in [2, n = {}]", self.n));
            }
        }
        if !(self.lr_syn >= 0.0) {
            return fail(format!("lr_syn = {} must be >= 0", self.lr_syn));
        }
        if !(0.0..1.0).contains(&self.momentum_syn) {
            return fail(format!("momentum_syn = {} must be in [0, 1)", self.momentum_syn));
        }
        if self.reinit_period == 0 {
            return fail("reinit_period must be >= 1".to_string());
        }
        if !(self.online_lr >= 0.0) || !(self.online_weight_decay >= 0.0) {
            return fail(format!(
                "online_lr = {} and online_weight_decay = {} must be >= 0",
                self.online_lr, self.online_weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.online_momentum) {
            return fail(format!("online_momentum = {} must be in [0, 1)", self.online_momentum));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau = {} must be > 0", self.tau));
        }
        Ok(())
    }
}

fn check_selection_count(op: &'static str, n: usize, m: usize, min: usize) -> Result<()> {
    if n < min || n > m {
        return Err(CovError::domain(
            op,
            format!("selection count {n} out of range [{min}, {m}]"),
        ));
    }
    Ok(())
}

/// Seeds a synthetic set with `n` real pairs sampled uniformly without
/// replacement. Asking for the whole dataset keeps its natural order.
pub fn init_synthetic(ds: &MultimodalDataset, n: usize, rng: &mut Rng) -> Result<SyntheticSet> {
    check_selection_count("init_synthetic", n, ds.len(), 2)?;
    let idx = if n == ds.len() {
        (0..n).collect()
    } else {
        rng.sample_without_replacement(ds.len(), n)
    };
    Ok(SyntheticSet::from_rows(ds, &idx))
}

/// Natural-order indices when the batch covers everything, otherwise a
/// uniform sample without replacement.
fn batch_indices(rows: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    if batch >= rows {
        (0..rows).collect()
    } else {
        rng.sample_without_replacement(rows, batch)
    }
}

/// Scatters per-batch-row gradients into a zero matrix over the full set.
fn scatter_rows(full_rows: usize, cols: usize, idx: &[usize], grads: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(full_rows, cols);
    for (b, &row) in idx.iter().enumerate() {
        out.row_mut(row).copy_from_slice(grads.row(b));
    }
    out
}

/// Scales both gradients down to a shared global norm cap.
fn clip_global_norm(g_v: &mut Matrix, g_l: &mut Matrix, max_norm: f64) {
    let total: f64 = g_v
        .as_slice()
        .iter()
        .chain(g_l.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = max_norm / total;
        for v in g_v.as_mut_slice().iter_mut().chain(g_l.as_mut_slice()) {
            *v *= scale;
        }
    }
}

/// One SGD-momentum step on a full synthetic tensor.
fn momentum_step(x: &mut Matrix, vel: &mut Matrix, grad: &Matrix, lr: f64, momentum: f64) {
    let xs = x.as_mut_slice();
    let vs = vel.as_mut_slice();
    let gs = grad.as_slice();
    for i in 0..xs.len() {
        vs[i] = momentum * vs[i] + gs[i];
        xs[i] -= lr * vs[i];
    }
}

/// Runs the distillation loop and returns the learned set with its loss
/// trace.
///
/// Randomness is split into fixed streams of the config seed (init,
/// batching, online batches, reinit draws) so any one consumer can be
/// replayed independently. A non-finite loss or synthetic entry aborts with
/// the trace collected so far.
pub fn covmatch_distill(
    ds: &MultimodalDataset,
    cfg: &DistillConfig,
    ms: &ModelState,
) -> Result<(SyntheticSet, DistillTrace)> {
    cfg.validate()?;
    if cfg.n > ds.len() {
        return Err(CovError::domain(
            "covmatch_distill",
            format!("n = {} exceeds dataset size {}", cfg.n, ds.len()),
        ));
    }
    if !ms.has_pretrained_snapshot() {
        return Err(CovError::precondition(
            "covmatch_distill",
            "model has no pretrained snapshot; run pretrain first",
        ));
    }

    let mut init_rng = Rng::new(cfg.seed, 10);
    let mut batch_rng = Rng::new(cfg.seed, 11);
    let mut online_rng = Rng::new(cfg.seed, 12);
    let mut reinit_rng = Rng::new(cfg.seed, 13);

    let mut syn = init_synthetic(ds, cfg.n, &mut init_rng)?;
    let mut trace = DistillTrace::default();
    let mut model = ms.clone();
    let mut online_opt =
        SgdMomentumState::uniform(cfg.online_lr, cfg.online_momentum, cfg.online_weight_decay);
    let abort = |step: u64, detail: String, trace: DistillTrace| {
        Err(CovError::DistillAborted { step, detail, trace: Box::new(trace) })
    };

    for t in 0..cfg.total_iters {
        let reinit = t % cfg.reinit_period == 0;
        if reinit {
            model = model::reinitialize(&model, &mut reinit_rng)?;
            online_opt = SgdMomentumState::uniform(
                cfg.online_lr,
                cfg.online_momentum,
                cfg.online_weight_decay,
            );
        }

        let real_idx = batch_indices(ds.len(), cfg.real_batch, &mut batch_rng);
        let bx_v = ds.x_v.select_rows(&real_idx);
        let bx_l = ds.x_l.select_rows(&real_idx);
        let (rh_v, rh_l) = model::forward_features(&model, &bx_v, &bx_l)?;

        let syn_batch = cfg.syn_batch.unwrap_or(syn.len());
        let syn_idx = batch_indices(syn.len(), syn_batch, &mut batch_rng);
        let sx_v = syn.x_v_hat.select_rows(&syn_idx);
        let sx_l = syn.x_l_hat.select_rows(&syn_idx);

        let loss =
            objectives::covmatch_loss(&rh_v, &rh_l, &sx_v, &sx_l, &model, cfg.rho, cfg.lambda)?;
        if !loss.value.is_finite() {
            return abort(t, format!("non-finite loss {}", loss.value), trace);
        }
        trace.push(TraceRecord {
            iteration: t,
            l_cov: loss.l_cov,
            l_feat_v: loss.l_feat_v,
            l_feat_l: loss.l_feat_l,
            total: loss.value,
            reinit,
        });

        let mut g_v = scatter_rows(syn.len(), syn.x_v_hat.cols(), &syn_idx, &loss.grad_x_v);
        let mut g_l = scatter_rows(syn.len(), syn.x_l_hat.cols(), &syn_idx, &loss.grad_x_l);
        if cfg.robust_mode {
            clip_global_norm(&mut g_v, &mut g_l, 1e3);
        }
        momentum_step(&mut syn.x_v_hat, &mut syn.vel_v, &g_v, cfg.lr_syn, cfg.momentum_syn);
        momentum_step(&mut syn.x_l_hat, &mut syn.vel_l, &g_l, cfg.lr_syn, cfg.momentum_syn);
        if !syn.x_v_hat.is_finite() || !syn.x_l_hat.is_finite() {
            return abort(t, "non-finite synthetic entries after update".to_string(), trace);
        }

        let online_idx = batch_indices(ds.len(), cfg.real_batch, &mut online_rng);
        let ox_v = ds.x_v.select_rows(&online_idx);
        let ox_l = ds.x_l.select_rows(&online_idx);
        model = match model::online_update(&model, &ox_v, &ox_l, cfg.tau, &mut online_opt) {
            Ok(next) => next,
            Err(CovError::Numeric { detail, .. }) => {
                return abort(t, format!("online model step failed: {detail}"), trace)
            }
            Err(other) => return Err(other),
        };
    }

    Ok((syn, trace))
}

/// Uniform random coreset, exposed as the simplest baseline.
pub fn select_random(ds: &MultimodalDataset, n: usize, rng: &mut Rng) -> Result<SyntheticSet> {
    check_selection_count("select_random", n, ds.len(), 2)?;
    let idx = if n == ds.len() {
        (0..n).collect()
    } else {
        rng.sample_without_replacement(ds.len(), n)
    };
    Ok(SyntheticSet::from_rows(ds, &idx))
}

/// Row-normalized projected embeddings of both modalities, concatenated per
/// sample. Zero rows stay zero.
fn selection_features(ds: &MultimodalDataset, ms: &ModelState) -> Result<Matrix> {
    let (h_v, h_l) = model::forward_features(ms, &ds.x_v, &ds.x_l)?;
    let (z_v, z_l) = model::project(ms, &h_v, &h_l)?;
    let z = ms.embed_dim();
    let mut out = Matrix::zeros(ds.len(), 2 * z);
    for i in 0..ds.len() {
        let row = out.row_mut(i);
        row[..z].copy_from_slice(z_v.row(i));
        row[z..].copy_from_slice(z_l.row(i));
        for half in [0..z, z..2 * z] {
            let norm = row[half.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut row[half] {
                    *v /= norm;
                }
            }
        }
    }
    Ok(out)
}

/// Greedy picks so the running selection mean tracks the dataset mean; ties
/// go to the lowest index.
fn herding_indices(feats: &Matrix, n: usize) -> Vec<usize> {
    let (m, d) = (feats.rows(), feats.cols());
    let target = feats.col_means();
    let mut taken = vec![false; m];
    let mut sum = vec![0.0; d];
    let mut picked = Vec::with_capacity(n);
    for step in 1..=n {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..m {
            if taken[j] {
                continue;
            }
            let row = feats.row(j);
            let dist: f64 = (0..d)
                .map(|k| {
                    let mean_k = (sum[k] + row[k]) / step as f64;
                    let diff = target[k] - mean_k;
                    diff * diff
                })
                .sum();
            if dist < best.1 {
                best = (j, dist);
            }
        }
        let j = best.0;
        taken[j] = true;
        for (k, v) in sum.iter_mut().enumerate() {
            *v += feats.get(j, k);
        }
        picked.push(j);
    }
    picked
}

/// Herding coreset on normalized projected features under the given model.
pub fn select_herding(ds: &MultimodalDataset, n: usize, ms: &ModelState) -> Result<SyntheticSet> {
    check_selection_count("select_herding", n, ds.len(), 1)?;
    let feats = selection_features(ds, ms)?;
    let idx = herding_indices(&feats, n);
    Ok(SyntheticSet::from_rows(ds, &idx))
}

/// Farthest-point traversal from a given first center; ties go to the
/// lowest index.
fn kcenter_indices(feats: &Matrix, n: usize, first: usize) -> Vec<usize> {
    let m = feats.rows();
    let dist_sq = |a: usize, b: usize| -> f64 {
        feats
            .row(a)
            .iter()
            .zip(feats.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut picked = vec![first];
    let mut nearest: Vec<f64> = (0..m).map(|j| dist_sq(j, first)).collect();
    while picked.len() < n {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, &d) in nearest.iter().enumerate() {
            if d > best.1 {
                best = (j, d);
            }
        }
        picked.push(best.0);
        for (j, d) in nearest.iter_mut().enumerate() {
            let dj = dist_sq(j, best.0);
            if dj < *d {
                *d = dj;
            }
        }
    }
    picked
}

/// K-center coreset on normalized projected features; the rng picks the
/// first center, subsequent centers maximize distance to the chosen ones.
pub fn select_kcenter(
    ds: &MultimodalDataset,
    n: usize,
    ms: &ModelState,
    rng: &mut Rng,
) -> Result<SyntheticSet> {
    check_selection_count("select_kcenter", n, ds.len(), 1)?;
    let feats = selection_features(ds, ms)?;
    let idx = kcenter_indices(&feats, n, rng.below(ds.len()));
    Ok(SyntheticSet::from_rows(ds, &idx))
}

// ── Files ───────────────────────────────────────────────────────────

/// Writes a synthetic set in the shared pair-file format. The group count
/// is zero, which marks the file as synthetic; tags carry origin indices.
pub fn save_synthetic(set: &SyntheticSet, path: &Path) -> Result<()> {
    datagen::write_cvmd(path, &set.x_v_hat, &set.x_l_hat, &set.origin, 0)
}

pub fn load_synthetic(path: &Path) -> Result<SyntheticSet> {
    let raw = datagen::read_cvmd(path)?;
    if raw.n_groups != 0 {
        return Err(CovError::format(
            path.display().to_string(),
            format!("group count {} marks a labeled dataset, not a synthetic set", raw.n_groups),
        ));
    }
    let vel_v = Matrix::zeros(raw.x_v.rows(), raw.x_v.cols());
    let vel_l = Matrix::zeros(raw.x_l.rows(), raw.x_l.cols());
    Ok(SyntheticSet { x_v_hat: raw.x_v, x_l_hat: raw.x_l, vel_v, vel_l, origin: raw.tags })
}

pub fn write_trace(trace: &DistillTrace, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(trace)
        .map_err(|e| CovError::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<DistillTrace> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CovError::format(path.display().to_string(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedform::trace_alignment;
    use crate::datagen::{generate, GenConfig};
    use crate::model::{init_model, pretrain, ArchFamily, ModelConfig};
    use crate::objectives::cross_covariance;

    fn small_corpus() -> MultimodalDataset {
        let cfg = GenConfig {
            m_train: 160,
            m_test: 40,
            n_groups: 8,
            latent_dim: 4,
            p_v: 12,
            p_l: 10,
            noise_sigma: 0.0,
            seed: 31,
        };
        generate(&cfg).unwrap().0
    }

    fn small_model_cfg() -> ModelConfig {
        ModelConfig {
            family: ArchFamily::MlpTanh,
            hidden: 32,
            p_v: 12,
            p_l: 10,
            d_v: 8,
            d_l: 8,
            z: 8,
        }
    }

    /// Model with a snapshot but no real training, for plumbing tests.
    fn snapshot_model(ds: &MultimodalDataset) -> ModelState {
        let mut rng = Rng::new(5, 0);
        let ms = init_model(&small_model_cfg(), &mut rng).unwrap();
        let opt = SgdMomentumState::uniform(0.05, 0.9, 0.0);
        pretrain(&ms, ds, 0, opt, 0.2, &mut rng).unwrap()
    }

    fn quick_cfg(n: usize) -> DistillConfig {
        DistillConfig { n, total_iters: 10, reinit_period: 5, ..DistillConfig::defaults_for(160, n) }
    }

    // ── Config and init ─────────────────────────────────────────────

    #[test]
    fn defaults_track_the_budget_regime() {
        let small = DistillConfig::defaults_for(2000, 20);
        assert_eq!(small.rho, 2.0);
        assert_eq!(small.lambda, 0.1);
        assert_eq!(small.syn_batch, None);
        let large = DistillConfig::defaults_for(2000, 500);
        assert_eq!(large.rho, 1.0);
        assert_eq!(large.lambda, 0.5);
        assert_eq!(large.syn_batch, Some(256));
        small.validate().unwrap();
        large.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let base = DistillConfig::defaults_for(160, 16);
        let cases: Vec<DistillConfig> = vec![
            DistillConfig { n: 1, ..base.clone() },
            DistillConfig { rho: 0.0, ..base.clone() },
            DistillConfig { lambda: -0.1, ..base.clone() },
            DistillConfig { real_batch: 1, ..base.clone() },
            DistillConfig { syn_batch: Some(1), ..base.clone() },
            DistillConfig { syn_batch: Some(17), ..base.clone() },
            DistillConfig { lr_syn: -1.0, ..base.clone() },
            DistillConfig { momentum_syn: 1.0, ..base.clone() },
            DistillConfig { reinit_period: 0, ..base.clone() },
            DistillConfig { online_momentum: -0.1, ..base.clone() },
            DistillConfig { tau: 0.0, ..base.clone() },
        ];
        for (i, cfg) in cases.iter().enumerate() {
            assert!(
                matches!(cfg.validate(), Err(CovError::Config { .. })),
                "case {i} should fail validation"
            );
        }
        base.validate().unwrap();
    }

    #[test]
    fn init_takes_the_full_set_in_natural_order() {
        let ds = small_corpus();
        let mut rng = Rng::new(3, 0);
        let set = init_synthetic(&ds, ds.len(), &mut rng).unwrap();
        let expect: Vec<u32> = (0..ds.len() as u32).collect();
        assert_eq!(set.origin, expect);
        assert!(set.x_v_hat.bitwise_eq(&ds.x_v));
        assert!(set.x_l_hat.bitwise_eq(&ds.x_l));
    }

    #[test]
    fn init_is_seeded_and_copies_rows_bitwise() {
        let ds = small_corpus();
        let a = init_synthetic(&ds, 12, &mut Rng::new(3, 0)).unwrap();
        let b = init_synthetic(&ds, 12, &mut Rng::new(3, 0)).unwrap();
        assert_eq!(a.origin, b.origin);
        assert!(a.x_v_hat.bitwise_eq(&b.x_v_hat));
        for (row, &src) in a.origin.iter().enumerate() {
            assert_eq!(a.x_v_hat.row(row), ds.x_v.row(src as usize));
            assert_eq!(a.x_l_hat.row(row), ds.x_l.row(src as usize));
        }
        assert_eq!(a.vel_v.as_slice().iter().filter(|v| **v != 0.0).count(), 0);
    }

    #[test]
    fn init_rejects_out_of_range_counts() {
        let ds = small_corpus();
        assert!(matches!(
            init_synthetic(&ds, 1, &mut Rng::new(0, 0)),
            Err(CovError::Domain { .. })
        ));
        assert!(matches!(
            init_synthetic(&ds, ds.len() + 1, &mut Rng::new(0, 0)),
            Err(CovError::Domain { .. })
        ));
    }

    // ── Distillation loop ───────────────────────────────────────────

    #[test]
    fn zero_iterations_return_the_init() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let cfg = DistillConfig { total_iters: 0, ..quick_cfg(10) };
        let (set, trace) = covmatch_distill(&ds, &cfg, &ms).unwrap();
        assert!(trace.records.is_empty());
        let expect = init_synthetic(&ds, 10, &mut Rng::new(cfg.seed, 10)).unwrap();
        assert_eq!(set.origin, expect.origin);
        assert!(set.x_v_hat.bitwise_eq(&expect.x_v_hat));
    }

    #[test]
    fn zero_syn_lr_freezes_the_set_but_not_the_trace() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let cfg = DistillConfig { lr_syn: 0.0, ..quick_cfg(10) };
        let (set, trace) = covmatch_distill(&ds, &cfg, &ms).unwrap();
        let init = init_synthetic(&ds, 10, &mut Rng::new(cfg.seed, 10)).unwrap();
        assert!(set.x_v_hat.bitwise_eq(&init.x_v_hat));
        assert!(set.x_l_hat.bitwise_eq(&init.x_l_hat));
        assert_eq!(trace.records.len(), 10);
        assert!(trace.records.iter().all(|r| r.total.is_finite()));
        // Gradients still accumulated into the momentum buffers.
        assert!(set.vel_v.as_slice().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn full_copy_is_a_fixed_point() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let cfg = DistillConfig {
            n: ds.len(),
            rho: 1.0,
            real_batch: ds.len(),
            syn_batch: None,
            total_iters: 5,
            reinit_period: 2,
            ..DistillConfig::defaults_for(160, 160)
        };
        let (set, trace) = covmatch_distill(&ds, &cfg, &ms).unwrap();
        for rec in &trace.records {
            assert_eq!(rec.total, 0.0, "iteration {}", rec.iteration);
            assert_eq!(rec.l_cov, 0.0);
        }
        assert!(set.x_v_hat.bitwise_eq(&ds.x_v));
        assert!(set.x_l_hat.bitwise_eq(&ds.x_l));
    }

    #[test]
    fn reinit_cadence_and_iteration_indices() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let cfg = DistillConfig { total_iters: 10, reinit_period: 4, ..quick_cfg(8) };
        let (_, trace) = covmatch_distill(&ds, &cfg, &ms).unwrap();
        assert_eq!(trace.records.len(), 10);
        for (i, rec) in trace.records.iter().enumerate() {
            assert_eq!(rec.iteration, i as u64);
            assert_eq!(rec.reinit, i % 4 == 0, "iteration {i}");
        }
    }

    #[test]
    fn distillation_is_deterministic_in_the_seed() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let cfg = quick_cfg(8);
        let (a, ta) = covmatch_distill(&ds, &cfg, &ms).unwrap();
        let (b, tb) = covmatch_distill(&ds, &cfg, &ms).unwrap();
        assert!(a.x_v_hat.bitwise_eq(&b.x_v_hat));
        assert!(a.x_l_hat.bitwise_eq(&b.x_l_hat));
        assert_eq!(
            ta.records.iter().map(|r| r.total).collect::<Vec<_>>(),
            tb.records.iter().map(|r| r.total).collect::<Vec<_>>()
        );
        let other = DistillConfig { seed: 8, ..cfg };
        let (c, _) = covmatch_distill(&ds, &other, &ms).unwrap();
        assert!(!a.x_v_hat.bitwise_eq(&c.x_v_hat));
    }

    #[test]
    fn matching_loss_descends_and_alignment_improves() {
        let ds = small_corpus();
        let mut rng = Rng::new(5, 0);
        let ms = init_model(&small_model_cfg(), &mut rng).unwrap();
        let opt = SgdMomentumState::uniform(0.05, 0.9, 0.0);
        let ms = pretrain(&ms, &ds, 40, opt, 0.2, &mut rng).unwrap();

        // Small-budget regime: the target covariance is doubled, so success
        // shows up as alignment clearly above the real-pair init.
        let cfg = DistillConfig {
            rho: 2.0,
            lambda: 0.1,
            total_iters: 300,
            ..DistillConfig::defaults_for(160, 16)
        };
        let (set, trace) = covmatch_distill(&ds, &cfg, &ms).unwrap();

        let head: f64 =
            trace.records[..50].iter().map(|r| r.l_cov).sum::<f64>() / 50.0;
        let tail: f64 =
            trace.records[250..].iter().map(|r| r.l_cov).sum::<f64>() / 50.0;
        assert!(tail < head, "matching loss did not descend: {head} -> {tail}");

        // Alignment measured in the fixed pretrained feature space.
        let (rh_v, rh_l) = model::forward_features(&ms, &ds.x_v, &ds.x_l).unwrap();
        let real = cross_covariance(&rh_v, &rh_l).unwrap();
        let align_of = |set: &SyntheticSet| {
            let (sh_v, sh_l) =
                model::forward_features(&ms, &set.x_v_hat, &set.x_l_hat).unwrap();
            let syn = cross_covariance(&sh_v, &sh_l).unwrap();
            trace_alignment(&real, &syn).unwrap()
        };
        let init = init_synthetic(&ds, 16, &mut Rng::new(cfg.seed, 10)).unwrap();
        let before = align_of(&init);
        let after = align_of(&set);
        assert!(after > before, "alignment did not improve: {before} -> {after}");
    }

    #[test]
    fn diverging_run_aborts_with_partial_trace() {
        let ds = small_corpus();
        let mut rng = Rng::new(5, 0);
        let cfg_model = ModelConfig { family: ArchFamily::Linear, ..small_model_cfg() };
        let ms = init_model(&cfg_model, &mut rng).unwrap();
        let opt = SgdMomentumState::uniform(0.05, 0.9, 0.0);
        let ms = pretrain(&ms, &ds, 0, opt, 0.2, &mut rng).unwrap();

        let cfg = DistillConfig { lr_syn: 1e300, total_iters: 10, ..quick_cfg(8) };
        match covmatch_distill(&ds, &cfg, &ms) {
            Err(CovError::DistillAborted { step, trace, .. }) => {
                assert!(step >= 1, "first step starts from finite data");
                assert_eq!(trace.records.len() as u64, step);
            }
            other => panic!("expected an abort, got {other:?}"),
        }
    }

    #[test]
    fn missing_snapshot_is_refused() {
        let ds = small_corpus();
        let mut rng = Rng::new(5, 0);
        let ms = init_model(&small_model_cfg(), &mut rng).unwrap();
        assert!(matches!(
            covmatch_distill(&ds, &quick_cfg(8), &ms),
            Err(CovError::Precondition { .. })
        ));
    }

    // ── Gradient clipping ───────────────────────────────────────────

    #[test]
    fn clipping_caps_the_joint_norm_and_keeps_direction() {
        let mut g_v = Matrix::from_rows(&[vec![3000.0, 0.0]]).unwrap();
        let mut g_l = Matrix::from_rows(&[vec![0.0, 4000.0]]).unwrap();
        clip_global_norm(&mut g_v, &mut g_l, 1e3);
        let norm = (g_v.get(0, 0).powi(2) + g_l.get(0, 1).powi(2)).sqrt();
        assert!((norm - 1e3).abs() < 1e-9);
        assert!((g_v.get(0, 0) / g_l.get(0, 1) - 3000.0 / 4000.0).abs() < 1e-12);

        let mut small = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let mut other = Matrix::from_rows(&[vec![2.0]]).unwrap();
        clip_global_norm(&mut small, &mut other, 1e3);
        assert_eq!(small.get(0, 0), 1.0);
        assert_eq!(other.get(0, 0), 2.0);
    }

    // ── Selection baselines ─────────────────────────────────────────

    #[test]
    fn random_selection_matches_init_semantics() {
        let ds = small_corpus();
        let a = select_random(&ds, 12, &mut Rng::new(9, 1)).unwrap();
        let b = select_random(&ds, 12, &mut Rng::new(9, 1)).unwrap();
        assert_eq!(a.origin, b.origin);
        for (row, &src) in a.origin.iter().enumerate() {
            assert_eq!(a.x_v_hat.row(row), ds.x_v.row(src as usize));
        }
        assert!(matches!(select_random(&ds, 1, &mut Rng::new(9, 1)), Err(CovError::Domain { .. })));
        let full = select_random(&ds, ds.len(), &mut Rng::new(9, 1)).unwrap();
        let mut sorted: Vec<u32> = full.origin.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..ds.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn herding_first_pick_is_nearest_the_mean() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let set = select_herding(&ds, 1, &ms).unwrap();

        let feats = selection_features(&ds, &ms).unwrap();
        let mean = feats.col_means();
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..ds.len() {
            let d: f64 =
                feats.row(j).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        assert_eq!(set.origin, vec![best.0 as u32]);
    }

    #[test]
    fn herding_mean_distance_shrinks_across_the_sweep() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let feats = selection_features(&ds, &ms).unwrap();
        let mean = feats.col_means();
        let picked = herding_indices(&feats, 24);
        let mut sum = vec![0.0; feats.cols()];
        let mut by_count = Vec::new();
        for (k, &j) in picked.iter().enumerate() {
            for (c, v) in sum.iter_mut().enumerate() {
                *v += feats.get(j, c);
            }
            let count = (k + 1) as f64;
            let dist: f64 = sum
                .iter()
                .zip(&mean)
                .map(|(s, m)| (s / count - m) * (s / count - m))
                .sum::<f64>()
                .sqrt();
            by_count.push(dist);
        }
        // Single picks can overshoot (a lucky early pick sits right on the
        // mean), so measure at doubling budgets where the trend is clean.
        let sweep = [1usize, 2, 4, 8, 16, 24];
        let mut prev = f64::INFINITY;
        for &n in &sweep {
            let dist = by_count[n - 1];
            assert!(dist < prev, "distance rose between budgets: {prev} -> {dist} at N = {n}");
            prev = dist;
        }
        assert!(
            by_count[23] < 0.1 * by_count[0],
            "selection mean is not converging: {} -> {}",
            by_count[0],
            by_count[23]
        );
    }

    #[test]
    fn herding_full_set_enumerates_everything() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let set = select_herding(&ds, ds.len(), &ms).unwrap();
        let mut sorted: Vec<u32> = set.origin.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..ds.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn kcenter_walks_to_the_farthest_point() {
        let feats =
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![10.0]]).unwrap();
        assert_eq!(kcenter_indices(&feats, 2, 0), vec![0, 2]);
        assert_eq!(kcenter_indices(&feats, 3, 0), vec![0, 2, 1]);
    }

    #[test]
    fn kcenter_covering_radius_is_non_increasing() {
        let mut rng = Rng::new(11, 0);
        let feats = rng.normal_matrix(40, 3, 1.0);
        let radius = |centers: &[usize]| -> f64 {
            (0..feats.rows())
                .map(|j| {
                    centers
                        .iter()
                        .map(|&c| {
                            feats
                                .row(j)
                                .iter()
                                .zip(feats.row(c))
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        let mut prev = f64::INFINITY;
        for n in 1..=12 {
            let r = radius(&kcenter_indices(&feats, n, 4));
            assert!(r <= prev + 1e-12, "radius rose at n = {n}");
            prev = r;
        }
    }

    #[test]
    fn kcenter_single_pick_is_the_rng_seed_point() {
        let ds = small_corpus();
        let ms = snapshot_model(&ds);
        let set = select_kcenter(&ds, 1, &ms, &mut Rng::new(21, 3)).unwrap();
        let expect = Rng::new(21, 3).below(ds.len());
        assert_eq!(set.origin, vec![expect as u32]);
    }

    // ── Files ───────────────────────────────────────────────────────

    #[test]
    fn synthetic_files_round_trip_bitwise() {
        let ds = small_corpus();
        let set = init_synthetic(&ds, 12, &mut Rng::new(3, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.cvmd");
        save_synthetic(&set, &path).unwrap();
        let back = load_synthetic(&path).unwrap();
        assert!(back.x_v_hat.bitwise_eq(&set.x_v_hat));
        assert!(back.x_l_hat.bitwise_eq(&set.x_l_hat));
        assert_eq!(back.origin, set.origin);
    }

    #[test]
    fn labeled_dataset_files_are_not_synthetic_sets() {
        let ds = small_corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cvmd");
        datagen::save(&ds, &path).unwrap();
        assert!(matches!(load_synthetic(&path), Err(CovError::Format { .. })));
    }

    #[test]
    fn trace_files_round_trip() {
        let mut trace = DistillTrace::default();
        trace.push(TraceRecord {
            iteration: 0,
            l_cov: 1.5,
            l_feat_v: 0.25,
            l_feat_l: 0.125,
            total: 1.875,
            reinit: true,
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        write_trace(&trace, &path).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.records.len(), 1);
        assert_eq!(back.records[0].total, 1.875);
        assert!(back.records[0].reinit);
    }
}
