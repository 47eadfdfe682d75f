//! Downstream evaluation: train a fresh model on a small set with InfoNCE,
//! then score cross-modal retrieval on held-out pairs.
//!
//! Retrieval uses cosine similarity over projected embeddings. A text query
//! scores an image hit (IR@K) when a same-group image ranks in its top K,
//! and symmetrically for TR@K; the query's own paired item is always among
//! the candidates. Group hits stand in for caption-multiplicity ground
//! truth; exact-pair scoring is available behind a config flag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::MultimodalDataset;
use crate::error::{CovError, Result};
use crate::model::{self, ArchFamily, ModelState, SgdMomentumState};
use crate::numerics::{Matrix, Rng};

/// Training and scoring parameters for one evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_encoders: f64,
    pub lr_projections: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rates are multiplied by `lr_decay_factor` once, at the
    /// start of this (0-based) epoch.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub tau: f64,
    /// Encoder family evaluated by default; cross-architecture evaluation
    /// overrides it per family.
    pub family: ArchFamily,
    pub freeze_encoders: bool,
    pub freeze_projections: bool,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    /// Score only the query's own paired item as a hit instead of any
    /// same-group item.
    pub exact_pair: bool,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            epochs: 100,
            batch: 128,
            lr_encoders: 0.01,
            lr_projections: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epoch: 50,
            lr_decay_factor: 0.1,
            tau: 0.07,
            family: ArchFamily::MlpTanh,
            freeze_encoders: false,
            freeze_projections: false,
            seeds: vec![1, 2, 3, 4, 5],
            ks: vec![1, 5, 10],
            exact_pair: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CovError::Config(msg));
        if self.batch < 2 {
            return fail(format!("batch = {} but contrastive training needs >= 2", self.batch));
        }
        if !(self.lr_encoders > 0.0) || !(self.lr_projections > 0.0) {
            return fail(format!(
                "learning rates must be > 0, got encoders {} projections {}",
                self.lr_encoders, self.lr_projections
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum = {} must be in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        if self.epochs > 0 && self.lr_decay_epoch >= self.epochs {
            return fail(format!(
                "lr_decay_epoch = {} must precede epochs = {}",
                self.lr_decay_epoch, self.epochs
            ));
        }
        if !(self.lr_decay_factor > 0.0) {
            return fail(format!("lr_decay_factor = {} must be > 0", self.lr_decay_factor));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau = {} must be > 0", self.tau));
        }
        if self.seeds.is_empty() {
            return fail("seeds list is empty".to_string());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return fail(format!("ks must be nonempty and >= 1, got {:?}", self.ks));
        }
        Ok(())
    }
}

/// Trains a fresh evaluation model on the given pairs: pretrained encoders,
/// fresh random projections, InfoNCE with SGD-momentum and one step decay.
pub fn train_eval_model(
    x_v: &Matrix,
    x_l: &Matrix,
    cfg: &EvalConfig,
    ms: &ModelState,
    rng: &mut Rng,
) -> Result<ModelState> {
    cfg.validate()?;
    if x_v.rows() != x_l.rows() {
        return Err(CovError::shape(
            "train_eval_model",
            format!("modality row counts differ: {} vs {}", x_v.rows(), x_l.rows()),
        ));
    }
    if x_v.rows() < 2 {
        return Err(CovError::degenerate("train_eval_model", "need at least 2 pairs"));
    }
    let mut state = model::reinitialize(ms, rng)?;
    let mut opt = SgdMomentumState::new(
        cfg.lr_encoders,
        cfg.lr_projections,
        cfg.momentum,
        cfg.weight_decay,
    );
    let rows = x_v.rows();
    let batch = cfg.batch.min(rows);
    let mut order: Vec<usize> = (0..rows).collect();
    for epoch in 0..cfg.epochs {
        if epoch == cfg.lr_decay_epoch {
            opt.scale_learning_rates(cfg.lr_decay_factor);
        }
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let bx_v = x_v.select_rows(chunk);
            let bx_l = x_l.select_rows(chunk);
            let step = state.step;
            let (next, _) = model::contrastive_step(
                &state,
                &bx_v,
                &bx_l,
                cfg.tau,
                &mut opt,
                !cfg.freeze_encoders,
                !cfg.freeze_projections,
            )
            .map_err(|e| match e {
                CovError::Numeric { detail, .. } => CovError::Training { step, detail },
                other => other,
            })?;
            state = next;
        }
    }
    Ok(state)
}

/// Retrieval percentages of a single trained model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// Text-to-image retrieval, K -> percentage.
    pub ir_at: BTreeMap<usize, f64>,
    /// Image-to-text retrieval, K -> percentage.
    pub tr_at: BTreeMap<usize, f64>,
    /// Arithmetic mean over every reported metric.
    pub average: f64,
}

fn metrics_mean(values: &BTreeMap<usize, f64>, other: &BTreeMap<usize, f64>) -> f64 {
    let total: f64 = values.values().chain(other.values()).sum();
    total / (values.len() + other.len()) as f64
}

/// Hit percentages from explicit embeddings: for each query in one modality,
/// candidates from the other are ranked by cosine similarity (ties to the
/// lower index) and a hit is any same-group candidate in the top K, or the
/// exact paired index when `exact_pair` is set.
pub(crate) fn retrieval_from_embeddings(
    z_v: &Matrix,
    z_l: &Matrix,
    group: &[u32],
    ks: &[usize],
    exact_pair: bool,
) -> Result<RetrievalMetrics> {
    let n = z_v.rows();
    if n == 0 || z_l.rows() != n || group.len() != n {
        return Err(CovError::shape(
            "retrieval_eval",
            format!("need matching nonempty sides, got {} / {} / {}", n, z_l.rows(), group.len()),
        ));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(CovError::domain("retrieval_eval", format!("bad K list {ks:?}")));
    }
    let unit = |m: &Matrix, side: &str| -> Result<Matrix> {
        let mut out = m.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(CovError::domain(
                    "retrieval_eval",
                    format!("{side} embedding row {i} has norm {norm}"),
                ));
            }
            for v in row {
                *v /= norm;
            }
        }
        Ok(out)
    };
    let u_v = unit(z_v, "image")?;
    let u_l = unit(z_l, "text")?;
    let max_k = *ks.iter().max().unwrap();

    // first_hit[q] = 0-based rank of the first correct candidate, or MAX.
    let count_hits = |queries: &Matrix, cands: &Matrix| -> Vec<usize> {
        let mut first_hit = vec![usize::MAX; queries.rows()];
        let mut sims = vec![0.0; cands.rows()];
        let mut order: Vec<usize> = Vec::with_capacity(cands.rows());
        for q in 0..queries.rows() {
            let qrow = queries.row(q);
            for (c, s) in sims.iter_mut().enumerate() {
                *s = qrow.iter().zip(cands.row(c)).map(|(x, y)| x * y).sum();
            }
            order.clear();
            order.extend(0..cands.rows());
            order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
            for (rank, &c) in order.iter().take(max_k.min(order.len())).enumerate() {
                let hit = if exact_pair { c == q } else { group[c] == group[q] };
                if hit {
                    first_hit[q] = rank;
                    break;
                }
            }
        }
        first_hit
    };

    let pct_at = |first_hit: &[usize], k: usize| -> f64 {
        let hits = first_hit.iter().filter(|&&r| r < k).count();
        100.0 * hits as f64 / first_hit.len() as f64
    };

    let text_queries = count_hits(&u_l, &u_v);
    let image_queries = count_hits(&u_v, &u_l);
    let mut ir_at = BTreeMap::new();
    let mut tr_at = BTreeMap::new();
    for &k in ks {
        ir_at.insert(k, pct_at(&text_queries, k));
        tr_at.insert(k, pct_at(&image_queries, k));
    }
    let average = metrics_mean(&ir_at, &tr_at);
    Ok(RetrievalMetrics { ir_at, tr_at, average })
}

/// Scores cross-modal retrieval of a trained model on a held-out dataset.
pub fn retrieval_eval(
    ms: &ModelState,
    test: &MultimodalDataset,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    retrieval_eval_with(ms, test, ks, false)
}

pub fn retrieval_eval_with(
    ms: &ModelState,
    test: &MultimodalDataset,
    ks: &[usize],
    exact_pair: bool,
) -> Result<RetrievalMetrics> {
    if test.is_empty() {
        return Err(CovError::degenerate("retrieval_eval", "test set is empty"));
    }
    let (h_v, h_l) = model::forward_features(ms, &test.x_v, &test.x_l)?;
    let (z_v, z_l) = model::project(ms, &h_v, &h_l)?;
    retrieval_from_embeddings(&z_v, &z_l, &test.group, ks, exact_pair)
}

/// Multi-seed evaluation summary for one training set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub method: String,
    /// Training pair count.
    pub n: usize,
    pub per_seed: Vec<RetrievalMetrics>,
    /// Per-metric mean across seeds; its `average` is recomputed from the
    /// averaged metrics.
    pub mean: RetrievalMetrics,
    /// Sample standard deviation of the per-seed averages (0 for one seed).
    pub std_avg: f64,
}

/// Trains one downstream model under `seed` and scores it on `test`.
///
/// Each seed gets its own rng stream, so runs for different seeds are
/// independent and can execute in any order (or in parallel).
pub fn eval_single_seed(
    x_v: &Matrix,
    x_l: &Matrix,
    test: &MultimodalDataset,
    cfg: &EvalConfig,
    ms: &ModelState,
    seed: u64,
) -> Result<RetrievalMetrics> {
    cfg.validate()?;
    let mut rng = Rng::new(seed, 20);
    let trained = train_eval_model(x_v, x_l, cfg, ms, &mut rng)?;
    retrieval_eval_with(&trained, test, &cfg.ks, cfg.exact_pair)
}

/// Folds per-seed metrics into a report. `per_seed` must line up with the
/// seed order used to produce it and share the cutoff set `ks`.
pub fn aggregate_report(
    method: &str,
    n: usize,
    ks: &[usize],
    per_seed: Vec<RetrievalMetrics>,
) -> Result<RetrievalReport> {
    if per_seed.is_empty() {
        return Err(CovError::degenerate("aggregate_report", "no per-seed metrics"));
    }
    let mut mean = RetrievalMetrics::default();
    for &k in ks {
        let ir = per_seed.iter().map(|m| m.ir_at[&k]).sum::<f64>() / per_seed.len() as f64;
        let tr = per_seed.iter().map(|m| m.tr_at[&k]).sum::<f64>() / per_seed.len() as f64;
        mean.ir_at.insert(k, ir);
        mean.tr_at.insert(k, tr);
    }
    mean.average = metrics_mean(&mean.ir_at, &mean.tr_at);
    let std_avg = if per_seed.len() < 2 {
        0.0
    } else {
        let avg = per_seed.iter().map(|m| m.average).sum::<f64>() / per_seed.len() as f64;
        let var = per_seed.iter().map(|m| (m.average - avg).powi(2)).sum::<f64>()
            / (per_seed.len() - 1) as f64;
        var.sqrt()
    };
    Ok(RetrievalReport { method: method.to_string(), n, per_seed, mean, std_avg })
}

/// Trains and scores once per seed, then aggregates.
pub fn eval_set(
    method: &str,
    x_v: &Matrix,
    x_l: &Matrix,
    test: &MultimodalDataset,
    cfg: &EvalConfig,
    ms: &ModelState,
) -> Result<RetrievalReport> {
    cfg.validate()?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        per_seed.push(eval_single_seed(x_v, x_l, test, cfg, ms, seed)?);
    }
    aggregate_report(method, x_v.rows(), &cfg.ks, per_seed)
}

/// Evaluates one training set under several encoder families, each with its
/// own pretrained snapshot. Reports come back in the order requested.
pub fn cross_arch_eval(
    method: &str,
    x_v: &Matrix,
    x_l: &Matrix,
    test: &MultimodalDataset,
    families: &[ArchFamily],
    cfg: &EvalConfig,
    snapshots: &[(ArchFamily, ModelState)],
) -> Result<Vec<(ArchFamily, RetrievalReport)>> {
    let mut out = Vec::with_capacity(families.len());
    for &family in families {
        let ms = snapshots
            .iter()
            .find(|(f, _)| *f == family)
            .map(|(_, ms)| ms)
            .ok_or_else(|| {
                CovError::precondition(
                    "cross_arch_eval",
                    format!("no pretrained snapshot for family {}", family.name()),
                )
            })?;
        let report = eval_set(method, x_v, x_l, test, cfg, ms)?;
        out.push((family, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig, Split};
    use crate::model::{init_model, pretrain, save_model, ModelConfig};

    fn corpus() -> (MultimodalDataset, MultimodalDataset) {
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
        generate(&cfg).unwrap()
    }

    fn model_cfg() -> ModelConfig {
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

    fn pretrained(train: &MultimodalDataset, epochs: usize) -> ModelState {
        let mut rng = Rng::new(5, 0);
        let ms = init_model(&model_cfg(), &mut rng).unwrap();
        let opt = SgdMomentumState::uniform(0.05, 0.9, 0.0);
        pretrain(&ms, train, epochs, opt, 0.2, &mut rng).unwrap()
    }

    fn quick_eval_cfg() -> EvalConfig {
        EvalConfig { epochs: 6, lr_decay_epoch: 3, seeds: vec![1], ..EvalConfig::default() }
    }

    fn checkpoint_bytes(ms: &ModelState) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cvmm");
        save_model(ms, &path).unwrap();
        std::fs::read(&path).unwrap()
    }

    // ── Config ──────────────────────────────────────────────────────

    #[test]
    fn default_config_is_valid() {
        EvalConfig::default().validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let base = EvalConfig::default();
        let cases = vec![
            EvalConfig { batch: 1, ..base.clone() },
            EvalConfig { lr_encoders: 0.0, ..base.clone() },
            EvalConfig { lr_projections: -0.1, ..base.clone() },
            EvalConfig { momentum: 1.0, ..base.clone() },
            EvalConfig { weight_decay: -1e-4, ..base.clone() },
            EvalConfig { lr_decay_epoch: 100, ..base.clone() },
            EvalConfig { lr_decay_factor: 0.0, ..base.clone() },
            EvalConfig { tau: 0.0, ..base.clone() },
            EvalConfig { seeds: vec![], ..base.clone() },
            EvalConfig { ks: vec![], ..base.clone() },
            EvalConfig { ks: vec![1, 0], ..base.clone() },
        ];
        for (i, cfg) in cases.iter().enumerate() {
            assert!(matches!(cfg.validate(), Err(CovError::Config { .. })), "case {i}");
        }
        // Decay epoch only matters when training actually runs.
        EvalConfig { epochs: 0, ..base }.validate().unwrap();
    }

    // ── Training ────────────────────────────────────────────────────

    #[test]
    fn zero_epochs_return_the_reinitialized_state() {
        let (train, _) = corpus();
        let ms = pretrained(&train, 0);
        let cfg = EvalConfig { epochs: 0, ..EvalConfig::default() };
        let got = train_eval_model(&train.x_v, &train.x_l, &cfg, &ms, &mut Rng::new(4, 2)).unwrap();
        let expect = model::reinitialize(&ms, &mut Rng::new(4, 2)).unwrap();
        assert_eq!(checkpoint_bytes(&got), checkpoint_bytes(&expect));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (train, _) = corpus();
        let ms = pretrained(&train, 0);
        let cfg = quick_eval_cfg();
        let a = train_eval_model(&train.x_v, &train.x_l, &cfg, &ms, &mut Rng::new(4, 2)).unwrap();
        let b = train_eval_model(&train.x_v, &train.x_l, &cfg, &ms, &mut Rng::new(4, 2)).unwrap();
        assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
        let c = train_eval_model(&train.x_v, &train.x_l, &cfg, &ms, &mut Rng::new(5, 2)).unwrap();
        assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c));
    }

    #[test]
    fn training_rejects_degenerate_sets() {
        let (train, _) = corpus();
        let ms = pretrained(&train, 0);
        let cfg = quick_eval_cfg();
        let one_v = train.x_v.select_rows(&[0]);
        let one_l = train.x_l.select_rows(&[0]);
        assert!(matches!(
            train_eval_model(&one_v, &one_l, &cfg, &ms, &mut Rng::new(4, 2)),
            Err(CovError::Degenerate { .. })
        ));
    }

    #[test]
    fn more_training_data_does_not_hurt_retrieval() {
        let (train, test) = corpus();
        let ms = pretrained(&train, 40);
        let cfg = EvalConfig { epochs: 30, lr_decay_epoch: 15, seeds: vec![1], ..EvalConfig::default() };

        let full = train_eval_model(&train.x_v, &train.x_l, &cfg, &ms, &mut Rng::new(1, 20)).unwrap();
        let full_avg = retrieval_eval(&full, &test, &[1, 5, 10]).unwrap().average;

        let idx = Rng::new(2, 0).sample_without_replacement(train.len(), 8);
        let sub_v = train.x_v.select_rows(&idx);
        let sub_l = train.x_l.select_rows(&idx);
        let sub = train_eval_model(&sub_v, &sub_l, &cfg, &ms, &mut Rng::new(1, 20)).unwrap();
        let sub_avg = retrieval_eval(&sub, &test, &[1, 5, 10]).unwrap().average;

        assert!(
            full_avg >= sub_avg,
            "full train split scored {full_avg} below an 8-pair subset {sub_avg}"
        );
    }

    // ── Retrieval scoring ───────────────────────────────────────────

    #[test]
    fn perfectly_matched_embeddings_score_100() {
        let z = Matrix::identity(6);
        let group: Vec<u32> = (0..6).collect();
        let m = retrieval_from_embeddings(&z, &z, &group, &[1, 3], false).unwrap();
        for v in m.ir_at.values().chain(m.tr_at.values()) {
            assert_eq!(*v, 100.0);
        }
        assert_eq!(m.average, 100.0);
    }

    #[test]
    fn exhaustive_k_always_scores_100() {
        let mut rng = Rng::new(8, 0);
        let z_v = rng.normal_matrix(15, 4, 1.0);
        let z_l = rng.normal_matrix(15, 4, 1.0);
        let group: Vec<u32> = (0..15).map(|i| i % 3).collect();
        let m = retrieval_from_embeddings(&z_v, &z_l, &group, &[15], false).unwrap();
        assert_eq!(m.ir_at[&15], 100.0);
        assert_eq!(m.tr_at[&15], 100.0);
        // Larger than the candidate count behaves the same.
        let m = retrieval_from_embeddings(&z_v, &z_l, &group, &[40], false).unwrap();
        assert_eq!(m.average, 100.0);
    }

    #[test]
    fn random_embeddings_hit_at_the_group_rate() {
        // With independent random embeddings, the top-1 candidate is a
        // uniformly random item, so P(hit@1) = group_size / candidates.
        let mut rng = Rng::new(9, 0);
        let n = 400;
        let groups_count = 8;
        let group: Vec<u32> = (0..n).map(|i| (i % groups_count) as u32).collect();
        let mut total = 0.0;
        let trials = 30;
        for _ in 0..trials {
            let z_v = rng.normal_matrix(n, 6, 1.0);
            let z_l = rng.normal_matrix(n, 6, 1.0);
            let m = retrieval_from_embeddings(&z_v, &z_l, &group, &[1], false).unwrap();
            total += (m.ir_at[&1] + m.tr_at[&1]) / 2.0;
        }
        let observed = total / trials as f64 / 100.0;
        let p = 1.0 / groups_count as f64;
        let sigma = (p * (1.0 - p) / (2.0 * trials as f64 * n as f64)).sqrt();
        assert!(
            (observed - p).abs() < 3.0 * sigma + 1e-9,
            "hit rate {observed} vs expected {p} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn metrics_are_monotone_in_k() {
        let mut rng = Rng::new(10, 0);
        let z_v = rng.normal_matrix(60, 5, 1.0);
        let z_l = rng.normal_matrix(60, 5, 1.0);
        let group: Vec<u32> = (0..60).map(|i| i % 6).collect();
        let ks = [1, 2, 5, 10, 30, 60];
        let m = retrieval_from_embeddings(&z_v, &z_l, &group, &ks, false).unwrap();
        for w in ks.windows(2) {
            assert!(m.ir_at[&w[0]] <= m.ir_at[&w[1]]);
            assert!(m.tr_at[&w[0]] <= m.tr_at[&w[1]]);
        }
    }

    #[test]
    fn scoring_ignores_row_scale_and_joint_permutation() {
        let mut rng = Rng::new(11, 0);
        let z_v = rng.normal_matrix(30, 5, 1.0);
        let z_l = rng.normal_matrix(30, 5, 1.0);
        let group: Vec<u32> = (0..30).map(|i| i % 5).collect();
        let ks = [1, 5];
        let base = retrieval_from_embeddings(&z_v, &z_l, &group, &ks, false).unwrap();

        let mut scaled_v = z_v.clone();
        let mut scaled_l = z_l.clone();
        for i in 0..30 {
            let sv = 0.1 + rng.uniform();
            let sl = 0.1 + rng.uniform();
            for x in scaled_v.row_mut(i) {
                *x *= sv;
            }
            for x in scaled_l.row_mut(i) {
                *x *= sl;
            }
        }
        let scaled = retrieval_from_embeddings(&scaled_v, &scaled_l, &group, &ks, false).unwrap();
        for &k in &ks {
            assert!((base.ir_at[&k] - scaled.ir_at[&k]).abs() < 1e-9);
            assert!((base.tr_at[&k] - scaled.tr_at[&k]).abs() < 1e-9);
        }

        let mut perm: Vec<usize> = (0..30).collect();
        rng.shuffle(&mut perm);
        let pv = z_v.select_rows(&perm);
        let pl = z_l.select_rows(&perm);
        let pg: Vec<u32> = perm.iter().map(|&i| group[i]).collect();
        let permuted = retrieval_from_embeddings(&pv, &pl, &pg, &ks, false).unwrap();
        for &k in &ks {
            assert!((base.ir_at[&k] - permuted.ir_at[&k]).abs() < 1e-9);
            assert!((base.tr_at[&k] - permuted.tr_at[&k]).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_pair_mode_is_stricter_than_group_mode() {
        // Image 1 shares a group with pair 0 and sits closer to text 0 than
        // image 0 does, so group scoring hits at K = 1 but exact does not.
        let z_v = Matrix::from_rows(&[
            vec![1.0, 0.2],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let z_l = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.1],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let group = vec![0, 0, 1];
        let grouped = retrieval_from_embeddings(&z_v, &z_l, &group, &[1], false).unwrap();
        let exact = retrieval_from_embeddings(&z_v, &z_l, &group, &[1], true).unwrap();
        assert_eq!(grouped.ir_at[&1], 100.0);
        assert!(exact.ir_at[&1] < 100.0);
    }

    #[test]
    fn ties_resolve_to_the_lower_index() {
        // Both images are identical, so every text query ties; the lower
        // index wins, which is the exact pair only for query 0.
        let z_v = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let z_l = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let group = vec![0, 1];
        let m = retrieval_from_embeddings(&z_v, &z_l, &group, &[1], false).unwrap();
        assert_eq!(m.ir_at[&1], 50.0);
        assert_eq!(m.tr_at[&1], 50.0);
    }

    #[test]
    fn zero_norm_embeddings_are_rejected() {
        let z_v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let z_l = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            retrieval_from_embeddings(&z_v, &z_l, &[0, 1], &[1], false),
            Err(CovError::Domain { .. })
        ));
    }

    #[test]
    fn retrieval_on_a_trained_model_beats_chance() {
        let (train, test) = corpus();
        let ms = pretrained(&train, 60);
        let m = retrieval_eval(&ms, &test, &[1, 5, 10]).unwrap();
        // 8 groups of 5 in a 40-pair test split: chance R@1 is 12.5%.
        assert!(m.average > 30.0, "trained retrieval too weak: {}", m.average);
        assert_eq!(test.split, Split::Test);
    }

    // ── Aggregation ─────────────────────────────────────────────────

    #[test]
    fn report_aggregation_matches_a_direct_recomputation() {
        let (train, test) = corpus();
        let ms = pretrained(&train, 10);
        let cfg = EvalConfig {
            epochs: 3,
            lr_decay_epoch: 1,
            seeds: vec![3, 4, 5],
            ..EvalConfig::default()
        };
        let report = eval_set("random", &train.x_v, &train.x_l, &test, &cfg, &ms).unwrap();
        assert_eq!(report.per_seed.len(), 3);
        assert_eq!(report.method, "random");
        assert_eq!(report.n, train.len());

        for &k in &cfg.ks {
            let ir = report.per_seed.iter().map(|m| m.ir_at[&k]).sum::<f64>() / 3.0;
            assert_eq!(report.mean.ir_at[&k], ir);
        }
        let six: Vec<f64> = report
            .mean
            .ir_at
            .values()
            .chain(report.mean.tr_at.values())
            .copied()
            .collect();
        let expect = six.iter().sum::<f64>() / six.len() as f64;
        assert_eq!(report.mean.average, expect);

        let avg = report.per_seed.iter().map(|m| m.average).sum::<f64>() / 3.0;
        let var = report.per_seed.iter().map(|m| (m.average - avg).powi(2)).sum::<f64>() / 2.0;
        assert_eq!(report.std_avg, var.sqrt());

        let single = EvalConfig { seeds: vec![3], ..cfg.clone() };
        let lone = eval_set("random", &train.x_v, &train.x_l, &test, &single, &ms).unwrap();
        assert_eq!(lone.std_avg, 0.0);
        // Per-seed runs use independent streams, so seed 3 scores the same
        // alone as inside the longer list.
        assert_eq!(lone.per_seed[0].average, report.per_seed[0].average);
    }

    // ── Cross-architecture evaluation ───────────────────────────────

    #[test]
    fn cross_arch_matches_single_family_runs_and_checks_snapshots() {
        let (train, test) = corpus();
        let tanh_ms = pretrained(&train, 10);
        let mut rng = Rng::new(6, 0);
        let lin_cfg = ModelConfig { family: ArchFamily::Linear, ..model_cfg() };
        let lin_init = init_model(&lin_cfg, &mut rng).unwrap();
        let lin_ms =
            pretrain(&lin_init, &train, 10, SgdMomentumState::uniform(0.05, 0.9, 0.0), 0.2, &mut rng)
                .unwrap();

        let cfg = EvalConfig { epochs: 2, lr_decay_epoch: 1, seeds: vec![1, 2], ..EvalConfig::default() };
        let snaps = vec![
            (ArchFamily::MlpTanh, tanh_ms.clone()),
            (ArchFamily::Linear, lin_ms),
        ];
        let set_v = train.x_v.select_rows(&(0..16).collect::<Vec<_>>());
        let set_l = train.x_l.select_rows(&(0..16).collect::<Vec<_>>());

        let reports = cross_arch_eval(
            "covmatch",
            &set_v,
            &set_l,
            &test,
            &[ArchFamily::Linear, ArchFamily::MlpTanh],
            &cfg,
            &snaps,
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].0, ArchFamily::Linear);
        assert_eq!(reports[1].0, ArchFamily::MlpTanh);

        let direct = eval_set("covmatch", &set_v, &set_l, &test, &cfg, &tanh_ms).unwrap();
        assert_eq!(reports[1].1.mean.average, direct.mean.average);
        assert_eq!(reports[1].1.std_avg, direct.std_avg);

        assert!(matches!(
            cross_arch_eval(
                "covmatch",
                &set_v,
                &set_l,
                &test,
                &[ArchFamily::MlpGelu],
                &cfg,
                &snaps
            ),
            Err(CovError::Precondition { .. })
        ));
    }
}
