//! Two-tower encoder stack with linear projection heads.
//!
//! Each modality owns an encoder (linear or one-hidden-layer MLP) and a
//! projection matrix onto the shared embedding space. Training state is a
//! value type: every operation takes the old state and returns a new one, so
//! the distillation loop can hold snapshots freely.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::MultimodalDataset;
use crate::error::{CovError, Result};
use crate::numerics::{matmul, Matrix, Rng};
use crate::objectives;

// ── Activations ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x * normal_cdf(x),
        }
    }

    /// Exact derivative; the gelu branch uses the Gaussian CDF/PDF rather
    /// than a tanh approximation so finite-difference checks close tightly.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
        }
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// ── Encoders ────────────────────────────────────────────────────────

/// One modality's encoder parameters.
#[derive(Clone, Debug)]
pub enum EncoderParams {
    /// h = x W^T + b with W of shape d x p.
    Linear { w: Matrix, b: Vec<f64> },
    /// h = act(x W1^T + b1) W2^T + b2 with W1 hidden x p, W2 d x hidden.
    Mlp1 { activation: Activation, w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64> },
}

/// Intermediate values one forward pass produces that backprop reuses.
pub enum EncoderCache {
    Linear,
    Mlp1 {
        /// Pre-activation hidden values, n x hidden.
        pre: Matrix,
        /// Activated hidden values, n x hidden.
        act: Matrix,
    },
}

/// Parameter gradients in the same tensor layout as [`EncoderParams`].
#[derive(Clone, Debug)]
pub(crate) enum EncoderGrads {
    Linear { w: Matrix, b: Vec<f64> },
    Mlp1 { w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64> },
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        match self {
            EncoderParams::Linear { w, .. } => w.cols(),
            EncoderParams::Mlp1 { w1, .. } => w1.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EncoderParams::Linear { w, .. } => w.rows(),
            EncoderParams::Mlp1 { w2, .. } => w2.rows(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, EncoderCache)> {
        if x.cols() != self.input_dim() {
            return Err(CovError::shape(
                "encoder_forward",
                format!("input has {} columns, encoder expects {}", x.cols(), self.input_dim()),
            ));
        }
        match self {
            EncoderParams::Linear { w, b } => {
                let mut h = matmul(x, &w.transpose())?;
                add_bias_rows(&mut h, b);
                Ok((h, EncoderCache::Linear))
            }
            EncoderParams::Mlp1 { activation, w1, b1, w2, b2 } => {
                let mut pre = matmul(x, &w1.transpose())?;
                add_bias_rows(&mut pre, b1);
                let mut act = pre.clone();
                for v in act.as_mut_slice() {
                    *v = activation.value(*v);
                }
                let mut h = matmul(&act, &w2.transpose())?;
                add_bias_rows(&mut h, b2);
                Ok((h, EncoderCache::Mlp1 { pre, act }))
            }
        }
    }

    /// Gradient of a loss on the inputs, given its gradient on the features.
    pub fn grad_input(&self, upstream: &Matrix, cache: &EncoderCache) -> Result<Matrix> {
        match (self, cache) {
            (EncoderParams::Linear { w, .. }, EncoderCache::Linear) => matmul(upstream, w),
            (EncoderParams::Mlp1 { activation, w1, w2, .. }, EncoderCache::Mlp1 { pre, .. }) => {
                let mut da = matmul(upstream, w2)?;
                for (g, p) in da.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= activation.derivative(*p);
                }
                matmul(&da, w1)
            }
            _ => Err(CovError::shape("encoder_grad_input", "cache does not match encoder arch")),
        }
    }

    /// Gradients of a loss on all parameter tensors.
    pub(crate) fn grad_params(
        &self,
        x: &Matrix,
        upstream: &Matrix,
        cache: &EncoderCache,
    ) -> Result<EncoderGrads> {
        match (self, cache) {
            (EncoderParams::Linear { .. }, EncoderCache::Linear) => Ok(EncoderGrads::Linear {
                w: matmul(&upstream.transpose(), x)?,
                b: col_sums(upstream),
            }),
            (EncoderParams::Mlp1 { activation, w2, .. }, EncoderCache::Mlp1 { pre, act }) => {
                let mut da = matmul(upstream, w2)?;
                for (g, p) in da.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= activation.derivative(*p);
                }
                Ok(EncoderGrads::Mlp1 {
                    w1: matmul(&da.transpose(), x)?,
                    b1: col_sums(&da),
                    w2: matmul(&upstream.transpose(), act)?,
                    b2: col_sums(upstream),
                })
            }
            _ => Err(CovError::shape("encoder_grad_params", "cache does not match encoder arch")),
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            EncoderParams::Linear { w, b } => vec![w.as_slice(), b.as_slice()],
            EncoderParams::Mlp1 { w1, b1, w2, b2, .. } => {
                vec![w1.as_slice(), b1.as_slice(), w2.as_slice(), b2.as_slice()]
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            EncoderParams::Linear { w, b } => vec![w.as_mut_slice(), b.as_mut_slice()],
            EncoderParams::Mlp1 { w1, b1, w2, b2, .. } => {
                vec![w1.as_mut_slice(), b1.as_mut_slice(), w2.as_mut_slice(), b2.as_mut_slice()]
            }
        }
    }
}

impl EncoderGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            EncoderGrads::Linear { w, b } => vec![w.as_slice(), b.as_slice()],
            EncoderGrads::Mlp1 { w1, b1, w2, b2 } => {
                vec![w1.as_slice(), b1.as_slice(), w2.as_slice(), b2.as_slice()]
            }
        }
    }
}

fn add_bias_rows(m: &mut Matrix, b: &[f64]) {
    for i in 0..m.rows() {
        for (v, bias) in m.row_mut(i).iter_mut().zip(b) {
            *v += bias;
        }
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, v) in out.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    out
}

// ── Model configuration and state ───────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchFamily {
    Linear,
    MlpTanh,
    MlpGelu,
}

impl ArchFamily {
    pub const ALL: [ArchFamily; 3] = [ArchFamily::Linear, ArchFamily::MlpTanh, ArchFamily::MlpGelu];

    pub fn name(self) -> &'static str {
        match self {
            ArchFamily::Linear => "linear",
            ArchFamily::MlpTanh => "mlp_tanh",
            ArchFamily::MlpGelu => "mlp_gelu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Language,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: ArchFamily,
    /// Hidden width for the MLP families; ignored by the linear family.
    pub hidden: usize,
    pub p_v: usize,
    pub p_l: usize,
    pub d_v: usize,
    pub d_l: usize,
    /// Shared embedding dimension of the projection heads.
    pub z: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            family: ArchFamily::MlpTanh,
            hidden: 64,
            p_v: 32,
            p_l: 24,
            d_v: 16,
            d_l: 16,
            z: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("p_v", self.p_v),
            ("p_l", self.p_l),
            ("d_v", self.d_v),
            ("d_l", self.d_l),
            ("z", self.z),
        ] {
            if v == 0 {
                return Err(CovError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Snapshot {
    theta_v: EncoderParams,
    theta_l: EncoderParams,
}

/// Full trainable state: both encoders, both projections, the frozen
/// pretrained encoder snapshot, and an update counter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub theta_v: EncoderParams,
    pub theta_l: EncoderParams,
    /// z x d_v projection onto the shared space.
    pub g_v: Matrix,
    /// z x d_l projection onto the shared space.
    pub g_l: Matrix,
    pretrained: Option<Snapshot>,
    pub step: u64,
}

impl ModelState {
    pub fn has_pretrained_snapshot(&self) -> bool {
        self.pretrained.is_some()
    }

    /// The frozen pretrained encoders, if [`pretrain`] has run.
    pub fn pretrained_encoders(&self) -> Option<(&EncoderParams, &EncoderParams)> {
        self.pretrained.as_ref().map(|s| (&s.theta_v, &s.theta_l))
    }

    pub fn embed_dim(&self) -> usize {
        self.g_v.rows()
    }

    fn param_tensors(&self) -> Vec<&[f64]> {
        let mut out = self.theta_v.tensors();
        out.extend(self.theta_l.tensors());
        out.push(self.g_v.as_slice());
        out.push(self.g_l.as_slice());
        out
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let ModelState { theta_v, theta_l, g_v, g_l, .. } = self;
        let mut out = theta_v.tensors_mut();
        out.extend(theta_l.tensors_mut());
        out.push(g_v.as_mut_slice());
        out.push(g_l.as_mut_slice());
        out
    }

    fn encoder_tensor_count(&self) -> usize {
        self.theta_v.tensors().len() + self.theta_l.tensors().len()
    }
}

fn init_encoder(family: ArchFamily, input: usize, output: usize, hidden: usize, rng: &mut Rng) -> EncoderParams {
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    match family {
        ArchFamily::Linear => EncoderParams::Linear {
            w: rng.normal_matrix(output, input, fan(input)),
            b: vec![0.0; output],
        },
        ArchFamily::MlpTanh | ArchFamily::MlpGelu => EncoderParams::Mlp1 {
            activation: if family == ArchFamily::MlpTanh { Activation::Tanh } else { Activation::Gelu },
            w1: rng.normal_matrix(hidden, input, fan(input)),
            b1: vec![0.0; hidden],
            w2: rng.normal_matrix(output, hidden, fan(hidden)),
            b2: vec![0.0; output],
        },
    }
}

/// Fresh random model: fan-in scaled Gaussian weights, zero biases,
/// fan-in scaled Gaussian projections. No pretrained snapshot yet.
pub fn init_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelState> {
    cfg.validate()?;
    let theta_v = init_encoder(cfg.family, cfg.p_v, cfg.d_v, cfg.hidden, rng);
    let theta_l = init_encoder(cfg.family, cfg.p_l, cfg.d_l, cfg.hidden, rng);
    let g_v = rng.normal_matrix(cfg.z, cfg.d_v, 1.0 / (cfg.d_v as f64).sqrt());
    let g_l = rng.normal_matrix(cfg.z, cfg.d_l, 1.0 / (cfg.d_l as f64).sqrt());
    Ok(ModelState { theta_v, theta_l, g_v, g_l, pretrained: None, step: 0 })
}

// ── Optimizer ───────────────────────────────────────────────────────

/// SGD with momentum and L2 weight decay, one velocity buffer per parameter
/// tensor. Update per entry: d = g + wd * p; v = momentum * v + d;
/// p -= lr * v. Encoders and projections may use different learning rates.
#[derive(Clone, Debug)]
pub struct SgdMomentumState {
    pub lr_encoders: f64,
    pub lr_projections: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<Vec<f64>>>,
}

impl SgdMomentumState {
    pub fn new(lr_encoders: f64, lr_projections: f64, momentum: f64, weight_decay: f64) -> SgdMomentumState {
        SgdMomentumState { lr_encoders, lr_projections, momentum, weight_decay, velocity: None }
    }

    /// Same learning rate for every tensor.
    pub fn uniform(lr: f64, momentum: f64, weight_decay: f64) -> SgdMomentumState {
        SgdMomentumState::new(lr, lr, momentum, weight_decay)
    }

    /// Drops all velocity buffers; the next step starts from zero momentum.
    pub fn reset_velocity(&mut self) {
        self.velocity = None;
    }

    /// Multiplies both learning rates, for step-decay schedules.
    pub fn scale_learning_rates(&mut self, factor: f64) {
        self.lr_encoders *= factor;
        self.lr_projections *= factor;
    }

    fn velocity_for(&mut self, sizes: &[usize]) -> &mut Vec<Vec<f64>> {
        let vel = self
            .velocity
            .get_or_insert_with(|| sizes.iter().map(|&n| vec![0.0; n]).collect());
        assert_eq!(vel.len(), sizes.len(), "optimizer reused across differently shaped models");
        for (buf, &n) in vel.iter_mut().zip(sizes) {
            assert_eq!(buf.len(), n, "optimizer reused across differently shaped models");
        }
        vel
    }
}

// ── Forward / backward operations ───────────────────────────────────

/// Encoder features for both modalities.
pub fn forward_features(ms: &ModelState, x_v: &Matrix, x_l: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((ms.theta_v.forward(x_v)?, ms.theta_l.forward(x_l)?))
}

/// Projections of encoder features onto the shared space, z = h G^T.
pub fn project(ms: &ModelState, h_v: &Matrix, h_l: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((matmul(h_v, &ms.g_v.transpose())?, matmul(h_l, &ms.g_l.transpose())?))
}

/// Chains a gradient on encoder features back to the raw inputs, treating
/// the encoder parameters as constants.
pub fn backprop_to_inputs(
    ms: &ModelState,
    modality: Modality,
    upstream_grad_on_h: &Matrix,
    x: &Matrix,
) -> Result<Matrix> {
    let enc = match modality {
        Modality::Vision => &ms.theta_v,
        Modality::Language => &ms.theta_l,
    };
    if upstream_grad_on_h.rows() != x.rows() || upstream_grad_on_h.cols() != enc.output_dim() {
        return Err(CovError::shape(
            "backprop_to_inputs",
            format!(
                "upstream grad is {}x{}, expected {}x{}",
                upstream_grad_on_h.rows(),
                upstream_grad_on_h.cols(),
                x.rows(),
                enc.output_dim()
            ),
        ));
    }
    let (_, cache) = enc.forward_cached(x)?;
    enc.grad_input(upstream_grad_on_h, &cache)
}

/// Batch InfoNCE under the current model, value only.
pub fn contrastive_loss_value(ms: &ModelState, x_v: &Matrix, x_l: &Matrix, tau: f64) -> Result<f64> {
    let (h_v, h_l) = forward_features(ms, x_v, x_l)?;
    let (z_v, z_l) = project(ms, &h_v, &h_l)?;
    Ok(objectives::infonce(&z_v, &z_l, tau, false)?.value)
}

struct FullGrads {
    loss: f64,
    enc_v: EncoderGrads,
    enc_l: EncoderGrads,
    g_v: Matrix,
    g_l: Matrix,
}

fn infonce_full_grads(ms: &ModelState, x_v: &Matrix, x_l: &Matrix, tau: f64) -> Result<FullGrads> {
    let (h_v, cache_v) = ms.theta_v.forward_cached(x_v)?;
    let (h_l, cache_l) = ms.theta_l.forward_cached(x_l)?;
    let (z_v, z_l) = project(ms, &h_v, &h_l)?;
    let nce = objectives::infonce(&z_v, &z_l, tau, false)?;

    let d_h_v = matmul(&nce.grad_v, &ms.g_v)?;
    let d_h_l = matmul(&nce.grad_l, &ms.g_l)?;
    Ok(FullGrads {
        loss: nce.value,
        enc_v: ms.theta_v.grad_params(x_v, &d_h_v, &cache_v)?,
        enc_l: ms.theta_l.grad_params(x_l, &d_h_l, &cache_l)?,
        g_v: matmul(&nce.grad_v.transpose(), &h_v)?,
        g_l: matmul(&nce.grad_l.transpose(), &h_l)?,
    })
}

/// One SGD-momentum step on batch InfoNCE. Freeze flags let callers train
/// only the projections (or only the encoders) without disturbing the
/// optimizer's tensor layout.
pub(crate) fn contrastive_step(
    ms: &ModelState,
    x_v: &Matrix,
    x_l: &Matrix,
    tau: f64,
    opt: &mut SgdMomentumState,
    update_encoders: bool,
    update_projections: bool,
) -> Result<(ModelState, f64)> {
    let grads = infonce_full_grads(ms, x_v, x_l, tau)?;
    if !grads.loss.is_finite() {
        return Err(CovError::numeric(
            "contrastive_step",
            format!("non-finite loss {} at step {}", grads.loss, ms.step),
        ));
    }

    let mut next = ms.clone();
    let enc_tensors = next.encoder_tensor_count();
    let mut grad_slices: Vec<&[f64]> = grads.enc_v.tensors();
    grad_slices.extend(grads.enc_l.tensors());
    grad_slices.push(grads.g_v.as_slice());
    grad_slices.push(grads.g_l.as_slice());

    let momentum = opt.momentum;
    let weight_decay = opt.weight_decay;
    let (lr_enc, lr_proj) = (opt.lr_encoders, opt.lr_projections);
    {
        let mut params = next.param_tensors_mut();
        let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
        let velocity = opt.velocity_for(&sizes);
        for (k, (p, g)) in params.iter_mut().zip(&grad_slices).enumerate() {
            let is_projection = k >= enc_tensors;
            if if is_projection { !update_projections } else { !update_encoders } {
                continue;
            }
            let lr = if is_projection { lr_proj } else { lr_enc };
            let buf = &mut velocity[k];
            for (idx, value) in p.iter_mut().enumerate() {
                let d = g[idx] + weight_decay * *value;
                buf[idx] = momentum * buf[idx] + d;
                *value -= lr * buf[idx];
            }
        }
    }
    next.step = ms.step + 1;

    if next.param_tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(CovError::numeric(
            "contrastive_step",
            format!("non-finite parameter after update at step {}", next.step),
        ));
    }
    Ok((next, grads.loss))
}

// ── Training-phase operations ───────────────────────────────────────

/// Trains encoders and projections on the full dataset with InfoNCE, then
/// freezes the final encoder weights as the pretrained snapshot.
///
/// Batches of up to 128 are drawn by reshuffling indices each epoch;
/// a trailing batch of a single sample is skipped (no negatives).
pub fn pretrain(
    ms: &ModelState,
    ds: &MultimodalDataset,
    epochs: usize,
    opt: SgdMomentumState,
    tau: f64,
    rng: &mut Rng,
) -> Result<ModelState> {
    if ds.is_empty() {
        return Err(CovError::degenerate("pretrain", "dataset is empty"));
    }
    let mut state = ms.clone();
    let mut opt = opt;
    let batch = ds.len().min(128);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let bx_v = ds.x_v.select_rows(chunk);
            let bx_l = ds.x_l.select_rows(chunk);
            let step = state.step;
            let (next, _) = contrastive_step(&state, &bx_v, &bx_l, tau, &mut opt, true, true)
                .map_err(|e| match e {
                    CovError::Numeric { detail, .. } => CovError::Training { step, detail },
                    other => other,
                })?;
            state = next;
        }
    }
    state.pretrained = Some(Snapshot {
        theta_v: state.theta_v.clone(),
        theta_l: state.theta_l.clone(),
    });
    Ok(state)
}

/// Exactly one SGD-momentum step on batch InfoNCE, updating encoders and
/// projections. The optimizer keeps its velocity across calls.
pub fn online_update(
    ms: &ModelState,
    batch_x_v: &Matrix,
    batch_x_l: &Matrix,
    tau: f64,
    opt: &mut SgdMomentumState,
) -> Result<ModelState> {
    contrastive_step(ms, batch_x_v, batch_x_l, tau, opt, true, true).map(|(state, _)| state)
}

/// Resets encoders to the pretrained snapshot, draws fresh random
/// projections, and zeroes the step counter.
pub fn reinitialize(ms: &ModelState, rng: &mut Rng) -> Result<ModelState> {
    let snap = ms.pretrained.as_ref().ok_or_else(|| {
        CovError::precondition("reinitialize", "no pretrained snapshot; run pretrain first")
    })?;
    let mut next = ms.clone();
    next.theta_v = snap.theta_v.clone();
    next.theta_l = snap.theta_l.clone();
    let (z, d_v, d_l) = (ms.g_v.rows(), ms.g_v.cols(), ms.g_l.cols());
    next.g_v = rng.normal_matrix(z, d_v, 1.0 / (d_v as f64).sqrt());
    next.g_l = rng.normal_matrix(z, d_l, 1.0 / (d_l as f64).sqrt());
    next.step = 0;
    Ok(next)
}

// ── Checkpoint file ─────────────────────────────────────────────────

// Layout: magic "CVMM" | payload | crc32(payload) u32 LE, where payload =
// version u32 | family u8 | hidden u64 | p_v u64 | p_l u64 | d_v u64
// | d_l u64 | z u64 | step u64 | has_snapshot u8 | tensors f64 LE in
// canonical order (theta_v, theta_l, g_v, g_l, then snapshot encoders).

const MAGIC: &[u8; 4] = b"CVMM";
const VERSION: u32 = 1;

fn family_of(ms: &ModelState) -> Result<ArchFamily> {
    let fam = |enc: &EncoderParams| match enc {
        EncoderParams::Linear { .. } => ArchFamily::Linear,
        EncoderParams::Mlp1 { activation: Activation::Tanh, .. } => ArchFamily::MlpTanh,
        EncoderParams::Mlp1 { activation: Activation::Gelu, .. } => ArchFamily::MlpGelu,
    };
    let (fv, fl) = (fam(&ms.theta_v), fam(&ms.theta_l));
    if fv != fl {
        return Err(CovError::precondition(
            "save_model",
            "checkpoint format assumes both towers share one arch family",
        ));
    }
    Ok(fv)
}

fn hidden_of(ms: &ModelState) -> usize {
    match &ms.theta_v {
        EncoderParams::Linear { .. } => 0,
        EncoderParams::Mlp1 { w1, .. } => w1.rows(),
    }
}

pub fn save_model(ms: &ModelState, path: &Path) -> Result<()> {
    let family = family_of(ms)?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&VERSION.to_le_bytes());
    payload.push(match family {
        ArchFamily::Linear => 0,
        ArchFamily::MlpTanh => 1,
        ArchFamily::MlpGelu => 2,
    });
    for dim in [
        hidden_of(ms) as u64,
        ms.theta_v.input_dim() as u64,
        ms.theta_l.input_dim() as u64,
        ms.theta_v.output_dim() as u64,
        ms.theta_l.output_dim() as u64,
        ms.g_v.rows() as u64,
    ] {
        payload.extend_from_slice(&dim.to_le_bytes());
    }
    payload.extend_from_slice(&ms.step.to_le_bytes());
    payload.push(u8::from(ms.pretrained.is_some()));
    for tensor in ms.param_tensors() {
        for v in tensor {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(snap) = &ms.pretrained {
        for tensor in snap.theta_v.tensors().into_iter().chain(snap.theta_l.tensors()) {
            for v in tensor {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let crc = crc32fast::hash(&payload);
    let mut bytes = Vec::with_capacity(4 + payload.len() + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let display = path.display().to_string();
    let bytes = fs::read(path)?;
    // Header through has_snapshot is 4 + 62 bytes, plus the trailing CRC.
    if bytes.len() < 4 + 62 + 4 {
        return Err(CovError::format(&display, "truncated file"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CovError::format(&display, "bad magic bytes"));
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(CovError::format(
            &display,
            format!("checksum mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"),
        ));
    }
    let version = u32::from_le_bytes(payload[0..4].try_into().unwrap());
    if version != VERSION {
        return Err(CovError::format(&display, format!("unsupported version {version}")));
    }
    let family = match payload[4] {
        0 => ArchFamily::Linear,
        1 => ArchFamily::MlpTanh,
        2 => ArchFamily::MlpGelu,
        other => return Err(CovError::format(&display, format!("unknown arch family {other}"))),
    };
    let mut dims = [0u64; 6];
    for (k, d) in dims.iter_mut().enumerate() {
        let at = 5 + 8 * k;
        *d = u64::from_le_bytes(payload[at..at + 8].try_into().unwrap());
    }
    let [hidden, p_v, p_l, d_v, d_l, z] = dims.map(|d| d as usize);
    let step = u64::from_le_bytes(payload[53..61].try_into().unwrap());
    let has_snapshot = match payload[61] {
        0 => false,
        1 => true,
        other => return Err(CovError::format(&display, format!("bad snapshot flag {other}"))),
    };

    let cfg = ModelConfig {
        family,
        hidden: hidden.max(1),
        p_v,
        p_l,
        d_v,
        d_l,
        z,
    };
    cfg.validate().map_err(|e| CovError::format(&display, e.to_string()))?;
    if family != ArchFamily::Linear && hidden == 0 {
        return Err(CovError::format(&display, "mlp checkpoint with hidden = 0"));
    }

    // Zero-filled state with the right shapes, then scatter the tensors.
    let mut seed = Rng::new(0, 0);
    let mut ms = init_model(&cfg, &mut seed)?;
    ms.step = step;
    if has_snapshot {
        ms.pretrained = Some(Snapshot {
            theta_v: ms.theta_v.clone(),
            theta_l: ms.theta_l.clone(),
        });
    }

    let main_len: usize = ms.param_tensors().iter().map(|t| t.len()).sum();
    let snap_len: usize = if has_snapshot {
        let snap = ms.pretrained.as_ref().unwrap();
        snap.theta_v.tensors().iter().map(|t| t.len()).sum::<usize>()
            + snap.theta_l.tensors().iter().map(|t| t.len()).sum::<usize>()
    } else {
        0
    };
    let expect = 62 + 8 * (main_len + snap_len);
    if payload.len() != expect {
        return Err(CovError::format(
            &display,
            format!("payload length {} does not match header ({expect})", payload.len()),
        ));
    }

    let mut off = 62;
    let mut fill = |tensors: Vec<&mut [f64]>| {
        for t in tensors {
            for v in t {
                *v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
    };
    fill(ms.param_tensors_mut());
    if let Some(snap) = &mut ms.pretrained {
        let mut tensors = snap.theta_v.tensors_mut();
        tensors.extend(snap.theta_l.tensors_mut());
        fill(tensors);
    }
    Ok(ms)
}
