//! Toy paired-modality data with latent shared semantics.
//!
//! Each group owns a latent center; every pair in the group observes the same
//! jittered latent point through two fixed random linear maps plus Gaussian
//! noise. The construction gives the corpus a ground-truth low-rank
//! cross-covariance (rank <= latent_dim), which downstream tests lean on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CovError, Result};
use crate::numerics::{Matrix, Rng};

/// Which half of the corpus a dataset is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Paired two-modality samples with group labels; the group stands in for
/// "these pairs describe the same thing" and is the retrieval ground truth.
#[derive(Clone, Debug)]
pub struct MultimodalDataset {
    /// M x p_v raw first-modality vectors ("images").
    pub x_v: Matrix,
    /// M x p_l raw second-modality vectors ("texts").
    pub x_l: Matrix,
    /// Per-sample group label in [0, n_groups).
    pub group: Vec<u32>,
    pub n_groups: usize,
    pub split: Split,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.x_v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_split(mut self, split: Split) -> MultimodalDataset {
        self.split = split;
        self
    }
}

/// Spread of the per-pair latent jitter around its group center.
pub const LATENT_JITTER: f64 = 0.5;

/// Generation parameters. `Default` is the desk-scale corpus used across the
/// test suites and the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub m_train: usize,
    pub m_test: usize,
    pub n_groups: usize,
    pub latent_dim: usize,
    pub p_v: usize,
    pub p_l: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            m_train: 2000,
            m_test: 500,
            n_groups: 20,
            latent_dim: 8,
            p_v: 32,
            p_l: 24,
            noise_sigma: 0.3,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups < 2 {
            return Err(CovError::Config(format!("n_groups = {} must be >= 2", self.n_groups)));
        }
        if self.m_train < self.n_groups || self.m_test < self.n_groups {
            return Err(CovError::Config(format!(
                "every group must appear in every split: m_train = {}, m_test = {}, n_groups = {}",
                self.m_train, self.m_test, self.n_groups
            )));
        }
        if self.latent_dim < 1 {
            return Err(CovError::Config("latent_dim must be >= 1".into()));
        }
        if self.p_v < 1 || self.p_l < 1 {
            return Err(CovError::Config(format!(
                "raw dims must be >= 1, got p_v = {}, p_l = {}",
                self.p_v, self.p_l
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CovError::Config(format!(
                "noise_sigma = {} must be >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

// RNG stream layout for generation. The structural draws (centers, mixing
// maps) are shared by both splits; each split then samples on its own stream.
const STREAM_STRUCTURE: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

/// Generates the train and test splits of one corpus.
///
/// Both splits share group centers and mixing maps and differ only in their
/// sampled latent jitter and noise. Deterministic under `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<(MultimodalDataset, MultimodalDataset)> {
    cfg.validate()?;
    let mut structure = Rng::new(cfg.seed, STREAM_STRUCTURE);
    let centers = structure.normal_matrix(cfg.n_groups, cfg.latent_dim, 1.0);
    let mix_scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let mix_v = structure.normal_matrix(cfg.p_v, cfg.latent_dim, mix_scale);
    let mix_l = structure.normal_matrix(cfg.p_l, cfg.latent_dim, mix_scale);

    let train = sample_split(
        cfg,
        cfg.m_train,
        &centers,
        &mix_v,
        &mix_l,
        Rng::new(cfg.seed, STREAM_TRAIN),
        Split::Train,
    );
    let test = sample_split(
        cfg,
        cfg.m_test,
        &centers,
        &mix_v,
        &mix_l,
        Rng::new(cfg.seed, STREAM_TEST),
        Split::Test,
    );
    Ok((train, test))
}

fn sample_split(
    cfg: &GenConfig,
    m: usize,
    centers: &Matrix,
    mix_v: &Matrix,
    mix_l: &Matrix,
    mut rng: Rng,
    split: Split,
) -> MultimodalDataset {
    // One forced sample per group guarantees coverage; the rest is uniform.
    let mut group: Vec<u32> = (0..cfg.n_groups as u32).collect();
    for _ in cfg.n_groups..m {
        group.push(rng.below(cfg.n_groups) as u32);
    }
    rng.shuffle(&mut group);

    let mut x_v = Matrix::zeros(m, cfg.p_v);
    let mut x_l = Matrix::zeros(m, cfg.p_l);
    let mut latent = vec![0.0; cfg.latent_dim];
    for i in 0..m {
        let center = centers.row(group[i] as usize);
        for (z, c) in latent.iter_mut().zip(center) {
            *z = c + LATENT_JITTER * rng.normal();
        }
        for j in 0..cfg.p_v {
            let signal: f64 = mix_v.row(j).iter().zip(&latent).map(|(a, z)| a * z).sum();
            x_v.set(i, j, signal + cfg.noise_sigma * rng.normal());
        }
        for j in 0..cfg.p_l {
            let signal: f64 = mix_l.row(j).iter().zip(&latent).map(|(a, z)| a * z).sum();
            x_l.set(i, j, signal + cfg.noise_sigma * rng.normal());
        }
    }
    MultimodalDataset { x_v, x_l, group, n_groups: cfg.n_groups, split }
}

// ── Binary container ────────────────────────────────────────────────

// Layout: magic "CVMD" | payload | crc32(payload) as u32 LE, where
// payload = version u32 | m u64 | p_v u64 | p_l u64 | n_groups u64
//         | x_v rows f64 LE | x_l rows f64 LE | tags u32 LE.
// All integers little-endian. Synthetic-set files reuse the container with
// n_groups = 0 and origin indices in the tag array.

const MAGIC: &[u8; 4] = b"CVMD";
const VERSION: u32 = 1;

pub(crate) struct RawCvmd {
    pub x_v: Matrix,
    pub x_l: Matrix,
    pub tags: Vec<u32>,
    pub n_groups: u64,
}

pub(crate) fn write_cvmd(
    path: &Path,
    x_v: &Matrix,
    x_l: &Matrix,
    tags: &[u32],
    n_groups: u64,
) -> Result<()> {
    let m = x_v.rows();
    assert_eq!(x_l.rows(), m, "modality row counts must agree");
    assert_eq!(tags.len(), m, "one tag per row");

    let mut payload = Vec::with_capacity(36 + 8 * m * (x_v.cols() + x_l.cols()) + 4 * m);
    payload.extend_from_slice(&VERSION.to_le_bytes());
    payload.extend_from_slice(&(m as u64).to_le_bytes());
    payload.extend_from_slice(&(x_v.cols() as u64).to_le_bytes());
    payload.extend_from_slice(&(x_l.cols() as u64).to_le_bytes());
    payload.extend_from_slice(&n_groups.to_le_bytes());
    for v in x_v.as_slice() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for v in x_l.as_slice() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for t in tags {
        payload.extend_from_slice(&t.to_le_bytes());
    }

    let crc = crc32fast::hash(&payload);
    let mut bytes = Vec::with_capacity(4 + payload.len() + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_cvmd(path: &Path) -> Result<RawCvmd> {
    let display = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < 4 + 36 + 4 {
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
    let m = u64::from_le_bytes(payload[4..12].try_into().unwrap());
    let p_v = u64::from_le_bytes(payload[12..20].try_into().unwrap());
    let p_l = u64::from_le_bytes(payload[20..28].try_into().unwrap());
    let n_groups = u64::from_le_bytes(payload[28..36].try_into().unwrap());

    let expect = 36u64
        .checked_add(m.checked_mul(8 * (p_v + p_l) + 4).ok_or_else(|| {
            CovError::format(&display, "size fields overflow")
        })?)
        .ok_or_else(|| CovError::format(&display, "size fields overflow"))?;
    if payload.len() as u64 != expect {
        return Err(CovError::format(
            &display,
            format!("payload length {} does not match header ({expect})", payload.len()),
        ));
    }

    let (m, p_v, p_l) = (m as usize, p_v as usize, p_l as usize);
    let mut off = 36;
    let mut read_block = |rows: usize, cols: usize| -> Matrix {
        let mut mat = Matrix::zeros(rows, cols);
        for v in mat.as_mut_slice() {
            *v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
            off += 8;
        }
        mat
    };
    let x_v = read_block(m, p_v);
    let x_l = read_block(m, p_l);
    let mut tags = Vec::with_capacity(m);
    for i in 0..m {
        let at = off + 4 * i;
        tags.push(u32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
    }
    Ok(RawCvmd { x_v, x_l, tags, n_groups })
}

/// Writes a dataset to the binary container. The split tag is not part of the
/// format; pairing files to splits is the caller's bookkeeping (the manifest
/// records it).
pub fn save(ds: &MultimodalDataset, path: &Path) -> Result<()> {
    write_cvmd(path, &ds.x_v, &ds.x_l, &ds.group, ds.n_groups as u64)
}

/// Reads a dataset back; bitwise identical to what was saved. The returned
/// split is `Train`; retag with [`MultimodalDataset::with_split`] as needed.
pub fn load(path: &Path) -> Result<MultimodalDataset> {
    let display = path.display().to_string();
    let raw = read_cvmd(path)?;
    if raw.n_groups == 0 {
        return Err(CovError::format(
            &display,
            "n_groups = 0: this is a synthetic-set file, not a dataset",
        ));
    }
    if let Some(bad) = raw.tags.iter().find(|&&g| u64::from(g) >= raw.n_groups) {
        return Err(CovError::format(
            &display,
            format!("group label {bad} out of range (n_groups = {})", raw.n_groups),
        ));
    }
    Ok(MultimodalDataset {
        x_v: raw.x_v,
        x_l: raw.x_l,
        group: raw.tags,
        n_groups: raw.n_groups as usize,
        split: Split::Train,
    })
}

/// Sidecar describing how a pair of dataset files was produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: GenConfig,
    pub train_file: String,
    pub test_file: String,
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CovError::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CovError::format(path.display().to_string(), e.to_string()))
}
