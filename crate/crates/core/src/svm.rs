//! Binary linear SVM: L2-regularized hinge loss solved by dual coordinate
//! descent.
//!
//! The bias is learned as the weight of an extra constant feature (value 1),
//! so it is regularized together with `w`. Training works on the Gram
//! matrix of the examples (memory `O(n^2)`), which keeps each coordinate
//! step `O(n)` independent of the feature dimension. Class index 0 is the negative
//! side (-1) and class index 1 the positive side (+1).

use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureVector;

const MAGIC: &[u8; 4] = b"OSVM";
const VERSION: u16 = 1;
const BIAS_FEATURE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training set needs examples of both classes")]
    SingleClass,
    #[error("{examples} examples but {labels} labels")]
    LabelCount { examples: usize, labels: usize },
    #[error("class index {0} is not 0 or 1")]
    BadLabel(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("fingerprint mismatch: model expects {expected}, got {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("unsupported model version {0}")]
    Version(u16),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub c: f64,
    /// Stop when the duality gap falls below `tol` times the primal value.
    pub tol: f64,
    /// Maximum number of epochs.
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-4,
            max_iter: 10_000,
            seed: 0,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<(), SvmError> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(SvmError::InvalidConfig(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) || self.max_iter == 0 {
            return Err(SvmError::InvalidConfig("tol and max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub converged: bool,
    pub primal: f64,
    /// Relative duality gap at termination.
    pub duality_gap: f64,
    /// Dual objective `0.5 |w|^2 - sum(alpha)` after each epoch.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub decision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Class names for indices 0 (negative) and 1 (positive).
    pub labels: [String; 2],
    pub config: SvmConfig,
    /// Fingerprint of the feature vectors the model was trained on.
    pub fingerprint: String,
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SvmError> {
        let s = self
            .buf
            .get(self.at..self.at + n)
            .ok_or_else(|| SvmError::Corrupt("truncated".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, SvmError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SvmError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String, SvmError> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| SvmError::Corrupt("non-UTF-8 string".into()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `n x n` Gram matrix of the bias-augmented examples.
fn augmented_gram(xs: &[FeatureVector]) -> Vec<f64> {
    let n = xs.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| dot(&xs[i].values, &xs[j].values) + BIAS_FEATURE * BIAS_FEATURE)
                .collect()
        })
        .collect();
    let mut gram = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            gram[i * n + i + off] = v;
            gram[(i + off) * n + i] = v;
        }
    }
    gram
}

/// Trains on feature vectors with class indices in `{0, 1}`.
pub fn train_svm(
    xs: &[FeatureVector],
    ys: &[usize],
    labels: [String; 2],
    cfg: &SvmConfig,
) -> Result<(SvmModel, TrainReport), SvmError> {
    cfg.validate()?;
    if xs.len() != ys.len() {
        return Err(SvmError::LabelCount {
            examples: xs.len(),
            labels: ys.len(),
        });
    }
    if let Some(&bad) = ys.iter().find(|&&y| y > 1) {
        return Err(SvmError::BadLabel(bad));
    }
    if !(ys.contains(&0) && ys.contains(&1)) {
        return Err(SvmError::SingleClass);
    }
    let fingerprint = xs[0].fingerprint();
    let dim = xs[0].dim();
    for x in xs {
        if x.dim() != dim {
            return Err(SvmError::DimensionMismatch {
                expected: dim,
                found: x.dim(),
            });
        }
        if x.fingerprint() != fingerprint {
            return Err(SvmError::FingerprintMismatch {
                expected: fingerprint,
                found: x.fingerprint(),
            });
        }
    }

    let n = xs.len();
    let y: Vec<f64> = ys.iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect();
    let gram = augmented_gram(xs);
    let k = |i: usize, j: usize| gram[i * n + j];
    let mut alpha = vec![0.0f64; n];
    // f[i] = sum_j alpha_j y_j K_ij: the current decision value of example i.
    let mut f = vec![0.0f64; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut primal = f64::INFINITY;
    let mut gap = f64::INFINITY;
    let mut converged = false;

    for _ in 0..cfg.max_iter {
        order.shuffle(&mut rng);
        for &i in &order {
            let qii = k(i, i);
            if qii <= 0.0 {
                continue;
            }
            let g = y[i] * f[i] - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            if pg == 0.0 {
                continue;
            }
            let old = alpha[i];
            alpha[i] = (old - g / qii).clamp(0.0, cfg.c);
            let d = (alpha[i] - old) * y[i];
            if d != 0.0 {
                for (j, fj) in f.iter_mut().enumerate() {
                    *fj += d * k(i, j);
                }
            }
        }

        // Recompute from scratch so rounding does not accumulate.
        for (i, fi) in f.iter_mut().enumerate() {
            *fi = (0..n).map(|j| alpha[j] * y[j] * k(i, j)).sum();
        }
        let norm2: f64 = (0..n).map(|i| alpha[i] * y[i] * f[i]).sum();
        let alpha_sum: f64 = alpha.iter().sum();
        history.push(0.5 * norm2 - alpha_sum);
        let hinge: f64 = (0..n).map(|i| (1.0 - y[i] * f[i]).max(0.0)).sum();
        primal = 0.5 * norm2 + cfg.c * hinge;
        let dual = alpha_sum - 0.5 * norm2;
        gap = (primal - dual).max(0.0) / primal.abs().max(f64::MIN_POSITIVE);
        if gap <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "svm stopped after {} epochs with relative duality gap {gap:.3e}",
            cfg.max_iter
        );
    }

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let a = alpha[i] * y[i];
        if a != 0.0 {
            for (wj, &xj) in w.iter_mut().zip(&x.values) {
                *wj += a * xj;
            }
            b += a * BIAS_FEATURE;
        }
    }

    let model = SvmModel {
        weights: w,
        bias: b * BIAS_FEATURE,
        labels,
        config: *cfg,
        fingerprint,
    };
    let report = TrainReport {
        epochs: history.len(),
        converged,
        primal,
        duality_gap: gap,
        objective_history: history,
    };
    Ok((model, report))
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn decision_value(&self, values: &[f64]) -> f64 {
        dot(&self.weights, values) + self.bias
    }

    /// A decision value of exactly zero goes to the positive class.
    pub fn predict(&self, x: &FeatureVector) -> Result<Prediction, SvmError> {
        if x.fingerprint() != self.fingerprint {
            return Err(SvmError::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found: x.fingerprint(),
            });
        }
        if x.dim() != self.dim() {
            return Err(SvmError::DimensionMismatch {
                expected: self.dim(),
                found: x.dim(),
            });
        }
        let decision = self.decision_value(&x.values);
        Ok(Prediction {
            class: (decision >= 0.0) as usize,
            decision,
        })
    }

    pub fn label(&self, class: usize) -> &str {
        &self.labels[class]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn put_str(out: &mut Vec<u8>, s: &str) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        let mut out = Vec::with_capacity(128 + 8 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        put_str(&mut out, &self.labels[0]);
        put_str(&mut out, &self.labels[1]);
        out.extend_from_slice(&self.config.c.to_le_bytes());
        out.extend_from_slice(&self.config.tol.to_le_bytes());
        out.extend_from_slice(&(self.config.max_iter as u64).to_le_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&self.bias.to_le_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SvmError> {
        let corrupt = |m: &str| SvmError::Corrupt(m.to_string());
        if bytes.len() < 32 + 6 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != VERSION {
            return Err(SvmError::Version(version));
        }
        let mut rd = Cursor { buf: body, at: 6 };
        let fingerprint = rd.string()?;
        let l0 = rd.string()?;
        let l1 = rd.string()?;
        let c = rd.f64()?;
        let tol = rd.f64()?;
        let max_iter = rd.u64()? as usize;
        let seed = rd.u64()?;
        let dim = rd.u64()? as usize;
        let at = rd.at;
        if body.len() != at + 8 * (dim + 1) {
            return Err(corrupt("payload length does not match dim"));
        }
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
        let weights = body[at..at + 8 * dim].chunks_exact(8).map(f64_at).collect();
        let bias = f64_at(&body[at + 8 * dim..]);
        if l0 == l1 {
            return Err(corrupt("label names must differ"));
        }
        Ok(Self {
            weights,
            bias,
            labels: [l0, l1],
            config: SvmConfig {
                c,
                tol,
                max_iter,
                seed,
            },
            fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SvmError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SvmError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
