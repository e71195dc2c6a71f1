//! Tessellated code histograms: the classifier input.
//!
//! A code image is cut into square cells (row-major); each cell contributes
//! an L1-normalized histogram over the descriptor's code range, and the
//! histograms are concatenated.

use std::fmt;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::align::{align_ocular, apply_region, AlignError, AlignParams, OcularGeometry, RegionSelector};
use crate::descriptors::{CodeImage, DescriptorConfig, DescriptorError};
use crate::imgcore::GrayImage;

pub const DEFAULT_CELL: usize = 20;

const MAGIC: &[u8; 4] = b"OFEA";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{width}x{height} code image is not divisible into {cell}x{cell} cells")]
    NotDivisible {
        width: usize,
        height: usize,
        cell: usize,
    },
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub descriptor_id: String,
    pub region: RegionSelector,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(descriptor_id: impl Into<String>, region: RegionSelector, values: Vec<f64>) -> Self {
        Self {
            descriptor_id: descriptor_id.into(),
            region,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `descriptor/region/dim`; two vectors are comparable iff their
    /// fingerprints are equal.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.descriptor_id, self.region, self.dim())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.descriptor_id.as_bytes();
        let mut out = Vec::with_capacity(16 + id.len() + 4 * self.dim());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        out.push(self.region.code());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parses [`FeatureVector::to_bytes`] output; values come back at `f32`
    /// precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let bad = |m: &str| FeatureError::Format(m.to_string());
        let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated"));
        if take(0, 4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(FeatureError::Format(format!("unsupported version {version}")));
        }
        let id_len = u16::from_le_bytes(take(6, 2)?.try_into().unwrap()) as usize;
        let descriptor_id = std::str::from_utf8(take(8, id_len)?)
            .map_err(|_| bad("descriptor id is not UTF-8"))?
            .to_string();
        let mut at = 8 + id_len;
        let region = RegionSelector::from_code(take(at, 1)?[0]).ok_or_else(|| bad("bad region"))?;
        at += 1;
        let dim = u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize;
        at += 4;
        if bytes.len() != at + 4 * dim {
            return Err(bad("payload length does not match dim"));
        }
        let values = bytes[at..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self::new(descriptor_id, region, values))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.fingerprint())
    }
}

pub fn fingerprint(descriptor_id: &str, region: RegionSelector, dim: usize) -> String {
    format!("{descriptor_id}/{region}/{dim}")
}

/// Feature dimension for a descriptor/region pair at the given cell size.
pub fn feature_dim(cfg: &DescriptorConfig, sel: RegionSelector, p: &AlignParams, cell: usize) -> usize {
    let (w, h) = p.region_dims(sel);
    (w / cell) * (h / cell) * cfg.cardinality()
}

/// Row-major cells, each an L1-normalized histogram over the code range.
pub fn tessellate_histograms(code: &CodeImage, cell: usize) -> Result<Vec<f64>, FeatureError> {
    let (w, h) = (code.width(), code.height());
    if cell == 0 || w % cell != 0 || h % cell != 0 {
        return Err(FeatureError::NotDivisible {
            width: w,
            height: h,
            cell,
        });
    }
    let bins = code.cardinality();
    let (cols, rows) = (w / cell, h / cell);
    let mut counts = vec![0u32; rows * cols * bins];
    for y in 0..h {
        let cell_row = (y / cell) * cols;
        for (x, &c) in code.codes()[y * w..(y + 1) * w].iter().enumerate() {
            counts[(cell_row + x / cell) * bins + c as usize] += 1;
        }
    }
    let norm = 1.0 / (cell * cell) as f64;
    Ok(counts.into_iter().map(|c| c as f64 * norm).collect())
}

/// Features of a region of an already aligned frame.
pub fn extract_from_frame(
    frame: &GrayImage,
    sel: RegionSelector,
    cfg: &DescriptorConfig,
    p: &AlignParams,
) -> Result<FeatureVector, FeatureError> {
    let region = apply_region(frame, p, sel);
    let code = cfg.code_image(&region)?;
    let values = tessellate_histograms(&code, DEFAULT_CELL)?;
    Ok(FeatureVector::new(cfg.fingerprint(), sel, values))
}

/// Aligns, selects the region, codes and tessellates one raw image.
pub fn extract_features(
    img: &GrayImage,
    geo: &OcularGeometry,
    sel: RegionSelector,
    cfg: &DescriptorConfig,
    p: &AlignParams,
) -> Result<FeatureVector, FeatureError> {
    let frame = align_ocular(img, geo, p)?;
    extract_from_frame(&frame, sel, cfg, p)
}
