//! Per-pixel texture code generators: BSIF (with ICA filter learning),
//! uniform LBP and LPQ.
//!
//! Every generator maps a [`GrayImage`] to a [`CodeImage`] of the same size.
//! Borders are handled by replicating edge pixels.

use std::fmt;
use std::io;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imgcore::GrayImage;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("image {width}x{height} is smaller than the required {need}x{need} support")]
    ImageTooSmall {
        width: usize,
        height: usize,
        need: usize,
    },
    #[error("invalid descriptor configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient patch supply: {available} distinct positions, {needed} requested")]
    InsufficientPatches { available: usize, needed: usize },
    #[error("ICA did not converge after {iterations} iterations (last change {last_change:e})")]
    IcaNotConverged { iterations: usize, last_change: f64 },
    #[error("filter bank format error: {0}")]
    BankFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Integer code per pixel with a known code alphabet size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeImage {
    width: usize,
    height: usize,
    codes: Vec<u16>,
    cardinality: usize,
}

impl CodeImage {
    pub fn new(
        width: usize,
        height: usize,
        codes: Vec<u16>,
        cardinality: usize,
    ) -> Result<Self, DescriptorError> {
        if codes.len() != width * height {
            return Err(DescriptorError::InvalidConfig(format!(
                "{} codes for a {width}x{height} image",
                codes.len()
            )));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= cardinality) {
            return Err(DescriptorError::InvalidConfig(format!(
                "code {c} outside alphabet of {cardinality}"
            )));
        }
        Ok(Self {
            width,
            height,
            codes,
            cardinality,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.codes[y * self.width + x]
    }
}

fn ensure_size(img: &GrayImage, need: usize) -> Result<(), DescriptorError> {
    if img.width() < need || img.height() < need {
        return Err(DescriptorError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            need,
        });
    }
    Ok(())
}

/// Replicate-padded copy of `values` (w x h) with `r` extra pixels per side.
fn pad_replicate<T: Copy>(values: &[T], w: usize, h: usize, r: usize) -> Vec<T> {
    let pw = w + 2 * r;
    let mut out = Vec::with_capacity(pw * (h + 2 * r));
    for py in 0..h + 2 * r {
        let y = py.saturating_sub(r).min(h - 1);
        let row = &values[y * w..(y + 1) * w];
        for px in 0..pw {
            out.push(row[px.saturating_sub(r).min(w - 1)]);
        }
    }
    out
}

/// Concatenates bits most-significant first: `[1,0,0,1,1]` is 19.
pub fn pack_bits_msb(bits: &[bool]) -> u32 {
    bits.iter().fold(0, |acc, &b| (acc << 1) | b as u32)
}

// ---------------------------------------------------------------------------
// BSIF

pub const BSIF_FILTER_SIZES: [usize; 8] = [3, 5, 7, 9, 11, 13, 15, 17];
const BANK_MAGIC: &[u8; 4] = b"BSIF";
const BANK_VERSION: u16 = 1;

/// `n` real k x k filters, filter `0` producing the most significant bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    k: usize,
    n: usize,
    filters: Vec<f64>,
}

impl FilterBank {
    /// Validates shape, zero mean and linear independence.
    pub fn new(k: usize, n: usize, filters: Vec<f64>) -> Result<Self, DescriptorError> {
        if !BSIF_FILTER_SIZES.contains(&k) {
            return Err(DescriptorError::InvalidConfig(format!(
                "filter size {k} not in {BSIF_FILTER_SIZES:?}"
            )));
        }
        if !(5..=12).contains(&n) {
            return Err(DescriptorError::InvalidConfig(format!(
                "bit count {n} outside 5..=12"
            )));
        }
        if n > k * k {
            return Err(DescriptorError::InvalidConfig(format!(
                "{n} filters cannot be independent in {k}x{k}"
            )));
        }
        if filters.len() != n * k * k {
            return Err(DescriptorError::InvalidConfig(format!(
                "expected {} coefficients, got {}",
                n * k * k,
                filters.len()
            )));
        }
        if filters.iter().any(|v| !v.is_finite()) {
            return Err(DescriptorError::InvalidConfig("non-finite coefficient".into()));
        }
        let bank = Self { k, n, filters };
        for i in 0..n {
            let f = bank.filter(i);
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let scale = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if mean.abs() > 1e-6 * scale.max(1.0) {
                return Err(DescriptorError::InvalidConfig(format!(
                    "filter {i} has non-zero mean {mean:e}"
                )));
            }
        }
        if bank.gram_rank(1e-6) < n {
            return Err(DescriptorError::InvalidConfig(
                "filters are linearly dependent".into(),
            ));
        }
        Ok(bank)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn filter(&self, i: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.filters[i * kk..(i + 1) * kk]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.filters
    }

    /// Rank of the filters' Gram matrix, counting eigenvalues above
    /// `rel_tol` times the largest one.
    pub fn gram_rank(&self, rel_tol: f64) -> usize {
        let gram = DMatrix::from_fn(self.n, self.n, |i, j| {
            self.filter(i)
                .iter()
                .zip(self.filter(j))
                .map(|(a, b)| a * b)
                .sum::<f64>()
        });
        let eig = SymmetricEigen::new(gram).eigenvalues;
        let max = eig.iter().cloned().fold(0.0, f64::max);
        eig.iter().filter(|&&v| v > rel_tol * max).count()
    }

    /// `BSIF`, version u16, k u16, n u16, then `n*k*k` little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.filters.len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u16).to_le_bytes());
        out.extend_from_slice(&(self.n as u16).to_le_bytes());
        for v in &self.filters {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DescriptorError> {
        let fmt_err = |m: &str| DescriptorError::BankFormat(m.to_string());
        if bytes.len() < 10 || &bytes[..4] != BANK_MAGIC {
            return Err(fmt_err("missing BSIF magic"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != BANK_VERSION {
            return Err(DescriptorError::BankFormat(format!(
                "unsupported version {version}"
            )));
        }
        let (k, n) = (u16_at(6) as usize, u16_at(8) as usize);
        let body = &bytes[10..];
        if body.len() != 8 * n * k * k {
            return Err(DescriptorError::BankFormat(format!(
                "expected {} coefficient bytes, found {}",
                8 * n * k * k,
                body.len()
            )));
        }
        let filters = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(k, n, filters)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DescriptorError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DescriptorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Short content hash used in feature fingerprints.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_bytes())[..4]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The bundled 9x9, 8-bit bank learned from dead-leaves images (see
    /// [`crate::synth::dead_leaves_image`]).
    pub fn builtin() -> Self {
        Self::from_bytes(include_bytes!("../assets/bsif_9x9_8bit.bank"))
            .expect("bundled filter bank is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsifLearnConfig {
    pub k: usize,
    pub n: usize,
    pub patches: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl BsifLearnConfig {
    pub fn new(k: usize, n: usize, seed: u64) -> Self {
        Self {
            k,
            n,
            patches: 50_000,
            seed,
            tol: 1e-6,
            max_iter: 1_000,
        }
    }
}

/// Symmetric decorrelation `W <- (W W^T)^{-1/2} W`.
fn sym_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt()));
    &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w
}

/// Learns `n` k x k filters: `patches` distinct random patches, mean removed
/// per patch, PCA-whitened to the top `n` components, then symmetric
/// fixed-point ICA with a tanh contrast.
pub fn learn_bsif_filters(
    images: &[GrayImage],
    cfg: &BsifLearnConfig,
) -> Result<FilterBank, DescriptorError> {
    let (k, n) = (cfg.k, cfg.n);
    if !BSIF_FILTER_SIZES.contains(&k) || !(5..=12).contains(&n) || n > k * k - 1 {
        return Err(DescriptorError::InvalidConfig(format!(
            "unsupported filter shape k={k}, n={n}"
        )));
    }
    let counts: Vec<usize> = images
        .iter()
        .map(|im| {
            if im.width() >= k && im.height() >= k {
                (im.width() - k + 1) * (im.height() - k + 1)
            } else {
                0
            }
        })
        .collect();
    let available: usize = counts.iter().sum();
    if cfg.patches == 0 || available < cfg.patches {
        return Err(DescriptorError::InsufficientPatches {
            available,
            needed: cfg.patches,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks = index::sample(&mut rng, available, cfg.patches).into_vec();
    picks.sort_unstable();

    let d = k * k;
    let mut patches = Vec::with_capacity(cfg.patches * d);
    let (mut img_idx, mut base) = (0usize, 0usize);
    for p in picks {
        while p >= base + counts[img_idx] {
            base += counts[img_idx];
            img_idx += 1;
        }
        let im = &images[img_idx];
        let cols = im.width() - k + 1;
        let (x0, y0) = ((p - base) % cols, (p - base) / cols);
        let start = patches.len();
        for y in y0..y0 + k {
            patches.extend(im.data()[y * im.width() + x0..y * im.width() + x0 + k].iter().map(|&v| v as f64));
        }
        let patch = &mut patches[start..];
        let mean = patch.iter().sum::<f64>() / d as f64;
        patch.iter_mut().for_each(|v| *v -= mean);
    }
    let count = cfg.patches;

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for patch in patches.chunks_exact(d) {
        for i in 0..d {
            let pi = patch[i];
            for j in i..d {
                cov[(i, j)] += pi * patch[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / count as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    let mut whiten = DMatrix::<f64>::zeros(n, d);
    for (row, &c) in order.iter().take(n).enumerate() {
        let lambda = eig.eigenvalues[c];
        if lambda <= 1e-12 * top {
            return Err(DescriptorError::InvalidConfig(format!(
                "patch covariance has rank below {n}"
            )));
        }
        let s = 1.0 / lambda.sqrt();
        for j in 0..d {
            whiten[(row, j)] = eig.eigenvectors[(j, c)] * s;
        }
    }

    // Whitened data, n x count, column per patch.
    let x = DMatrix::from_column_slice(d, count, &patches);
    let z = &whiten * x;

    let normal = StandardNormal;
    let init = DMatrix::from_fn(n, n, |_, _| normal.sample(&mut rng));
    let mut w = sym_decorrelate(&init);
    let mut last_change = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let y = &w * &z;
        let g = y.map(f64::tanh);
        let g_prime_mean: Vec<f64> = (0..n)
            .map(|i| g.row(i).iter().map(|v| 1.0 - v * v).sum::<f64>() / count as f64)
            .collect();
        let mut next = (&g * z.transpose()) / count as f64;
        for i in 0..n {
            for j in 0..n {
                next[(i, j)] -= g_prime_mean[i] * w[(i, j)];
            }
        }
        let next = sym_decorrelate(&next);
        last_change = (0..n)
            .map(|i| (1.0 - next.row(i).dot(&w.row(i)).abs()).abs())
            .fold(0.0, f64::max);
        w = next;
        if last_change < cfg.tol {
            let filters = &w * &whiten;
            // Row-major n x d coefficient layout.
            let coeffs = (0..n)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| filters[(i, j)])
                .collect();
            return FilterBank::new(k, n, coeffs);
        }
    }
    Err(DescriptorError::IcaNotConverged {
        iterations: cfg.max_iter,
        last_change,
    })
}

/// Filter responses for every pixel, one `Vec` per filter, computed on the
/// mean-removed image (replicate borders).
///
/// Pixels are represented as `N * v - sum(v)`, which is exact in `f64`, so
/// adding a constant to the image leaves every response bit-identical.
pub fn bsif_responses(img: &GrayImage, bank: &FilterBank) -> Result<Vec<Vec<f64>>, DescriptorError> {
    let k = bank.k();
    ensure_size(img, k)?;
    let (w, h) = (img.width(), img.height());
    let total = (w * h) as i64;
    let sum: i64 = img.data().iter().map(|&v| v as i64).sum();
    let centered: Vec<f64> = img
        .data()
        .iter()
        .map(|&v| (total * v as i64 - sum) as f64)
        .collect();
    let r = k / 2;
    let padded = pad_replicate(&centered, w, h, r);
    let pw = w + 2 * r;
    let mut out = Vec::with_capacity(bank.n());
    for i in 0..bank.n() {
        let f = bank.filter(i);
        let mut resp = vec![0.0; w * h];
        for y in 0..h {
            let dst = &mut resp[y * w..(y + 1) * w];
            for fy in 0..k {
                let src_row = &padded[(y + fy) * pw..(y + fy + 1) * pw];
                for fx in 0..k {
                    let c = f[fy * k + fx];
                    for (d, &s) in dst.iter_mut().zip(&src_row[fx..fx + w]) {
                        *d += c * s;
                    }
                }
            }
        }
        out.push(resp);
    }
    Ok(out)
}

/// Bit `i` (MSB first) is 1 iff filter `i`'s response is strictly positive.
pub fn bsif_code_image(img: &GrayImage, bank: &FilterBank) -> Result<CodeImage, DescriptorError> {
    let responses = bsif_responses(img, bank)?;
    let mut codes = vec![0u16; img.width() * img.height()];
    for resp in &responses {
        for (c, &r) in codes.iter_mut().zip(resp) {
            *c = (*c << 1) | (r > 0.0) as u16;
        }
    }
    CodeImage::new(img.width(), img.height(), codes, 1 << bank.n())
}

// ---------------------------------------------------------------------------
// LBP

pub const LBP_UNIFORM_LABELS: usize = 59;

/// Circular 0/1 transitions in an 8-bit pattern.
pub fn lbp_transitions(pattern: u8) -> u32 {
    (pattern ^ pattern.rotate_left(1)).count_ones()
}

/// Raw pattern -> uniform label: the 58 patterns with at most two
/// transitions get labels 0..58 in ascending order, all others share 58.
pub fn uniform_lbp_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut next = 0u8;
    for p in 0..=255u8 {
        table[p as usize] = if lbp_transitions(p) <= 2 {
            next += 1;
            next - 1
        } else {
            58
        };
    }
    table
}

/// Neighbour offsets clockwise from the top-left; the first is the MSB.
const LBP_NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
];

/// Raw 8-neighbour pattern at `(x, y)`; bit set iff neighbour >= centre.
pub fn lbp_raw_pattern(img: &GrayImage, x: usize, y: usize) -> u8 {
    let c = img.get(x, y);
    LBP_NEIGHBOURS.iter().fold(0u8, |acc, &(dx, dy)| {
        (acc << 1) | (img.get_clamped(x as isize + dx, y as isize + dy) >= c) as u8
    })
}

pub fn lbp_code_image(img: &GrayImage) -> Result<CodeImage, DescriptorError> {
    ensure_size(img, 3)?;
    let table = uniform_lbp_table();
    let (w, h) = (img.width(), img.height());
    let padded = pad_replicate(img.data(), w, h, 1);
    let pw = w + 2;
    let mut codes = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let c = padded[(y + 1) * pw + x + 1];
            let mut p = 0u8;
            for &(dx, dy) in &LBP_NEIGHBOURS {
                let v = padded[((y + 1) as isize + dy) as usize * pw + ((x + 1) as isize + dx) as usize];
                p = (p << 1) | (v >= c) as u8;
            }
            codes.push(table[p as usize] as u16);
        }
    }
    CodeImage::new(w, h, codes, LBP_UNIFORM_LABELS)
}

// ---------------------------------------------------------------------------
// LPQ

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LpqConfig {
    pub window: usize,
}

impl Default for LpqConfig {
    fn default() -> Self {
        Self { window: 7 }
    }
}

impl LpqConfig {
    pub fn new(window: usize) -> Result<Self, DescriptorError> {
        let cfg = Self { window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(DescriptorError::InvalidConfig(format!(
                "LPQ window {} must be odd and at least 3",
                self.window
            )));
        }
        Ok(())
    }

    pub fn frequency(&self) -> f64 {
        1.0 / self.window as f64
    }
}

/// Magnitudes below this are treated as exact zeros (and so as
/// non-negative). The DFT of a flat window at a non-zero frequency is zero
/// analytically but leaves ~1e-13 of rounding residue.
pub const LPQ_ZERO_EPS: f64 = 1e-9;

/// Windowed DFT coefficients `[F(u1), F(u2), F(u3), F(u4)]` as `(re, im)` at
/// every pixel, with `u1=(a,0)`, `u2=(0,a)`, `u3=(a,a)`, `u4=(a,-a)`, `a` the
/// frequency, x horizontal and `F(u) = sum f(p+d) exp(-2 pi i u.d)`.
pub fn lpq_coefficients(
    img: &GrayImage,
    cfg: &LpqConfig,
) -> Result<Vec<[(f64, f64); 4]>, DescriptorError> {
    cfg.validate()?;
    ensure_size(img, cfg.window)?;
    let (w, h) = (img.width(), img.height());
    let r = cfg.window / 2;
    let a = cfg.frequency();
    // exp(-2 pi i a d) for d = -r..=r
    let basis: Vec<(f64, f64)> = (-(r as isize)..=r as isize)
        .map(|d| {
            let t = 2.0 * std::f64::consts::PI * a * d as f64;
            (t.cos(), -t.sin())
        })
        .collect();
    let values: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let padded = pad_replicate(&values, w, h, r);
    let pw = w + 2 * r;
    let ph = h + 2 * r;

    // Horizontal pass over every padded row: box sum and complex sum.
    let mut row_box = vec![0.0; ph * w];
    let mut row_cplx = vec![(0.0, 0.0); ph * w];
    for y in 0..ph {
        let src = &padded[y * pw..(y + 1) * pw];
        for x in 0..w {
            let (mut b, mut re, mut im) = (0.0, 0.0, 0.0);
            for (i, &(c, s)) in basis.iter().enumerate() {
                let v = src[x + i];
                b += v;
                re += v * c;
                im += v * s;
            }
            row_box[y * w + x] = b;
            row_cplx[y * w + x] = (re, im);
        }
    }

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut f = [(0.0, 0.0); 4];
            for (j, &(c, s)) in basis.iter().enumerate() {
                let idx = (y + j) * w + x;
                let (re, im) = row_cplx[idx];
                let b = row_box[idx];
                f[0].0 += re;
                f[0].1 += im;
                f[1].0 += b * c;
                f[1].1 += b * s;
                // (re + i im)(c + i s)
                f[2].0 += re * c - im * s;
                f[2].1 += re * s + im * c;
                // (re + i im)(c - i s)
                f[3].0 += re * c + im * s;
                f[3].1 += im * c - re * s;
            }
            out.push(f);
        }
    }
    Ok(out)
}

/// Packs `[Re F1 >= 0, Im F1 >= 0, ..., Im F4 >= 0]` MSB first.
pub fn lpq_pack(coeffs: &[(f64, f64); 4]) -> u16 {
    coeffs.iter().fold(0u16, |acc, &(re, im)| {
        let acc = (acc << 1) | (re >= -LPQ_ZERO_EPS) as u16;
        (acc << 1) | (im >= -LPQ_ZERO_EPS) as u16
    })
}

pub fn lpq_code_image(img: &GrayImage, cfg: &LpqConfig) -> Result<CodeImage, DescriptorError> {
    let coeffs = lpq_coefficients(img, cfg)?;
    CodeImage::new(
        img.width(),
        img.height(),
        coeffs.iter().map(lpq_pack).collect(),
        256,
    )
}

// ---------------------------------------------------------------------------

/// A fully specified descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorConfig {
    Bsif(Arc<FilterBank>),
    Lbp,
    Lpq(LpqConfig),
}

impl DescriptorConfig {
    pub fn cardinality(&self) -> usize {
        match self {
            DescriptorConfig::Bsif(bank) => 1 << bank.n(),
            DescriptorConfig::Lbp => LBP_UNIFORM_LABELS,
            DescriptorConfig::Lpq(_) => 256,
        }
    }

    /// Stable identifier of the descriptor, including the bank contents.
    pub fn fingerprint(&self) -> String {
        match self {
            DescriptorConfig::Bsif(bank) => {
                format!("bsif-k{}-n{}-{}", bank.k(), bank.n(), bank.digest())
            }
            DescriptorConfig::Lbp => "lbp-u2-p8r1".to_string(),
            DescriptorConfig::Lpq(cfg) => format!("lpq-w{}", cfg.window),
        }
    }

    pub fn code_image(&self, img: &GrayImage) -> Result<CodeImage, DescriptorError> {
        match self {
            DescriptorConfig::Bsif(bank) => bsif_code_image(img, bank),
            DescriptorConfig::Lbp => lbp_code_image(img),
            DescriptorConfig::Lpq(cfg) => lpq_code_image(img, cfg),
        }
    }
}

impl fmt::Display for DescriptorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random()).unwrap()
    }

    /// Random zero-mean filters (independent with probability one).
    fn random_bank(k: usize, n: usize, seed: u64) -> FilterBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = Vec::new();
        for _ in 0..n {
            let f: Vec<f64> = (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = f.iter().sum::<f64>() / f.len() as f64;
            coeffs.extend(f.into_iter().map(|v| v - m));
        }
        FilterBank::new(k, n, coeffs).unwrap()
    }

    #[test]
    fn bit_packing_example() {
        assert_eq!(pack_bits_msb(&[true, false, false, true, true]), 19);
        assert_eq!(pack_bits_msb(&[]), 0);
    }

    /// 3x3 difference filters: centre minus one neighbour.
    fn difference_bank() -> FilterBank {
        let mut coeffs = Vec::new();
        for (plus, minus) in [(4, 3), (4, 5), (4, 1), (4, 7), (4, 0)] {
            let mut f = [0.0; 9];
            f[plus] = 1.0;
            f[minus] = -1.0;
            coeffs.extend_from_slice(&f);
        }
        FilterBank::new(3, 5, coeffs).unwrap()
    }

    #[test]
    fn responses_pack_to_nineteen() {
        #[rustfmt::skip]
        let img = GrayImage::new(3, 3, vec![
             50, 150, 100,
             50, 100, 150,
            100,  50, 100,
        ]).unwrap();
        let codes = bsif_code_image(&img, &difference_bank()).unwrap();
        assert_eq!(codes.get(1, 1), 19);
        assert_eq!(codes.cardinality(), 32);
    }

    #[test]
    fn constant_image_codes_are_zero() {
        let img = GrayImage::filled(20, 15, 93).unwrap();
        for bank in [random_bank(9, 8, 1), random_bank(3, 5, 2)] {
            let codes = bsif_code_image(&img, &bank).unwrap();
            assert!(codes.codes().iter().all(|&c| c == 0));
        }
    }

    /// Per-pixel direct correlation of the mean-removed image.
    fn bsif_oracle(img: &GrayImage, bank: &FilterBank) -> Vec<u16> {
        let mean = img.mean();
        let r = (bank.k() / 2) as isize;
        let k = bank.k();
        let mut out = Vec::new();
        for y in 0..img.height() as isize {
            for x in 0..img.width() as isize {
                let mut code = 0u16;
                for i in 0..bank.n() {
                    let f = bank.filter(i);
                    let mut acc = 0.0;
                    for fy in 0..k as isize {
                        for fx in 0..k as isize {
                            let v = img.get_clamped(x + fx - r, y + fy - r) as f64 - mean;
                            acc += f[(fy * k as isize + fx) as usize] * v;
                        }
                    }
                    code = (code << 1) | (acc > 0.0) as u16;
                }
                out.push(code);
            }
        }
        out
    }

    #[test]
    fn bsif_matches_direct_convolution() {
        for seed in 0..5 {
            let img = random_image(32, 32, seed);
            let bank = random_bank(if seed % 2 == 0 { 9 } else { 5 }, 8, 100 + seed);
            let codes = bsif_code_image(&img, &bank).unwrap();
            assert_eq!(codes.codes(), &bsif_oracle(&img, &bank)[..]);
        }
    }

    #[test]
    fn bsif_ignores_additive_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = GrayImage::from_fn(40, 30, |_, _| rng.random_range(0..200)).unwrap();
        let bank = random_bank(7, 10, 9);
        let base = bsif_code_image(&img, &bank).unwrap();
        for c in [1u8, 17, 55] {
            let shifted = img.map(|v| v + c);
            assert_eq!(bsif_code_image(&shifted, &bank).unwrap(), base);
        }
    }

    #[test]
    fn bsif_rejects_small_images() {
        let img = random_image(8, 20, 1);
        assert!(matches!(
            bsif_code_image(&img, &random_bank(9, 8, 1)),
            Err(DescriptorError::ImageTooSmall { need: 9, .. })
        ));
    }

    #[test]
    fn bank_validation() {
        assert!(FilterBank::new(4, 5, vec![0.0; 80]).is_err());
        assert!(FilterBank::new(3, 4, vec![0.0; 36]).is_err());
        // Non-zero mean.
        let mut c = random_bank(3, 5, 1).coefficients().to_vec();
        c[0] += 1.0;
        assert!(FilterBank::new(3, 5, c).is_err());
        // Duplicate filter.
        let bank = random_bank(3, 5, 1);
        let mut c = bank.coefficients().to_vec();
        let first = bank.filter(0).to_vec();
        c[9..18].copy_from_slice(&first);
        assert!(FilterBank::new(3, 5, c).is_err());
    }

    #[test]
    fn bank_bytes_round_trip() {
        let bank = random_bank(5, 7, 3);
        let bytes = bank.to_bytes();
        assert_eq!(&bytes[..4], b"BSIF");
        assert_eq!(bytes.len(), 10 + 8 * 7 * 25);
        assert_eq!(FilterBank::from_bytes(&bytes).unwrap(), bank);
        assert!(FilterBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(FilterBank::from_bytes(&bad).is_err());
    }

    fn white_noise_set() -> Vec<GrayImage> {
        (0..4).map(|s| random_image(128, 128, 40 + s)).collect()
    }

    #[test]
    fn learning_on_white_noise_meets_bank_invariants() {
        let images = white_noise_set();
        let cfg = BsifLearnConfig::new(3, 5, 7);
        let bank = learn_bsif_filters(&images, &cfg).unwrap();
        assert_eq!((bank.k(), bank.n()), (3, 5));
        for i in 0..5 {
            let f = bank.filter(i);
            assert!((f.iter().sum::<f64>() / 9.0).abs() < 1e-6);
        }
        // Independent rank check through nalgebra's SVD of the stacked filters.
        let m = DMatrix::from_row_slice(5, 9, bank.coefficients());
        let sv = m.svd(false, false).singular_values;
        let max = sv.max();
        assert_eq!(sv.iter().filter(|&&s| s * s > 1e-6 * max * max).count(), 5);

        let again = learn_bsif_filters(&images, &cfg).unwrap();
        assert_eq!(again.to_bytes(), bank.to_bytes());
    }

    #[test]
    fn learned_responses_have_centred_medians() {
        let images = white_noise_set();
        let cfg = BsifLearnConfig::new(3, 5, 11);
        let bank = learn_bsif_filters(&images, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for i in 0..bank.n() {
            let f = bank.filter(i);
            let mut resp: Vec<f64> = (0..5000)
                .map(|_| {
                    let im = &images[rng.random_range(0..images.len())];
                    let (x0, y0) = (rng.random_range(0..126), rng.random_range(0..126));
                    let mut patch = Vec::with_capacity(9);
                    for y in y0..y0 + 3 {
                        for x in x0..x0 + 3 {
                            patch.push(im.get(x, y) as f64);
                        }
                    }
                    let m = patch.iter().sum::<f64>() / 9.0;
                    patch.iter().zip(f).map(|(v, c)| (v - m) * c).sum::<f64>()
                })
                .collect();
            resp.sort_by(f64::total_cmp);
            let median = resp[resp.len() / 2];
            let mean = resp.iter().sum::<f64>() / resp.len() as f64;
            let std = (resp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / resp.len() as f64).sqrt();
            assert!(median.abs() < 0.05 * std, "filter {i}: median {median}, std {std}");
        }
    }

    #[test]
    fn learning_rejects_short_supply_and_reports_non_convergence() {
        let small = vec![random_image(20, 20, 1)];
        assert!(matches!(
            learn_bsif_filters(&small, &BsifLearnConfig::new(3, 5, 1)),
            Err(DescriptorError::InsufficientPatches { available: 324, .. })
        ));
        let cfg = BsifLearnConfig {
            max_iter: 1,
            tol: 0.0,
            ..BsifLearnConfig::new(3, 5, 1)
        };
        assert!(matches!(
            learn_bsif_filters(&white_noise_set(), &cfg),
            Err(DescriptorError::IcaNotConverged { iterations: 1, .. })
        ));
    }

    #[test]
    fn builtin_bank_is_the_operating_point() {
        let bank = FilterBank::builtin();
        assert_eq!((bank.k(), bank.n()), (9, 8));
        assert_eq!(bank.gram_rank(1e-6), 8);
    }

    #[test]
    fn uniform_table_shape() {
        let table = uniform_lbp_table();
        let uniform: Vec<u8> = (0..=255u8).filter(|&p| lbp_transitions(p) <= 2).collect();
        assert_eq!(uniform.len(), 58);
        for (label, &p) in uniform.iter().enumerate() {
            assert_eq!(table[p as usize] as usize, label);
        }
        assert_eq!(table[0], 0);
        assert_eq!(table[255], 57);
        assert_eq!(table[0b0101_0101], 58);
    }

    #[test]
    fn lbp_constant_and_peak() {
        let flat = lbp_code_image(&GrayImage::filled(5, 5, 40).unwrap()).unwrap();
        assert!(flat.codes().iter().all(|&c| c == 57));
        let mut peak = GrayImage::filled(3, 3, 0).unwrap();
        peak.set(1, 1, 200);
        assert_eq!(lbp_raw_pattern(&peak, 1, 1), 0);
        assert_eq!(lbp_code_image(&peak).unwrap().get(1, 1), 0);
    }

    #[test]
    fn lbp_bit_order_is_clockwise_from_top_left() {
        // Only the top-left neighbour is >= centre.
        #[rustfmt::skip]
        let img = GrayImage::new(3, 3, vec![
            9, 0, 0,
            0, 5, 0,
            0, 0, 0,
        ]).unwrap();
        assert_eq!(lbp_raw_pattern(&img, 1, 1), 0b1000_0000);
        let mut left = img.clone();
        left.set(0, 0, 0);
        left.set(0, 1, 9);
        assert_eq!(lbp_raw_pattern(&left, 1, 1), 0b0000_0001);
    }

    #[test]
    fn lbp_rejects_small_images() {
        assert!(lbp_code_image(&random_image(2, 9, 0)).is_err());
    }

    #[test]
    fn lbp_is_invariant_to_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = GrayImage::from_fn(30, 30, |_, _| rng.random_range(0..128)).unwrap();
        let base = lbp_code_image(&img).unwrap();
        assert_eq!(lbp_code_image(&img.map(|v| v * 2)).unwrap(), base);

        let gamma = |v: u8| (255.0 * (v as f64 / 255.0).sqrt()).round() as u8;
        // Keep only grey levels where the gamma table stays injective.
        let levels: Vec<u8> = (0..=255u8)
            .filter(|&v| v == 255 || gamma(v) < gamma(v + 1))
            .filter(|&v| v == 0 || gamma(v - 1) < gamma(v))
            .collect();
        let img = GrayImage::from_fn(30, 30, |_, _| levels[rng.random_range(0..levels.len())]).unwrap();
        assert_eq!(
            lbp_code_image(&img.map(gamma)).unwrap(),
            lbp_code_image(&img).unwrap()
        );
    }

    #[test]
    fn lpq_window_validation() {
        assert!(LpqConfig::new(4).is_err());
        assert!(LpqConfig::new(1).is_err());
        assert!(LpqConfig::new(3).is_ok());
        assert!(lpq_code_image(&random_image(5, 5, 0), &LpqConfig::default()).is_err());
    }

    #[test]
    fn lpq_constant_image() {
        let img = GrayImage::filled(16, 12, 180).unwrap();
        let coeffs = lpq_coefficients(&img, &LpqConfig::default()).unwrap();
        for c in &coeffs {
            for &(re, im) in c {
                assert!(re.abs() < 1e-9 && im.abs() < 1e-9);
            }
        }
        let codes = lpq_code_image(&img, &LpqConfig::default()).unwrap();
        assert!(codes.codes().iter().all(|&c| c == 255));
    }

    #[test]
    fn lpq_three_by_three_impulse_by_hand() {
        // Single bright pixel at the top-right of the 3x3 window around (2,2):
        // d = (+1, -1). With a = 1/3, exp(-2 pi i (ux - uy)/3) per frequency:
        //   u1 = (a,0):  exp(-2pi i/3)  = (-1/2, -sqrt3/2)
        //   u2 = (0,a):  exp(+2pi i/3)  = (-1/2, +sqrt3/2)
        //   u3 = (a,a):  exp(0)         = (1, 0)
        //   u4 = (a,-a): exp(-4pi i/3)  = (-1/2, +sqrt3/2)
        let mut img = GrayImage::filled(5, 5, 0).unwrap();
        img.set(3, 1, 10);
        let cfg = LpqConfig::new(3).unwrap();
        let c = lpq_coefficients(&img, &cfg).unwrap()[2 * 5 + 2];
        let h = 3f64.sqrt() / 2.0;
        let want = [(-5.0, -10.0 * h), (-5.0, 10.0 * h), (10.0, 0.0), (-5.0, 10.0 * h)];
        for (got, want) in c.iter().zip(want) {
            assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9);
        }
        // Bits: Re1 Im1 Re2 Im2 Re3 Im3 Re4 Im4 = 0 0 0 1 1 1 0 1
        assert_eq!(lpq_code_image(&img, &cfg).unwrap().get(2, 2), 0b0001_1101);
    }

    /// Direct complex sums per pixel.
    fn lpq_oracle(img: &GrayImage, window: usize) -> Vec<u16> {
        let r = (window / 2) as isize;
        let a = 1.0 / window as f64;
        let freqs = [(a, 0.0), (0.0, a), (a, a), (a, -a)];
        let mut out = Vec::new();
        for y in 0..img.height() as isize {
            for x in 0..img.width() as isize {
                let mut code = 0u16;
                for &(ux, uy) in &freqs {
                    let (mut re, mut im) = (0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let v = img.get_clamped(x + dx, y + dy) as f64;
                            let t = -2.0 * std::f64::consts::PI * (ux * dx as f64 + uy * dy as f64);
                            re += v * t.cos();
                            im += v * t.sin();
                        }
                    }
                    code = (code << 1) | (re >= -LPQ_ZERO_EPS) as u16;
                    code = (code << 1) | (im >= -LPQ_ZERO_EPS) as u16;
                }
                out.push(code);
            }
        }
        out
    }

    #[test]
    fn lpq_matches_direct_dft() {
        for (seed, window) in [(1, 3), (2, 7), (3, 9)] {
            let img = random_image(24, 20, seed);
            let codes = lpq_code_image(&img, &LpqConfig::new(window).unwrap()).unwrap();
            assert_eq!(codes.codes(), &lpq_oracle(&img, window)[..]);
        }
    }

    #[test]
    fn lpq_codes_move_with_the_image() {
        let img = random_image(40, 40, 8);
        let shifted = GrayImage::from_fn(40, 40, |x, y| img.get_clamped(x as isize - 1, y as isize)).unwrap();
        let cfg = LpqConfig::default();
        let a = lpq_code_image(&img, &cfg).unwrap();
        let b = lpq_code_image(&shifted, &cfg).unwrap();
        for y in 4..36 {
            for x in 4..35 {
                assert_eq!(b.get(x + 1, y), a.get(x, y));
            }
        }
    }

    #[test]
    fn fingerprints_distinguish_configs() {
        let a = DescriptorConfig::Bsif(Arc::new(random_bank(9, 8, 1)));
        let b = DescriptorConfig::Bsif(Arc::new(random_bank(9, 8, 2)));
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert!(a.fingerprint().starts_with("bsif-k9-n8-"));
        assert_eq!(DescriptorConfig::Lbp.cardinality(), 59);
        assert_eq!(DescriptorConfig::Lpq(LpqConfig::default()).fingerprint(), "lpq-w7");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn codes_within_alphabet(seed in any::<u64>(), w in 9usize..40, h in 9usize..40) {
            let img = random_image(w, h, seed);
            for cfg in [
                DescriptorConfig::Bsif(Arc::new(random_bank(9, 8, seed ^ 1))),
                DescriptorConfig::Lbp,
                DescriptorConfig::Lpq(LpqConfig::default()),
            ] {
                let codes = cfg.code_image(&img).unwrap();
                prop_assert!(codes.codes().iter().all(|&c| (c as usize) < cfg.cardinality()));
            }
        }
    }
}
