//! Grayscale raster type, Netpbm graymap I/O, bicubic resampling and
//! separable Gaussian blur.
//!
//! All arithmetic happens in `f64`; results are rounded half away from zero
//! and clamped to `[0, 255]` when converted back to pixels. Borders replicate
//! the edge pixel for both blur and resampling.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image dimensions {width}x{height} for {len} pixels")]
    Dimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("zero target dimension {0}x{1}")]
    ZeroTarget(usize, usize),
    #[error("blur sigma must be positive and finite, got {0}")]
    Sigma(f64),
}

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("pgm format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn format_err(offset: usize, msg: impl Into<String>) -> PgmError {
    PgmError::Format {
        offset,
        msg: msg.into(),
    }
}

/// 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImageError::Dimensions {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Builds an image from floating point samples, rounding half away from
    /// zero and clamping to `[0, 255]`.
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self, ImageError> {
        Self::new(width, height, values.iter().map(|&v| to_pixel(v)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel lookup with replicate-edge semantics for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[cy * self.width + cx]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage, ImageError> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(ImageError::Dimensions {
                width: w,
                height: h,
                len: self.data.len(),
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        GrayImage::new(w, h, data)
    }
}

#[inline]
pub(crate) fn to_pixel(v: f64) -> u8 {
    // f64::round is half-away-from-zero.
    v.round().clamp(0.0, 255.0) as u8
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PgmError> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format_err(start, format!("{what} out of range")))
    }
}

/// Decodes a binary (P5) or plain (P2) graymap with maxval <= 255.
///
/// Pixel values are returned exactly as stored; no rescaling by maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'2') {
        return Err(format_err(0, "expected magic P5 or P2"));
    }
    let binary = bytes[1] == b'5';
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number("width")?;
    let height = rd.number("height")?;
    rd.skip_ws_and_comments();
    let maxval_at = rd.pos;
    let maxval = rd.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(maxval_at, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err(
            maxval_at,
            format!("maxval {maxval} outside 1..=255"),
        ));
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| format_err(maxval_at, "image dimensions overflow"))?;

    let data = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        if rd.pos >= bytes.len() || !bytes[rd.pos].is_ascii_whitespace() {
            return Err(format_err(rd.pos, "missing whitespace after maxval"));
        }
        let start = rd.pos + 1;
        let available = bytes.len().saturating_sub(start);
        if available < count {
            return Err(format_err(
                bytes.len(),
                format!("truncated payload: expected {count} bytes, found {available}"),
            ));
        }
        let payload = &bytes[start..start + count];
        if let Some(i) = payload.iter().position(|&v| v as usize > maxval) {
            return Err(format_err(start + i, "sample exceeds maxval"));
        }
        payload.to_vec()
    } else {
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let at = rd.pos;
            let v = rd.number("sample").map_err(|e| match e {
                PgmError::Format { offset, .. } if offset >= bytes.len() => {
                    format_err(offset, "truncated payload")
                }
                e => e,
            })?;
            if v > maxval {
                return Err(format_err(at, "sample exceeds maxval"));
            }
            data.push(v as u8);
        }
        data
    };
    GrayImage::new(width, height, data).map_err(|e| format_err(0, e.to_string()))
}

/// Encodes as binary P5 with maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.data);
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, PgmError> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), PgmError> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

/// Catmull-Rom cubic (a = -0.5).
#[inline]
pub(crate) fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample taps along one axis: `(clamped source index, weight)`.
struct AxisTaps {
    offsets: Vec<usize>,
    taps: Vec<(usize, f64)>,
}

impl AxisTaps {
    /// `src_of(i)` gives the continuous source coordinate of output sample `i`
    /// (pixel-centre convention). `scale` is output/input; downscaling widens
    /// the kernel by `1/scale` so the cubic acts as a low-pass prefilter.
    fn cubic(in_len: usize, out_len: usize, scale: f64, src_of: impl Fn(usize) -> f64) -> Self {
        let support = if scale < 1.0 { 1.0 / scale } else { 1.0 };
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut taps = Vec::new();
        for i in 0..out_len {
            offsets.push(taps.len());
            let c = src_of(i);
            let lo = (c - 2.0 * support).floor() as isize;
            let hi = (c + 2.0 * support).ceil() as isize;
            let start = taps.len();
            let mut sum = 0.0;
            for j in lo..=hi {
                let w = cubic_kernel((j as f64 - c) / support);
                if w != 0.0 {
                    let idx = j.clamp(0, in_len as isize - 1) as usize;
                    taps.push((idx, w));
                    sum += w;
                }
            }
            for t in &mut taps[start..] {
                t.1 /= sum;
            }
        }
        offsets.push(taps.len());
        Self { offsets, taps }
    }

    fn gaussian(len: usize, kernel: &[f64]) -> Self {
        let r = (kernel.len() / 2) as isize;
        let mut offsets = Vec::with_capacity(len + 1);
        let mut taps = Vec::with_capacity(len * kernel.len());
        for i in 0..len {
            offsets.push(taps.len());
            for (k, &w) in kernel.iter().enumerate() {
                let j = i as isize + k as isize - r;
                taps.push((j.clamp(0, len as isize - 1) as usize, w));
            }
        }
        offsets.push(taps.len());
        Self { offsets, taps }
    }

    #[inline]
    fn of(&self, i: usize) -> &[(usize, f64)] {
        &self.taps[self.offsets[i]..self.offsets[i + 1]]
    }

    fn len(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Separable filtering: horizontal taps first, then vertical.
fn separable(src: &[f64], in_w: usize, in_h: usize, xs: &AxisTaps, ys: &AxisTaps) -> Vec<f64> {
    let out_w = xs.len();
    let out_h = ys.len();
    let mut tmp = vec![0.0; in_h * out_w];
    for y in 0..in_h {
        let row = &src[y * in_w..(y + 1) * in_w];
        let dst = &mut tmp[y * out_w..(y + 1) * out_w];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = xs.of(x).iter().map(|&(i, w)| w * row[i]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let dst = &mut out[y * out_w..(y + 1) * out_w];
        for &(j, w) in ys.of(y) {
            let row = &tmp[j * out_w..(j + 1) * out_w];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += w * v;
            }
        }
    }
    out
}

fn as_f64(img: &GrayImage) -> Vec<f64> {
    img.data.iter().map(|&v| v as f64).collect()
}

/// Resamples `img` onto an `out_w`x`out_h` grid where output pixel `(x, y)`
/// reads source coordinate `(x0 + x / scale, y0 + y / scale)`.
pub(crate) fn resample_affine(
    img: &GrayImage,
    out_w: usize,
    out_h: usize,
    scale: f64,
    x0: f64,
    y0: f64,
) -> GrayImage {
    let xs = AxisTaps::cubic(img.width, out_w, scale, |i| x0 + i as f64 / scale);
    let ys = AxisTaps::cubic(img.height, out_h, scale, |i| y0 + i as f64 / scale);
    let out = separable(&as_f64(img), img.width, img.height, &xs, &ys);
    GrayImage::from_f64(out_w, out_h, &out).expect("resample output dimensions are valid")
}

/// Bicubic (Catmull-Rom) resize with pixel-centre alignment.
pub fn resize_bicubic(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage, ImageError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageError::ZeroTarget(out_w, out_h));
    }
    let sx = out_w as f64 / img.width as f64;
    let sy = out_h as f64 / img.height as f64;
    let xs = AxisTaps::cubic(img.width, out_w, sx, |i| (i as f64 + 0.5) / sx - 0.5);
    let ys = AxisTaps::cubic(img.height, out_h, sy, |i| (i as f64 + 0.5) / sy - 0.5);
    let out = separable(&as_f64(img), img.width, img.height, &xs, &ys);
    GrayImage::from_f64(out_w, out_h, &out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurConfig {
    sigma: f64,
    kernel_radius: usize,
}

impl BlurConfig {
    /// Kernel radius is `ceil(3 sigma)`.
    pub fn new(sigma: f64) -> Result<Self, ImageError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(ImageError::Sigma(sigma));
        }
        Ok(Self {
            sigma,
            kernel_radius: ((3.0 * sigma).ceil() as usize).max(1),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kernel_radius(&self) -> usize {
        self.kernel_radius
    }

    /// Sampled Gaussian at integer offsets `-r..=r`, L1-normalized.
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.kernel_radius as isize;
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let raw: Vec<f64> = (-r..=r)
            .map(|d| (-((d * d) as f64) / two_s2).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    }
}

/// Unrounded separable Gaussian blur, row-major.
pub fn gaussian_blur_f64(img: &GrayImage, cfg: &BlurConfig) -> Vec<f64> {
    let k = cfg.kernel();
    let xs = AxisTaps::gaussian(img.width, &k);
    let ys = AxisTaps::gaussian(img.height, &k);
    separable(&as_f64(img), img.width, img.height, &xs, &ys)
}

pub fn gaussian_blur(img: &GrayImage, cfg: &BlurConfig) -> GrayImage {
    let out = gaussian_blur_f64(img, cfg);
    GrayImage::from_f64(img.width, img.height, &out).expect("blur keeps dimensions")
}
