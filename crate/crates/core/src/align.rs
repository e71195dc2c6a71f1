//! Geometric normalization of ocular images into a canonical frame and
//! extraction of the three analysis regions.
//!
//! The iris centre is mapped to the frame centre and the iris radius to a
//! fixed canonical radius using a uniform scale; the frame is then cropped
//! from the scaled plane. Samples that would fall outside the source are
//! never fabricated: such images are rejected with
//! [`AlignError::InsufficientBorder`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::{resample_affine, GrayImage};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("invalid iris geometry ({0})")]
    InvalidGeometry(String),
    #[error("invalid alignment parameters ({0})")]
    InvalidParams(String),
    #[error(
        "insufficient border: scaled source spans x [{x_min:.1}, {x_max:.1}] y [{y_min:.1}, {y_max:.1}] \
         but the frame needs [0, {w_max}] x [0, {h_max}]"
    )]
    InsufficientBorder {
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        w_max: usize,
        h_max: usize,
    },
}

/// Iris centre and radius in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcularGeometry {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

impl OcularGeometry {
    pub fn new(center_x: f64, center_y: f64, radius: f64) -> Self {
        Self {
            center_x,
            center_y,
            radius,
        }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(AlignError::InvalidGeometry(format!(
                "radius {} must be positive",
                self.radius
            )));
        }
        if !(self.center_x.is_finite() && self.center_y.is_finite()) {
            return Err(AlignError::InvalidGeometry("non-finite centre".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, img: &GrayImage) -> Result<(), AlignError> {
        self.validate()?;
        let inside = self.center_x >= 0.0
            && self.center_y >= 0.0
            && self.center_x <= (img.width() - 1) as f64
            && self.center_y <= (img.height() - 1) as f64;
        if !inside {
            return Err(AlignError::InvalidGeometry(format!(
                "centre ({}, {}) outside {}x{} image",
                self.center_x,
                self.center_y,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignParams {
    pub out_w: usize,
    pub out_h: usize,
    pub canonical_radius: usize,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            out_w: 400,
            out_h: 340,
            canonical_radius: 60,
        }
    }
}

impl AlignParams {
    pub fn validate(&self) -> Result<(), AlignError> {
        if self.out_w == 0 || self.out_h == 0 {
            return Err(AlignError::InvalidParams("zero frame dimension".into()));
        }
        let limit = self.out_w.min(self.out_h) / 2;
        if self.canonical_radius == 0 || self.canonical_radius >= limit {
            return Err(AlignError::InvalidParams(format!(
                "canonical radius {} must lie in 1..{limit}",
                self.canonical_radius
            )));
        }
        Ok(())
    }

    /// Canonical iris centre in frame pixel coordinates.
    pub fn center(&self) -> (usize, usize) {
        (self.out_w / 2, self.out_h / 2)
    }

    /// Whether frame pixel `(x, y)` lies strictly inside the canonical iris disc.
    #[inline]
    pub fn in_iris_disc(&self, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center();
        let dx = x as i64 - cx as i64;
        let dy = y as i64 - cy as i64;
        let r = self.canonical_radius as i64;
        dx * dx + dy * dy < r * r
    }

    /// Output dimensions of a region image.
    pub fn region_dims(&self, sel: RegionSelector) -> (usize, usize) {
        match sel {
            RegionSelector::IrisOnly => (2 * self.canonical_radius, 2 * self.canonical_radius),
            _ => (self.out_w, self.out_h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSelector {
    ExtendedOcular,
    IrisOnly,
    IrisExcluded,
}

impl RegionSelector {
    pub const ALL: [RegionSelector; 3] = [
        RegionSelector::ExtendedOcular,
        RegionSelector::IrisOnly,
        RegionSelector::IrisExcluded,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RegionSelector::ExtendedOcular => "extended_ocular",
            RegionSelector::IrisOnly => "iris_only",
            RegionSelector::IrisExcluded => "iris_excluded",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            RegionSelector::ExtendedOcular => 0,
            RegionSelector::IrisOnly => 1,
            RegionSelector::IrisExcluded => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for RegionSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown region '{s}' (expected extended_ocular, iris_only or iris_excluded)"))
    }
}

/// Maps the iris onto the canonical frame with a uniform bicubic rescale.
pub fn align_ocular(
    img: &GrayImage,
    geo: &OcularGeometry,
    p: &AlignParams,
) -> Result<GrayImage, AlignError> {
    p.validate()?;
    geo.validate_for(img)?;
    let scale = p.canonical_radius as f64 / geo.radius;
    let (ccx, ccy) = p.center();
    let x0 = geo.center_x - ccx as f64 / scale;
    let y0 = geo.center_y - ccy as f64 / scale;
    let x1 = x0 + (p.out_w - 1) as f64 / scale;
    let y1 = y0 + (p.out_h - 1) as f64 / scale;

    const EPS: f64 = 1e-9;
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    if x0 < -EPS || y0 < -EPS || x1 > max_x + EPS || y1 > max_y + EPS {
        return Err(AlignError::InsufficientBorder {
            x_min: x0,
            x_max: x1,
            y_min: y0,
            y_max: y1,
            w_max: img.width() - 1,
            h_max: img.height() - 1,
        });
    }
    Ok(resample_affine(img, p.out_w, p.out_h, scale, x0, y0))
}

/// Selects one analysis region from a canonical frame. Masked pixels are 0.
pub fn apply_region(frame: &GrayImage, p: &AlignParams, sel: RegionSelector) -> GrayImage {
    debug_assert_eq!((frame.width(), frame.height()), (p.out_w, p.out_h));
    match sel {
        RegionSelector::ExtendedOcular => frame.clone(),
        RegionSelector::IrisExcluded => {
            let mut out = frame.clone();
            for y in 0..p.out_h {
                for x in 0..p.out_w {
                    if p.in_iris_disc(x, y) {
                        out.set(x, y, 0);
                    }
                }
            }
            out
        }
        RegionSelector::IrisOnly => {
            let (cx, cy) = p.center();
            let r = p.canonical_radius;
            let (x0, y0) = (cx - r, cy - r);
            GrayImage::from_fn(2 * r, 2 * r, |x, y| {
                if p.in_iris_disc(x0 + x, y0 + y) {
                    frame.get(x0 + x, y0 + y)
                } else {
                    0
                }
            })
            .expect("iris crop fits inside the canonical frame")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random_range(1..=255)).unwrap()
    }

    #[test]
    fn unit_scale_is_a_pure_crop() {
        let src = noise(640, 480, 1);
        let geo = OcularGeometry::new(320.0, 240.0, 60.0);
        let p = AlignParams::default();
        let out = align_ocular(&src, &geo, &p).unwrap();
        assert_eq!((out.width(), out.height()), (400, 340));
        assert_eq!(out.get(200, 170), src.get(320, 240));
        assert_eq!(out, src.crop(120, 70, 400, 340).unwrap());
    }

    /// Averages each 2x2 block; the reference for an exact 0.5 downscale.
    fn box_downsample(src: &GrayImage) -> Vec<f64> {
        let (w, h) = (src.width() / 2, src.height() / 2);
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                    .iter()
                    .map(|&(dx, dy)| src.get(2 * x + dx, 2 * y + dy) as u32)
                    .sum();
                out.push(s as f64 / 4.0);
            }
        }
        out
    }

    #[test]
    fn half_scale_preserves_iris_mean() {
        // A 640x480 source cannot supply a 400x340 frame at scale 0.5, so the
        // scenario uses a source large enough to cover it.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = GrayImage::from_fn(1280, 960, |x, y| {
            let base = 120.0 + 50.0 * ((x as f64) * 0.031).sin() * ((y as f64) * 0.027).cos();
            (base + rng.random_range(-20.0..20.0)).round() as u8
        })
        .unwrap();
        let geo = OcularGeometry::new(640.0, 480.0, 120.0);
        let p = AlignParams::default();
        let out = align_ocular(&src, &geo, &p).unwrap();

        let mut got = (0.0, 0usize);
        for y in 0..p.out_h {
            for x in 0..p.out_w {
                if p.in_iris_disc(x, y) {
                    got.0 += out.get(x, y) as f64;
                    got.1 += 1;
                }
            }
        }
        // Oracle: 2x2 box average, iris disc at (320,240) in the half-size plane
        // after the half-pixel shift of the box grid.
        let oracle = box_downsample(&src);
        let mut want = (0.0, 0usize);
        for y in 0..480usize {
            for x in 0..640usize {
                let dx = x as f64 + 0.25 - 320.0;
                let dy = y as f64 + 0.25 - 240.0;
                if dx * dx + dy * dy < 3600.0 {
                    want.0 += oracle[y * 640 + x];
                    want.1 += 1;
                }
            }
        }
        let (g, w) = (got.0 / got.1 as f64, want.0 / want.1 as f64);
        assert!((g - w).abs() <= 1.0, "{g} vs {w}");
    }

    #[test]
    fn corner_iris_is_rejected() {
        let src = noise(480, 480, 2);
        let geo = OcularGeometry::new(30.0, 30.0, 60.0);
        assert!(matches!(
            align_ocular(&src, &geo, &AlignParams::default()),
            Err(AlignError::InsufficientBorder { .. })
        ));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let src = noise(64, 64, 2);
        let p = AlignParams {
            out_w: 40,
            out_h: 40,
            canonical_radius: 10,
        };
        for geo in [
            OcularGeometry::new(10.0, 10.0, 0.0),
            OcularGeometry::new(-1.0, 10.0, 5.0),
            OcularGeometry::new(10.0, 64.0, 5.0),
        ] {
            assert!(matches!(
                align_ocular(&src, &geo, &p),
                Err(AlignError::InvalidGeometry(_))
            ));
        }
        let bad = AlignParams {
            canonical_radius: 20,
            ..p
        };
        assert!(matches!(
            align_ocular(&src, &OcularGeometry::new(32.0, 32.0, 10.0), &bad),
            Err(AlignError::InvalidParams(_))
        ));
    }

    #[test]
    fn canonical_frame_is_a_fixed_point() {
        let p = AlignParams::default();
        let frame = noise(400, 340, 3);
        let geo = OcularGeometry::new(200.0, 170.0, 60.0);
        let once = align_ocular(&frame, &geo, &p).unwrap();
        assert_eq!(once, frame);
        assert_eq!(align_ocular(&once, &geo, &p).unwrap(), once);
    }

    #[test]
    fn border_exactly_sufficient_is_accepted() {
        let p = AlignParams::default();
        let src = noise(400, 340, 4);
        // Shifting by one pixel in any direction runs off the source.
        assert!(align_ocular(&src, &OcularGeometry::new(200.0, 170.0, 60.0), &p).is_ok());
        assert!(align_ocular(&src, &OcularGeometry::new(201.0, 170.0, 60.0), &p).is_err());
        assert!(align_ocular(&src, &OcularGeometry::new(200.0, 169.0, 60.0), &p).is_err());
    }

    #[test]
    fn extended_region_is_identity() {
        let p = AlignParams::default();
        let frame = noise(400, 340, 6);
        assert_eq!(apply_region(&frame, &p, RegionSelector::ExtendedOcular), frame);
    }

    #[test]
    fn iris_only_geometry() {
        let p = AlignParams::default();
        let frame = noise(400, 340, 7);
        let iris = apply_region(&frame, &p, RegionSelector::IrisOnly);
        assert_eq!((iris.width(), iris.height()), (120, 120));
        assert_eq!(iris.get(0, 0), 0);
        assert_eq!(iris.get(60, 60), frame.get(200, 170));
    }

    #[test]
    fn iris_only_and_excluded_partition_the_frame() {
        let p = AlignParams::default();
        // Strictly positive pixels so every zero in a region is a mask.
        let frame = noise(400, 340, 8);
        let iris = apply_region(&frame, &p, RegionSelector::IrisOnly);
        let excl = apply_region(&frame, &p, RegionSelector::IrisExcluded);
        let (cx, cy) = p.center();
        let r = p.canonical_radius;
        let mut disc = 0;
        for y in 0..p.out_h {
            for x in 0..p.out_w {
                let in_crop = (cx - r..cx + r).contains(&x) && (cy - r..cy + r).contains(&y);
                let from_iris = in_crop && iris.get(x + r - cx, y + r - cy) != 0;
                let from_excl = excl.get(x, y) != 0;
                assert!(!(from_iris && from_excl), "overlap at ({x},{y})");
                assert!(from_iris || from_excl, "hole at ({x},{y})");
                if from_iris {
                    assert_eq!(iris.get(x + r - cx, y + r - cy), frame.get(x, y));
                    disc += 1;
                } else {
                    assert_eq!(excl.get(x, y), frame.get(x, y));
                }
            }
        }
        // Lattice points strictly inside a radius-60 circle.
        let expected = (-60i64..=60)
            .flat_map(|dy| (-60i64..=60).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx * dx + dy * dy < 3600)
            .count();
        assert_eq!(disc, expected);
    }

    #[test]
    fn region_names_round_trip() {
        for r in RegionSelector::ALL {
            assert_eq!(r.as_str().parse::<RegionSelector>().unwrap(), r);
            assert_eq!(RegionSelector::from_code(r.code()), Some(r));
        }
        assert!("iris".parse::<RegionSelector>().is_err());
    }
}
