//! Deterministic synthetic ocular images with planted, class-conditional
//! texture, plus dead-leaves images for filter learning.
//!
//! Every subject gets a base eye template (bright field, darker iris disc,
//! dark pupil). The race-like attribute is planted as band-pass noise inside
//! the iris annulus; the gender-like attribute as oriented noise in the
//! surrounding field. Texture phases are fixed per subject, while each image
//! adds a small shift, an illumination offset and sensor noise.
//!
//! Random streams are split per subject and per image from the master seed,
//! so rendering order never changes the output.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::OcularGeometry;
use crate::dataset::{
    Attribute, DatasetManifest, Eye, EyeColor, FieldCount, Gender, ManifestError, Race,
    SampleRecord,
};
use crate::imgcore::{gaussian_blur, write_pgm, BlurConfig, GrayImage, PgmError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Band-pass texture of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    /// Band centre in cycles per pixel.
    pub frequency: f64,
    /// Dominant orientation in radians.
    pub orientation: f64,
    /// Standard deviation of the texture in gray levels.
    pub contrast: f64,
    /// Relative half-width of the frequency band.
    pub bandwidth: f64,
    /// Half-width of the orientation band in radians; `pi/2` is isotropic.
    pub orientation_spread: f64,
}

impl ClassTexture {
    pub fn isotropic(frequency: f64, contrast: f64) -> Self {
        Self {
            frequency,
            orientation: 0.0,
            contrast,
            bandwidth: 0.2,
            orientation_spread: FRAC_PI_2,
        }
    }

    pub fn oriented(frequency: f64, orientation: f64, contrast: f64) -> Self {
        Self {
            frequency,
            orientation,
            contrast,
            bandwidth: 0.2,
            orientation_spread: 0.25,
        }
    }

    fn validate(&self, what: &str) -> Result<(), SynthError> {
        let hi = self.frequency * (1.0 + self.bandwidth);
        let lo = self.frequency * (1.0 - self.bandwidth);
        if !(self.frequency > 0.0 && lo > 0.0 && hi < 0.5) {
            return Err(SynthError::InvalidSpec(format!(
                "{what}: band [{lo}, {hi}] must lie in (0, 0.5) cycles/pixel"
            )));
        }
        if !(0.0..=80.0).contains(&self.contrast) {
            return Err(SynthError::InvalidSpec(format!(
                "{what}: contrast {} outside [0, 80]",
                self.contrast
            )));
        }
        if !(0.0..=FRAC_PI_2).contains(&self.orientation_spread) || !self.orientation.is_finite() {
            return Err(SynthError::InvalidSpec(format!(
                "{what}: bad orientation parameters"
            )));
        }
        Ok(())
    }
}

/// Texture rendered for subjects of the given eye colour is taken from the
/// opposite class of `attribute` with probability `rate`, so the label in
/// the manifest disagrees with the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    pub attribute: Attribute,
    pub eye_color: EyeColor,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub name: String,
    pub subject_prefix: String,
    /// Subjects per class of each attribute; `2 *` this many subjects are
    /// rendered, crossing race and gender evenly.
    pub num_subjects_per_class: usize,
    pub images_per_subject: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Inclusive integer range of iris radii.
    pub iris_radius_range: (u32, u32),
    /// Maximum offset of a subject's iris centre from the image centre.
    pub center_jitter: u32,
    /// Maximum per-image shift in pixels.
    pub max_shift: u32,
    /// Maximum per-image illumination offset in gray levels.
    pub illumination: f64,
    pub noise_std: f64,
    pub field_level: f64,
    pub iris_level: f64,
    pub pupil_level: f64,
    /// Pupil radius as a fraction of the iris radius.
    pub pupil_ratio: f64,
    /// Planted inside the iris annulus, indexed by race class.
    pub race_texture: [ClassTexture; 2],
    /// Planted in the field outside the iris, indexed by gender class.
    pub gender_texture: [ClassTexture; 2],
    pub eye_color_mix: Vec<(EyeColor, f64)>,
    pub label_noise: Vec<LabelNoise>,
    /// Render every subject with the other class's textures.
    pub swap_textures: bool,
    pub sensors: Vec<String>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            subject_prefix: "s".into(),
            num_subjects_per_class: 20,
            images_per_subject: 3,
            image_width: 640,
            image_height: 480,
            iris_radius_range: (56, 64),
            center_jitter: 15,
            max_shift: 5,
            illumination: 10.0,
            noise_std: 2.0,
            field_level: 165.0,
            iris_level: 100.0,
            pupil_level: 25.0,
            pupil_ratio: 0.35,
            race_texture: [
                ClassTexture::isotropic(0.05, 40.0),
                ClassTexture::isotropic(0.25, 40.0),
            ],
            gender_texture: [
                ClassTexture::oriented(0.025, 0.0, 3.0),
                ClassTexture::oriented(0.025, FRAC_PI_2, 3.0),
            ],
            eye_color_mix: vec![
                (EyeColor::Brown, 0.5),
                (EyeColor::Blue, 0.3),
                (EyeColor::Green, 0.1),
                (EyeColor::Hazel, 0.1),
            ],
            label_noise: Vec::new(),
            swap_textures: false,
            sensors: vec!["sensor_a".into(), "sensor_b".into(), "sensor_c".into()],
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn num_subjects(&self) -> usize {
        2 * self.num_subjects_per_class
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.num_subjects_per_class == 0 || self.images_per_subject == 0 {
            return bad("need at least one subject per class and one image per subject".into());
        }
        let (lo, hi) = self.iris_radius_range;
        if lo == 0 || lo > hi {
            return bad(format!("bad iris radius range {lo}..={hi}"));
        }
        let reach = (hi + self.center_jitter + self.max_shift) as usize;
        if 2 * reach + 2 > self.image_width.min(self.image_height) {
            return bad(format!(
                "{}x{} image cannot hold an iris of radius {hi} with {} px of jitter",
                self.image_width,
                self.image_height,
                self.center_jitter + self.max_shift
            ));
        }
        if self.sensors.is_empty() {
            return bad("no sensor names".into());
        }
        if self.eye_color_mix.is_empty()
            || self.eye_color_mix.iter().any(|(_, w)| w.is_nan() || *w < 0.0)
            || self.eye_color_mix.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return bad("eye colour weights must be non-negative with a positive sum".into());
        }
        if self.label_noise.iter().any(|n| !(0.0..=1.0).contains(&n.rate)) {
            return bad("label noise rates must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.pupil_ratio) || self.noise_std < 0.0 || self.illumination < 0.0 {
            return bad("bad pupil ratio, noise or illumination".into());
        }
        for (i, t) in self.race_texture.iter().enumerate() {
            t.validate(&format!("race texture {i}"))?;
        }
        for (i, t) in self.gender_texture.iter().enumerate() {
            t.validate(&format!("gender texture {i}"))?;
        }
        Ok(())
    }

    fn subject_rng(&self, subject: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((subject as u64) << 20);
        rng
    }

    fn image_rng(&self, subject: usize, image: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((subject as u64) << 20) | (image as u64 + 1));
        rng
    }
}

/// Sum of random plane waves drawn from a frequency/orientation band,
/// evaluated separably.
#[derive(Debug, Clone)]
pub struct BandPassTexture {
    waves: Vec<(f64, f64, f64)>,
    amplitude: f64,
}

const TEXTURE_WAVES: usize = 32;

impl BandPassTexture {
    pub fn sample(t: &ClassTexture, rng: &mut impl Rng) -> Self {
        let waves = (0..TEXTURE_WAVES)
            .map(|_| {
                let f = t.frequency * (1.0 + t.bandwidth * rng.random_range(-1.0..=1.0));
                let theta = t.orientation + t.orientation_spread * rng.random_range(-1.0..=1.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let w = 2.0 * PI * f;
                (w * theta.cos(), w * theta.sin(), phase)
            })
            .collect();
        Self {
            waves,
            amplitude: t.contrast * (2.0 / TEXTURE_WAVES as f64).sqrt(),
        }
    }

    /// Texture values on a `w x h` grid whose pixel `(x, y)` sits at
    /// texture coordinates `(x - ox, y - oy)`.
    pub fn render(&self, w: usize, h: usize, ox: f64, oy: f64) -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        let mut row = vec![(0.0, 0.0); w];
        for &(kx, ky, phase) in &self.waves {
            for (x, r) in row.iter_mut().enumerate() {
                let a = kx * (x as f64 - ox) + phase;
                *r = (a.cos(), a.sin());
            }
            for y in 0..h {
                let b = ky * (y as f64 - oy);
                let (cb, sb) = (b.cos(), b.sin());
                let line = &mut out[y * w..(y + 1) * w];
                for (v, &(ca, sa)) in line.iter_mut().zip(&row) {
                    *v += ca * cb - sa * sb;
                }
            }
        }
        for v in &mut out {
            *v *= self.amplitude;
        }
        out
    }
}

/// Ground truth of one synthetic subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub index: usize,
    pub subject_id: String,
    pub gender: Gender,
    pub race: Race,
    pub eye_color: EyeColor,
    /// Texture classes actually rendered.
    pub gender_texture: usize,
    pub race_texture: usize,
    pub center_x: i64,
    pub center_y: i64,
    pub radius: i64,
}

impl SubjectTruth {
    /// Whether the rendered texture disagrees with the manifest label.
    pub fn mislabelled(&self, attribute: Attribute, swapped: bool) -> bool {
        let (label, rendered) = match attribute {
            Attribute::Gender => (self.gender == Gender::Female, self.gender_texture == 1),
            Attribute::Race => (self.race == Race::NonCaucasian, self.race_texture == 1),
        };
        (label != rendered) != swapped
    }
}

fn pick_color(mix: &[(EyeColor, f64)], rng: &mut impl Rng) -> EyeColor {
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(c, w) in mix {
        if u < w {
            return c;
        }
        u -= w;
    }
    mix.iter().rev().find(|(_, w)| *w > 0.0).map(|(c, _)| *c).unwrap_or(EyeColor::Unknown)
}

pub fn plan_subject(spec: &SynthSpec, index: usize) -> SubjectTruth {
    let mut rng = spec.subject_rng(index);
    let race_class = index % 2;
    let gender_class = (index / 2) % 2;
    let eye_color = pick_color(&spec.eye_color_mix, &mut rng);
    let (lo, hi) = spec.iris_radius_range;
    let radius = rng.random_range(lo..=hi) as i64;
    let j = spec.center_jitter as i64;
    let center_x = (spec.image_width / 2) as i64 + rng.random_range(-j..=j);
    let center_y = (spec.image_height / 2) as i64 + rng.random_range(-j..=j);
    let mut textures = [gender_class, race_class];
    for noise in &spec.label_noise {
        let flip = rng.random::<f64>() < noise.rate;
        if flip && noise.eye_color == eye_color {
            let slot = match noise.attribute {
                Attribute::Gender => 0,
                Attribute::Race => 1,
            };
            textures[slot] ^= 1;
        }
    }
    if spec.swap_textures {
        textures = [textures[0] ^ 1, textures[1] ^ 1];
    }
    SubjectTruth {
        index,
        subject_id: format!("{}{:04}", spec.subject_prefix, index),
        gender: [Gender::Male, Gender::Female][gender_class],
        race: [Race::Caucasian, Race::NonCaucasian][race_class],
        eye_color,
        gender_texture: textures[0],
        race_texture: textures[1],
        center_x,
        center_y,
        radius,
    }
}

pub fn plan_subjects(spec: &SynthSpec) -> Vec<SubjectTruth> {
    (0..spec.num_subjects()).map(|i| plan_subject(spec, i)).collect()
}

/// Renders image `image` of a subject, returning its manifest record (with
/// a path relative to the dataset directory) and the pixels.
pub fn render_image(spec: &SynthSpec, truth: &SubjectTruth, image: usize) -> (SampleRecord, GrayImage) {
    let (w, h) = (spec.image_width, spec.image_height);
    let mut subject_rng = spec.subject_rng(truth.index);
    // Skip past the draws used by `plan_subject` so textures get their own
    // part of the subject stream.
    subject_rng.set_word_pos(1 << 16);
    let iris_tex = BandPassTexture::sample(&spec.race_texture[truth.race_texture], &mut subject_rng);
    let field_tex = BandPassTexture::sample(&spec.gender_texture[truth.gender_texture], &mut subject_rng);

    let mut rng = spec.image_rng(truth.index, image);
    let s = spec.max_shift as i64;
    let cx = truth.center_x + rng.random_range(-s..=s);
    let cy = truth.center_y + rng.random_range(-s..=s);
    let illum = if spec.illumination > 0.0 {
        rng.random_range(-spec.illumination..=spec.illumination)
    } else {
        0.0
    };

    let iris = iris_tex.render(w, h, cx as f64, cy as f64);
    let field = field_tex.render(w, h, cx as f64, cy as f64);
    let r2 = truth.radius * truth.radius;
    let rp = spec.pupil_ratio * truth.radius as f64;
    let rp2 = rp * rp;
    let mut values = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = x as i64 - cx;
            let dy = y as i64 - cy;
            let d2 = dx * dx + dy * dy;
            let base = if (d2 as f64) < rp2 {
                spec.pupil_level
            } else if d2 < r2 {
                spec.iris_level + iris[i]
            } else {
                spec.field_level + field[i]
            };
            let noise = if spec.noise_std > 0.0 {
                spec.noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            values[i] = base + illum + noise;
        }
    }
    let img = GrayImage::from_f64(w, h, &values).expect("non-empty synthetic image");
    let record = SampleRecord {
        image_path: format!("images/{}_{}.pgm", truth.subject_id, image),
        subject_id: truth.subject_id.clone(),
        eye: if image.is_multiple_of(2) { Eye::L } else { Eye::R },
        sensor: spec.sensors[(truth.index + image) % spec.sensors.len()].clone(),
        gender: truth.gender,
        race: truth.race,
        eye_color: truth.eye_color,
        geometry: OcularGeometry::new(cx as f64, cy as f64, truth.radius as f64),
        race_detail: None,
    };
    (record, img)
}

/// All rendered records and images in manifest order.
pub fn render_all(spec: &SynthSpec) -> Result<Vec<(SampleRecord, GrayImage)>, SynthError> {
    spec.validate()?;
    let subjects = plan_subjects(spec);
    Ok(subjects
        .par_iter()
        .flat_map_iter(|t| (0..spec.images_per_subject).map(move |j| render_image(spec, t, j)))
        .collect())
}

/// Counts tallied while generating, independent of the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLedger {
    pub subjects: Vec<SubjectTruth>,
    /// `(field, value) -> counts`
    pub counts: BTreeMap<(String, String), FieldCount>,
}

impl SynthLedger {
    fn tally(spec: &SynthSpec, subjects: Vec<SubjectTruth>) -> Self {
        let mut counts: BTreeMap<(String, String), FieldCount> = BTreeMap::new();
        let per = spec.images_per_subject;
        for t in &subjects {
            for (field, value) in [
                ("gender", t.gender.as_str()),
                ("race", t.race.as_str()),
                ("eye_color", t.eye_color.as_str()),
            ] {
                let c = counts.entry((field.into(), value.into())).or_default();
                c.subjects += 1;
                c.images += per;
            }
            let mut eyes = [0usize; 2];
            let mut sensors = vec![0usize; spec.sensors.len()];
            for j in 0..per {
                eyes[j % 2] += 1;
                sensors[(t.index + j) % spec.sensors.len()] += 1;
            }
            for (eye, n) in [Eye::L, Eye::R].iter().zip(eyes) {
                if n > 0 {
                    let c = counts.entry(("eye".into(), eye.to_string())).or_default();
                    c.subjects += 1;
                    c.images += n;
                }
            }
            for (name, n) in spec.sensors.iter().zip(sensors) {
                if n > 0 {
                    let c = counts.entry(("sensor".into(), name.clone())).or_default();
                    c.subjects += 1;
                    c.images += n;
                }
            }
        }
        Self { subjects, counts }
    }

    pub fn counts_csv(&self) -> String {
        let mut s = String::from("field,value,subjects,images\n");
        for ((f, v), c) in &self.counts {
            let _ = writeln!(s, "{f},{v},{},{}", c.subjects, c.images);
        }
        s
    }

    pub fn subjects_csv(&self) -> String {
        let mut s = String::from(
            "subject_id,gender,race,eye_color,gender_texture,race_texture,center_x,center_y,radius\n",
        );
        for t in &self.subjects {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                t.subject_id,
                t.gender,
                t.race,
                t.eye_color,
                t.gender_texture,
                t.race_texture,
                t.center_x,
                t.center_y,
                t.radius
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub ledger: SynthLedger,
}

/// Renders the dataset into `out_dir`: `images/*.pgm`, `<name>.csv`,
/// `<name>.ledger.csv` and `<name>.subjects.csv`.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("images"))?;
    let subjects = plan_subjects(spec);
    let records: Vec<SampleRecord> = subjects
        .par_iter()
        .flat_map_iter(|t| (0..spec.images_per_subject).map(move |j| (t, j)))
        .map(|(t, j)| {
            let (rec, img) = render_image(spec, t, j);
            write_pgm(&img, out_dir.join(&rec.image_path))?;
            Ok(rec)
        })
        .collect::<Result<_, SynthError>>()?;
    let manifest = DatasetManifest::new(spec.name.clone(), out_dir, records);
    let manifest_path = out_dir.join(format!("{}.csv", spec.name));
    manifest.save(&manifest_path)?;
    let ledger = SynthLedger::tally(spec, subjects);
    std::fs::write(out_dir.join(format!("{}.ledger.csv", spec.name)), ledger.counts_csv())?;
    std::fs::write(out_dir.join(format!("{}.subjects.csv", spec.name)), ledger.subjects_csv())?;
    Ok(SynthOutput {
        manifest,
        manifest_path,
        ledger,
    })
}

/// Dead-leaves image: occluding discs of random gray level with radius
/// density proportional to `r^-3`, lightly blurred. Its scale-invariant,
/// heavy-tailed statistics resemble natural images, which makes it usable
/// as filter-learning input.
pub fn dead_leaves_image(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r_min, r_max) = (1.5f64, (width.min(height) as f64 / 4.0).max(2.0));
    let (a, b) = (r_min.powi(-2), r_max.powi(-2));
    let mut canvas = vec![128.0f64; width * height];
    let discs = width * height / 4;
    for _ in 0..discs {
        let u: f64 = rng.random();
        let r = (a - u * (a - b)).powf(-0.5);
        let cx = rng.random_range(-r_max..width as f64 + r_max);
        let cy = rng.random_range(-r_max..height as f64 + r_max);
        let level = rng.random_range(0.0..=255.0);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil().max(0.0) as usize).min(width);
        let y1 = ((cy + r).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy < r * r {
                    canvas[y * width + x] = level;
                }
            }
        }
    }
    let img = GrayImage::from_f64(width, height, &canvas).expect("non-empty canvas");
    gaussian_blur(&img, &BlurConfig::new(0.8).expect("positive sigma"))
}
