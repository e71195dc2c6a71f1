//! Dataset manifests: one CSV row per ocular image with subject, eye, sensor,
//! attribute labels and iris geometry.
//!
//! Paths inside a manifest are resolved relative to the manifest's own
//! directory. Race is binary at ingestion (`caucasian` / `non_caucasian`);
//! any finer label may ride along in the optional `race_detail` column.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::OcularGeometry;

pub const MANIFEST_COLUMNS: [&str; 10] = [
    "image_path",
    "subject_id",
    "eye",
    "sensor",
    "gender",
    "race",
    "eye_color",
    "iris_x",
    "iris_y",
    "iris_r",
];
pub const RACE_DETAIL_COLUMN: &str = "race_detail";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("bad manifest header: expected {expected}, found {found}")]
    Header { expected: String, found: String },
    #[error("row {row}, column \"{column}\": {msg}")]
    Parse {
        row: usize,
        column: String,
        msg: String,
    },
    #[error("duplicate image_path {path} at rows {first_row} and {second_row}")]
    Duplicate {
        path: String,
        first_row: usize,
        second_row: usize,
    },
    #[error("missing image files: {}", .0.iter().map(|(r, p)| format!("row {r}: {p}")).collect::<Vec<_>>().join("; "))]
    MissingFiles(Vec<(usize, String)>),
    #[error("unknown field '{0}'")]
    UnknownField(String),
    #[error("bad filter '{0}': expected field=value")]
    BadFilter(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "'{}' is not one of {}",
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

label_enum!(Eye { L => "L", R => "R" });
label_enum!(Gender { Male => "male", Female => "female", Unknown => "unknown" });
label_enum!(Race { Caucasian => "caucasian", NonCaucasian => "non_caucasian", Unknown => "unknown" });
label_enum!(EyeColor {
    Brown => "brown",
    Blue => "blue",
    Green => "green",
    Hazel => "hazel",
    Gray => "gray",
    Other => "other",
    Unknown => "unknown",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    pub subject_id: String,
    pub eye: Eye,
    pub sensor: String,
    pub gender: Gender,
    pub race: Race,
    pub eye_color: EyeColor,
    pub geometry: OcularGeometry,
    pub race_detail: Option<String>,
}

/// A binary attribute predicted by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Gender,
    Race,
}

impl Attribute {
    /// Class names; index 0 is the negative class, index 1 the positive one.
    pub fn classes(&self) -> [&'static str; 2] {
        match self {
            Attribute::Gender => [Gender::Male.as_str(), Gender::Female.as_str()],
            Attribute::Race => [Race::Caucasian.as_str(), Race::NonCaucasian.as_str()],
        }
    }

    /// Class index of a record, `None` when the label is unknown.
    pub fn class_of(&self, r: &SampleRecord) -> Option<usize> {
        match (self, r.gender, r.race) {
            (Attribute::Gender, Gender::Male, _) => Some(0),
            (Attribute::Gender, Gender::Female, _) => Some(1),
            (Attribute::Race, _, Race::Caucasian) => Some(0),
            (Attribute::Race, _, Race::NonCaucasian) => Some(1),
            _ => None,
        }
    }

    pub fn field(&self) -> Field {
        match self {
            Attribute::Gender => Field::Gender,
            Attribute::Race => Field::Race,
        }
    }

    pub fn as_str(&self) -> &'static str {
        self.field().as_str()
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gender" => Ok(Attribute::Gender),
            "race" => Ok(Attribute::Race),
            other => Err(format!("unknown attribute '{other}' (gender, race)")),
        }
    }
}

/// A record field usable for filtering and stratification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    SubjectId,
    Eye,
    Sensor,
    Gender,
    Race,
    EyeColor,
}

impl Field {
    pub fn as_str(&self) -> &'static str {
        match self {
            Field::SubjectId => "subject_id",
            Field::Eye => "eye",
            Field::Sensor => "sensor",
            Field::Gender => "gender",
            Field::Race => "race",
            Field::EyeColor => "eye_color",
        }
    }

    pub fn value_of<'a>(&self, r: &'a SampleRecord) -> &'a str {
        match self {
            Field::SubjectId => &r.subject_id,
            Field::Eye => r.eye.as_str(),
            Field::Sensor => &r.sensor,
            Field::Gender => r.gender.as_str(),
            Field::Race => r.race.as_str(),
            Field::EyeColor => r.eye_color.as_str(),
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Field::SubjectId,
            Field::Eye,
            Field::Sensor,
            Field::Gender,
            Field::Race,
            Field::EyeColor,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
        .ok_or_else(|| ManifestError::UnknownField(s.to_string()))
    }
}

/// `field=value` equality predicate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FieldFilter {
    pub field: Field,
    pub value: String,
}

impl FieldFilter {
    pub fn new(field: Field, value: impl Into<String>) -> Self {
        Self {
            field,
            value: value.into(),
        }
    }

    pub fn matches(&self, r: &SampleRecord) -> bool {
        self.field.value_of(r) == self.value
    }
}

impl fmt::Display for FieldFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.field, self.value)
    }
}

impl FromStr for FieldFilter {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (field, value) = s
            .split_once('=')
            .ok_or_else(|| ManifestError::BadFilter(s.to_string()))?;
        Ok(Self::new(field.trim().parse()?, value.trim()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FieldCount {
    pub subjects: usize,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory that relative image paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

fn parse_cell<T: FromStr<Err = String>>(
    rec: &csv::StringRecord,
    idx: usize,
    row: usize,
) -> Result<T, ManifestError> {
    rec.get(idx)
        .unwrap_or("")
        .parse()
        .map_err(|msg| ManifestError::Parse {
            row,
            column: MANIFEST_COLUMNS[idx].to_string(),
            msg,
        })
}

fn parse_coord(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<f64, ManifestError> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ManifestError::Parse {
            row,
            column: MANIFEST_COLUMNS[idx].to_string(),
            msg: format!("'{raw}' is not a finite number"),
        })
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Self {
        Self {
            name: name.into(),
            root: root.into(),
            records,
        }
    }

    /// Parses manifest CSV text. Rows are numbered from the header (row 1).
    pub fn from_csv_reader(
        reader: impl io::Read,
        name: impl Into<String>,
        root: impl Into<PathBuf>,
    ) -> Result<Self, ManifestError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let found: Vec<&str> = headers.iter().collect();
        let with_detail = found.len() == MANIFEST_COLUMNS.len() + 1
            && found[MANIFEST_COLUMNS.len()] == RACE_DETAIL_COLUMN;
        if found[..found.len().min(MANIFEST_COLUMNS.len())] != MANIFEST_COLUMNS[..]
            || !(found.len() == MANIFEST_COLUMNS.len() || with_detail)
        {
            return Err(ManifestError::Header {
                expected: MANIFEST_COLUMNS.join(","),
                found: found.join(","),
            });
        }
        let width = found.len();

        let mut records = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec?;
            if rec.len() != width {
                return Err(ManifestError::Parse {
                    row,
                    column: "*".into(),
                    msg: format!("expected {width} columns, found {}", rec.len()),
                });
            }
            let image_path = rec[0].to_string();
            let subject_id = rec[1].to_string();
            if image_path.is_empty() || subject_id.is_empty() {
                let column = if image_path.is_empty() { 0 } else { 1 };
                return Err(ManifestError::Parse {
                    row,
                    column: MANIFEST_COLUMNS[column].into(),
                    msg: "must not be empty".into(),
                });
            }
            if let Some(&first_row) = seen.get(&image_path) {
                return Err(ManifestError::Duplicate {
                    path: image_path,
                    first_row,
                    second_row: row,
                });
            }
            seen.insert(image_path.clone(), row);
            let geometry = OcularGeometry::new(
                parse_coord(&rec, 7, row)?,
                parse_coord(&rec, 8, row)?,
                parse_coord(&rec, 9, row)?,
            );
            if geometry.radius <= 0.0 {
                return Err(ManifestError::Parse {
                    row,
                    column: "iris_r".into(),
                    msg: "radius must be positive".into(),
                });
            }
            records.push(SampleRecord {
                image_path,
                subject_id,
                eye: parse_cell(&rec, 2, row)?,
                sensor: rec[3].to_string(),
                gender: parse_cell(&rec, 4, row)?,
                race: parse_cell(&rec, 5, row)?,
                eye_color: parse_cell(&rec, 6, row)?,
                geometry,
                race_detail: rec
                    .get(MANIFEST_COLUMNS.len())
                    .filter(|s| !s.is_empty())
                    .map(str::to_string),
            });
        }
        Ok(Self::new(name, root, records))
    }

    /// Canonical CSV text. The `race_detail` column is written only when some
    /// record carries one.
    pub fn to_csv_string(&self) -> String {
        let detail = self.records.iter().any(|r| r.race_detail.is_some());
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
        if detail {
            header.push(RACE_DETAIL_COLUMN);
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let mut row = vec![
                r.image_path.clone(),
                r.subject_id.clone(),
                r.eye.to_string(),
                r.sensor.clone(),
                r.gender.to_string(),
                r.race.to_string(),
                r.eye_color.to_string(),
                r.geometry.center_x.to_string(),
                r.geometry.center_y.to_string(),
                r.geometry.radius.to_string(),
            ];
            if detail {
                row.push(r.race_detail.clone().unwrap_or_default());
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Checks that every referenced image exists.
    pub fn validate_files(&self) -> Result<(), ManifestError> {
        let missing: Vec<(usize, String)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| !self.resolve(r).is_file())
            .map(|(i, r)| (i + 2, r.image_path.clone()))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ManifestError::MissingFiles(missing))
        }
    }

    /// Stable-order subset.
    pub fn filter(&self, pred: impl Fn(&SampleRecord) -> bool) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            root: self.root.clone(),
            records: self.records.iter().filter(|r| pred(r)).cloned().collect(),
        }
    }

    pub fn filter_by(&self, filters: &[FieldFilter]) -> DatasetManifest {
        self.filter(|r| filters.iter().all(|f| f.matches(r)))
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.subject_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct subjects and images per value of `field`.
    pub fn counts_by(&self, field: Field) -> BTreeMap<String, FieldCount> {
        let mut subjects: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
        let mut images: BTreeMap<String, usize> = BTreeMap::new();
        for r in &self.records {
            let key = field.value_of(r).to_string();
            subjects.entry(key.clone()).or_default().insert(&r.subject_id);
            *images.entry(key).or_default() += 1;
        }
        images
            .into_iter()
            .map(|(k, n)| {
                let s = subjects[&k].len();
                (k, FieldCount { subjects: s, images: n })
            })
            .collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_csv_reader(file, name, root)
}
