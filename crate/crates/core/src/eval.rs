//! Experiment protocols: balanced subject-disjoint splits, repeated
//! train/test runs, cross-dataset scoring, subgroup training, test-time blur
//! sweeps and stratified accuracy.
//!
//! Every report is a pure function of the per-image prediction log, and all
//! parallel work is collected in a fixed order, so identical inputs give
//! byte-identical report text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignParams, RegionSelector};
use crate::dataset::{Attribute, DatasetManifest, Field, FieldFilter, Gender, ManifestError, Race, SampleRecord};
use crate::descriptors::DescriptorConfig;
use crate::features::{extract_features, FeatureVector};
use crate::imgcore::{gaussian_blur, load_pgm, BlurConfig};
use crate::svm::{train_svm, SvmConfig, SvmError, SvmModel, TrainReport};

pub const DEFAULT_SIGMAS: [f64; 5] = [2.0, 4.0, 6.0, 8.0, 10.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no {class} subjects for {attribute}")]
    EmptyClass { attribute: Attribute, class: String },
    #[error("{class} has {subjects} subjects; a {train_frac} split leaves one side empty")]
    TooFewSubjects {
        class: String,
        subjects: usize,
        train_frac: f64,
    },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("subject {subject} has conflicting {attribute} labels")]
    InconsistentLabel { subject: String, attribute: Attribute },
    #[error("subgroup '{0}' is empty")]
    EmptySubgroup(String),
    #[error("repetition {repetition}: subject {subject} is in both train and test")]
    Overlap { repetition: usize, subject: String },
    #[error("repetition {repetition}: no usable {part} images")]
    NoUsableImages { repetition: usize, part: &'static str },
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repetition {
    pub seed: u64,
    pub train_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub attribute: Attribute,
    /// Subjects kept per class after balancing.
    pub retained: [BTreeSet<String>; 2],
    pub repetitions: Vec<Repetition>,
    /// Images skipped because their label is unknown.
    pub excluded_unknown: usize,
}

/// Class index of every subject with a known label.
fn subject_classes(
    m: &DatasetManifest,
    attribute: Attribute,
) -> Result<(BTreeMap<String, usize>, usize), EvalError> {
    let mut classes = BTreeMap::new();
    let mut unknown = 0;
    for r in &m.records {
        let Some(c) = attribute.class_of(r) else {
            unknown += 1;
            continue;
        };
        if let Some(&prev) = classes.get(&r.subject_id) {
            if prev != c {
                return Err(EvalError::InconsistentLabel {
                    subject: r.subject_id.clone(),
                    attribute,
                });
            }
        }
        classes.insert(r.subject_id.clone(), c);
    }
    Ok((classes, unknown))
}

fn train_count(n: usize, train_frac: f64) -> usize {
    (train_frac * n as f64 + 1e-9).floor() as usize
}

/// Balances classes by subsampling the majority class's subjects once, then
/// draws `reps` independent subject-level train/test partitions.
pub fn make_splits(
    m: &DatasetManifest,
    attribute: Attribute,
    train_frac: f64,
    reps: usize,
    seed: u64,
) -> Result<SplitPlan, EvalError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(EvalError::BadFraction(train_frac));
    }
    let (classes, excluded_unknown) = subject_classes(m, attribute)?;
    if excluded_unknown > 0 {
        log::info!("{excluded_unknown} images with unknown {attribute} excluded from splits");
    }
    let names = attribute.classes();
    let mut by_class: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (s, &c) in &classes {
        by_class[c].push(s.clone());
    }
    for (c, subjects) in by_class.iter().enumerate() {
        if subjects.is_empty() {
            return Err(EvalError::EmptyClass {
                attribute,
                class: names[c].to_string(),
            });
        }
    }
    let n = by_class[0].len().min(by_class[1].len());
    let n_train = train_count(n, train_frac);
    if n_train == 0 || n_train == n {
        let c = (by_class[0].len() > by_class[1].len()) as usize;
        return Err(EvalError::TooFewSubjects {
            class: names[c].to_string(),
            subjects: n,
            train_frac,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let retained = by_class.map(|mut subjects| {
        if subjects.len() > n {
            subjects.shuffle(&mut rng);
            subjects.truncate(n);
        }
        subjects.into_iter().collect::<BTreeSet<String>>()
    });

    let repetitions = (0..reps)
        .map(|r| {
            let rep_seed = seed.wrapping_add(r as u64 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
            let mut train = BTreeSet::new();
            let mut test = BTreeSet::new();
            for subjects in &retained {
                let mut order: Vec<&String> = subjects.iter().collect();
                order.shuffle(&mut rng);
                let (a, b) = order.split_at(n_train);
                train.extend(a.iter().map(|s| s.to_string()));
                test.extend(b.iter().map(|s| s.to_string()));
            }
            Repetition {
                seed: rep_seed,
                train_subjects: train,
                test_subjects: test,
            }
        })
        .collect();
    Ok(SplitPlan {
        attribute,
        retained,
        repetitions,
        excluded_unknown,
    })
}

/// Copy of `m` whose `attribute` labels are permuted across subjects
/// (class sizes preserved, every image of a subject keeps one label).
pub fn permute_labels(m: &DatasetManifest, attribute: Attribute, seed: u64) -> Result<DatasetManifest, EvalError> {
    let (classes, _) = subject_classes(m, attribute)?;
    let subjects: Vec<&String> = classes.keys().collect();
    let mut labels: Vec<usize> = classes.values().copied().collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let new: HashMap<&str, usize> = subjects.iter().map(|s| s.as_str()).zip(labels).collect();
    let mut out = m.clone();
    for r in &mut out.records {
        if let Some(&c) = new.get(r.subject_id.as_str()) {
            match attribute {
                Attribute::Gender => r.gender = [Gender::Male, Gender::Female][c],
                Attribute::Race => r.race = [Race::Caucasian, Race::NonCaucasian][c],
            }
        }
    }
    Ok(out)
}

/// Descriptor, region, alignment and classifier settings shared by every
/// run of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub region: RegionSelector,
    pub descriptor: DescriptorConfig,
    pub align: AlignParams,
    pub svm: SvmConfig,
}

type Extracted = Result<Arc<FeatureVector>, String>;

/// Lazily extracted, cached features of one manifest under one setup.
pub struct FeatureStore<'a> {
    pub manifest: &'a DatasetManifest,
    pub setup: &'a ExperimentSetup,
    cache: HashMap<usize, Extracted>,
}

impl<'a> FeatureStore<'a> {
    pub fn new(manifest: &'a DatasetManifest, setup: &'a ExperimentSetup) -> Self {
        Self {
            manifest,
            setup,
            cache: HashMap::new(),
        }
    }

    fn extract_one(&self, idx: usize, blur: Option<&BlurConfig>) -> Extracted {
        let rec = &self.manifest.records[idx];
        let img = load_pgm(self.manifest.resolve(rec)).map_err(|e| e.to_string())?;
        let img = match blur {
            Some(cfg) => gaussian_blur(&img, cfg),
            None => img,
        };
        let s = self.setup;
        extract_features(&img, &rec.geometry, s.region, &s.descriptor, &s.align)
            .map(Arc::new)
            .map_err(|e| e.to_string())
    }

    /// Extracts (in parallel) and caches every index not seen before.
    pub fn ensure(&mut self, indices: &[usize]) {
        let missing: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|i| !self.cache.contains_key(i))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let this = &*self;
        let fresh: Vec<(usize, Extracted)> = missing
            .par_iter()
            .map(|&i| (i, this.extract_one(i, None)))
            .collect();
        for (i, f) in fresh {
            if let Err(e) = &f {
                log::warn!("dropping {}: {e}", self.manifest.records[i].image_path);
            }
            self.cache.insert(i, f);
        }
    }

    pub fn get(&self, idx: usize) -> Option<&Extracted> {
        self.cache.get(&idx)
    }

    /// Uncached extraction of test-time blurred images.
    pub fn extract_blurred(&self, indices: &[usize], blur: &BlurConfig) -> Vec<Extracted> {
        indices.par_iter().map(|&i| self.extract_one(i, Some(blur))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_path: String,
    pub repetition: usize,
    pub true_label: String,
    pub predicted_label: String,
    pub decision_value: f64,
}

pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRow>, EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: [String; 2],
    pub per_rep_accuracy: Vec<f64>,
    pub per_rep_images: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation over repetitions.
    pub std: f64,
    /// Row = true class, column = predicted class, percent of the row.
    pub confusion_mean: [[f64; 2]; 2],
    pub confusion_std: [[f64; 2]; 2],
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    /// Aggregates a prediction log over repetitions `0..reps`.
    pub fn from_predictions(rows: &[PredictionRow], classes: [String; 2], reps: usize) -> Self {
        let class_idx = |s: &str| classes.iter().position(|c| c == s);
        let mut correct = vec![0usize; reps];
        let mut total = vec![0usize; reps];
        let mut conf = vec![[[0usize; 2]; 2]; reps];
        for r in rows {
            let (Some(t), Some(p)) = (class_idx(&r.true_label), class_idx(&r.predicted_label)) else {
                continue;
            };
            if r.repetition >= reps {
                continue;
            }
            total[r.repetition] += 1;
            correct[r.repetition] += (t == p) as usize;
            conf[r.repetition][t][p] += 1;
        }
        let per_rep_accuracy: Vec<f64> = correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| if t == 0 { f64::NAN } else { 100.0 * c as f64 / t as f64 })
            .collect();
        let defined: Vec<f64> = per_rep_accuracy.iter().copied().filter(|v| !v.is_nan()).collect();
        let (mean, std) = mean_std(&defined);
        let mut confusion_mean = [[f64::NAN; 2]; 2];
        let mut confusion_std = [[f64::NAN; 2]; 2];
        for t in 0..2 {
            for p in 0..2 {
                let rates: Vec<f64> = conf
                    .iter()
                    .filter(|c| c[t][0] + c[t][1] > 0)
                    .map(|c| 100.0 * c[t][p] as f64 / (c[t][0] + c[t][1]) as f64)
                    .collect();
                (confusion_mean[t][p], confusion_std[t][p]) = mean_std(&rates);
            }
        }
        Self {
            classes,
            per_rep_accuracy,
            per_rep_images: total,
            mean,
            std,
            confusion_mean,
            confusion_std,
        }
    }

    pub fn repetitions(&self) -> usize {
        self.per_rep_accuracy.len()
    }

    /// Human-readable report; `meta` lines come first in the given order.
    pub fn to_text(&self, meta: &[(&str, String)]) -> String {
        let mut s = String::new();
        for (k, v) in meta {
            let _ = writeln!(s, "{k}: {v}");
        }
        let _ = writeln!(s, "repetitions: {}", self.repetitions());
        let _ = writeln!(s, "accuracy_mean: {}", fmt_num(self.mean));
        let _ = writeln!(s, "accuracy_std: {}", fmt_num(self.std));
        let _ = writeln!(s, "std_kind: population standard deviation over repetitions");
        for (r, (a, n)) in self.per_rep_accuracy.iter().zip(&self.per_rep_images).enumerate() {
            let _ = writeln!(s, "rep {r}: accuracy {} on {n} images", fmt_num(*a));
        }
        let _ = writeln!(s, "confusion (row = true class, percent predicted, mean +/- std):");
        let width = self.classes.iter().map(|c| c.len()).max().unwrap_or(0).max(8);
        let _ = write!(s, "  {:width$}", "");
        for c in &self.classes {
            let _ = write!(s, "  {c:>22}");
        }
        s.push('\n');
        for t in 0..2 {
            let _ = write!(s, "  {:width$}", self.classes[t]);
            for p in 0..2 {
                let cell = format!(
                    "{} +/- {}",
                    fmt_num(self.confusion_mean[t][p]),
                    fmt_num(self.confusion_std[t][p])
                );
                let _ = write!(s, "  {cell:>22}");
            }
            s.push('\n');
        }
        s
    }

    /// Machine-readable rows `metric,repetition,true_class,predicted_class,value`.
    pub fn to_csv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let mut row = |metric: &str, rep: &str, t: &str, p: &str, v: f64| {
            let _ = writeln!(s, "{prefix}{metric},{rep},{t},{p},{}", fmt_num(v));
        };
        for (r, a) in self.per_rep_accuracy.iter().enumerate() {
            row("accuracy", &r.to_string(), "", "", *a);
        }
        row("accuracy_mean", "", "", "", self.mean);
        row("accuracy_std", "", "", "", self.std);
        for t in 0..2 {
            for p in 0..2 {
                row("confusion_mean", "", &self.classes[t], &self.classes[p], self.confusion_mean[t][p]);
                row("confusion_std", "", &self.classes[t], &self.classes[p], self.confusion_std[t][p]);
            }
        }
        s
    }
}

pub const REPORT_CSV_HEADER: &str = "metric,repetition,true_class,predicted_class,value\n";

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub models: Vec<SvmModel>,
    pub train_reports: Vec<TrainReport>,
    pub predictions: Vec<PredictionRow>,
    pub report: EvalReport,
    /// Realized test image indices per repetition.
    pub test_indices: Vec<Vec<usize>>,
    /// `(image_path, reason)` for images whose features could not be extracted.
    pub dropped: Vec<(String, String)>,
}

fn class_names(attribute: Attribute) -> [String; 2] {
    attribute.classes().map(str::to_string)
}

fn predict_rows(
    model: &SvmModel,
    repetition: usize,
    records: &[SampleRecord],
    items: &[(usize, Arc<FeatureVector>)],
    attribute: Attribute,
) -> Result<Vec<PredictionRow>, EvalError> {
    let names = attribute.classes();
    items
        .iter()
        .map(|(i, fv)| {
            let r = &records[*i];
            let p = model.predict(fv)?;
            Ok(PredictionRow {
                image_path: r.image_path.clone(),
                repetition,
                true_label: names[attribute.class_of(r).expect("known label")].to_string(),
                predicted_label: model.label(p.class).to_string(),
                decision_value: p.decision,
            })
        })
        .collect()
}

enum TestScope<'p> {
    /// Test images of each repetition's test subjects.
    Split(&'p [usize]),
    /// The same pool for every repetition (cross-group scoring).
    All(&'p [usize]),
}

type Items = Vec<(usize, Arc<FeatureVector>)>;
type RepOutcome = (SvmModel, TrainReport, Vec<PredictionRow>, Vec<usize>);

/// Shared training/scoring loop over a plan's repetitions.
fn run_plan<'a>(
    store: &mut FeatureStore<'a>,
    plan: &SplitPlan,
    train_pool: &[usize],
    test: TestScope,
) -> Result<ExperimentOutput, EvalError> {
    let attribute = plan.attribute;
    let manifest: &'a DatasetManifest = store.manifest;
    let records = &manifest.records;
    let known = |i: &usize| attribute.class_of(&records[*i]).is_some();
    let mut train_sets = Vec::new();
    let mut test_sets = Vec::new();
    for (r, rep) in plan.repetitions.iter().enumerate() {
        let train: Vec<usize> = train_pool
            .iter()
            .copied()
            .filter(known)
            .filter(|&i| rep.train_subjects.contains(&records[i].subject_id))
            .collect();
        let test: Vec<usize> = match test {
            TestScope::Split(pool) => pool
                .iter()
                .copied()
                .filter(known)
                .filter(|&i| rep.test_subjects.contains(&records[i].subject_id))
                .collect(),
            TestScope::All(pool) => pool.iter().copied().filter(known).collect(),
        };
        let train_subjects: BTreeSet<&str> = train.iter().map(|&i| records[i].subject_id.as_str()).collect();
        if let Some(&i) = test.iter().find(|&&i| train_subjects.contains(records[i].subject_id.as_str())) {
            return Err(EvalError::Overlap {
                repetition: r,
                subject: records[i].subject_id.clone(),
            });
        }
        train_sets.push(train);
        test_sets.push(test);
    }

    let all: Vec<usize> = train_sets.iter().chain(&test_sets).flatten().copied().collect();
    store.ensure(&all);
    let usable = |set: &[usize]| -> Vec<(usize, Arc<FeatureVector>)> {
        set.iter()
            .filter_map(|&i| match store.get(i) {
                Some(Ok(fv)) => Some((i, fv.clone())),
                _ => None,
            })
            .collect()
    };
    let mut dropped: Vec<(String, String)> = all
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter_map(|&i| match store.get(i) {
            Some(Err(e)) => Some((records[i].image_path.clone(), e.clone())),
            _ => None,
        })
        .collect();
    dropped.sort();

    let names = class_names(attribute);
    let svm_cfg = store.setup.svm;
    let jobs: Vec<(usize, Items, Items)> = train_sets
        .iter()
        .zip(&test_sets)
        .enumerate()
        .map(|(r, (tr, te))| (r, usable(tr), usable(te)))
        .collect();
    let results: Vec<Result<RepOutcome, EvalError>> = jobs
        .par_iter()
        .map(|(r, train, test)| {
            if train.is_empty() {
                return Err(EvalError::NoUsableImages { repetition: *r, part: "train" });
            }
            if test.is_empty() {
                return Err(EvalError::NoUsableImages { repetition: *r, part: "test" });
            }
            let xs: Vec<FeatureVector> = train.iter().map(|(_, f)| (**f).clone()).collect();
            let ys: Vec<usize> = train
                .iter()
                .map(|(i, _)| attribute.class_of(&records[*i]).expect("known label"))
                .collect();
            let (model, report) = train_svm(&xs, &ys, names.clone(), &svm_cfg)?;
            let rows = predict_rows(&model, *r, records, test, attribute)?;
            Ok((model, report, rows, test.iter().map(|(i, _)| *i).collect()))
        })
        .collect();

    let mut out = ExperimentOutput {
        models: Vec::new(),
        train_reports: Vec::new(),
        predictions: Vec::new(),
        report: EvalReport::from_predictions(&[], names.clone(), 0),
        test_indices: Vec::new(),
        dropped,
    };
    for res in results {
        let (model, report, rows, test) = res?;
        out.models.push(model);
        out.train_reports.push(report);
        out.predictions.extend(rows);
        out.test_indices.push(test);
    }
    out.report = EvalReport::from_predictions(&out.predictions, names, plan.repetitions.len());
    Ok(out)
}

/// One model per repetition, scored on that repetition's test subjects.
pub fn run_experiment(store: &mut FeatureStore, plan: &SplitPlan) -> Result<ExperimentOutput, EvalError> {
    let pool: Vec<usize> = (0..store.manifest.len()).collect();
    run_plan(store, plan, &pool, TestScope::Split(&pool))
}

/// Scores every known-label image of another manifest with each model.
pub fn cross_dataset_eval<'a>(
    models: &[SvmModel],
    store: &mut FeatureStore<'a>,
    attribute: Attribute,
) -> Result<(EvalReport, Vec<PredictionRow>), EvalError> {
    let manifest: &'a DatasetManifest = store.manifest;
    let records = &manifest.records;
    let pool: Vec<usize> = (0..records.len()).filter(|&i| attribute.class_of(&records[i]).is_some()).collect();
    store.ensure(&pool);
    let items: Vec<(usize, Arc<FeatureVector>)> = pool
        .iter()
        .filter_map(|&i| match store.get(i) {
            Some(Ok(fv)) => Some((i, fv.clone())),
            _ => None,
        })
        .collect();
    let rows: Vec<Vec<PredictionRow>> = models
        .par_iter()
        .enumerate()
        .map(|(r, m)| predict_rows(m, r, records, &items, attribute))
        .collect::<Result<_, _>>()?;
    let rows: Vec<PredictionRow> = rows.into_iter().flatten().collect();
    let report = EvalReport::from_predictions(&rows, class_names(attribute), models.len());
    Ok((report, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubgroupMode {
    /// Train and test subgroups share subjects: split subject-disjointly.
    WithinSplit,
    /// Disjoint subgroups: each model scores the whole test subgroup.
    CrossGroup,
}

#[derive(Debug, Clone)]
pub struct SubgroupOutput {
    pub mode: SubgroupMode,
    pub output: ExperimentOutput,
}

fn describe(filters: &[FieldFilter]) -> String {
    if filters.is_empty() {
        "all".into()
    } else {
        filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",")
    }
}

#[allow(clippy::too_many_arguments)]
pub fn subgroup_experiment<'a>(
    store: &mut FeatureStore<'a>,
    train_filter: &[FieldFilter],
    test_filter: &[FieldFilter],
    attribute: Attribute,
    train_frac: f64,
    reps: usize,
    seed: u64,
) -> Result<SubgroupOutput, EvalError> {
    let manifest: &'a DatasetManifest = store.manifest;
    let records = &manifest.records;
    let matches = |filters: &[FieldFilter], r: &SampleRecord| filters.iter().all(|f| f.matches(r));
    let train_pool: Vec<usize> = (0..records.len()).filter(|&i| matches(train_filter, &records[i])).collect();
    let test_pool: Vec<usize> = (0..records.len()).filter(|&i| matches(test_filter, &records[i])).collect();
    if train_pool.is_empty() {
        return Err(EvalError::EmptySubgroup(describe(train_filter)));
    }
    if test_pool.is_empty() {
        return Err(EvalError::EmptySubgroup(describe(test_filter)));
    }
    let subjects = |pool: &[usize]| -> BTreeSet<&str> { pool.iter().map(|&i| records[i].subject_id.as_str()).collect() };
    let overlap = !subjects(&train_pool).is_disjoint(&subjects(&test_pool));
    let subset = |pool: &[usize]| {
        DatasetManifest::new(
            manifest.name.clone(),
            manifest.root.clone(),
            pool.iter().map(|&i| records[i].clone()).collect(),
        )
    };
    if overlap {
        let union: Vec<usize> = train_pool.iter().chain(&test_pool).copied().collect::<BTreeSet<_>>().into_iter().collect();
        let plan = make_splits(&subset(&union), attribute, train_frac, reps, seed)?;
        let output = run_plan(store, &plan, &train_pool, TestScope::Split(&test_pool))?;
        Ok(SubgroupOutput {
            mode: SubgroupMode::WithinSplit,
            output,
        })
    } else {
        let plan = make_splits(&subset(&train_pool), attribute, train_frac, reps, seed)?;
        let output = run_plan(store, &plan, &train_pool, TestScope::All(&test_pool))?;
        Ok(SubgroupOutput {
            mode: SubgroupMode::CrossGroup,
            output,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BlurLevel {
    /// 0 is the unblurred baseline.
    pub sigma: f64,
    pub report: EvalReport,
    pub predictions: Vec<PredictionRow>,
}

/// Trains on unblurred images once, then scores each repetition's test
/// images blurred at every sigma with the same models.
pub fn blur_experiment(
    store: &mut FeatureStore,
    plan: &SplitPlan,
    sigmas: &[f64],
) -> Result<(ExperimentOutput, Vec<BlurLevel>), EvalError> {
    let baseline = run_experiment(store, plan)?;
    let mut levels = vec![BlurLevel {
        sigma: 0.0,
        report: baseline.report.clone(),
        predictions: baseline.predictions.clone(),
    }];
    let union: Vec<usize> = baseline
        .test_indices
        .iter()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let attribute = plan.attribute;
    for &sigma in sigmas {
        let cfg = BlurConfig::new(sigma).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let blurred: HashMap<usize, Arc<FeatureVector>> = union
            .iter()
            .copied()
            .zip(store.extract_blurred(&union, &cfg))
            .filter_map(|(i, f)| match f {
                Ok(fv) => Some((i, fv)),
                Err(e) => {
                    log::warn!("sigma {sigma}: dropping {}: {e}", store.manifest.records[i].image_path);
                    None
                }
            })
            .collect();
        let mut rows = Vec::new();
        for (r, (model, test)) in baseline.models.iter().zip(&baseline.test_indices).enumerate() {
            let items: Vec<(usize, Arc<FeatureVector>)> = test
                .iter()
                .filter_map(|i| blurred.get(i).map(|f| (*i, f.clone())))
                .collect();
            rows.extend(predict_rows(model, r, &store.manifest.records, &items, attribute)?);
        }
        levels.push(BlurLevel {
            sigma,
            report: EvalReport::from_predictions(&rows, class_names(attribute), baseline.models.len()),
            predictions: rows,
        });
    }
    Ok((baseline, levels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub value: String,
    /// `None` for repetitions without test images in this stratum.
    pub per_rep_accuracy: Vec<Option<f64>>,
    pub per_rep_images: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrataTable {
    pub field: Field,
    pub strata: Vec<Stratum>,
    /// Values present in the manifest but absent from every test set.
    pub omitted: Vec<String>,
}

/// Per-value accuracy of a prediction log, keyed by a manifest field.
pub fn stratified_report(
    rows: &[PredictionRow],
    m: &DatasetManifest,
    field: Field,
    reps: usize,
) -> StrataTable {
    let by_path: HashMap<&str, &SampleRecord> = m.records.iter().map(|r| (r.image_path.as_str(), r)).collect();
    let mut tallies: BTreeMap<String, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for row in rows {
        let Some(rec) = by_path.get(row.image_path.as_str()) else {
            continue;
        };
        if row.repetition >= reps {
            continue;
        }
        let e = tallies
            .entry(field.value_of(rec).to_string())
            .or_insert_with(|| (vec![0; reps], vec![0; reps]));
        e.1[row.repetition] += 1;
        e.0[row.repetition] += (row.true_label == row.predicted_label) as usize;
    }
    let strata: Vec<Stratum> = tallies
        .into_iter()
        .map(|(value, (correct, total))| {
            let per_rep_accuracy: Vec<Option<f64>> = correct
                .iter()
                .zip(&total)
                .map(|(&c, &t)| (t > 0).then(|| 100.0 * c as f64 / t as f64))
                .collect();
            let defined: Vec<f64> = per_rep_accuracy.iter().flatten().copied().collect();
            let (mean, std) = mean_std(&defined);
            Stratum {
                value,
                per_rep_accuracy,
                per_rep_images: total,
                mean,
                std,
            }
        })
        .collect();
    let present: BTreeSet<&str> = strata.iter().map(|s| s.value.as_str()).collect();
    let omitted = m
        .counts_by(field)
        .into_keys()
        .filter(|v| !present.contains(v.as_str()))
        .collect();
    StrataTable {
        field,
        strata,
        omitted,
    }
}

impl StrataTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("strata by {} (accuracy mean +/- population std over repetitions):\n", self.field);
        for st in &self.strata {
            let _ = writeln!(
                s,
                "  {}: {} +/- {} on {} images",
                st.value,
                fmt_num(st.mean),
                fmt_num(st.std),
                st.per_rep_images.iter().sum::<usize>()
            );
        }
        for v in &self.omitted {
            let _ = writeln!(s, "  {v}: omitted (no test images)");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for st in &self.strata {
            for (r, a) in st.per_rep_accuracy.iter().enumerate() {
                if let Some(a) = a {
                    let _ = writeln!(s, "stratum_accuracy,{r},{}={},,{}", self.field, st.value, fmt_num(*a));
                }
            }
            let _ = writeln!(s, "stratum_mean,,{}={},,{}", self.field, st.value, fmt_num(st.mean));
            let _ = writeln!(s, "stratum_std,,{}={},,{}", self.field, st.value, fmt_num(st.std));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::OcularGeometry;
    use crate::dataset::{Eye, EyeColor};
    use crate::descriptors::FilterBank;
    use crate::synth::{generate, LabelNoise, SynthSpec};
    use proptest::prelude::*;

    fn record(subject: &str, image: usize, gender: Gender, race: Race) -> SampleRecord {
        SampleRecord {
            image_path: format!("{subject}_{image}.pgm"),
            subject_id: subject.into(),
            eye: if image.is_multiple_of(2) { Eye::L } else { Eye::R },
            sensor: "s".into(),
            gender,
            race,
            eye_color: EyeColor::Brown,
            geometry: OcularGeometry::new(320.0, 240.0, 60.0),
            race_detail: None,
        }
    }

    /// `a` caucasian and `b` non-caucasian subjects with `imgs` images each.
    fn race_manifest(a: usize, b: usize, imgs: usize) -> DatasetManifest {
        let mut recs = Vec::new();
        for (n, race, p) in [(a, Race::Caucasian, "c"), (b, Race::NonCaucasian, "n")] {
            for s in 0..n {
                for j in 0..imgs {
                    recs.push(record(&format!("{p}{s}"), j, Gender::Male, race));
                }
            }
        }
        DatasetManifest::new("t", ".", recs)
    }

    fn class_of_subject(m: &DatasetManifest, s: &str) -> Race {
        m.records.iter().find(|r| r.subject_id == s).unwrap().race
    }

    #[test]
    fn split_arithmetic_247_of_300() {
        let m = race_manifest(247, 300, 1);
        let plan = make_splits(&m, Attribute::Race, 0.6, 5, 7).unwrap();
        assert_eq!(plan.retained[0].len(), 247);
        assert_eq!(plan.retained[1].len(), 247);
        for rep in &plan.repetitions {
            for race in [Race::Caucasian, Race::NonCaucasian] {
                let tr = rep.train_subjects.iter().filter(|s| class_of_subject(&m, s) == race).count();
                let te = rep.test_subjects.iter().filter(|s| class_of_subject(&m, s) == race).count();
                assert_eq!((tr, te), (148, 99));
            }
        }
    }

    #[test]
    fn majority_is_subsampled_once() {
        let m = race_manifest(10, 6, 2);
        let plan = make_splits(&m, Attribute::Race, 0.6, 4, 3).unwrap();
        assert_eq!(plan.retained[0].len(), 6);
        let all: BTreeSet<String> = plan.retained.iter().flatten().cloned().collect();
        for rep in &plan.repetitions {
            let used: BTreeSet<String> = rep.train_subjects.union(&rep.test_subjects).cloned().collect();
            assert_eq!(used, all);
        }
    }

    #[test]
    fn plans_follow_the_seed() {
        let m = race_manifest(100, 100, 1);
        let a = make_splits(&m, Attribute::Race, 0.6, 5, 11).unwrap();
        assert_eq!(a, make_splits(&m, Attribute::Race, 0.6, 5, 11).unwrap());
        let b = make_splits(&m, Attribute::Race, 0.6, 5, 12).unwrap();
        assert!(a.repetitions.iter().zip(&b.repetitions).any(|(x, y)| x.train_subjects != y.train_subjects));
        for rep in &a.repetitions {
            assert_eq!(rep.train_subjects.len(), 120);
            assert_eq!(rep.test_subjects.len(), 80);
        }
    }

    #[test]
    fn split_errors() {
        let m = race_manifest(5, 5, 1);
        assert!(matches!(make_splits(&m, Attribute::Race, 1.0, 1, 0), Err(EvalError::BadFraction(_))));
        assert!(matches!(make_splits(&m, Attribute::Race, 0.0, 1, 0), Err(EvalError::BadFraction(_))));
        let one_class = race_manifest(5, 0, 1);
        assert!(matches!(
            make_splits(&one_class, Attribute::Race, 0.6, 1, 0),
            Err(EvalError::EmptyClass { .. })
        ));
        let tiny = race_manifest(1, 3, 1);
        assert!(matches!(
            make_splits(&tiny, Attribute::Race, 0.6, 1, 0),
            Err(EvalError::TooFewSubjects { subjects: 1, .. })
        ));
        let mut bad = race_manifest(3, 3, 2);
        bad.records[1].race = Race::NonCaucasian;
        assert!(matches!(
            make_splits(&bad, Attribute::Race, 0.6, 1, 0),
            Err(EvalError::InconsistentLabel { .. })
        ));
    }

    #[test]
    fn unknown_labels_are_excluded() {
        let mut m = race_manifest(4, 4, 2);
        m.records.push(record("u0", 0, Gender::Male, Race::Unknown));
        m.records.push(record("u0", 1, Gender::Male, Race::Unknown));
        let plan = make_splits(&m, Attribute::Race, 0.5, 2, 0).unwrap();
        assert_eq!(plan.excluded_unknown, 2);
        assert!(plan.repetitions.iter().all(|r| !r.test_subjects.contains("u0") && !r.train_subjects.contains("u0")));
    }

    #[test]
    fn permutation_keeps_class_sizes() {
        let m = race_manifest(6, 9, 3);
        let p = permute_labels(&m, Attribute::Race, 5).unwrap();
        let count = |m: &DatasetManifest| m.records.iter().filter(|r| r.race == Race::Caucasian).count();
        assert_eq!(count(&m), count(&p));
        // Still one label per subject.
        make_splits(&p, Attribute::Race, 0.6, 1, 0).unwrap();
        assert_ne!(m, p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn splits_are_subject_disjoint(a in 2usize..30, b in 2usize..30, imgs in 1usize..4, frac in 0.1f64..0.9, seed in any::<u64>()) {
            let m = race_manifest(a, b, imgs);
            match make_splits(&m, Attribute::Race, frac, 3, seed) {
                Ok(plan) => {
                    let n = a.min(b);
                    for rep in &plan.repetitions {
                        prop_assert!(rep.train_subjects.is_disjoint(&rep.test_subjects));
                        prop_assert_eq!(rep.train_subjects.len() + rep.test_subjects.len(), 2 * n);
                        for race in [Race::Caucasian, Race::NonCaucasian] {
                            let tr = rep.train_subjects.iter().filter(|s| class_of_subject(&m, s) == race).count();
                            prop_assert_eq!(tr, train_count(n, frac));
                        }
                    }
                }
                Err(EvalError::TooFewSubjects { .. }) => {
                    let n = a.min(b);
                    prop_assert!(train_count(n, frac) == 0 || train_count(n, frac) == n);
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    fn row(path: &str, rep: usize, t: &str, p: &str) -> PredictionRow {
        PredictionRow {
            image_path: path.into(),
            repetition: rep,
            true_label: t.into(),
            predicted_label: p.into(),
            decision_value: if p == "non_caucasian" { 1.0 } else { -1.0 },
        }
    }

    fn race_classes() -> [String; 2] {
        class_names(Attribute::Race)
    }

    #[test]
    fn report_arithmetic() {
        let (c, n) = ("caucasian", "non_caucasian");
        // rep 0: 3/4 correct; rep 1: 2/4 correct.
        let rows = vec![
            row("a", 0, c, c),
            row("b", 0, c, n),
            row("c", 0, n, n),
            row("d", 0, n, n),
            row("a", 1, c, c),
            row("b", 1, c, c),
            row("c", 1, n, c),
            row("d", 1, n, c),
        ];
        let r = EvalReport::from_predictions(&rows, race_classes(), 2);
        assert_eq!(r.per_rep_accuracy, vec![75.0, 50.0]);
        assert_eq!(r.mean, 62.5);
        assert_eq!(r.std, 12.5);
        assert_eq!(r.confusion_mean[0], [75.0, 25.0]);
        assert_eq!(r.confusion_mean[1], [50.0, 50.0]);
        assert_eq!(r.confusion_std[1], [50.0, 50.0]);
        for t in 0..2 {
            assert!((r.confusion_mean[t][0] + r.confusion_mean[t][1] - 100.0).abs() < 1e-12);
        }
        let text = r.to_text(&[("attribute", "race".into())]);
        assert!(text.starts_with("attribute: race\n"));
        assert!(text.contains("accuracy_mean: 62.5000"));
        assert!(r.to_csv("").contains("accuracy_std,,,,12.5000"));
    }

    #[test]
    fn empty_repetition_is_nan_and_skipped() {
        let rows = vec![row("a", 0, "caucasian", "caucasian")];
        let r = EvalReport::from_predictions(&rows, race_classes(), 2);
        assert!(r.per_rep_accuracy[1].is_nan());
        assert_eq!(r.mean, 100.0);
        assert!(r.to_text(&[]).contains("rep 1: accuracy nan on 0 images"));
    }

    #[test]
    fn prediction_log_round_trip() {
        let mut rows = vec![row("x,y.pgm", 0, "caucasian", "non_caucasian"), row("z", 3, "non_caucasian", "caucasian")];
        rows[0].decision_value = 0.123456789012345;
        let back = parse_predictions(&predictions_csv(&rows)).unwrap();
        assert_eq!(back, rows);
        assert!(predictions_csv(&rows).starts_with("image_path,repetition,true_label,predicted_label,decision_value\n"));
    }

    #[test]
    fn strata_partition_the_log() {
        let mut m = race_manifest(3, 3, 2);
        m.records[0].eye_color = EyeColor::Blue;
        m.records[1].eye_color = EyeColor::Blue;
        m.records[2].eye_color = EyeColor::Green;
        let green = m.records[2].image_path.clone();
        let rows: Vec<PredictionRow> = (0..2)
            .flat_map(|rep| {
                m.records
                    .iter()
                    .filter(|r| r.image_path != green)
                    .map(move |r| row(&r.image_path, rep, r.race.as_str(), "caucasian"))
            })
            .collect();
        let t = stratified_report(&rows, &m, Field::EyeColor, 2);
        assert_eq!(t.omitted, vec!["green".to_string()]);
        let values: Vec<&str> = t.strata.iter().map(|s| s.value.as_str()).collect();
        assert_eq!(values, ["blue", "brown"]);
        for rep in 0..2 {
            let total: usize = t.strata.iter().map(|s| s.per_rep_images[rep]).sum();
            assert_eq!(total, rows.iter().filter(|r| r.repetition == rep).count());
        }
        assert_eq!(t.strata[0].mean, 100.0);
        assert!(t.to_text().contains("green: omitted"));
    }

    fn small_spec(per_class: usize, images: usize) -> SynthSpec {
        SynthSpec {
            num_subjects_per_class: per_class,
            images_per_subject: images,
            ..SynthSpec::default()
        }
    }

    fn iris_setup() -> ExperimentSetup {
        ExperimentSetup {
            region: RegionSelector::IrisOnly,
            descriptor: DescriptorConfig::Bsif(Arc::new(FilterBank::builtin())),
            align: AlignParams::default(),
            svm: SvmConfig::default(),
        }
    }

    #[test]
    fn end_to_end_race_on_iris() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&small_spec(6, 2), dir.path()).unwrap();
        let setup = iris_setup();
        let mut store = FeatureStore::new(&out.manifest, &setup);
        let plan = make_splits(&out.manifest, Attribute::Race, 0.6, 3, 1).unwrap();
        let res = run_experiment(&mut store, &plan).unwrap();
        assert_eq!(res.models.len(), 3);
        assert!(res.dropped.is_empty());
        assert!(res.report.mean >= 90.0, "{}", res.report.mean);
        // Realized test images never share a subject with training.
        for (rep, test) in plan.repetitions.iter().zip(&res.test_indices) {
            for &i in test {
                assert!(rep.test_subjects.contains(&out.manifest.records[i].subject_id));
            }
        }
        // The report is a pure function of the persisted log.
        let parsed = parse_predictions(&predictions_csv(&res.predictions)).unwrap();
        let again = EvalReport::from_predictions(&parsed, race_classes(), 3);
        assert_eq!(again.to_text(&[]), res.report.to_text(&[]));

        // Scoring the training dataset itself.
        let (cross, rows) = cross_dataset_eval(&res.models, &mut store, Attribute::Race).unwrap();
        assert_eq!(rows.len(), 3 * out.manifest.len());
        assert!(cross.mean >= 90.0);

        // A twin dataset transfers; a texture-swapped one is inverted.
        let twin_dir = tempfile::tempdir().unwrap();
        let twin = generate(&SynthSpec { seed: 99, ..small_spec(6, 2) }, twin_dir.path()).unwrap();
        let mut twin_store = FeatureStore::new(&twin.manifest, &setup);
        let (twin_report, _) = cross_dataset_eval(&res.models, &mut twin_store, Attribute::Race).unwrap();
        assert!(twin_report.mean >= 90.0, "{}", twin_report.mean);
        let swap_dir = tempfile::tempdir().unwrap();
        let swapped = generate(&SynthSpec { swap_textures: true, ..small_spec(6, 2) }, swap_dir.path()).unwrap();
        let mut swap_store = FeatureStore::new(&swapped.manifest, &setup);
        let (swap_report, _) = cross_dataset_eval(&res.models, &mut swap_store, Attribute::Race).unwrap();
        assert!(swap_report.mean <= 10.0, "{}", swap_report.mean);
    }

    #[test]
    fn subgroup_modes_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&small_spec(6, 2), dir.path()).unwrap();
        let setup = iris_setup();
        let mut store = FeatureStore::new(&out.manifest, &setup);
        let f = |s: &str| s.parse::<FieldFilter>().unwrap();

        let within = subgroup_experiment(&mut store, &[f("eye=L")], &[f("eye=R")], Attribute::Race, 0.6, 2, 1).unwrap();
        assert_eq!(within.mode, SubgroupMode::WithinSplit);
        for p in &within.output.predictions {
            assert!(p.image_path.ends_with("_1.pgm"));
        }

        let cross =
            subgroup_experiment(&mut store, &[f("gender=male")], &[f("gender=female")], Attribute::Race, 0.6, 2, 1)
                .unwrap();
        assert_eq!(cross.mode, SubgroupMode::CrossGroup);
        let females = out.manifest.records.iter().filter(|r| r.gender == Gender::Female).count();
        assert_eq!(cross.output.predictions.len(), 2 * females);
        assert!(cross.output.report.mean >= 90.0);

        let err = subgroup_experiment(&mut store, &[f("sensor=nope")], &[], Attribute::Race, 0.6, 2, 1);
        assert!(matches!(err, Err(EvalError::EmptySubgroup(s)) if s == "sensor=nope"));
        let err = subgroup_experiment(&mut store, &[], &[f("eye_color=gray")], Attribute::Race, 0.6, 2, 1);
        assert!(matches!(err, Err(EvalError::EmptySubgroup(_))));
    }

    #[test]
    fn planted_eye_color_gap_shows_in_strata() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            eye_color_mix: vec![(EyeColor::Brown, 0.6), (EyeColor::Blue, 0.4)],
            label_noise: vec![LabelNoise {
                attribute: Attribute::Race,
                eye_color: EyeColor::Blue,
                rate: 1.0,
            }],
            ..small_spec(10, 1)
        };
        let out = generate(&spec, dir.path()).unwrap();
        let setup = iris_setup();
        let mut store = FeatureStore::new(&out.manifest, &setup);
        let plan = make_splits(&out.manifest, Attribute::Race, 0.6, 3, 2).unwrap();
        let res = run_experiment(&mut store, &plan).unwrap();
        let t = stratified_report(&res.predictions, &out.manifest, Field::EyeColor, 3);
        let acc = |v: &str| t.strata.iter().find(|s| s.value == v).unwrap().mean;
        assert!(acc("brown") - acc("blue") >= 30.0, "brown {} blue {}", acc("brown"), acc("blue"));
    }

    #[test]
    fn blur_baseline_is_the_plain_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&small_spec(3, 2), dir.path()).unwrap();
        let setup = iris_setup();
        let mut store = FeatureStore::new(&out.manifest, &setup);
        let plan = make_splits(&out.manifest, Attribute::Race, 0.6, 2, 1).unwrap();
        let (base, levels) = blur_experiment(&mut store, &plan, &[2.0, 10.0]).unwrap();
        assert_eq!(levels.len(), 3);
        assert_eq!(levels[0].sigma, 0.0);
        assert_eq!(levels[0].report, run_experiment(&mut store, &plan).unwrap().report);
        assert_eq!(levels[0].predictions, base.predictions);
        for l in &levels[1..] {
            assert_eq!(l.predictions.len(), base.predictions.len());
        }
    }
}
