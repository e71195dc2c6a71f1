use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ocular_attr::dataset::FieldFilter;
use ocular_attr::descriptors::{learn_bsif_filters, BsifLearnConfig};
use ocular_attr::eval::{
    blur_experiment, cross_dataset_eval, make_splits, parse_predictions, predictions_csv, run_experiment,
    stratified_report, subgroup_experiment, EvalReport, ExperimentOutput, ExperimentSetup, FeatureStore,
    PredictionRow, SplitPlan, REPORT_CSV_HEADER,
};
use ocular_attr::features::FeatureVector;
use ocular_attr::svm::{train_svm, SvmModel, TrainReport};
use ocular_attr::synth::{dead_leaves_image, generate, SynthSpec};
use ocular_attr::{load_manifest, load_pgm, write_pgm, Attribute, DatasetManifest};

use crate::config::{write, RunConfig};
use crate::error::CliError;

fn ensure_fresh_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() && std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_some() {
        return Err(CliError::Data(format!("{} is not empty; refusing to overwrite", dir.display())));
    }
    Ok(())
}

pub fn synth_ocular(
    out: &Path,
    spec_path: Option<&Path>,
    subjects_per_class: Option<usize>,
    images_per_subject: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = subjects_per_class {
        spec.num_subjects_per_class = v;
    }
    if let Some(v) = images_per_subject {
        spec.images_per_subject = v;
    }
    if let Some(v) = seed {
        spec.seed = v;
    }
    spec.validate().map_err(CliError::usage)?;
    ensure_fresh_dir(out)?;
    let res = generate(&spec, out).map_err(CliError::data)?;
    write(&out.join("synth_spec.toml"), toml::to_string(&spec).expect("spec serializes"))?;
    println!(
        "{} images of {} subjects -> {}",
        res.manifest.len(),
        spec.num_subjects(),
        res.manifest_path.display()
    );
    Ok(())
}

pub fn synth_natural(out: &Path, count: usize, size: usize, seed: u64) -> Result<(), CliError> {
    if count == 0 || size < 32 {
        return Err(CliError::usage("need at least one image of at least 32x32"));
    }
    ensure_fresh_dir(out)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for i in 0..count {
        let img = dead_leaves_image(size, size, seed + i as u64);
        let path = out.join(format!("natural_{i:03}.pgm"));
        write_pgm(&img, &path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    println!("{count} images -> {}", out.display());
    Ok(())
}

pub fn learn_filters(images: &Path, k: usize, bits: usize, seed: u64, patches: usize, out: &Path) -> Result<(), CliError> {
    if out.exists() {
        return Err(CliError::Data(format!("{} exists; refusing to overwrite", out.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(images)
        .map_err(|e| CliError::io(images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no .pgm images in {}", images.display())));
    }
    let imgs = paths
        .iter()
        .map(|p| load_pgm(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = BsifLearnConfig {
        patches,
        ..BsifLearnConfig::new(k, bits, seed)
    };
    let bank = learn_bsif_filters(&imgs, &cfg)?;
    bank.save(out)?;
    println!(
        "{}x{} bank with {} filters from {} images -> {} (digest {})",
        k,
        k,
        bits,
        imgs.len(),
        out.display(),
        bank.digest()
    );
    Ok(())
}

struct Loaded {
    manifest: DatasetManifest,
    setup: ExperimentSetup,
}

fn load(cfg: &RunConfig, manifest: &Path) -> Result<Loaded, CliError> {
    let manifest = load_manifest(manifest).map_err(CliError::data)?;
    manifest.validate_files().map_err(CliError::data)?;
    Ok(Loaded {
        manifest,
        setup: ExperimentSetup {
            region: cfg.region,
            descriptor: cfg.descriptor.build()?,
            align: cfg.align,
            svm: cfg.svm,
        },
    })
}

fn parse_filters(filters: &[String]) -> Result<Vec<FieldFilter>, CliError> {
    filters.iter().map(|f| f.parse::<FieldFilter>().map_err(CliError::usage)).collect()
}

/// Leading key/value lines shared by every report.
fn meta(cfg: &RunConfig, setup: &ExperimentSetup) -> Vec<(&'static str, String)> {
    let mut m = vec![("command", cfg.command.clone())];
    if let Some(p) = &cfg.manifest {
        m.push(("manifest", p.display().to_string()));
    }
    if let Some(p) = &cfg.test_manifest {
        m.push(("test_manifest", p.display().to_string()));
    }
    if let Some(a) = cfg.attribute {
        m.push(("attribute", a.to_string()));
    }
    m.extend([
        ("region", cfg.region.to_string()),
        ("descriptor", setup.descriptor.fingerprint()),
        (
            "svm",
            format!(
                "C={} tol={} max_iter={} seed={}",
                cfg.svm.c, cfg.svm.tol, cfg.svm.max_iter, cfg.svm.seed
            ),
        ),
        ("train_frac", cfg.train_frac.to_string()),
        ("seed", cfg.seed.to_string()),
    ]);
    m
}

fn training_summary(reports: &[TrainReport]) -> String {
    let mut s = String::new();
    for (r, t) in reports.iter().enumerate() {
        let _ = writeln!(
            s,
            "train {r}: epochs {} converged {} primal {:.6e} gap {:.3e}",
            t.epochs, t.converged, t.primal, t.duality_gap
        );
    }
    s
}

fn dropped_summary(dropped: &[(String, String)]) -> String {
    let mut s = format!("dropped_images: {}\n", dropped.len());
    for (p, why) in dropped {
        let _ = writeln!(s, "  {p}: {why}");
    }
    s
}

fn split_csv(plan: &SplitPlan) -> String {
    let mut s = String::from("repetition,seed,part,subject_id\n");
    for (r, rep) in plan.repetitions.iter().enumerate() {
        for (part, set) in [("train", &rep.train_subjects), ("test", &rep.test_subjects)] {
            for subject in set {
                let _ = writeln!(s, "{r},{},{part},{subject}", rep.seed);
            }
        }
    }
    s
}

fn save_models(dir: &Path, models: &[SvmModel]) -> Result<(), CliError> {
    let mdir = dir.join("models");
    std::fs::create_dir(&mdir).map_err(|e| CliError::io(&mdir, e))?;
    for (r, m) in models.iter().enumerate() {
        m.save(mdir.join(format!("rep{r}.svm")))?;
    }
    Ok(())
}

fn write_report(dir: &Path, head: &[(&str, String)], report: &EvalReport, extra: &str, rows: &[PredictionRow]) -> Result<(), CliError> {
    write(&dir.join("report.txt"), report.to_text(head) + extra)?;
    write(&dir.join("report.csv"), format!("{REPORT_CSV_HEADER}{}", report.to_csv("")))?;
    write(&dir.join("predictions.csv"), predictions_csv(rows))
}

/// Solver non-convergence is a numeric failure, reported after the
/// artifacts are written so they can be inspected.
fn check_converged(reports: &[TrainReport]) -> Result<(), CliError> {
    match reports.iter().position(|r| !r.converged) {
        Some(r) => Err(CliError::Numeric(format!(
            "solver did not converge for repetition {r} (gap {:.3e}); raise --max-iter or --tol",
            reports[r].duality_gap
        ))),
        None => Ok(()),
    }
}

fn finish(dir: &Path, mean: f64) {
    println!("accuracy {mean:.2}% -> {}", dir.display());
}

fn experiment_artifacts(
    cfg: &RunConfig,
    setup: &ExperimentSetup,
    dir: &Path,
    plan: &SplitPlan,
    out: &ExperimentOutput,
) -> Result<(), CliError> {
    let extra = training_summary(&out.train_reports) + &dropped_summary(&out.dropped);
    write_report(dir, &meta(cfg, setup), &out.report, &extra, &out.predictions)?;
    write(&dir.join("splits.csv"), split_csv(plan))?;
    save_models(dir, &out.models)
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let attribute = cfg.require_attribute()?;
    let l = load(cfg, cfg.require_manifest()?)?;
    let plan = make_splits(&l.manifest, attribute, cfg.train_frac, cfg.reps, cfg.seed)?;
    let dir = cfg.create_run_dir()?;
    let mut store = FeatureStore::new(&l.manifest, &l.setup);
    let out = run_experiment(&mut store, &plan)?;
    experiment_artifacts(cfg, &l.setup, &dir, &plan, &out)?;
    finish(&dir, out.report.mean);
    check_converged(&out.train_reports)
}

pub fn cross_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let attribute = cfg.require_attribute()?;
    let test_path = cfg
        .test_manifest
        .as_deref()
        .ok_or_else(|| CliError::usage("--test-manifest is required"))?;
    let l = load(cfg, cfg.require_manifest()?)?;
    let test = load_manifest(test_path).map_err(CliError::data)?;
    test.validate_files().map_err(CliError::data)?;
    let plan = make_splits(&l.manifest, attribute, cfg.train_frac, cfg.reps, cfg.seed)?;
    let dir = cfg.create_run_dir()?;
    let mut store = FeatureStore::new(&l.manifest, &l.setup);
    let within = run_experiment(&mut store, &plan)?;
    let mut test_store = FeatureStore::new(&test, &l.setup);
    let (report, rows) = cross_dataset_eval(&within.models, &mut test_store, attribute)?;
    write(&dir.join("within_report.txt"), within.report.to_text(&meta(cfg, &l.setup)))?;
    write_report(&dir, &meta(cfg, &l.setup), &report, &training_summary(&within.train_reports), &rows)?;
    write(&dir.join("splits.csv"), split_csv(&plan))?;
    save_models(&dir, &within.models)?;
    finish(&dir, report.mean);
    check_converged(&within.train_reports)
}

pub fn subgroup_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let attribute = cfg.require_attribute()?;
    let train_filter = parse_filters(&cfg.train_filter)?;
    let test_filter = parse_filters(&cfg.test_filter)?;
    let l = load(cfg, cfg.require_manifest()?)?;
    let dir = cfg.create_run_dir()?;
    let mut store = FeatureStore::new(&l.manifest, &l.setup);
    let res = subgroup_experiment(
        &mut store,
        &train_filter,
        &test_filter,
        attribute,
        cfg.train_frac,
        cfg.reps,
        cfg.seed,
    )?;
    let mut head = meta(cfg, &l.setup);
    head.push(("train_filter", cfg.train_filter.join(",")));
    head.push(("test_filter", cfg.test_filter.join(",")));
    head.push(("mode", format!("{:?}", res.mode)));
    let out = &res.output;
    let extra = training_summary(&out.train_reports) + &dropped_summary(&out.dropped);
    write_report(&dir, &head, &out.report, &extra, &out.predictions)?;
    save_models(&dir, &out.models)?;
    finish(&dir, out.report.mean);
    check_converged(&out.train_reports)
}

pub fn blur_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let attribute = cfg.require_attribute()?;
    let l = load(cfg, cfg.require_manifest()?)?;
    let plan = make_splits(&l.manifest, attribute, cfg.train_frac, cfg.reps, cfg.seed)?;
    let dir = cfg.create_run_dir()?;
    let mut store = FeatureStore::new(&l.manifest, &l.setup);
    let (baseline, levels) = blur_experiment(&mut store, &plan, &cfg.sigmas)?;
    let head = meta(cfg, &l.setup);
    let mut summary = String::new();
    for (k, v) in &head {
        let _ = writeln!(summary, "{k}: {v}");
    }
    let _ = writeln!(summary, "test-only gaussian blur (population std over repetitions):");
    let mut csv = String::from(REPORT_CSV_HEADER);
    for level in &levels {
        let sub = dir.join(format!("sigma-{}", level.sigma));
        std::fs::create_dir(&sub).map_err(|e| CliError::io(&sub, e))?;
        let mut h = head.clone();
        h.push(("sigma", level.sigma.to_string()));
        write_report(&sub, &h, &level.report, "", &level.predictions)?;
        let _ = writeln!(
            summary,
            "  sigma {:>4}: {:.4} +/- {:.4}",
            level.sigma, level.report.mean, level.report.std
        );
        csv += &level.report.to_csv(&format!("sigma_{}/", level.sigma));
    }
    summary += &training_summary(&baseline.train_reports);
    write(&dir.join("report.txt"), summary)?;
    write(&dir.join("report.csv"), csv)?;
    write(&dir.join("splits.csv"), split_csv(&plan))?;
    save_models(&dir, &baseline.models)?;
    finish(&dir, baseline.report.mean);
    check_converged(&baseline.train_reports)
}

pub fn stratify(cfg: &RunConfig) -> Result<(), CliError> {
    let field = cfg.field.ok_or_else(|| CliError::usage("--field is required"))?;
    let log_path = cfg
        .predictions
        .as_deref()
        .ok_or_else(|| CliError::usage("--predictions is required"))?;
    let manifest = load_manifest(cfg.require_manifest()?).map_err(CliError::data)?;
    let text = std::fs::read_to_string(log_path).map_err(|e| CliError::io(log_path, e))?;
    let rows = parse_predictions(&text)?;
    let reps = rows.iter().map(|r| r.repetition + 1).max().unwrap_or(0);
    let table = stratified_report(&rows, &manifest, field, reps);
    let dir = cfg.create_run_dir()?;
    let mut text = format!("predictions: {}\nrepetitions: {reps}\n", log_path.display());
    text += &table.to_text();
    write(&dir.join("report.txt"), text)?;
    write(&dir.join("report.csv"), format!("{REPORT_CSV_HEADER}{}", table.to_csv()))?;
    println!("{} strata -> {}", table.strata.len(), dir.display());
    Ok(())
}

/// Features for every manifest image, in manifest order.
fn all_features<'a>(store: &mut FeatureStore<'a>) -> Vec<(usize, Result<Arc<FeatureVector>, String>)> {
    let n = store.manifest.len();
    let idx: Vec<usize> = (0..n).collect();
    store.ensure(&idx);
    idx.into_iter()
        .map(|i| (i, store.get(i).expect("extracted").clone()))
        .collect()
}

fn feature_file_name(image_path: &str) -> String {
    let stem = image_path.strip_suffix(".pgm").unwrap_or(image_path);
    format!("{}.feat", stem.replace(['/', '\\'], "__"))
}

pub fn extract(cfg: &RunConfig) -> Result<(), CliError> {
    let l = load(cfg, cfg.require_manifest()?)?;
    let dir = cfg.create_run_dir()?;
    let fdir = dir.join("features");
    std::fs::create_dir(&fdir).map_err(|e| CliError::io(&fdir, e))?;
    let mut store = FeatureStore::new(&l.manifest, &l.setup);
    let mut index = String::from("image_path,feature_file,dim\n");
    let mut dropped = Vec::new();
    for (i, f) in all_features(&mut store) {
        let rec = &l.manifest.records[i];
        match f {
            Ok(fv) => {
                let name = feature_file_name(&rec.image_path);
                fv.save(fdir.join(&name)).map_err(CliError::data)?;
                let _ = writeln!(index, "{},features/{name},{}", rec.image_path, fv.dim());
            }
            Err(e) => dropped.push((rec.image_path.clone(), e)),
        }
    }
    write(&dir.join("features.csv"), index)?;
    write(&dir.join("report.txt"), dropped_summary(&dropped))?;
    println!(
        "{} feature files ({} dropped) -> {}",
        l.manifest.len() - dropped.len(),
        dropped.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let attribute = cfg.require_attribute()?;
    let l = load(cfg, cfg.require_manifest()?)?;
    let dir = cfg.create_run_dir()?;
    let mut store = FeatureStore::new(&l.manifest, &l.setup);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dropped = Vec::new();
    for (i, f) in all_features(&mut store) {
        let rec = &l.manifest.records[i];
        let Some(y) = attribute.class_of(rec) else { continue };
        match f {
            Ok(fv) => {
                xs.push((*fv).clone());
                ys.push(y);
            }
            Err(e) => dropped.push((rec.image_path.clone(), e)),
        }
    }
    let labels = attribute.classes().map(str::to_string);
    let (model, report) = train_svm(&xs, &ys, labels, &cfg.svm)?;
    let mut counts = BTreeMap::new();
    for &y in &ys {
        *counts.entry(attribute.classes()[y]).or_insert(0usize) += 1;
    }
    let mut text = String::new();
    for (k, v) in meta(cfg, &l.setup) {
        let _ = writeln!(text, "{k}: {v}");
    }
    for (class, n) in &counts {
        let _ = writeln!(text, "train_images {class}: {n}");
    }
    text += &training_summary(std::slice::from_ref(&report));
    text += &dropped_summary(&dropped);
    write(&dir.join("report.txt"), text)?;
    let mdir = dir.join("models");
    std::fs::create_dir(&mdir).map_err(|e| CliError::io(&mdir, e))?;
    model.save(mdir.join("model.svm"))?;
    println!("model on {} images -> {}", xs.len(), dir.display());
    check_converged(std::slice::from_ref(&report))
}

pub fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let model_path = cfg.model.as_deref().ok_or_else(|| CliError::usage("--model is required"))?;
    let model = SvmModel::load(model_path)?;
    let attribute = [Attribute::Gender, Attribute::Race]
        .into_iter()
        .find(|a| a.classes().iter().zip(&model.labels).all(|(c, l)| c == l));
    let l = load(cfg, cfg.require_manifest()?)?;
    let dir = cfg.create_run_dir()?;
    let mut store = FeatureStore::new(&l.manifest, &l.setup);
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for (i, f) in all_features(&mut store) {
        let rec = &l.manifest.records[i];
        match f {
            Ok(fv) => {
                let p = model.predict(&fv)?;
                let truth = attribute
                    .and_then(|a| a.class_of(rec).map(|c| a.classes()[c].to_string()))
                    .unwrap_or_else(|| "unknown".into());
                rows.push(PredictionRow {
                    image_path: rec.image_path.clone(),
                    repetition: 0,
                    true_label: truth,
                    predicted_label: model.label(p.class).to_string(),
                    decision_value: p.decision,
                });
            }
            Err(e) => dropped.push((rec.image_path.clone(), e)),
        }
    }
    let mut head = meta(cfg, &l.setup);
    head.push(("model", model_path.display().to_string()));
    let report = EvalReport::from_predictions(&rows, model.labels.clone(), 1);
    write_report(&dir, &head, &report, &dropped_summary(&dropped), &rows)?;
    finish(&dir, report.mean);
    Ok(())
}
