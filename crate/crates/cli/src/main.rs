//! `ocular-attr`: synthetic data, filter learning, feature extraction and
//! the attribute-prediction experiment protocols.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ocular_attr::dataset::Field;
use ocular_attr::{Attribute, RegionSelector};

use crate::config::{DescriptorName, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "ocular-attr", version, about = "Gender and race prediction from ocular images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Learn a BSIF filter bank from a directory of PGM images.
    LearnFilters(LearnArgs),
    /// Write one feature file per manifest image.
    Extract(ExpArgs),
    /// Train one classifier on every labelled image of a manifest.
    Train(ExpArgs),
    /// Repeated subject-disjoint train/test evaluation.
    Evaluate(ExpArgs),
    /// Train on --manifest, score every image of --test-manifest.
    CrossEval(ExpArgs),
    /// Train on one subgroup, test on another.
    SubgroupEval(ExpArgs),
    /// Evaluate with test images blurred at each sigma.
    BlurEval(ExpArgs),
    /// Per-value accuracy of a prediction log.
    Stratify(ExpArgs),
    /// Score a manifest with a saved model.
    Predict(ExpArgs),
}

#[derive(Subcommand)]
enum SynthKind {
    /// Ocular images with planted attribute textures, plus a manifest.
    Ocular {
        /// Directory to create; must not already contain files.
        #[arg(long)]
        out: PathBuf,
        /// TOML synthesis spec; defaults give the acceptance fixture.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        subjects_per_class: Option<usize>,
        #[arg(long)]
        images_per_subject: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dead-leaves images for filter learning.
    Natural {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 13)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Image i uses seed `seed + i`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    bits: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 50_000)]
    patches: usize,
    /// Bank file to write; never overwritten.
    #[arg(long)]
    out: PathBuf,
}

/// Experiment flags; each overrides the same key of `--config`.
#[derive(Args, Default)]
struct ExpArgs {
    /// TOML run config (e.g. a stored `config.toml`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory of the run directory [default: runs].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    attribute: Option<Attribute>,
    /// Manifest field for stratification.
    #[arg(long)]
    field: Option<Field>,
    #[arg(long)]
    region: Option<RegionSelector>,
    #[arg(long, value_enum)]
    descriptor: Option<DescriptorName>,
    /// BSIF filter size.
    #[arg(long)]
    k: Option<usize>,
    /// BSIF bit count.
    #[arg(long)]
    bits: Option<usize>,
    /// BSIF filter bank file.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// LPQ window size.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    svm_seed: Option<u64>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// `field=value`; repeat to combine.
    #[arg(long)]
    train_filter: Vec<String>,
    #[arg(long)]
    test_filter: Vec<String>,
}

impl ExpArgs {
    fn resolve(self, command: &str) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if !cfg.command.is_empty() && cfg.command != command {
            return Err(CliError::Usage(format!(
                "config is for '{}', not '{command}'",
                cfg.command
            )));
        }
        cfg.command = command.to_string();
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v.into(); })*
            };
        }
        set! {
            out => out,
            region => region,
            descriptor => descriptor.name,
            k => descriptor.k,
            bits => descriptor.n,
            window => descriptor.window,
            c => svm.c,
            tol => svm.tol,
            max_iter => svm.max_iter,
            svm_seed => svm.seed,
            train_frac => train_frac,
            reps => reps,
            seed => seed,
            sigmas => sigmas,
        }
        macro_rules! set_opt {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = Some(v); })*
            };
        }
        set_opt! {
            manifest => manifest,
            test_manifest => test_manifest,
            model => model,
            predictions => predictions,
            attribute => attribute,
            field => field,
            bank => descriptor.bank,
        }
        if !self.train_filter.is_empty() {
            cfg.train_filter = self.train_filter;
        }
        if !self.test_filter.is_empty() {
            cfg.test_filter = self.test_filter;
        }
        cfg.finalize()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { kind } => match kind {
            SynthKind::Ocular {
                out,
                spec,
                subjects_per_class,
                images_per_subject,
                seed,
            } => commands::synth_ocular(&out, spec.as_deref(), subjects_per_class, images_per_subject, seed),
            SynthKind::Natural { out, count, size, seed } => commands::synth_natural(&out, count, size, seed),
        },
        Command::LearnFilters(a) => commands::learn_filters(&a.images, a.k, a.bits, a.seed, a.patches, &a.out),
        Command::Extract(a) => commands::extract(&a.resolve("extract")?),
        Command::Train(a) => commands::train(&a.resolve("train")?),
        Command::Evaluate(a) => commands::evaluate(&a.resolve("evaluate")?),
        Command::CrossEval(a) => commands::cross_eval(&a.resolve("cross-eval")?),
        Command::SubgroupEval(a) => commands::subgroup_eval(&a.resolve("subgroup-eval")?),
        Command::BlurEval(a) => commands::blur_eval(&a.resolve("blur-eval")?),
        Command::Stratify(a) => commands::stratify(&a.resolve("stratify")?),
        Command::Predict(a) => commands::predict(&a.resolve("predict")?),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("ocular-attr: {e}");
        std::process::exit(e.exit_code());
    }
}
