//! Resolved run configuration: TOML file, then flag overrides.
//!
//! The serialized form is written verbatim into every run directory and
//! hashed to name it, so re-running from a stored `config.toml` lands on
//! the same name (under a different `--out`) and reproduces the run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ocular_attr::dataset::Field;
use ocular_attr::eval::DEFAULT_SIGMAS;
use ocular_attr::svm::SvmConfig;
use ocular_attr::{AlignParams, Attribute, DescriptorConfig, FilterBank, LpqConfig, RegionSelector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorName {
    Bsif,
    Lbp,
    Lpq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorSpec {
    pub name: DescriptorName,
    /// BSIF filter size.
    pub k: usize,
    /// BSIF bit count.
    pub n: usize,
    /// BSIF bank file; the bundled 9x9/8-bit bank when absent.
    pub bank: Option<PathBuf>,
    /// LPQ window.
    pub window: usize,
}

impl Default for DescriptorSpec {
    fn default() -> Self {
        Self {
            name: DescriptorName::Bsif,
            k: 9,
            n: 8,
            bank: None,
            window: LpqConfig::default().window,
        }
    }
}

impl DescriptorSpec {
    pub fn build(&self) -> Result<DescriptorConfig, CliError> {
        Ok(match self.name {
            DescriptorName::Lbp => DescriptorConfig::Lbp,
            DescriptorName::Lpq => DescriptorConfig::Lpq(LpqConfig::new(self.window).map_err(CliError::usage)?),
            DescriptorName::Bsif => {
                let bank = match &self.bank {
                    Some(p) => FilterBank::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
                    None if (self.k, self.n) == (9, 8) => FilterBank::builtin(),
                    None => {
                        return Err(CliError::Usage(format!(
                            "no bundled bank for k={} n={}; pass --bank",
                            self.k, self.n
                        )))
                    }
                };
                if (bank.k(), bank.n()) != (self.k, self.n) {
                    return Err(CliError::Usage(format!(
                        "bank is {}x{} with {} filters, config asks for k={} n={}",
                        bank.k(),
                        bank.k(),
                        bank.n(),
                        self.k,
                        self.n
                    )));
                }
                DescriptorConfig::Bsif(Arc::new(bank))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub manifest: Option<PathBuf>,
    /// Second manifest for cross-dataset scoring.
    pub test_manifest: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub attribute: Option<Attribute>,
    pub field: Option<Field>,
    pub region: RegionSelector,
    pub train_frac: f64,
    pub reps: usize,
    pub seed: u64,
    pub sigmas: Vec<f64>,
    pub train_filter: Vec<String>,
    pub test_filter: Vec<String>,
    /// Parent of the run directory; not part of the run's identity.
    #[serde(skip)]
    pub out: PathBuf,
    pub descriptor: DescriptorSpec,
    pub align: AlignParams,
    pub svm: SvmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            manifest: None,
            test_manifest: None,
            model: None,
            predictions: None,
            attribute: None,
            field: None,
            region: RegionSelector::ExtendedOcular,
            train_frac: 0.6,
            reps: 5,
            seed: 1,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            train_filter: Vec::new(),
            test_filter: Vec::new(),
            out: PathBuf::from("runs"),
            descriptor: DescriptorSpec::default(),
            align: AlignParams::default(),
            svm: SvmConfig::default(),
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())[..6]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Makes paths absolute and checks that referenced files exist.
    pub fn finalize(&mut self) -> Result<(), CliError> {
        for p in [
            &mut self.manifest,
            &mut self.test_manifest,
            &mut self.model,
            &mut self.predictions,
            &mut self.descriptor.bank,
        ]
        .into_iter()
        .flatten()
        {
            *p = absolute(p)?;
            if !p.is_file() {
                return Err(CliError::Data(format!("{}: no such file", p.display())));
            }
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(CliError::Usage(format!("train fraction {} must lie in (0, 1)", self.train_frac)));
        }
        if self.reps == 0 {
            return Err(CliError::usage("at least one repetition is required"));
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(CliError::usage("blur sigmas must be positive"));
        }
        self.align.validate().map_err(CliError::usage)?;
        Ok(())
    }

    pub fn require_manifest(&self) -> Result<&Path, CliError> {
        self.manifest.as_deref().ok_or_else(|| CliError::usage("--manifest is required"))
    }

    pub fn require_attribute(&self) -> Result<Attribute, CliError> {
        self.attribute.ok_or_else(|| CliError::usage("--attribute is required"))
    }

    /// Creates `<out>/<command>-<hash>` (refusing to reuse one) and stores
    /// the config in it.
    pub fn create_run_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out.join(format!("{}-{}", self.command, self.hash()));
        if dir.exists() {
            return Err(CliError::Data(format!(
                "{} already exists; runs are never overwritten",
                dir.display()
            )));
        }
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        std::fs::create_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        write(&dir.join("config.toml"), self.to_toml())?;
        Ok(dir)
    }
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            command: "evaluate".into(),
            manifest: Some("/data/m.csv".into()),
            attribute: Some(Attribute::Race),
            field: Some(Field::EyeColor),
            train_filter: vec!["gender=male".into()],
            ..RunConfig::default()
        };
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back.to_toml(), cfg.to_toml());
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn out_does_not_change_identity() {
        let a = RunConfig {
            command: "evaluate".into(),
            ..RunConfig::default()
        };
        let b = RunConfig {
            out: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 2, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
        let partial: RunConfig = toml::from_str("reps = 3\n[svm]\nc = 10.0\n").unwrap();
        assert_eq!(partial.reps, 3);
        assert_eq!(partial.svm.c, 10.0);
        assert_eq!(partial.svm.tol, SvmConfig::default().tol);
    }

    #[test]
    fn bundled_bank_only_for_its_shape() {
        assert!(DescriptorSpec::default().build().is_ok());
        let other = DescriptorSpec {
            k: 7,
            ..DescriptorSpec::default()
        };
        assert!(matches!(other.build(), Err(CliError::Usage(_))));
    }
}
