//! Sectioned TOML configuration with `flags > file > defaults` precedence.

use std::path::{Path, PathBuf};

use mixstyle_core::datagen::{DatasetManifest, DomainSpec, default_domains};
use mixstyle_core::mixstyle::{MixStyleConfig, Placement};
use mixstyle_core::semisup::SemiSupConfig;
use mixstyle_core::trainer::{ExperimentConfig, ModelConfig, Task, TrainConfig};
use mixstyle_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory holding (or receiving) the split files and manifest.
    pub dir: PathBuf,
    pub classes: usize,
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    pub image_size: [usize; 3],
    pub seed: u64,
    /// Labeled images per (class, domain); absent means fully labeled.
    pub label_budget: Option<usize>,
    /// Appends the rotated geometry-shift domain to the default styles.
    pub geometry_domain: bool,
    /// Explicit domain styles; replaces the defaults when non-empty.
    pub domain: Vec<DomainSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            classes: 7,
            train_per_cell: 200,
            test_per_cell: 100,
            image_size: [3, 32, 32],
            seed: 0,
            label_budget: None,
            geometry_domain: false,
            domain: Vec::new(),
        }
    }
}

impl DatasetConfig {
    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        if self.domain.is_empty() {
            default_domains(self.geometry_domain)
        } else {
            self.domain.clone()
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            classes: self.classes,
            domains: self.domain_specs().len(),
            train_per_cell: self.train_per_cell,
            test_per_cell: self.test_per_cell,
            image_size: self.image_size,
            seed: self.seed,
        }
    }
}

/// Which ablation table `ablate` produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    /// res1, res12, res123, res1234, res14, res23.
    Placement,
    Alpha,
    /// Mixing versus replacing.
    Variant,
    /// Random versus fixed shuffle.
    Shuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axis: AblationAxis,
    pub alphas: Vec<f64>,
    pub include_baseline: bool,
    /// Seeds are `train.seed, train.seed + 1, ...`.
    pub n_seeds: usize,
    /// Held-out domains; empty means every domain.
    pub targets: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axis: AblationAxis::Placement,
            alphas: vec![0.1, 0.2, 0.3, 0.4],
            include_baseline: false,
            n_seeds: 5,
            targets: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagConfig {
    /// Test images per (class, domain) that enter the projections; 0 uses
    /// all of them.
    pub per_cell: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { per_cell: 20 }
    }
}

/// The whole configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub mixstyle: MixStyleConfig,
    pub semisup: SemiSupConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub diag: DiagConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub target_domain: Option<usize>,
    pub data_dir: Option<PathBuf>,
}

impl ConfigFile {
    /// Parses a document. Semi-supervised tasks that leave
    /// `mixstyle.insertion_points` unset default to res12 instead of res123.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let placed = table
            .get("mixstyle")
            .and_then(|m| m.get("insertion_points"))
            .is_some();
        if !placed && cfg.train.task != Task::Dg {
            cfg.mixstyle.insertion_points = Placement::new([0, 1]).expect("valid slots");
        }
        Ok(cfg)
    }

    /// Reads, applies overrides, then validates; nothing is returned unless
    /// every check passes.
    pub fn load(path: Option<&Path>, overrides: &Overrides, seed_target: SeedTarget) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.apply(overrides, seed_target);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides, seed_target: SeedTarget) {
        if let Some(seed) = o.seed {
            match seed_target {
                SeedTarget::Dataset => self.dataset.seed = seed,
                SeedTarget::Train => self.train.seed = seed,
            }
        }
        if let Some(t) = o.target_domain {
            self.train.target_domain = t;
        }
        if let Some(d) = &o.data_dir {
            self.dataset.dir = d.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.manifest().validate()?;
        for d in self.dataset.domain_specs() {
            d.validate()?;
        }
        if let Some(b) = self.dataset.label_budget {
            if b > self.dataset.train_per_cell {
                return Err(Error::Config(format!(
                    "label_budget {b} exceeds train_per_cell {}",
                    self.dataset.train_per_cell
                )));
            }
        }
        self.experiment().validate()?;
        let domains = self.dataset.domain_specs().len();
        if self.train.target_domain >= domains {
            return Err(Error::Config(format!(
                "target_domain {} outside the {domains} configured domains",
                self.train.target_domain
            )));
        }
        if let Some(t) = self.ablation.targets.iter().find(|&&t| t >= domains) {
            return Err(Error::Config(format!("ablation target {t} outside the {domains} domains")));
        }
        if self.ablation.n_seeds == 0 {
            return Err(Error::Config("ablation.n_seeds must be positive".into()));
        }
        Ok(())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            model: self.model.clone(),
            mixstyle: self.mixstyle.clone(),
            semisup: self.semisup.clone(),
        }
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Which seed the `--seed` flag drives for a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedTarget {
    Dataset,
    Train,
}
