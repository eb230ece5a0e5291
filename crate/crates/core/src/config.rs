//! Experiment configuration: strict JSON documents (unknown keys rejected)
//! that wire data sources, architectures, and training settings into
//! reproducible runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Domain, Role, SynthSpec};
use crate::error::{Error, Result};
use crate::kernel::{DomainPooling, KernelSpec};
use crate::model::{DffArch, KernelChoice, Lambda};
use crate::optim::{Method, DEFAULT_LEARNING_RATE};
use crate::seg::SegArch;
use crate::trainer::TrainConfig;

/// One dataset: either a directory of PGM files or a generator spec,
/// never both.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<SynthSpec>,
}

impl DomainSpec {
    fn validate(&self) -> Result<()> {
        match (&self.path, &self.generate) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => {
                Err(Error::config("domain spec has both a path and a generator"))
            }
            (None, None) => Err(Error::config("domain spec needs a path or a generator")),
        }
    }

    fn realize(&self, role: Role, size: usize) -> Result<Domain> {
        self.validate()?;
        if let Some(path) = &self.path {
            return data::load_domain(path, role, size);
        }
        let spec = self.generate.expect("validated above");
        if spec.size != size {
            return Err(Error::config(format!(
                "generator size {} does not match the architecture input {size}",
                spec.size
            )));
        }
        let domain = data::gen_synthetic(&spec)?;
        if domain.role != role {
            return Err(Error::config(format!(
                "generator kind {} produces a {:?} domain, needed {role:?}",
                data::kind_name(spec.kind),
                domain.role
            )));
        }
        Ok(domain)
    }
}

fn default_fraction() -> f64 {
    0.5
}

/// The labeled target: where it comes from and how it is split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<SynthSpec>,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

impl TargetSpec {
    fn as_domain_spec(&self) -> DomainSpec {
        DomainSpec { path: self.path.clone(), generate: self.generate }
    }
}

/// Training-section keys; all optional, falling back to the loop defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub max_iterations: u64,
    pub batch_number: u64,
    pub batch_size: usize,
    pub lambda: Lambda,
    pub learning_rate: f64,
    pub seed: u64,
    pub method: Method,
    pub patience: Option<u64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            max_iterations: 10,
            batch_number: 100,
            batch_size: 8,
            lambda: Lambda::default(),
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 1,
            method: Method::AdaptiveMoments,
            patience: None,
        }
    }
}

/// Kernel bandwidth policy, as written in config files.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelConfig {
    #[default]
    MedianHeuristic,
    Fixed {
        bandwidths: Vec<f64>,
    },
}

impl KernelConfig {
    pub fn to_choice(&self) -> Result<KernelChoice> {
        Ok(match self {
            KernelConfig::MedianHeuristic => KernelChoice::MedianHeuristic,
            KernelConfig::Fixed { bandwidths } => {
                KernelChoice::Fixed(KernelSpec::rbf(bandwidths.clone())?)
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sources: Vec<DomainSpec>,
    pub target: TargetSpec,
    #[serde(default)]
    pub arch: DffArch,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub pooling: DomainPooling,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::config("at least one source domain is required"));
        }
        for s in &self.sources {
            s.validate()?;
        }
        self.target.as_domain_spec().validate()?;
        if !(self.target.train_fraction > 0.0 && self.target.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must be in (0,1), got {}",
                self.target.train_fraction
            )));
        }
        self.arch.validate()?;
        let (_, h, w) = self.arch.input;
        if h != w {
            return Err(Error::config(format!(
                "loaders produce square images; arch input is {h}x{w}"
            )));
        }
        self.train_config()?.validate()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            max_iterations: self.train.max_iterations,
            batch_number: self.train.batch_number,
            batch_size: self.train.batch_size,
            lambda: self.train.lambda,
            learning_rate: self.train.learning_rate,
            seed: self.train.seed,
            method: self.train.method,
            kernel: self.kernel.to_choice()?,
            pooling: self.pooling,
            patience: self.train.patience,
        })
    }

    pub fn load_sources(&self) -> Result<Vec<Domain>> {
        self.sources
            .iter()
            .map(|s| s.realize(Role::Source, self.arch.input.1))
            .collect()
    }

    /// Loads or generates the target and splits it into (train, test).
    pub fn load_target(&self) -> Result<(Domain, Domain)> {
        let full = self
            .target
            .as_domain_spec()
            .realize(Role::Target, self.arch.input.1)?;
        data::split(&full, self.target.train_fraction, self.target.split_seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegExperimentConfig {
    pub data: DomainSpec,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub arch: SegArch,
    #[serde(default)]
    pub train: TrainSpec,
    pub output_dir: PathBuf,
}

impl SegExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must be in (0,1), got {}",
                self.train_fraction
            )));
        }
        self.arch.validate()?;
        let (_, h, w) = self.arch.input;
        if h != w {
            return Err(Error::config(format!(
                "loaders produce square images; arch input is {h}x{w}"
            )));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_iterations: self.train.max_iterations,
            batch_number: self.train.batch_number,
            batch_size: self.train.batch_size,
            lambda: self.train.lambda,
            learning_rate: self.train.learning_rate,
            seed: self.train.seed,
            method: self.train.method,
            kernel: KernelChoice::MedianHeuristic,
            pooling: DomainPooling::default(),
            patience: self.train.patience,
        }
    }

    /// Loads or generates the masked data and splits it into (train, test).
    pub fn load_data(&self) -> Result<(Domain, Domain)> {
        let full = self.data.realize(Role::Target, self.arch.input.1)?;
        if full.masks.is_none() {
            return Err(Error::data("segmentation data carries no masks"));
        }
        data::split(&full, self.train_fraction, self.split_seed)
    }
}

/// Pipeline runs: a trained segmenter masks the images, then the fusion
/// experiment runs on the masked data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Path to a segmenter checkpoint.
    pub segmenter: PathBuf,
    /// Also mask the source images, not only the target.
    #[serde(default)]
    pub mask_sources: bool,
    pub experiment: ExperimentConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()
    }
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_seg_experiment(path: &Path) -> Result<SegExperimentConfig> {
    let cfg: SegExperimentConfig = parse(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_pipeline(path: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = parse(path)?;
    cfg.validate()?;
    Ok(cfg)
}
