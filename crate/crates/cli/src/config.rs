//! Run configuration: a TOML file with every section optional and unknown
//! keys rejected, plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mopoe_core::fusion::{AbstractMeanKind, FusionOptions, SubsetPolicy};
use mopoe_core::harness::{ClassifierTrainConfig, EvalConfig, SyntheticSetConfig};
use mopoe_core::model::ModelConfig;
use mopoe_core::objectives::{KlEstimator, ObjectiveConfig, ObjectiveKind};
use serde::{Deserialize, Serialize};

/// Marks configuration problems so the binary can exit with the usage code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory for runs, sweeps and evaluations.
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub classifier: ClassifierTrainConfig,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            objective: ObjectiveSection::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    pub synthetic: SyntheticSetConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            synthetic: SyntheticSetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Per-modality style latent size; required by the factorized objective.
    pub style_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: vec![128, 128],
            style_dim: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    /// `mopoe`, `poe`, `moe`, `subset_sum`, `factorized` or `unimodal:j`.
    pub kind: String,
    pub subset_policy: SubsetPolicy,
    pub beta: f64,
    pub kl_estimator: KlEstimator,
    pub samples_per_component: usize,
    pub fusion: FusionOptions,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            kind: "mopoe".into(),
            subset_policy: SubsetPolicy::AllNonempty,
            beta: 2.5,
            kl_estimator: KlEstimator::AvgSubsetKl,
            samples_per_component: 1,
            fusion: FusionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Write `checkpoints/epoch-NNNN.bin` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            betas: vec![0.5, 1.0, 2.5, 5.0, 10.0, 20.0],
            seeds: vec![0, 1, 2],
        }
    }
}

/// Command-line flags that replace config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub objective: Option<String>,
    pub subset_policy: Option<String>,
    pub beta: Option<f64>,
    pub kl_estimator: Option<String>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

impl RunConfig {
    /// Parses `path`, or returns defaults when `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(kind) = &o.objective {
            self.objective.kind = kind.clone();
        }
        if let Some(policy) = &o.subset_policy {
            self.objective.subset_policy = policy.parse().map_err(|e| invalid(format!("{e}")))?;
        }
        if let Some(beta) = o.beta {
            self.objective.beta = beta;
        }
        if let Some(est) = &o.kl_estimator {
            self.objective.kl_estimator = est.parse().map_err(|e| invalid(format!("{e}")))?;
        }
        if let Some(epochs) = o.epochs {
            self.train.epochs = epochs;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind()?;
        self.objective_config().validate().map_err(|e| invalid(format!("objective: {e}")))?;
        self.data
            .synthetic
            .validate()
            .map_err(|e| invalid(format!("data.synthetic: {e}")))?;
        if self.model.latent_dim == 0 {
            bail!(invalid("model.latent_dim must be positive"));
        }
        if kind == ObjectiveKind::Factorized && self.model.style_dim == 0 {
            bail!(invalid("objective `factorized` needs model.style_dim > 0"));
        }
        if self.train.batch_size == 0 {
            bail!(invalid("train.batch_size must be positive"));
        }
        if !(self.train.learning_rate > 0.0) {
            bail!(invalid("train.learning_rate must be positive"));
        }
        if self.eval.importance_samples == 0 {
            bail!(invalid("eval.importance_samples must be at least 1"));
        }
        if self.sweep.betas.iter().any(|b| !(*b >= 0.0)) {
            bail!(invalid("sweep.betas must be nonnegative"));
        }
        Ok(())
    }

    pub fn kind(&self) -> Result<ObjectiveKind> {
        self.objective
            .kind
            .parse()
            .map_err(|e| invalid(format!("objective.kind: {e}")))
    }

    /// Fusion for the metrics. An unset evaluation mean follows the
    /// objective: mixtures for `moe`, products otherwise.
    pub fn eval_fusion(&self) -> FusionOptions {
        let mut fusion = self.objective.fusion;
        if fusion.eval_mean.is_none() && self.objective.kind == "moe" {
            fusion.eval_mean = Some(AbstractMeanKind::Arithmetic);
        }
        fusion
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        let o = &self.objective;
        ObjectiveConfig {
            subset_policy: o.subset_policy.clone(),
            beta: o.beta,
            kl_estimator: o.kl_estimator,
            samples_per_component: o.samples_per_component,
            factorized: o.kind == "factorized",
            fusion: o.fusion,
        }
    }

    /// Bernoulli model for datasets with the given modality widths.
    pub fn model_config(&self, dims: &[usize]) -> Result<ModelConfig> {
        let mut mc = ModelConfig::bernoulli(dims, self.model.latent_dim, &self.model.hidden);
        if self.kind()? == ObjectiveKind::Factorized {
            mc = mc.with_style(self.model.style_dim);
        }
        mc.validate().map_err(|e| invalid(format!("model: {e}")))?;
        Ok(mc)
    }

    /// `variant-betaB-seedS`.
    pub fn run_id(&self) -> String {
        format!(
            "{}-beta{}-seed{}",
            self.objective.kind.replace(':', ""),
            self.objective.beta,
            self.train.seed
        )
    }
}
