//! Experiment configuration files (TOML). Every section rejects unknown keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use longiflow::autodiff::Precision;
use longiflow::data::SequenceBatch;
use longiflow::flow::{FlowConfig, MadeConfig};
use longiflow::inference::NllPolicy;
use longiflow::model::{ModelConfig, ObsFamily, PosteriorKind, PriorKind};
use longiflow::training::{ReconDivisor, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, IoContext, Result};

pub const RESOLVED_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds model initialisation and training.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
    /// Filled in by `train` from the dataset; needed to rebuild the model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool: Option<ToolSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
            shape: None,
            tool: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory written by `make-data`.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    /// `bernoulli` or `gaussian`.
    pub likelihood: String,
    /// Variance of the Gaussian likelihood.
    pub obs_variance: f64,
    /// `standard` or `vamp`.
    pub prior: String,
    pub vamp_components: usize,
    /// `gaussian` or `iaf`.
    pub posterior: String,
    pub posterior_blocks: usize,
    /// IAF blocks per transition of the flow chain.
    pub iaf_blocks: usize,
    pub made_layers: usize,
    pub made_hidden: usize,
    pub gate_bias: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            latent_dim: 8,
            enc_hidden: vec![256, 256],
            dec_hidden: vec![256, 256],
            likelihood: "bernoulli".into(),
            obs_variance: 0.05,
            prior: "vamp".into(),
            vamp_components: 16,
            posterior: "gaussian".into(),
            posterior_blocks: 2,
            iaf_blocks: 2,
            made_layers: 3,
            made_hidden: 128,
            gate_bias: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to `min(10, epochs)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
    pub lr: f64,
    /// Fractions of the run at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// `nominal` (t_i + 1) or `observed` (number of observed frames).
    pub recon_divisor: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 64,
            warmup_epochs: None,
            lr: 1e-3,
            lr_milestones: vec![0.5, 0.75, 0.9],
            lr_decay: 0.5,
            recon_divisor: "nominal".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Importance samples per NLL estimate.
    pub samples: usize,
    /// `fixed-j` or `average-j`.
    pub policy: String,
    pub repetitions: usize,
    pub samples_per_index: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: 100,
            policy: "fixed-j".into(),
            repetitions: 5,
            samples_per_index: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs/default".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

impl ShapeSection {
    pub fn of(batch: &SequenceBatch) -> Self {
        ShapeSection {
            channels: batch.channels,
            height: batch.height,
            width: batch.width,
            frames: batch.frames,
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSection {
    pub name: String,
    pub version: String,
    pub precision: String,
}

impl ToolSection {
    pub fn current() -> Self {
        ToolSection {
            name: "longiflow".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            precision: precision_name(Precision::global()).into(),
        }
    }
}

pub fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.dir = resolve(base, &cfg.data.dir);
        cfg.output.dir = resolve(base, &cfg.output.dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First eight bytes of the SHA-256 of the serialised config, output
    /// location excluded.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.output = OutputSection::default();
        c.tool = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if self.data.dir.is_empty() {
            return Err(CliError::usage("config: data.dir is required"));
        }
        if m.latent_dim == 0 {
            return Err(CliError::usage("config: model.latent_dim must be positive"));
        }
        if m.made_layers == 0 || m.made_hidden == 0 || m.iaf_blocks == 0 {
            return Err(CliError::usage("config: MADE layers, width and IAF blocks must be positive"));
        }
        self.family()?;
        self.prior()?;
        self.posterior()?;
        self.divisor()?;
        self.policy()?;
        let t = &self.train;
        if t.lr_milestones.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(CliError::usage("config: train.lr_milestones must lie in [0, 1]"));
        }
        if self.eval.samples == 0 || self.eval.repetitions == 0 || self.eval.samples_per_index == 0 {
            return Err(CliError::usage("config: eval sample and repetition counts must be at least 1"));
        }
        Ok(())
    }

    fn family(&self) -> Result<ObsFamily> {
        match self.model.likelihood.as_str() {
            "bernoulli" => Ok(ObsFamily::Bernoulli),
            "gaussian" => Ok(ObsFamily::Gaussian {
                variance: self.model.obs_variance,
            }),
            other => Err(CliError::usage(format!("config: unknown likelihood {other:?}"))),
        }
    }

    fn prior(&self) -> Result<PriorKind> {
        match self.model.prior.as_str() {
            "standard" => Ok(PriorKind::Standard),
            "vamp" => Ok(PriorKind::Vamp {
                components: self.model.vamp_components,
            }),
            other => Err(CliError::usage(format!("config: unknown prior {other:?}"))),
        }
    }

    fn made(&self) -> MadeConfig {
        MadeConfig {
            hidden_layers: self.model.made_layers,
            hidden_width: self.model.made_hidden,
        }
    }

    fn posterior(&self) -> Result<PosteriorKind> {
        match self.model.posterior.as_str() {
            "gaussian" => Ok(PosteriorKind::Gaussian),
            "iaf" => Ok(PosteriorKind::IafEnriched {
                transforms: self.model.posterior_blocks,
                made: self.made(),
            }),
            other => Err(CliError::usage(format!("config: unknown posterior {other:?}"))),
        }
    }

    fn divisor(&self) -> Result<ReconDivisor> {
        match self.train.recon_divisor.as_str() {
            "nominal" => Ok(ReconDivisor::Nominal),
            "observed" => Ok(ReconDivisor::Observed),
            other => Err(CliError::usage(format!("config: unknown recon_divisor {other:?}"))),
        }
    }

    pub fn policy(&self) -> Result<NllPolicy> {
        NllPolicy::parse(&self.eval.policy).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn warmup_epochs(&self) -> usize {
        self.train.warmup_epochs.unwrap_or(10.min(self.train.epochs))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let shape = self
            .shape
            .ok_or_else(|| CliError::usage("config has no [shape] section; use the resolved config of a training run"))?;
        let mut mc = ModelConfig::new(shape.frame_dim(), self.model.latent_dim, shape.frames.saturating_sub(1));
        mc.enc_hidden = self.model.enc_hidden.clone();
        mc.dec_hidden = self.model.dec_hidden.clone();
        mc.family = self.family()?;
        mc.prior = self.prior()?;
        mc.posterior = self.posterior()?;
        mc.flow = FlowConfig {
            blocks_per_transition: self.model.iaf_blocks,
            made: self.made(),
            gate_bias: self.model.gate_bias,
        };
        Ok(mc)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let mut tc = TrainConfig::new(t.epochs, self.seed);
        tc.batch_size = t.batch_size;
        tc.warmup_epochs = self.warmup_epochs();
        tc.lr = t.lr;
        tc.schedule = t
            .lr_milestones
            .iter()
            .map(|&f| ((f * t.epochs as f64).round() as usize, t.lr_decay))
            .filter(|&(e, _)| e > 0)
            .collect();
        tc.divisor = self.divisor()?;
        tc.precision = Precision::global();
        tc.config_hash = self.hash();
        tc.validate().map_err(|e| CliError::usage(format!("config: {e}")))?;
        Ok(tc)
    }

    /// Copy with every default spelled out, the dataset shape and the tool
    /// version attached.
    pub fn resolved(&self, shape: ShapeSection) -> Self {
        let mut r = self.clone();
        r.train.warmup_epochs = Some(self.warmup_epochs());
        r.shape = Some(shape);
        r.tool = Some(ToolSection::current());
        r
    }
}

fn resolve(base: &Path, p: &str) -> String {
    if p.is_empty() {
        return String::new();
    }
    let path = base.join(PathBuf::from(p));
    std::path::absolute(&path).unwrap_or(path).to_string_lossy().into_owned()
}

/// Record of a command that has no experiment config of its own.
#[derive(Clone, Debug, Serialize)]
pub struct InvocationRecord {
    pub tool: ToolSection,
    pub invocation: BTreeMap<String, toml::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
}

impl InvocationRecord {
    pub fn new(command: &str) -> Self {
        let mut invocation = BTreeMap::new();
        invocation.insert("command".to_string(), toml::Value::from(command));
        InvocationRecord {
            tool: ToolSection::current(),
            invocation,
            config: None,
        }
    }

    pub fn arg(mut self, key: &str, value: impl Into<toml::Value>) -> Self {
        self.invocation.insert(key.to_string(), value.into());
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("record serialises")
    }
}
