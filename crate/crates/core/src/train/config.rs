use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::mask::{DropMethod, DropSpec};
use crate::rng::RngStream;

use super::data::{load_cifar10, make_synthetic_split, standardize, Dataset, SyntheticSpec};
use super::model::{ModelSpec, Network};
use super::optim::SgdConfig;

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Cifar10 {
        path: PathBuf,
        #[serde(default = "yes")]
        standardize: bool,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn yes() -> bool {
    true
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetConfig {
    /// Training and evaluation splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            Self::Synthetic(spec) => {
                let (mut train, mut test) = make_synthetic_split(spec)?;
                standardize(&mut train, &mut test);
                Ok((train, test))
            }
            Self::Cifar10 { path, standardize: std, train_limit, test_limit } => {
                let (mut train, mut test) = load_cifar10(path)?;
                if let Some(n) = train_limit {
                    train = train.truncated(*n);
                }
                if let Some(n) = test_limit {
                    test = test.truncated(*n);
                }
                if *std {
                    standardize(&mut train, &mut test);
                }
                Ok((train, test))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each 3x3 conv block.
    pub conv_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { conv_channels: vec![16, 32, 64] }
    }
}

/// Full training configuration. Field names match the JSON config file;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(epoch, factor)`, 0-based epochs, strictly increasing.
    pub lr_milestones: Vec<(usize, f64)>,
    pub loss: LossWeights,
    pub drop: DropSpec,
    /// Conv block indices followed by a mask slot.
    pub mask_placement: Vec<usize>,
    pub model: ModelConfig,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub eval_every: usize,
    /// Draw a separate mask for every sample instead of one per step.
    pub per_sample_masks: bool,
    /// Store elapsed wall time in the metrics. Off keeps metrics
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: SgdConfig::default(),
            batch_size: 128,
            epochs: 200,
            lr_milestones: vec![(75, 0.1), (130, 0.1), (180, 0.1)],
            loss: LossWeights::default(),
            drop: DropSpec::default(),
            mask_placement: vec![0, 1],
            model: ModelConfig::default(),
            seed: 0,
            dataset: DatasetConfig::default(),
            eval_every: 1,
            per_sample_masks: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Small configuration that trains the synthetic dataset in seconds.
    pub fn desk_scale() -> Self {
        Self {
            optimizer: SgdConfig { lr: 0.02, momentum: 0.9, weight_decay: 5e-4 },
            batch_size: 32,
            epochs: 50,
            lr_milestones: vec![(30, 0.1), (45, 0.1)],
            model: ModelConfig { conv_channels: vec![4, 8, 8] },
            ..Self::default()
        }
    }

    pub fn with_drop(mut self, drop: DropSpec) -> Self {
        self.drop = drop;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid("lr_milestones must be strictly increasing"));
        }
        let o = &self.optimizer;
        if o.lr.is_nan() || o.lr <= 0.0 || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(Error::invalid("optimizer needs lr > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        self.loss.validate()?;
        self.drop.validate()?;
        if self.drop.method != DropMethod::Baseline && self.mask_placement.is_empty() {
            return Err(Error::invalid(format!("method '{}' needs at least one mask slot", self.drop.method)));
        }
        Ok(())
    }

    pub fn model_spec(&self, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        ModelSpec::conv_stack(input, classes, &self.model.conv_channels, &self.mask_placement)
    }

    /// Freshly initialized network for a dataset, seeded from `self.seed`.
    pub fn init_network(&self, data: &Dataset) -> Result<Network> {
        let spec = self.model_spec(data.image_shape(), data.classes)?;
        Network::new(spec, &mut RngStream::new(self.seed, super::STREAM_INIT))
    }
}
