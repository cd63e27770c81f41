//! Flat run configuration.
//!
//! A config file is TOML with top-level keys only, for example
//!
//! ```toml
//! seed = 3
//! task = "vqa"
//! layout_supervision = true
//! epochs = 10
//! ```
//!
//! Every key is optional; unset keys fall back to the library defaults.
//! Command-line flags are parsed into a second [`RunConfig`] and layered on
//! top with [`RunConfig::merge`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::ExecMode;
use crate::gridworld::DatasetSpec;
use crate::model::ModelConfig;
use crate::training::{TaskMix, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Directory holding the dataset files.
    pub data_dir: Option<PathBuf>,
    pub task: Option<TaskMix>,
    pub layout_supervision: Option<bool>,
    pub mode: Option<ExecMode>,

    pub steps: Option<usize>,
    pub stack_depth: Option<usize>,
    pub hidden: Option<usize>,
    pub sharpen_temperature: Option<f64>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub layout_loss_weight: Option<f64>,
    pub bbox_loss_weight: Option<f64>,
    pub clip_norm: Option<f64>,

    pub grid: Option<usize>,
    pub min_objects: Option<usize>,
    pub max_objects: Option<usize>,
    pub train_size: Option<usize>,
    pub val_size: Option<usize>,
    pub test_size: Option<usize>,
}

macro_rules! layer {
    ($base:expr, $top:expr, $($f:ident),*) => {
        RunConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Keys set in `top` win over `self`.
    pub fn merge(self, top: RunConfig) -> RunConfig {
        layer!(
            self,
            top,
            seed,
            out_dir,
            data_dir,
            task,
            layout_supervision,
            mode,
            steps,
            stack_depth,
            hidden,
            sharpen_temperature,
            epochs,
            batch_size,
            lr,
            layout_loss_weight,
            bbox_loss_weight,
            clip_norm,
            grid,
            min_objects,
            max_objects,
            train_size,
            val_size,
            test_size
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = DatasetSpec::default();
        DatasetSpec {
            grid: self.grid.unwrap_or(d.grid),
            min_objects: self.min_objects.unwrap_or(d.min_objects),
            max_objects: self.max_objects.unwrap_or(d.max_objects),
            train: self.train_size.unwrap_or(d.train),
            val: self.val_size.unwrap_or(d.val),
            test: self.test_size.unwrap_or(d.test),
            seed: self.seed(),
        }
    }

    /// Model shape; a stack depth left unset follows `steps + 1`.
    pub fn model_config(&self, vocab_size: usize, answers: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(vocab_size, answers);
        c.grid = self.grid.unwrap_or(c.grid);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.steps = self.steps.unwrap_or(c.steps);
        c.stack_depth = self.stack_depth.unwrap_or(c.steps + 1);
        c.sharpen_temperature = self.sharpen_temperature.unwrap_or(c.sharpen_temperature);
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            layout_supervision: self.layout_supervision.unwrap_or(d.layout_supervision),
            layout_loss_weight: self.layout_loss_weight.unwrap_or(d.layout_loss_weight),
            bbox_loss_weight: self.bbox_loss_weight.unwrap_or(d.bbox_loss_weight),
            clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            task_mix: self.task.unwrap_or(d.task_mix),
            seed: self.seed(),
        };
        c.validate()?;
        Ok(c)
    }
}
