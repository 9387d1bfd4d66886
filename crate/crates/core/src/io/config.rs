use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::search::SearchConfig;
use crate::train::{load_idx, synth_dataset, Dataset, TrainConfig, SYNTH_CELL};

fn d_grid() -> usize {
    8
}
fn d_classes() -> usize {
    4
}
fn d_samples() -> usize {
    1000
}
fn d_val() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Procedural motif images; see [`synth_dataset`].
    Synth {
        #[serde(default = "d_grid")]
        grid_cells: usize,
        #[serde(default = "d_classes")]
        classes: usize,
        #[serde(default = "d_samples")]
        samples: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "d_val")]
        val_frac: f64,
    },
    /// IDX image/label files, paths relative to the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            grid_cells: d_grid(),
            classes: d_classes(),
            samples: d_samples(),
            seed: 0,
            val_frac: d_val(),
        }
    }
}

impl DataConfig {
    /// Train and validation splits.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synth {
                grid_cells,
                classes,
                samples,
                seed,
                val_frac,
            } => {
                let d = synth_dataset(*grid_cells, *classes, *samples, *seed)?;
                Ok(d.split(1.0 - val_frac))
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
            } => Ok((
                load_idx(&base.join(train_images), &base.join(train_labels))?,
                load_idx(&base.join(val_images), &base.join(val_labels))?,
            )),
        }
    }
}

/// Top-level experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchConfig,
    /// Needed by the training subcommands only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        if let Some(DataConfig::Synth {
            grid_cells,
            classes,
            samples,
            val_frac,
            ..
        }) = &self.data
        {
            let size = grid_cells * SYNTH_CELL;
            if size != self.model.image_size {
                return Err(Error::Config(format!(
                    "data.grid_cells {grid_cells} gives {size}px images but model.image_size is {}",
                    self.model.image_size
                )));
            }
            if *classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data.classes {classes} differs from model.num_classes {}",
                    self.model.num_classes
                )));
            }
            if !(val_frac > &0.0 && val_frac < &1.0) || *samples < 2 {
                return Err(Error::Config("data.val_frac must lie in (0, 1) and data.samples >= 2".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Train/validation splits; `base` resolves relative IDX paths.
    pub fn datasets(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a `data` section".into()))?;
        let (train, val) = data.load(base)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("data split leaves an empty train or validation set".into()));
        }
        if train.height != self.model.image_size || train.width != self.model.image_size {
            return Err(Error::Config(format!(
                "data images are {}x{} but model.image_size is {}",
                train.height, train.width, self.model.image_size
            )));
        }
        Ok((train, val))
    }
}

/// Strict parse: unknown keys and invariant violations are errors.
pub fn parse_config(text: &str) -> Result<Config> {
    let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => Error::Config(format!("{}: {other}", path.display())),
    })
}
