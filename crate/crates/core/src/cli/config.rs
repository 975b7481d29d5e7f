//! Run configuration: a sectioned TOML file layered over built-in presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VapaadConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Where the training sequences come from and how they are cut up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `auto`, `synthetic`, an `http(s)://` URL or a local `.npy` path.
    /// `auto` reads the cached Moving MNIST file when present and falls back
    /// to synthetic sequences otherwise; it never touches the network.
    pub source: String,
    pub cache_dir: PathBuf,
    /// Sequences kept from the raw array (or generated synthetically).
    pub n_sequences: usize,
    /// Fraction held out for validation.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "auto".into(),
            cache_dir: PathBuf::from("data"),
            n_sequences: 1000,
            test_fraction: 0.1,
            split_seed: 0,
            synthetic_seed: 0,
        }
    }
}

/// Output cadence of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    /// Steps between checkpoints; the final state is always saved.
    pub checkpoint_every: u64,
    pub eval_batch_size: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            checkpoint_every: 100,
            eval_batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub model: VapaadConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run: RunSettings,
}

impl RunConfig {
    /// Small enough for a laptop: 20 sequences (16 train, 4 validation) at
    /// 32×32, eight filters per block, two epochs of batch 4.
    pub fn desk() -> Self {
        Self {
            model: VapaadConfig::desk(),
            train: TrainConfig {
                batch_size: 4,
                epochs: 2,
                ..TrainConfig::default()
            },
            data: DataConfig {
                n_sequences: 20,
                test_fraction: 0.2,
                ..DataConfig::default()
            },
            run: RunSettings {
                checkpoint_every: 2,
                eval_batch_size: 4,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.n_sequences < 2 {
            return Err(Error::Config("data.n_sequences must be at least 2".into()));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.test_fraction must be in (0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if self.run.checkpoint_every == 0 || self.run.eval_batch_size == 0 {
            return Err(Error::Config(
                "run.checkpoint_every and run.eval_batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `base` overlaid with the TOML document `text`. Keys absent from the
    /// document keep the base value; unknown keys are errors.
    pub fn layered(base: &RunConfig, text: &str) -> Result<Self> {
        let overlay: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(base: &RunConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::layered(base, &text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursive table merge. A table carrying a `kind` key (a tagged choice
/// such as the optimizer) replaces the base table instead of merging into it.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => {
                merge(b, o)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerConfig;

    #[test]
    fn defaults_round_trip_through_toml() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn overlay_keeps_unmentioned_keys() {
        let text = "[train]\nbatch_size = 3\nsteps = 5\n[model]\nattention = false\n";
        let cfg = RunConfig::layered(&RunConfig::desk(), text).unwrap();
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.train.steps, Some(5));
        assert!(!cfg.model.attention);
        assert_eq!(cfg.model.filters, vec![8, 8, 8]);
        assert_eq!(cfg.data.n_sequences, 20);
    }

    #[test]
    fn optimizer_kind_replaces_the_table() {
        let text = "[train.optimizer]\nkind = \"sgd\"\neta = 0.05\n";
        let cfg = RunConfig::layered(&RunConfig::default(), text).unwrap();
        assert_eq!(cfg.train.optimizer, OptimizerConfig::Sgd { eta: 0.05 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "colour = 1\n",
            "[model]\nfliters = [1]\n",
            "[data]\nsorce = \"x\"\n",
            "[extra]\n",
        ] {
            assert!(matches!(
                RunConfig::layered(&RunConfig::default(), text),
                Err(Error::Config(_))
            ));
        }
        assert!(
            RunConfig::layered(&RunConfig::default(), "[data]\ntest_fraction = 1.0\n").is_err()
        );
    }
}
