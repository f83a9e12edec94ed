//! Experiment configuration: TOML sections with profile defaults and
//! `--key value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSplit};
use crate::decoders::{DecoderConfig, Strategy};
use crate::encoder::EncoderConfig;
use crate::error::{ensure, Error, Result};
use crate::fields::CodeSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// CPU-sized defaults: 64/128 px synthetic images, k = 128, batch 16.
    Desk,
    /// Widths and batch size of the original setup (256/512 px, k = 512, batch 64).
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Tiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Side of the square training crops; synthetic images are generated at this size.
    pub image_size: usize,
    /// Base seed of the synthetic dataset.
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Tile directory with `images/` and `labels/`.
    pub dir: PathBuf,
    pub train_tiles: Vec<String>,
    pub val_tiles: Vec<String>,
    pub test_tiles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Points `S` sampled per training image.
    pub points: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    /// Stop after this many optimizer steps (0: no limit).
    pub max_steps: usize,
    /// Validate every this many steps (0: after every epoch).
    pub eval_every: usize,
    /// Stop as soon as validation IoU reaches this value (0: never).
    pub target_iou: f64,
    /// Random horizontal/vertical flips.
    pub augment: bool,
    /// Every kernel uses a fixed reduction order; kept for the record.
    pub deterministic: bool,
    /// Points per decoder call during dense evaluation.
    pub eval_chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `strategy:code_source` entries; empty runs all seven.
    #[serde(default)]
    pub strategies: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub model: DecoderConfig,
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub compare: CompareConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            model: DecoderConfig {
                hidden: 128,
                ..DecoderConfig::new(Strategy::CrossAttention, CodeSource::Tokens)
            },
            encoder: EncoderConfig::default(),
            training: TrainingConfig {
                seed: 0,
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 16,
                points: 512,
                max_epochs: 100,
                early_stop_patience: 10,
                max_steps: 0,
                eval_every: 0,
                target_iou: 0.0,
                augment: true,
                deterministic: true,
                eval_chunk: 4096,
            },
            data: DataConfig {
                source: DataSource::Synthetic,
                image_size: 64,
                seed: 0,
                train_count: 200,
                val_count: 40,
                test_count: 40,
                dir: PathBuf::new(),
                train_tiles: Vec::new(),
                val_tiles: Vec::new(),
                test_tiles: Vec::new(),
            },
            compare: CompareConfig {
                sizes: vec![64, 128],
                seeds: vec![0, 1, 2],
                strategies: Vec::new(),
            },
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            profile: Profile::Paper,
            model: DecoderConfig {
                hidden: 512,
                ..desk.model
            },
            encoder: EncoderConfig {
                in_channels: 3,
                widths: vec![64, 64, 128, 256, 512],
            },
            training: TrainingConfig {
                batch_size: 64,
                ..desk.training
            },
            data: DataConfig {
                image_size: 256,
                ..desk.data
            },
            compare: CompareConfig {
                sizes: vec![256, 512],
                ..desk.compare
            },
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses TOML text over the defaults of its `profile` (desk when absent),
    /// then applies `overrides`.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = file.clone();
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let profile = match table.get("profile") {
            Some(v) => v
                .clone()
                .try_into::<Profile>()
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let mut merged = to_table(&Self::for_profile(profile))?;
        merge(&mut merged, table);
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `--key value` overrides to an existing config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = to_table(self)?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let config: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder.validate()?;
        self.encoder.feature_size(self.data.image_size, self.data.image_size)?;
        let t = &self.training;
        ensure!(t.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(t.points >= 1, Config, "points must be at least 1");
        ensure!(t.eval_chunk >= 1, Config, "eval_chunk must be at least 1");
        ensure!(t.lr >= 0.0 && t.lr.is_finite(), Config, "lr must be a finite non-negative number");
        ensure!(
            (0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2) && t.eps > 0.0,
            Config,
            "Adam needs betas in [0, 1) and a positive eps"
        );
        ensure!(t.max_epochs >= 1, Config, "max_epochs must be at least 1");
        ensure!(!self.compare.seeds.is_empty(), Config, "compare needs at least one seed");
        Ok(())
    }

    /// The dataset described by the `data` section.
    pub fn dataset(&self) -> Result<DatasetSplit> {
        let d = &self.data;
        let split = match d.source {
            DataSource::Synthetic => {
                data::synthetic_split(d.seed, d.image_size, [d.train_count, d.val_count, d.test_count])?
            }
            DataSource::Tiles => data::load_tile_dataset(&d.dir, &d.train_tiles, &d.val_tiles, &d.test_tiles)?,
        };
        ensure!(!split.train.is_empty(), Config, "the training split is empty");
        ensure!(!split.val.is_empty(), Config, "the validation split is empty");
        Ok(split)
    }
}

fn to_table(config: &ExperimentConfig) -> Result<toml::Table> {
    toml::Table::try_from(config).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Section each bare override key belongs to.
fn section_of(key: &str) -> Option<&'static str> {
    let sections: [(&str, &[&str]); 5] = [
        (
            "model",
            &["strategy", "code_source", "hidden", "blocks", "heads", "embed_levels", "classes", "positional_tokens"],
        ),
        ("encoder", &["in_channels", "widths"]),
        (
            "training",
            &[
                "lr",
                "beta1",
                "beta2",
                "eps",
                "batch_size",
                "points",
                "max_epochs",
                "early_stop_patience",
                "max_steps",
                "eval_every",
                "target_iou",
                "augment",
                "deterministic",
                "eval_chunk",
            ],
        ),
        (
            "data",
            &["source", "image_size", "train_count", "val_count", "test_count", "dir", "train_tiles", "val_tiles", "test_tiles"],
        ),
        ("compare", &["sizes", "seeds", "strategies"]),
    ];
    sections
        .iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(s, _)| *s)
}

/// Sets `key` (`section.field`, or a bare field name that belongs to exactly
/// one section) to `value`, parsed as a TOML value and otherwise kept as a string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let key = key.replace('-', "_");
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (Some(s.to_string()), f.to_string()),
        None if key == "profile" => (None, key.clone()),
        None => match section_of(&key) {
            Some(s) => (Some(s.to_string()), key.clone()),
            None if key == "seed" => (Some("training".to_string()), key.clone()),
            None => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        },
    };
    let parsed = parse_value(value);
    let target = match section {
        Some(s) => table
            .entry(s.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{s}' is not a section")))?,
        None => table,
    };
    target.insert(field, parsed);
    Ok(())
}

fn parse_value(value: &str) -> toml::Value {
    let probe = format!("v = {value}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::desk());
        assert_eq!(c.training.points, 512);
        assert_eq!(c.model.embed_levels, 4);
        assert_eq!(c.training.lr, 1e-4);
        assert_eq!(c.training.batch_size, 16);
        assert_eq!(c.model.hidden, 128);
    }

    #[test]
    fn profile_and_sections_merge() {
        let text = "profile = \"paper\"\n[model]\nstrategy = \"film\"\ncode_source = \"local\"\n";
        let c = ExperimentConfig::from_toml(text, &[]).unwrap();
        assert_eq!(c.model.hidden, 512);
        assert_eq!(c.training.batch_size, 64);
        assert_eq!(c.model.strategy, Strategy::Film);
        assert_eq!(c.data.image_size, 256);
    }

    #[test]
    fn overrides_reach_every_section() {
        let c = ExperimentConfig::from_toml(
            "",
            &ov(&[
                ("lr", "0.001"),
                ("model.strategy", "concat"),
                ("code-source", "global"),
                ("image_size", "128"),
                ("sizes", "[64]"),
                ("widths", "[8, 8, 8]"),
                ("seed", "5"),
                ("data.seed", "9"),
                ("dir", "/tmp/x y"),
            ]),
        )
        .unwrap();
        assert_eq!(c.training.lr, 1e-3);
        assert_eq!((c.model.strategy, c.model.code_source), (Strategy::Concat, CodeSource::Global));
        assert_eq!(c.data.image_size, 128);
        assert_eq!(c.compare.sizes, vec![64]);
        assert_eq!(c.encoder.widths, vec![8, 8, 8]);
        assert_eq!((c.training.seed, c.data.seed), (5, 9));
        assert_eq!(c.data.dir, PathBuf::from("/tmp/x y"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("", &ov(&[("nonsense", "1")])),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("[training]\nbogus = 1\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &ov(&[("image_size", "48")])).is_err());
        assert!(ExperimentConfig::from_toml("", &ov(&[("strategy", "film")])).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::paper();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, &[]).unwrap(), c);
    }
}
