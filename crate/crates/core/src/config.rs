//! Run configuration. Every field has a default, unknown keys are
//! rejected, and `key.path=value` overrides are applied before parsing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeLossWeights, AutoencoderConfig};
use crate::backbone::MiniDitConfig;
use crate::degradation::DegradationRecipe;
use crate::error::{Error, Result};
use crate::lq_cond::StatsMode;
use crate::prompt::PromptConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub hq_dir: PathBuf,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    pub stats: StatsMode,
    pub hidden: usize,
    pub eps: f32,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            stats: StatsMode::PerItem,
            hidden: crate::lq_cond::HIDDEN,
            eps: crate::numerics::EPS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    #[default]
    Uniform,
    LogitNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub sample_steps: usize,
    pub t_sampling: TimeSampling,
    pub logit_mean: f32,
    pub logit_std: f32,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sample_steps: 28,
            t_sampling: TimeSampling::Uniform,
            logit_mean: 0.0,
            logit_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub visual_pretrain_steps: usize,
    pub visual_lr: f32,
    pub ae_pretrain_steps: usize,
    pub ae_finetune_steps: usize,
    pub ae_crop: usize,
    pub ae_batch: usize,
    pub ae_lr: f32,
    pub ae_finetune_lr: f32,
    pub disc_lr: f32,
    pub ae_loss: AeLossWeights,
    pub dpir_steps: usize,
    pub batch: usize,
    /// HQ crop side used for backbone training.
    pub patch: usize,
    /// Learning rate per parameter group.
    pub lr: BTreeMap<String, f32>,
    pub clip: f32,
    pub weight_decay: f32,
    /// Linear warmup length of the backbone learning rate.
    pub warmup_steps: usize,
    /// Cosine-anneal every stage's learning rate to zero over its steps.
    pub cosine_decay: bool,
}

impl TrainConfig {
    /// Learning-rate multiplier at `step` of a `total`-step stage.
    pub fn lr_factor(&self, step: usize, total: usize, warmup: usize) -> f32 {
        let warm = if warmup == 0 {
            1.0
        } else {
            ((step + 1) as f32 / warmup as f32).min(1.0)
        };
        let decay = if self.cosine_decay && total > 0 {
            0.5 * (1.0 + (std::f32::consts::PI * step as f32 / total as f32).cos())
        } else {
            1.0
        };
        warm * decay
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lr = [("dit", 5e-4), ("lqc", 5e-4), ("prompt", 5e-4)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            visual_pretrain_steps: 300,
            visual_lr: 2e-3,
            ae_pretrain_steps: 4000,
            ae_finetune_steps: 2000,
            ae_crop: 32,
            ae_batch: 4,
            ae_lr: 4e-3,
            ae_finetune_lr: 5e-4,
            disc_lr: 1e-3,
            ae_loss: AeLossWeights::default(),
            dpir_steps: 5000,
            batch: 4,
            patch: 64,
            lr,
            clip: 1.0,
            weight_decay: 0.0,
            warmup_steps: 100,
            cosine_decay: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreConfig {
    /// Fraction of a tile shared with its neighbour.
    pub overlap: f32,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self { overlap: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub model: MiniDitConfig,
    pub autoencoder: AutoencoderConfig,
    pub prompt: PromptConfig,
    pub conditioning: ConditioningConfig,
    pub flow: FlowConfig,
    pub degradation: DegradationRecipe,
    pub train: TrainConfig,
    pub restore: RestoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            model: MiniDitConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            prompt: PromptConfig::default(),
            conditioning: ConditioningConfig::default(),
            flow: FlowConfig::default(),
            degradation: DegradationRecipe::default(),
            train: TrainConfig::default(),
            restore: RestoreConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parse `value` as a TOML scalar or array, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set `a.b.c = value` inside `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::with_overrides(s, &[])
    }

    /// Parse `base` after applying `key=value` overrides.
    pub fn with_overrides(base: &str, sets: &[String]) -> Result<Self> {
        let mut table: toml::Table = base.parse().map_err(config_err)?;
        for s in sets {
            set_path(&mut table, s)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::with_overrides(&base, sets)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.autoencoder.validate()?;
        self.prompt.validate()?;
        self.degradation.validate()?;
        self.train.ae_loss.validate()?;
        if self.model.latent_channels != self.autoencoder.latent_channels {
            return Err(config_err(
                "model.latent_channels must equal autoencoder.latent_channels",
            ));
        }
        let pooled = self.prompt.enc1.dim + self.prompt.enc2.dim;
        if pooled == 0 || self.model.pooled_dim == 0 {
            return Err(config_err("pooled widths must be positive"));
        }
        let f = self.autoencoder.downsample * self.model.patch_size;
        if self.train.patch == 0 || self.train.patch % f != 0 {
            return Err(config_err(format!("train.patch must be a multiple of {f}")));
        }
        if self.train.patch % self.degradation.scale != 0 {
            return Err(config_err(
                "train.patch must be divisible by degradation.scale",
            ));
        }
        if self.train.ae_crop % self.autoencoder.downsample != 0
            || self.train.ae_crop < self.prompt.encoder_res
        {
            return Err(config_err("train.ae_crop must be divisible by the downsample factor and hold one encoder tile"));
        }
        if !(0.0..0.5).contains(&self.restore.overlap) {
            return Err(config_err("restore.overlap must lie in [0, 0.5)"));
        }
        if self.train.batch == 0 || self.train.ae_batch == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        Ok(())
    }

    pub fn lr(&self, group: &str) -> f32 {
        self.train.lr.get(group).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default_and_round_trips() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        let s = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&s).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[model]\nwidth = 3").is_err());
    }

    #[test]
    fn overrides_apply_by_path() {
        let sets = vec![
            "model.model_dim=64".to_string(),
            "prompt.mode=text_only".to_string(),
            "train.lr.dit=0.01".to_string(),
            "seed=7".to_string(),
        ];
        let c = RunConfig::with_overrides("", &sets).unwrap();
        assert_eq!(c.model.model_dim, 64);
        assert_eq!(c.prompt.mode, crate::prompt::PromptMode::TextOnly);
        assert_eq!(c.lr("dit"), 0.01);
        assert_eq!(c.seed, 7);
        assert!(RunConfig::with_overrides("", &["model.num_heads=3".into()]).is_err());
        assert!(RunConfig::with_overrides("", &["noequals".into()]).is_err());
    }
}
