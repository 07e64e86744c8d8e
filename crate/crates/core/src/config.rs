//! Run configuration: one YAML file with model, training, data, embedding
//! and few-shot sections. Every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::hierarchy::{fixtures, LabelHierarchy};
use crate::model::{ModelConfig, ModelMode};
use crate::optim::{AdamWConfig, Schedule};
use crate::semantic_init::ProviderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            warmup_epochs: 10,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            patience: None,
            grad_clip: Some(1.0),
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be at least 1".into()));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Path to a hierarchy YAML file or a built-in fixture name
    /// (`aid`, `mured`, `dfc15`, `aid-ship-branch`).
    pub hierarchy: String,
    /// Dataset directory with a manifest; when absent the synthetic
    /// generator runs with `synth`.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hierarchy: "aid".into(),
            dir: None,
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub modes: Vec<ModelMode>,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self {
            ks: vec![4, 8, 12, 16],
            repeats: 3,
            modes: vec![ModelMode::Flat, ModelMode::Maple],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub embed: ProviderConfig,
    pub fewshot: FewshotConfig,
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_yaml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if fixtures::by_name(&cfg.data.hierarchy).is_none() && Path::new(&cfg.data.hierarchy).is_relative() {
            cfg.data.hierarchy = base.join(&cfg.data.hierarchy).to_string_lossy().into_owned();
        }
        if let Some(d) = &cfg.data.dir {
            if d.is_relative() {
                cfg.data.dir = Some(base.join(d));
            }
        }
        if let Some(d) = &cfg.embed.cache_dir {
            if d.is_relative() {
                cfg.embed.cache_dir = Some(base.join(d));
            }
        }
        Ok(cfg)
    }

    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_yaml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Invalid values are reported as parse errors of the config.
    pub fn validate(&self) -> Result<()> {
        let check = || -> Result<()> {
            self.model.validate()?;
            self.train.validate()?;
            self.data.split.fractions()?;
            Ok(())
        };
        check().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Parse(format!("config: {m}")),
            e => e,
        })
    }

    pub fn hierarchy(&self) -> Result<LabelHierarchy> {
        match fixtures::by_name(&self.data.hierarchy) {
            Some(h) => Ok(h),
            None => LabelHierarchy::load(&self.data.hierarchy),
        }
    }

    pub fn to_yaml_string(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_yaml_gives_defaults() {
        let cfg = RunConfig::from_yaml_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.warmup_epochs, 10);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_yaml_str("train: {epochs: 5, warmup_epochs: 5}").unwrap_err().is_validation());
        assert!(RunConfig::from_yaml_str("train: {batch_size: 0}").unwrap_err().is_validation());
        assert!(RunConfig::from_yaml_str("model: {aggregator: max}").unwrap_err().is_validation());
        assert!(RunConfig::from_yaml_str("modle: {}").unwrap_err().is_validation());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("h.yaml"), fixtures::DFC15_YAML).unwrap();
        let path = dir.path().join("run.yaml");
        std::fs::write(&path, "data: {hierarchy: h.yaml, dir: ds}\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.hierarchy().unwrap().len(), 17);
        assert_eq!(cfg.data.dir.unwrap(), dir.path().join("ds"));
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.train.seed = 9;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(RunConfig::from_yaml_str(&b.to_yaml_string().unwrap()).unwrap(), b);
    }
}
