//! Sectioned TOML run configuration: `[stft]`, `[model]`, `[training]`,
//! `[inference]`, `[data]` and a top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::StemClass;
use crate::inference::SeparationPlan;
use crate::model::{Activation, ModelConfig, Normalization};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftSection {
    pub n_fft: usize,
    pub hop_length: usize,
}

fn default_audio_channels() -> usize {
    2
}

fn default_sources() -> Vec<StemClass> {
    StemClass::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub freq_bins: usize,
    #[serde(default = "default_audio_channels")]
    pub audio_channels: usize,
    pub initial_channels: usize,
    pub growth: usize,
    pub n_scales: usize,
    pub blocks_per_scale: usize,
    pub n_subbands: usize,
    pub tdf_bottleneck_factor: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_sources")]
    pub sources: Vec<StemClass>,
}

/// Dataset roots; relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    /// Clean validation set used for the early-stopping SDR.
    pub valid: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub stft: StftSection,
    pub model: ModelSection,
    pub training: TrainConfig,
    #[serde(default)]
    pub inference: SeparationPlan,
    #[serde(default)]
    pub data: DataSection,
}

impl RunConfig {
    /// Parses and validates every section.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolving `[data]` paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.valid].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_fft: self.stft.n_fft,
            hop_length: self.stft.hop_length,
            freq_bins: m.freq_bins,
            audio_channels: m.audio_channels,
            initial_channels: m.initial_channels,
            growth: m.growth,
            n_scales: m.n_scales,
            blocks_per_scale: m.blocks_per_scale,
            n_subbands: m.n_subbands,
            tdf_bottleneck_factor: m.tdf_bottleneck_factor,
            normalization: m.normalization,
            activation: m.activation,
            sources: m.sources.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model_config().validate().map_err(|e| invalid(&e))?;
        self.training.validate().map_err(|e| invalid(&e))?;
        self.inference.validate(self.stft.hop_length).map_err(|e| invalid(&e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::MaskDims;

    const SAMPLE: &str = r#"
seed = 7

[stft]
n_fft = 8192
hop_length = 1024

[model]
freq_bins = 4096
initial_channels = 64
growth = 64
n_scales = 5
blocks_per_scale = 2
n_subbands = 4
tdf_bottleneck_factor = 4
normalization = "instance"
activation = "gelu"

[training]
optimizer = "adam"
learning_rate = 1e-4
batch_size = 6
chunk_frames = 256
loss_mask_dims = "batch"
q = 0.4
steps = 100000

[inference]
overlap = 8
chunk_frames = 1024

[data]
train = "train"
valid = "/abs/valid"
"#;

    #[test]
    fn parses_sample() {
        let cfg = RunConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model_config(), ModelConfig::preset("modelA").unwrap());
        assert_eq!(cfg.training.loss_mask_dims, MaskDims::Batch);
        assert_eq!(cfg.training.steps_per_epoch, 10_000);
        assert_eq!(cfg.inference, SeparationPlan::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys() {
        for (from, to) in [
            ("growth = 64", "growth = 64\ngrowht = 1"),
            ("steps = 100000", "steps = 100000\nlr = 1"),
            ("seed = 7", "seed = 7\n[extra]\nx = 1"),
        ] {
            let text = SAMPLE.replace(from, to);
            assert!(matches!(RunConfig::from_toml_str(&text), Err(ConfigError::Parse(_))), "{to}");
        }
    }

    #[test]
    fn rejects_invalid_values() {
        let text = SAMPLE.replace("freq_bins = 4096", "freq_bins = 4000");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(ConfigError::Invalid(_))));
        let text = SAMPLE.replace("q = 0.4", "q = 1.5");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(ConfigError::Invalid(_))));
        let text = SAMPLE.replace("overlap = 8", "overlap = 3");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn accepts_table_spelling_of_batch_time() {
        let text = SAMPLE.replace("loss_mask_dims = \"batch\"", "loss_mask_dims = \"batch, time\"");
        let cfg = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.training.loss_mask_dims, MaskDims::BatchTime);
    }

    #[test]
    fn data_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, SAMPLE).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train.unwrap(), dir.path().join("train"));
        assert_eq!(cfg.data.valid.unwrap(), PathBuf::from("/abs/valid"));
    }
}
