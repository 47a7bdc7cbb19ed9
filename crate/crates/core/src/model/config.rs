use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::audio::StemClass;
use crate::dsp::StftConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Instance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

/// Hyperparameters that fully determine the network layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_fft: usize,
    pub hop_length: usize,
    /// Frequency bins fed to the network (the lowest ones are kept).
    pub freq_bins: usize,
    #[serde(default = "default_audio_channels")]
    pub audio_channels: usize,
    pub initial_channels: usize,
    pub growth: usize,
    pub n_scales: usize,
    pub blocks_per_scale: usize,
    pub n_subbands: usize,
    pub tdf_bottleneck_factor: usize,
    #[serde(default = "default_norm")]
    pub normalization: Normalization,
    #[serde(default = "default_act")]
    pub activation: Activation,
    #[serde(default = "default_sources")]
    pub sources: Vec<StemClass>,
}

fn default_audio_channels() -> usize {
    2
}

fn default_norm() -> Normalization {
    Normalization::Instance
}

fn default_act() -> Activation {
    Activation::Gelu
}

fn default_sources() -> Vec<StemClass> {
    StemClass::ALL.to_vec()
}

impl ModelConfig {
    /// Named presets: `modelA`, `modelB`, `model1`, `model2`, `model3`, `tiny`.
    pub fn preset(name: &str) -> Option<Self> {
        let big = |n_fft, hop, c0| ModelConfig {
            n_fft,
            hop_length: hop,
            freq_bins: 4096,
            audio_channels: 2,
            initial_channels: c0,
            growth: 64,
            n_scales: 5,
            blocks_per_scale: 2,
            n_subbands: 4,
            tdf_bottleneck_factor: 4,
            normalization: Normalization::Instance,
            activation: Activation::Gelu,
            sources: StemClass::ALL.to_vec(),
        };
        Some(match name {
            "modelA" | "modelB" => big(8192, 1024, 64),
            "model1" => big(8192, 2048, 128),
            "model2" => big(8192, 2048, 256),
            "model3" => ModelConfig {
                sources: vec![StemClass::Vocals],
                ..big(12288, 2048, 128)
            },
            "tiny" => Self::tiny(),
            _ => return None,
        })
    }

    /// Small two-scale network used for tests and toy experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            n_fft: 128,
            hop_length: 32,
            freq_bins: 64,
            audio_channels: 2,
            initial_channels: 8,
            growth: 8,
            n_scales: 2,
            blocks_per_scale: 1,
            n_subbands: 2,
            tdf_bottleneck_factor: 4,
            normalization: Normalization::Instance,
            activation: Activation::Gelu,
            sources: StemClass::ALL.to_vec(),
        }
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            n_fft: self.n_fft,
            hop_length: self.hop_length,
        }
    }

    /// Real input planes: re/im per audio channel.
    pub fn planes(&self) -> usize {
        2 * self.audio_channels
    }

    pub fn band_channels(&self) -> usize {
        self.planes() * self.n_subbands
    }

    /// Frequency height of the network after sub-band splitting.
    pub fn band_height(&self) -> usize {
        self.freq_bins / self.n_subbands
    }

    /// Frame counts must be multiples of this.
    pub fn time_multiple(&self) -> usize {
        1 << self.n_scales
    }

    pub fn width(&self, scale: usize) -> usize {
        self.initial_channels + scale * self.growth
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        self.stft()
            .validate()
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        for (name, v) in [
            ("freq_bins", self.freq_bins),
            ("audio_channels", self.audio_channels),
            ("initial_channels", self.initial_channels),
            ("n_scales", self.n_scales),
            ("blocks_per_scale", self.blocks_per_scale),
            ("n_subbands", self.n_subbands),
            ("tdf_bottleneck_factor", self.tdf_bottleneck_factor),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.sources.is_empty() {
            return bad("source list is empty".into());
        }
        for (i, s) in self.sources.iter().enumerate() {
            if self.sources[..i].contains(s) {
                return bad(format!("source {} listed twice", s.name()));
            }
        }
        if self.n_scales >= usize::BITS as usize {
            return bad("n_scales too large".into());
        }
        let full = self.n_fft / 2 + 1;
        if self.freq_bins > full {
            return bad(format!(
                "freq_bins {} exceeds the {full} bins of n_fft {}",
                self.freq_bins, self.n_fft
            ));
        }
        if self.freq_bins % self.n_subbands != 0 {
            return bad(format!(
                "freq_bins {} not divisible by n_subbands {}",
                self.freq_bins, self.n_subbands
            ));
        }
        let h = self.band_height();
        if h % self.time_multiple() != 0 {
            return bad(format!(
                "freq_bins / n_subbands = {h} not divisible by 2^n_scales = {}",
                self.time_multiple()
            ));
        }
        let bottom = h / self.time_multiple();
        if bottom % self.tdf_bottleneck_factor != 0 {
            return bad(format!(
                "bottleneck frequency width {bottom} not divisible by tdf_bottleneck_factor {}",
                self.tdf_bottleneck_factor
            ));
        }
        Ok(())
    }
}
