use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    DeepConvNet,
    EegNet,
}

impl std::str::FromStr for Backbone {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "deepconvnet" => Ok(Backbone::DeepConvNet),
            "eegnet" => Ok(Backbone::EegNet),
            _ => bail!(
                Config,
                "unknown backbone {s:?} (expected deepconvnet or eegnet)"
            ),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::DeepConvNet => "deepconvnet",
            Backbone::EegNet => "eegnet",
        })
    }
}

/// DeepConvNet temporal kernel length and pool width.
pub const DEEPCONV_KERNEL: usize = 10;
pub const DEEPCONV_POOL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub n_c: usize,
    pub n_t: usize,
    pub sample_rate: f64,
    /// DeepConvNet: depths are `b, b, 2b, 4b` for blocks 1-4.
    /// EEGNet: number of temporal filters F1.
    pub base_depth: usize,
    /// EEGNet depthwise multiplier D; the separable layer has `F1 * D` filters.
    pub depth_multiplier: usize,
    /// EEGNet pool widths after layers 2 and 3.
    pub pools: (usize, usize),
    pub dropout_rate: f64,
}

impl EncoderConfig {
    pub fn new(backbone: Backbone, n_c: usize, n_t: usize, sample_rate: f64) -> Self {
        let base_depth = match backbone {
            Backbone::DeepConvNet => 25,
            Backbone::EegNet => 8,
        };
        EncoderConfig {
            backbone,
            n_c,
            n_t,
            sample_rate,
            base_depth,
            depth_multiplier: 2,
            pools: (4, 8),
            dropout_rate: 0.5,
        }
    }

    /// EEGNet first temporal kernel length, `floor(fs / 2)`.
    pub fn eegnet_temporal_len(&self) -> usize {
        (self.sample_rate / 2.0).floor() as usize
    }

    /// EEGNet separable depthwise kernel length, `floor(fs / 8)`.
    pub fn eegnet_separable_len(&self) -> usize {
        ((self.sample_rate / 8.0).floor() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c < 2 {
            bail!(
                Config,
                "encoder needs at least 2 channels, got {}",
                self.n_c
            );
        }
        if self.n_t == 0 || !(self.sample_rate > 0.0) {
            bail!(Config, "encoder needs n_t > 0 and a positive sample rate");
        }
        if self.base_depth == 0
            || self.depth_multiplier == 0
            || self.pools.0 == 0
            || self.pools.1 == 0
        {
            bail!(Config, "encoder depths and pool widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(Config, "dropout rate {} outside [0, 1)", self.dropout_rate);
        }
        if self.backbone == Backbone::EegNet && self.eegnet_temporal_len() == 0 {
            bail!(
                Config,
                "sample rate {} Hz gives an empty EEGNet temporal kernel",
                self.sample_rate
            );
        }
        Ok(())
    }
}
