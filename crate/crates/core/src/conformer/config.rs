use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub attention_heads: usize,
    #[serde(default = "default_kernel")]
    pub conv_kernel_size: usize,
    #[serde(default = "default_true")]
    pub relative_attention: bool,
    #[serde(default = "default_expansion")]
    pub ff_expansion: usize,
    /// Channels of both stride-2 subsampling convolutions.
    #[serde(default = "default_channels")]
    pub subsample_channels: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_kernel() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_expansion() -> usize {
    4
}
fn default_channels() -> usize {
    8
}
fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "XS", alias = "xs")]
    Xs,
    #[serde(rename = "S", alias = "s")]
    S,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "XS" | "xs" => Ok(Preset::Xs),
            "S" | "s" => Ok(Preset::S),
            other => Err(Error::Config {
                field: "preset".into(),
                message: format!("unknown preset {other:?}, expected XS or S"),
            }),
        }
    }
}

impl ConformerConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Xs => Self::new(4, 64, 4),
            Preset::S => Self::new(8, 144, 4),
        }
    }

    pub fn new(num_layers: usize, model_dim: usize, attention_heads: usize) -> Self {
        Self {
            num_layers,
            model_dim,
            attention_heads,
            conv_kernel_size: default_kernel(),
            relative_attention: true,
            ff_expansion: default_expansion(),
            subsample_channels: default_channels(),
            dropout: default_dropout(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.attention_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.num_layers == 0 {
            return bad("num_layers", "must be >= 1".into());
        }
        if self.attention_heads == 0 || !self.model_dim.is_multiple_of(self.attention_heads) {
            return bad(
                "model_dim",
                format!(
                    "{} is not divisible by {} heads",
                    self.model_dim, self.attention_heads
                ),
            );
        }
        if self.conv_kernel_size.is_multiple_of(2) {
            return bad("conv_kernel_size", format!("{} is not odd", self.conv_kernel_size));
        }
        if self.ff_expansion == 0 || self.subsample_channels == 0 {
            return bad("ff_expansion", "expansion and channels must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} is not in [0,1)", self.dropout));
        }
        Ok(())
    }

    /// Encoder frames after two stride-2 stages.
    pub fn subsampled_len(frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }
}
