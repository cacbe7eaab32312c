//! Run configuration and its JSON file form.
//!
//! Recognised keys: `k`, `alpha`, `beta`, `s1`, `s2`, `r`,
//! `layer_boundaries`, `layers`, `heads`, `d_model`, `mlp_ratio`, `seed`,
//! `disable_stages`. Missing keys take the defaults below; unknown keys are
//! logged and ignored.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Event-aware pooling before the language model.
    Vision,
    /// Layer-wise visual token pruning during prefill.
    Prefill,
    /// Dropping visual entries from the KV cache before decoding.
    Decode,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Vision, Stage::Prefill, Stage::Decode];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Vision => "vision",
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        }
    }
}

/// How per-frame relevance scores are aggregated into one event score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventScoreMode {
    #[default]
    Mean,
    Max,
}

/// How a frame's `N × d` tokens are reduced before cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameReduction {
    /// Mean over the `N` tokens, giving one `d`-vector.
    #[default]
    Mean,
    /// Concatenate all tokens into one `N·d` vector (the text vector is tiled).
    Flatten,
}

macro_rules! from_str_enum {
    ($ty:ty, $($name:literal => $variant:expr),+) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(format!("unknown value {other:?}")),
                }
            }
        }
    };
}

from_str_enum!(Stage, "vision" => Stage::Vision, "prefill" => Stage::Prefill, "decode" => Stage::Decode);
from_str_enum!(EventScoreMode, "mean" => EventScoreMode::Mean, "max" => EventScoreMode::Max);
from_str_enum!(FrameReduction, "mean" => FrameReduction::Mean, "flatten" => FrameReduction::Flatten);

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub s1: usize,
    pub s2: usize,
    pub r: f64,
    pub layer_boundaries: [usize; 3],
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    pub disable_stages: BTreeSet<Stage>,
    /// Not part of the JSON schema; set programmatically or from the CLI.
    pub event_score: EventScoreMode,
    /// Not part of the JSON schema; set programmatically or from the CLI.
    pub frame_reduction: FrameReduction,
}

impl Default for RunConfig {
    /// The LLaVA-OneVision-7B hyperparameter set on the default toy model.
    fn default() -> Self {
        Self {
            k: 5,
            alpha: 0.5,
            beta: 0.4,
            s1: 2,
            s2: 3,
            r: 0.76,
            layer_boundaries: [3, 10, 19],
            layers: 12,
            heads: 4,
            d_model: 64,
            mlp_ratio: 4,
            seed: 0,
            disable_stages: BTreeSet::new(),
            event_score: EventScoreMode::Mean,
            frame_reduction: FrameReduction::Mean,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{key} = {value} is out of range ({expected})")]
    Range {
        key: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error("layer boundaries must be strictly increasing, got {0:?}")]
    Ordering([usize; 3]),
    #[error("s1 ({s1}) must not exceed s2 ({s2})")]
    Strides { s1: usize, s2: usize },
    #[error("heads ({heads}) must divide d_model ({d_model})")]
    Heads { heads: usize, d_model: usize },
    #[error("invalid config JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk form. Every key is optional.
#[derive(Debug, Default, Serialize, Deserialize)]
struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    s1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    s2: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer_boundaries: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mlp_ratio: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    disable_stages: Option<BTreeSet<Stage>>,
    #[serde(flatten, skip_serializing)]
    unknown: serde_json::Map<String, serde_json::Value>,
}

fn unit_interval(key: &'static str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(ConfigError::Range {
            key,
            value: v.to_string(),
            expected: "(0, 1]",
        })
    }
}

fn positive(key: &'static str, v: usize) -> Result<usize, ConfigError> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(ConfigError::Range {
            key,
            value: v.to_string(),
            expected: ">= 1",
        })
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("k", self.k)?;
        unit_interval("alpha", self.alpha)?;
        unit_interval("beta", self.beta)?;
        unit_interval("r", self.r)?;
        positive("s1", self.s1)?;
        positive("s2", self.s2)?;
        if self.s1 > self.s2 {
            return Err(ConfigError::Strides {
                s1: self.s1,
                s2: self.s2,
            });
        }
        let [l1, l2, l3] = self.layer_boundaries;
        if !(l1 < l2 && l2 < l3) {
            return Err(ConfigError::Ordering(self.layer_boundaries));
        }
        positive("layers", self.layers)?;
        positive("heads", self.heads)?;
        positive("d_model", self.d_model)?;
        positive("mlp_ratio", self.mlp_ratio)?;
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ConfigError::Heads {
                heads: self.heads,
                d_model: self.d_model,
            });
        }
        Ok(())
    }

    pub fn stage_enabled(&self, stage: Stage) -> bool {
        !self.disable_stages.contains(&stage)
    }

    /// Same model and data settings with every compression stage switched off.
    pub fn baseline(&self) -> Self {
        Self {
            disable_stages: Stage::ALL.into_iter().collect(),
            ..self.clone()
        }
    }

    /// Parse a JSON config. Returns the config and any unrecognised keys.
    pub fn from_json_str(s: &str) -> Result<(Self, Vec<String>), ConfigError> {
        let file: ConfigFile = serde_json::from_str(s)?;
        let d = Self::default();
        let cfg = Self {
            k: file.k.unwrap_or(d.k),
            alpha: file.alpha.unwrap_or(d.alpha),
            beta: file.beta.unwrap_or(d.beta),
            s1: file.s1.unwrap_or(d.s1),
            s2: file.s2.unwrap_or(d.s2),
            r: file.r.unwrap_or(d.r),
            layer_boundaries: file.layer_boundaries.unwrap_or(d.layer_boundaries),
            layers: file.layers.unwrap_or(d.layers),
            heads: file.heads.unwrap_or(d.heads),
            d_model: file.d_model.unwrap_or(d.d_model),
            mlp_ratio: file.mlp_ratio.unwrap_or(d.mlp_ratio),
            seed: file.seed.unwrap_or(d.seed),
            disable_stages: file.disable_stages.unwrap_or_default(),
            ..d
        };
        cfg.validate()?;
        Ok((cfg, file.unknown.keys().cloned().collect()))
    }

    /// The JSON file form (every schema key present, nothing else).
    pub fn to_json(&self) -> serde_json::Value {
        let file = ConfigFile {
            k: Some(self.k),
            alpha: Some(self.alpha),
            beta: Some(self.beta),
            s1: Some(self.s1),
            s2: Some(self.s2),
            r: Some(self.r),
            layer_boundaries: Some(self.layer_boundaries),
            layers: Some(self.layers),
            heads: Some(self.heads),
            d_model: Some(self.d_model),
            mlp_ratio: Some(self.mlp_ratio),
            seed: Some(self.seed),
            disable_stages: Some(self.disable_stages.clone()),
            unknown: Default::default(),
        };
        serde_json::to_value(file).expect("config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let (cfg, unknown) = Self::from_json_str(&text)?;
        for key in unknown {
            log::warn!("{}: ignoring unknown config key {key:?}", path.as_ref().display());
        }
        Ok(cfg)
    }
}
