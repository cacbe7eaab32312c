//! Layer-wise retention schedule for visual tokens and the decode-time KV
//! keep mask.
//!
//! Retention is relative to the number of visual tokens that entered the
//! language model, per group:
//!
//! | layer           | key events | non-key events |
//! |-----------------|------------|----------------|
//! | `l < l1`        | 1          | 1              |
//! | `l1 <= l < l2`  | r          | α·r            |
//! | `l2 <= l < l3`  | r²         | 0              |
//! | `l >= l3`       | 0          | 0              |
//!
//! A boundary at or beyond the layer count never triggers.

use serde::Serialize;
use thiserror::Error;

use crate::io::RunConfig;
use crate::io::Stage;
use crate::tensor::{ceil_count, top_k_stable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("layer {layer} out of range for a {layers}-layer model")]
    InvalidLayer { layer: usize, layers: usize },
    #[error("boundaries must be strictly increasing, got {0:?}")]
    Ordering([usize; 3]),
    #[error("ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("asked to keep {wanted} tokens but only {available} survive")]
    Infeasible { wanted: usize, available: usize },
    #[error("token importance needs at least one text query")]
    NoTextQueries,
    #[error("scores ({scores}) and survivors ({survivors}) differ in length")]
    LengthMismatch { scores: usize, survivors: usize },
    #[error("attention maps have inconsistent shape")]
    BadAttentionShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Key,
    NonKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PruneSchedule {
    pub boundaries: [usize; 3],
    pub r: f64,
    pub alpha: f64,
    pub layers: usize,
}

/// Visual tokens per group entering the language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GroupCounts {
    pub key: usize,
    pub non_key: usize,
}

impl GroupCounts {
    pub fn get(&self, g: Group) -> usize {
        match g {
            Group::Key => self.key,
            Group::NonKey => self.non_key,
        }
    }

    pub fn total(&self) -> usize {
        self.key + self.non_key
    }
}

impl PruneSchedule {
    pub fn new(boundaries: [usize; 3], r: f64, alpha: f64, layers: usize) -> Result<Self, ScheduleError> {
        let [l1, l2, l3] = boundaries;
        if !(l1 < l2 && l2 < l3) {
            return Err(ScheduleError::Ordering(boundaries));
        }
        for v in [r, alpha] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ScheduleError::BadRatio(v));
            }
        }
        Ok(Self {
            boundaries,
            r,
            alpha,
            layers,
        })
    }

    /// A schedule whose first boundary lies past the last layer.
    pub fn disabled(layers: usize) -> Self {
        Self {
            boundaries: [layers, layers + 1, layers + 2],
            r: 1.0,
            alpha: 1.0,
            layers,
        }
    }

    /// Schedule for a run; disabled when the prefill stage is switched off.
    pub fn from_config(cfg: &RunConfig) -> Result<Self, ScheduleError> {
        if cfg.stage_enabled(Stage::Prefill) {
            Self::new(cfg.layer_boundaries, cfg.r, cfg.alpha, cfg.layers)
        } else {
            Ok(Self::disabled(cfg.layers))
        }
    }

    pub fn l1(&self) -> usize {
        self.boundaries[0]
    }

    /// Boundaries that fall inside the model.
    pub fn active_boundaries(&self) -> impl Iterator<Item = usize> + '_ {
        self.boundaries.iter().copied().filter(|&b| b < self.layers)
    }

    pub fn is_boundary(&self, layer: usize) -> bool {
        layer < self.layers && self.boundaries.contains(&layer)
    }

    pub fn retention_ratio(&self, layer: usize, group: Group) -> Result<f64, ScheduleError> {
        if layer >= self.layers {
            return Err(ScheduleError::InvalidLayer {
                layer,
                layers: self.layers,
            });
        }
        let [l1, l2, l3] = self.boundaries;
        Ok(match group {
            Group::Key if layer < l1 => 1.0,
            Group::Key if layer < l2 => self.r,
            Group::Key if layer < l3 => self.r * self.r,
            Group::Key => 0.0,
            Group::NonKey if layer < l1 => 1.0,
            Group::NonKey if layer < l2 => self.alpha * self.r,
            Group::NonKey => 0.0,
        })
    }

    /// Tokens of `group` processed by `layer`: `ceil(R(l) · origin)`.
    pub fn keep_count(&self, layer: usize, group: Group, origin: usize) -> Result<usize, ScheduleError> {
        Ok(ceil_count(self.retention_ratio(layer, group)?, origin))
    }

    /// Expected sequence length at every layer for a prompt of `text_len`
    /// text tokens.
    pub fn expected_lengths(&self, origin: GroupCounts, text_len: usize) -> Vec<usize> {
        (0..self.layers)
            .map(|l| {
                self.keep_count(l, Group::Key, origin.key).unwrap()
                    + self.keep_count(l, Group::NonKey, origin.non_key).unwrap()
                    + text_len
            })
            .collect()
    }
}

/// Per-head attention weights of one layer, `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    heads: usize,
    queries: usize,
    keys: usize,
    data: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(heads: usize, queries: usize, keys: usize, data: Vec<f64>) -> Result<Self, ScheduleError> {
        if data.len() != heads * queries * keys || heads == 0 {
            return Err(ScheduleError::BadAttentionShape);
        }
        Ok(Self {
            heads,
            queries,
            keys,
            data,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn weight(&self, head: usize, query: usize, key: usize) -> f64 {
        self.data[(head * self.queries + query) * self.keys + key]
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.queries + query) * self.keys;
        &self.data[start..start + self.keys]
    }
}

/// Importance of each visual position: attention it receives, averaged over
/// all heads and all text query positions.
pub fn token_importance(
    attn: &AttentionMaps,
    text_positions: &[usize],
    visual_positions: &[usize],
) -> Result<Vec<f64>, ScheduleError> {
    if text_positions.is_empty() {
        return Err(ScheduleError::NoTextQueries);
    }
    if text_positions.iter().any(|&q| q >= attn.queries) || visual_positions.iter().any(|&k| k >= attn.keys) {
        return Err(ScheduleError::BadAttentionShape);
    }
    let denom = (attn.heads * text_positions.len()) as f64;
    Ok(visual_positions
        .iter()
        .map(|&j| {
            let mut total = 0.0;
            for h in 0..attn.heads {
                for &q in text_positions {
                    total += attn.weight(h, q, j);
                }
            }
            total / denom
        })
        .collect())
}

/// Keep the top `ceil(ratio · origin)` survivors of a group by score.
///
/// `survivors` are the group's current positions (ascending) and `scores` is
/// aligned with them. Returns the kept positions, ascending.
pub fn select_at_boundary(
    survivors: &[usize],
    scores: &[f64],
    origin: usize,
    ratio: f64,
) -> Result<Vec<usize>, ScheduleError> {
    if scores.len() != survivors.len() {
        return Err(ScheduleError::LengthMismatch {
            scores: scores.len(),
            survivors: survivors.len(),
        });
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(ScheduleError::BadRatio(ratio));
    }
    let wanted = ceil_count(ratio, origin);
    if wanted > survivors.len() {
        return Err(ScheduleError::Infeasible {
            wanted,
            available: survivors.len(),
        });
    }
    Ok(top_k_stable(scores, wanted)
        .expect("checked above")
        .into_iter()
        .map(|i| survivors[i])
        .collect())
}

/// Per-layer keep mask over cached prompt positions for decoding.
///
/// Layers below `l1` keep everything; from `l1` on only text positions
/// survive. Positions generated during decoding are always kept.
#[derive(Debug, Clone, PartialEq)]
pub struct KvKeepMask {
    /// `keep[layer][position]`, indexed by original position id.
    keep: Vec<Vec<bool>>,
}

impl KvKeepMask {
    pub fn layers(&self) -> usize {
        self.keep.len()
    }

    /// Whether `position` may stay in `layer`'s cache. Ids beyond the prompt
    /// (generated tokens) are kept.
    pub fn keeps(&self, layer: usize, position: usize) -> bool {
        self.keep[layer].get(position).copied().unwrap_or(true)
    }

    pub fn layer(&self, layer: usize) -> &[bool] {
        &self.keep[layer]
    }

    pub fn kept_count(&self, layer: usize) -> usize {
        self.keep[layer].iter().filter(|&&k| k).count()
    }

    /// A mask that removes nothing.
    pub fn keep_all(layers: usize, positions: usize) -> Self {
        Self {
            keep: vec![vec![true; positions]; layers],
        }
    }
}

pub fn kv_keep_mask(
    l1: usize,
    total_layers: usize,
    text_positions: &[usize],
    visual_positions: &[usize],
) -> KvKeepMask {
    let extent = text_positions.iter().chain(visual_positions).max().map_or(0, |m| m + 1);
    let keep = (0..total_layers)
        .map(|layer| {
            let mut row = vec![false; extent];
            for &p in text_positions {
                row[p] = true;
            }
            if layer < l1 {
                for &p in visual_positions {
                    row[p] = true;
                }
            }
            row
        })
        .collect();
    KvKeepMask { keep }
}
