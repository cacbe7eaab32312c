//! Event-aware token reduction ahead of the language model.
//!
//! The video is split into `k` contiguous events at the `k - 1` lowest
//! adjacent-frame similarities. Frames and events are ranked by cosine
//! relevance to the text embedding, key events and key frames are picked by
//! the `α` and `β` fractions, and each frame is average-pooled with a stride
//! chosen by its (event, frame) key status.

use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::io::{EventScoreMode, FrameEmbeddings, FrameReduction, RunConfig, Stage, TextEmbedding};
use crate::par;
use crate::tensor::{avg_pool_2d, ceil_count, cosine, pooled_extent, top_k_stable, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("k = {k} must be in 1..={frames}")]
    BadEventCount { k: usize, frames: usize },
    #[error("text dim {text} does not match embedding dim {frames}")]
    DimensionMismatch { text: usize, frames: usize },
    #[error("zero-norm text embedding")]
    ZeroNormText,
    #[error("frame {frame}: {source}")]
    Frame { frame: usize, source: TensorError },
    #[error("partition has no relevance scores yet")]
    Unscored,
    #[error("ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("strides must satisfy 1 <= s1 <= s2, got ({0}, {1})")]
    BadStrides(usize, usize),
}

/// Contiguous events over `[0, T)` plus relevance scores and key flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventPartition {
    frames: usize,
    /// First frame of every event except the first, ascending.
    boundaries: Vec<usize>,
    pub frame_scores: Option<Vec<f64>>,
    pub event_scores: Option<Vec<f64>>,
    pub key_events: Option<Vec<bool>>,
    pub key_frames: Option<Vec<bool>>,
}

impl EventPartition {
    /// Partition from explicit event start frames (excluding frame 0).
    pub fn from_boundaries(frames: usize, boundaries: Vec<usize>) -> Self {
        debug_assert!(boundaries.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(boundaries.iter().all(|&b| b > 0 && b < frames));
        Self {
            frames,
            boundaries,
            frame_scores: None,
            event_scores: None,
            key_events: None,
            key_frames: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_events(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn events(&self) -> Vec<Range<usize>> {
        let mut starts = Vec::with_capacity(self.num_events() + 1);
        starts.push(0);
        starts.extend_from_slice(&self.boundaries);
        starts.push(self.frames);
        starts.windows(2).map(|w| w[0]..w[1]).collect()
    }

    /// Event index of every frame.
    pub fn event_of_frames(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.frames);
        for (e, range) in self.events().into_iter().enumerate() {
            out.extend(range.map(|_| e));
        }
        out
    }

    fn flags(&self) -> Result<(&[bool], &[bool]), VisionError> {
        match (&self.key_events, &self.key_frames) {
            (Some(e), Some(f)) => Ok((e, f)),
            _ => Err(VisionError::Unscored),
        }
    }
}

/// Where a retained token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub event: usize,
    pub frame: usize,
    pub key_event: bool,
    pub key_frame: bool,
    /// Top-left cell of the pooling window in the original frame grid.
    pub row: usize,
    pub col: usize,
    pub stride: usize,
}

/// Flat sequence of retained visual tokens, frame order preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    dim: usize,
    data: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl TokenStream {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Tokens belonging to key events and to non-key events.
    pub fn group_counts(&self) -> (usize, usize) {
        let key = self.provenance.iter().filter(|p| p.key_event).count();
        (key, self.len() - key)
    }
}

/// Per-frame vectors used by both similarity computations.
fn frame_vectors(v: &FrameEmbeddings, reduction: FrameReduction) -> Vec<Vec<f64>> {
    par::map_range(v.frames(), |i| match reduction {
        FrameReduction::Mean => v.frame_mean(i),
        FrameReduction::Flatten => v.frame(i).to_vec(),
    })
}

/// Event start frames from adjacent similarities: cut after the `k - 1`
/// smallest, ties toward the earlier index.
pub fn boundaries_from_similarities(sims: &[f64], k: usize) -> Result<Vec<usize>, VisionError> {
    let frames = sims.len() + 1;
    if k == 0 || k > frames {
        return Err(VisionError::BadEventCount { k, frames });
    }
    // top-k of the negated scores picks the smallest with the same tie rule
    let negated: Vec<f64> = sims.iter().map(|s| -s).collect();
    let cuts = top_k_stable(&negated, k - 1).expect("k - 1 <= T - 1");
    Ok(cuts.into_iter().map(|i| i + 1).collect())
}

pub fn adjacent_similarities(v: &FrameEmbeddings, reduction: FrameReduction) -> Result<Vec<f64>, VisionError> {
    let vecs = frame_vectors(v, reduction);
    par::try_map_range(v.frames().saturating_sub(1), |i| {
        cosine(&vecs[i], &vecs[i + 1]).map_err(|source| VisionError::Frame { frame: i, source })
    })
}

pub fn segment_events(v: &FrameEmbeddings, k: usize, reduction: FrameReduction) -> Result<EventPartition, VisionError> {
    if k == 0 || k > v.frames() {
        return Err(VisionError::BadEventCount { k, frames: v.frames() });
    }
    let sims = adjacent_similarities(v, reduction)?;
    let boundaries = boundaries_from_similarities(&sims, k)?;
    Ok(EventPartition::from_boundaries(v.frames(), boundaries))
}

/// Fill in frame scores (cosine to the text vector) and event scores.
pub fn score_relevance(
    v: &FrameEmbeddings,
    t: &TextEmbedding,
    mut partition: EventPartition,
    reduction: FrameReduction,
    mode: EventScoreMode,
) -> Result<EventPartition, VisionError> {
    if t.dim() != v.dim() {
        return Err(VisionError::DimensionMismatch {
            text: t.dim(),
            frames: v.dim(),
        });
    }
    if t.vector().iter().all(|x| *x == 0.0) {
        return Err(VisionError::ZeroNormText);
    }
    let text: Vec<f64> = match reduction {
        FrameReduction::Mean => t.vector().to_vec(),
        FrameReduction::Flatten => t.vector().repeat(v.tokens_per_frame()),
    };
    let vecs = frame_vectors(v, reduction);
    let frame_scores = par::try_map_range(v.frames(), |i| {
        cosine(&vecs[i], &text).map_err(|source| VisionError::Frame { frame: i, source })
    })?;
    let event_scores = partition
        .events()
        .into_iter()
        .map(|range| {
            let s = &frame_scores[range];
            match mode {
                EventScoreMode::Mean => s.iter().sum::<f64>() / s.len() as f64,
                EventScoreMode::Max => s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    partition.frame_scores = Some(frame_scores);
    partition.event_scores = Some(event_scores);
    Ok(partition)
}

/// Number of key frames in an event of `len` frames.
pub fn key_frame_count(beta: f64, len: usize) -> usize {
    ceil_count(beta, len).max(1).min(len)
}

pub fn key_event_count(alpha: f64, k: usize) -> usize {
    ceil_count(alpha, k)
}

/// Mark the top `⌈α·k⌉` events and, inside every event, the top
/// `max(1, ⌈β·len⌉)` frames.
pub fn select_keys(mut partition: EventPartition, alpha: f64, beta: f64) -> Result<EventPartition, VisionError> {
    for ratio in [alpha, beta] {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(VisionError::BadRatio(ratio));
        }
    }
    let (Some(frame_scores), Some(event_scores)) = (&partition.frame_scores, &partition.event_scores) else {
        return Err(VisionError::Unscored);
    };
    let k = partition.num_events();
    let mut key_events = vec![false; k];
    for e in top_k_stable(event_scores, key_event_count(alpha, k)).expect("count <= k") {
        key_events[e] = true;
    }
    let mut key_frames = vec![false; partition.frames];
    for range in partition.events() {
        let local = &frame_scores[range.clone()];
        for i in top_k_stable(local, key_frame_count(beta, range.len())).expect("count <= len") {
            key_frames[range.start + i] = true;
        }
    }
    partition.key_events = Some(key_events);
    partition.key_frames = Some(key_frames);
    Ok(partition)
}

/// `round(s / α)`, at least 1.
pub fn scaled_stride(stride: usize, alpha: f64) -> usize {
    ((stride as f64 / alpha).round() as usize).max(1)
}

/// Pooling stride for a frame given its event and frame key status.
pub fn frame_stride(key_event: bool, key_frame: bool, s1: usize, s2: usize, alpha: f64) -> usize {
    match (key_event, key_frame) {
        (true, true) => s1,
        (true, false) => s2,
        (false, true) => scaled_stride(s1, alpha),
        (false, false) => scaled_stride(s2, alpha),
    }
}

/// Per-frame strides for a partition with key flags.
pub fn frame_strides(partition: &EventPartition, s1: usize, s2: usize, alpha: f64) -> Result<Vec<usize>, VisionError> {
    let (key_events, key_frames) = partition.flags()?;
    Ok(partition
        .event_of_frames()
        .into_iter()
        .zip(key_frames)
        .map(|(e, &kf)| frame_stride(key_events[e], kf, s1, s2, alpha))
        .collect())
}

/// Retained token count `Σ ceil(h/stride)·ceil(w/stride)` without pooling anything.
pub fn pooled_token_count(height: usize, width: usize, strides: &[usize]) -> usize {
    strides
        .iter()
        .map(|&s| pooled_extent(height, s) * pooled_extent(width, s))
        .sum()
}

fn emit_frames(v: &FrameEmbeddings, partition: &EventPartition, strides: &[usize]) -> Result<TokenStream, VisionError> {
    let (key_events, key_frames) = partition.flags()?;
    let events = partition.event_of_frames();
    let pooled = par::try_map_range(v.frames(), |f| {
        avg_pool_2d(&v.frame_grid(f), strides[f]).map_err(|source| VisionError::Frame { frame: f, source })
    })?;
    let total: usize = pooled.iter().map(|g| g.len()).sum();
    let mut data = Vec::with_capacity(total * v.dim());
    let mut provenance = Vec::with_capacity(total);
    for (f, grid) in pooled.into_iter().enumerate() {
        let stride = strides[f];
        for row in 0..grid.height() {
            for col in 0..grid.width() {
                provenance.push(Provenance {
                    event: events[f],
                    frame: f,
                    key_event: key_events[events[f]],
                    key_frame: key_frames[f],
                    row: row * stride,
                    col: col * stride,
                    stride,
                });
            }
        }
        data.extend(grid.into_data());
    }
    Ok(TokenStream {
        dim: v.dim(),
        data,
        provenance,
    })
}

/// Pool every frame with its key-status stride and flatten into a stream.
pub fn adaptive_pool(
    v: &FrameEmbeddings,
    partition: &EventPartition,
    s1: usize,
    s2: usize,
    alpha: f64,
) -> Result<TokenStream, VisionError> {
    if s1 == 0 || s1 > s2 {
        return Err(VisionError::BadStrides(s1, s2));
    }
    let strides = frame_strides(partition, s1, s2, alpha)?;
    emit_frames(v, partition, &strides)
}

/// All `T·N` tokens, unpooled, with provenance.
pub fn passthrough(v: &FrameEmbeddings, partition: &EventPartition) -> Result<TokenStream, VisionError> {
    emit_frames(v, partition, &vec![1; v.frames()])
}

/// Segment, score, select and pool. With the vision stage disabled the
/// partition is still computed (it tags token groups downstream) but every
/// token passes through unpooled.
pub fn run_vision_stage(
    v: &FrameEmbeddings,
    t: &TextEmbedding,
    config: &RunConfig,
) -> Result<(TokenStream, EventPartition), VisionError> {
    let partition = segment_events(v, config.k, config.frame_reduction)?;
    let partition = score_relevance(v, t, partition, config.frame_reduction, config.event_score)?;
    let partition = select_keys(partition, config.alpha, config.beta)?;
    let stream = if config.stage_enabled(Stage::Vision) {
        adaptive_pool(v, &partition, config.s1, config.s2, config.alpha)?
    } else {
        passthrough(v, &partition)?
    };
    Ok((stream, partition))
}
