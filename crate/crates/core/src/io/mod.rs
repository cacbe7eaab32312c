//! Embedding containers, the MEBF binary format, synthetic data and run
//! configuration.

mod config;
mod mebf;
mod synth;

pub use config::{ConfigError, EventScoreMode, FrameReduction, RunConfig, Stage};
pub use mebf::{
    decode_embeddings, decode_text, encode_embeddings, encode_text, read_embeddings, read_text, write_embeddings,
    write_text, MebfError, RecordType, MAGIC, VERSION,
};
pub use synth::{gen_synthetic, planted_boundaries, EventProfile, SynthError, SyntheticVideo, DEFAULT_VOCAB};

use crate::tensor::TokenGrid;

/// `T × (h·w) × d` visual tokens for one video, frame-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    frames: usize,
    height: usize,
    width: usize,
    dim: usize,
    tokens: Vec<f64>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("all dimensions must be positive (T={frames}, h={height}, w={width}, d={dim})")]
    ZeroDimension {
        frames: usize,
        height: usize,
        width: usize,
        dim: usize,
    },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("text embedding has zero norm")]
    ZeroNormText,
    #[error("prompt must contain at least one token id")]
    EmptyPrompt,
}

impl FrameEmbeddings {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        dim: usize,
        tokens: Vec<f64>,
    ) -> Result<Self, EmbeddingError> {
        if frames == 0 || height == 0 || width == 0 || dim == 0 {
            return Err(EmbeddingError::ZeroDimension {
                frames,
                height,
                width,
                dim,
            });
        }
        let expected = frames * height * width * dim;
        if tokens.len() != expected {
            return Err(EmbeddingError::Length {
                expected,
                got: tokens.len(),
            });
        }
        if let Some(i) = tokens.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self {
            frames,
            height,
            width,
            dim,
            tokens,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    /// All `N·d` values of frame `i`.
    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.tokens_per_frame() * self.dim;
        &self.tokens[i * n..(i + 1) * n]
    }

    pub fn frame_grid(&self, i: usize) -> TokenGrid {
        TokenGrid::new(self.height, self.width, self.dim, self.frame(i).to_vec())
            .expect("frame shape is validated at construction")
    }

    /// Mean over the frame's `N` tokens.
    pub fn frame_mean(&self, i: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for tok in self.frame(i).chunks_exact(self.dim) {
            for (a, v) in acc.iter_mut().zip(tok) {
                *a += v;
            }
        }
        let n = self.tokens_per_frame() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Every value rounded through `f32`, i.e. what survives an MEBF round trip.
    pub fn quantized(&self) -> Self {
        Self {
            tokens: self.tokens.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

/// Prompt-side input: the encoded text vector used for relevance scoring and
/// the prompt token ids fed to the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    vector: Vec<f64>,
    prompt_ids: Vec<u32>,
}

impl TextEmbedding {
    pub fn new(vector: Vec<f64>, prompt_ids: Vec<u32>) -> Result<Self, EmbeddingError> {
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        if vector.iter().all(|v| *v == 0.0) {
            return Err(EmbeddingError::ZeroNormText);
        }
        if prompt_ids.is_empty() {
            return Err(EmbeddingError::EmptyPrompt);
        }
        Ok(Self { vector, prompt_ids })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn prompt_ids(&self) -> &[u32] {
        &self.prompt_ids
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            vector: self.vector.iter().map(|v| v * c).collect(),
            prompt_ids: self.prompt_ids.clone(),
        }
    }

    pub fn quantized(&self) -> Self {
        Self {
            vector: self.vector.iter().map(|&v| v as f32 as f64).collect(),
            prompt_ids: self.prompt_ids.clone(),
        }
    }
}
