//! Analytic replica of a LongVA-scale run.
//!
//! The vision stage runs for real on synthetic frames with the encoder's raw
//! patch grid. The baseline feeds the language model the natively pooled grid
//! (stride 2 on 24×24 gives 144 tokens per frame); compressed runs pool the
//! raw grid with the key-dependent strides instead. Prefill lengths and cache
//! sizes then follow from the schedule, with no forward pass.

use serde::Serialize;

use crate::accounting::{reduction_report, InferenceTrace, ReductionReport};
use crate::io::{gen_synthetic, EventProfile, RunConfig, SynthError};
use crate::pipeline::{analytic_trace, PipelineError};
use crate::schedule::GroupCounts;
use crate::tensor::pooled_extent;
use crate::vision::run_vision_stage;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaSpec {
    pub name: &'static str,
    pub frames: usize,
    pub raw_height: usize,
    pub raw_width: usize,
    /// Pooling stride the unmodified model applies to the raw grid.
    pub native_stride: usize,
    /// Synthetic embedding width for the vision stage.
    pub embed_dim: usize,
    pub planted_events: usize,
    pub text_len: usize,
    pub decode_steps: usize,
    pub bytes_per_element: usize,
    pub seed: u64,
    #[serde(skip)]
    pub config: RunConfig,
}

impl ReplicaSpec {
    /// LongVA hyperparameters on a Qwen2-7B-sized language model.
    pub fn longva() -> Self {
        Self {
            name: "longva",
            frames: 128,
            raw_height: 24,
            raw_width: 24,
            native_stride: 2,
            embed_dim: 16,
            planted_events: 13,
            text_len: 64,
            decode_steps: 16,
            bytes_per_element: 2,
            seed: 2025,
            config: RunConfig {
                k: 13,
                alpha: 0.5,
                beta: 0.45,
                s1: 2,
                s2: 3,
                r: 0.55,
                layer_boundaries: [3, 10, 19],
                layers: 28,
                heads: 28,
                d_model: 3584,
                mlp_ratio: 5,
                ..RunConfig::default()
            },
        }
    }

    /// Same run with the strides applied to the already pooled 12×12 grid.
    pub fn longva_pooled_grid() -> Self {
        Self {
            name: "longva-12x12",
            raw_height: 12,
            raw_width: 12,
            native_stride: 1,
            ..Self::longva()
        }
    }

    pub fn baseline_tokens_per_frame(&self) -> usize {
        pooled_extent(self.raw_height, self.native_stride) * pooled_extent(self.raw_width, self.native_stride)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicaResult {
    pub spec: ReplicaSpec,
    pub baseline: InferenceTrace,
    pub compressed: InferenceTrace,
    pub report: ReductionReport,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplicaError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub fn run_replica(spec: &ReplicaSpec) -> Result<ReplicaResult, ReplicaError> {
    let profile = EventProfile::new(spec.planted_events).with_prompt_len(spec.text_len);
    let syn = gen_synthetic(
        spec.frames,
        spec.raw_height,
        spec.raw_width,
        spec.embed_dim,
        spec.seed,
        profile,
    )?;
    let cfg = &spec.config;
    let (stream, partition) = run_vision_stage(&syn.frames, &syn.text, cfg).map_err(PipelineError::from)?;
    let (key, non_key) = stream.group_counts();

    // baseline groups: every frame at its native token count
    let per_frame = spec.baseline_tokens_per_frame();
    let key_events = partition.key_events.as_ref().expect("selected partition");
    let mut base_origin = GroupCounts::default();
    for e in partition.event_of_frames() {
        if key_events[e] {
            base_origin.key += per_frame;
        } else {
            base_origin.non_key += per_frame;
        }
    }

    let baseline =
        analytic_trace(base_origin, spec.text_len, &cfg.baseline(), spec.decode_steps).map_err(PipelineError::from)?;
    let compressed = analytic_trace(GroupCounts { key, non_key }, spec.text_len, cfg, spec.decode_steps)
        .map_err(PipelineError::from)?;
    let report =
        reduction_report(&baseline, &compressed, spec.bytes_per_element, cfg.to_json()).map_err(PipelineError::from)?;
    Ok(ReplicaResult {
        spec: spec.clone(),
        baseline,
        compressed,
        report,
    })
}
