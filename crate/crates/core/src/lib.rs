//! Event-aware, multi-stage visual token compression for video-language
//! inference, run against a small deterministic transformer.
//!
//! The pipeline has three stages, each of which can be switched off:
//!
//! * [`vision`]: temporal event segmentation, visual-text relevance scoring
//!   and key-dependent spatial pooling before the language model;
//! * [`schedule`] with [`model`]: attention-guided, layer-wise pruning of
//!   visual tokens during prefill;
//! * [`schedule::kv_keep_mask`]: dropping visual entries from deep-layer KV
//!   caches before decoding.
//!
//! [`accounting`] turns runs into analytic FLOPs and KV-memory totals, and
//! [`pipeline`] wires everything together.

pub mod accounting;
pub mod io;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod replica;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod vision;

pub use accounting::{kv_bytes, layer_flops, pipeline_flops, reduction_report, InferenceTrace, ReductionReport};
pub use io::{FrameEmbeddings, RunConfig, Stage, TextEmbedding};
pub use model::{ModelConfig, ToyModel};
pub use rng::Rng64;
pub use schedule::{Group, GroupCounts, PruneSchedule};
pub use vision::{run_vision_stage, EventPartition, TokenStream};
