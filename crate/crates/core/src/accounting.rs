//! Analytic FLOPs and KV-cache models and the reduction report.
//!
//! Cost model, with `d = d_model` and `m = mlp_ratio`:
//!
//! * one prefill layer over `n` tokens: `(8 + 4m)·n·d² + 4·n²·d`
//!   (Q/K/V/output projections `8nd²`, scores and weighted values `4n²d`,
//!   MLP `4m·n·d²`);
//! * one decode step at a layer whose cache holds `c` entries, counting the
//!   new token and every earlier generated one: `(8 + 4m)·d² + 4·c·d`.
//!
//! Summed over `S` steps against `p` cached prompt entries this is
//! `S·(8 + 4m)·d² + 4d·(S·p + S(S+1)/2)` per layer.
//!
//! KV bytes: `Σ_l 2 · cached_l · d · bytes_per_element` over cached prompt
//! entries.

use serde::Serialize;
use thiserror::Error;

use crate::schedule::GroupCounts;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error("trace has {lengths} prefill lengths and {cached} cache counts for {layers} layers")]
    Inconsistent {
        layers: usize,
        lengths: usize,
        cached: usize,
    },
    #[error("layer {layer} caches {cached} prompt entries but prefilled only {length}")]
    CacheExceedsPrefill { layer: usize, cached: usize, length: usize },
    #[error("traces come from different models")]
    DimMismatch,
    #[error("baseline {0} is zero")]
    ZeroBaseline(&'static str),
}

/// Decode-time attention split for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerRatio {
    pub layer: usize,
    pub visual: f64,
    pub text: f64,
}

/// Everything the cost model needs about one run, plus what it produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceTrace {
    pub layers: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    /// Visual tokens entering the language model, by group.
    pub visual_tokens: GroupCounts,
    pub text_tokens: usize,
    /// Sequence length processed by each layer during prefill.
    pub prefill_lengths: Vec<usize>,
    /// Prompt entries left in each layer's cache after the keep mask.
    pub cached_positions: Vec<usize>,
    pub decode_steps: usize,
    pub generated: Vec<u32>,
    /// Hex digest of the logits behind each generated token.
    pub logits_digests: Vec<String>,
    pub attention_ratio: Vec<LayerRatio>,
    /// Wall-clock prefill time; zero unless timing was requested.
    pub prefill_ms: f64,
}

impl InferenceTrace {
    /// A trace with no decode output attached.
    pub fn analytic(
        d_model: usize,
        mlp_ratio: usize,
        visual_tokens: GroupCounts,
        text_tokens: usize,
        prefill_lengths: Vec<usize>,
        cached_positions: Vec<usize>,
        decode_steps: usize,
    ) -> Self {
        Self {
            layers: prefill_lengths.len(),
            d_model,
            mlp_ratio,
            visual_tokens,
            text_tokens,
            prefill_lengths,
            cached_positions,
            decode_steps,
            generated: Vec::new(),
            logits_digests: Vec::new(),
            attention_ratio: Vec::new(),
            prefill_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AccountingError> {
        if self.prefill_lengths.len() != self.layers || self.cached_positions.len() != self.layers {
            return Err(AccountingError::Inconsistent {
                layers: self.layers,
                lengths: self.prefill_lengths.len(),
                cached: self.cached_positions.len(),
            });
        }
        for (layer, (&cached, &length)) in self.cached_positions.iter().zip(&self.prefill_lengths).enumerate() {
            if cached > length {
                return Err(AccountingError::CacheExceedsPrefill { layer, cached, length });
            }
        }
        Ok(())
    }

    /// Prefill FLOPs of every layer.
    pub fn per_layer_flops(&self) -> Vec<u128> {
        self.prefill_lengths
            .iter()
            .map(|&n| layer_flops(n, self.d_model, self.mlp_ratio))
            .collect()
    }
}

pub fn layer_flops(n: usize, d_model: usize, mlp_ratio: usize) -> u128 {
    let (n, d, m) = (n as u128, d_model as u128, mlp_ratio as u128);
    (8 + 4 * m) * n * d * d + 4 * n * n * d
}

/// Decode FLOPs at one layer for `steps` tokens against `cached` prompt entries.
pub fn decode_layer_flops(cached: usize, steps: usize, d_model: usize, mlp_ratio: usize) -> u128 {
    let (p, s, d, m) = (cached as u128, steps as u128, d_model as u128, mlp_ratio as u128);
    s * (8 + 4 * m) * d * d + 4 * d * (s * p + s * (s + 1) / 2)
}

pub fn prefill_flops(trace: &InferenceTrace) -> Result<u128, AccountingError> {
    trace.validate()?;
    Ok(trace.per_layer_flops().iter().sum())
}

pub fn pipeline_flops(trace: &InferenceTrace) -> Result<u128, AccountingError> {
    let decode: u128 = trace
        .cached_positions
        .iter()
        .map(|&c| decode_layer_flops(c, trace.decode_steps, trace.d_model, trace.mlp_ratio))
        .sum();
    Ok(prefill_flops(trace)? + decode)
}

pub fn kv_bytes(trace: &InferenceTrace, bytes_per_element: usize) -> u128 {
    trace
        .cached_positions
        .iter()
        .map(|&c| 2 * c as u128 * trace.d_model as u128 * bytes_per_element as u128)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric<T> {
    pub baseline: T,
    pub compressed: T,
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    pub flops: Metric<u128>,
    pub kv_bytes: Metric<u128>,
    pub prefill_ms: Metric<f64>,
    pub config: serde_json::Value,
}

fn pct(baseline: f64, compressed: f64) -> f64 {
    100.0 * (1.0 - compressed / baseline)
}

/// Compare two traces of the same model. `config` is echoed verbatim.
pub fn reduction_report(
    baseline: &InferenceTrace,
    compressed: &InferenceTrace,
    bytes_per_element: usize,
    config: serde_json::Value,
) -> Result<ReductionReport, AccountingError> {
    if (baseline.layers, baseline.d_model, baseline.mlp_ratio)
        != (compressed.layers, compressed.d_model, compressed.mlp_ratio)
    {
        return Err(AccountingError::DimMismatch);
    }
    let (fb, fc) = (pipeline_flops(baseline)?, pipeline_flops(compressed)?);
    if fb == 0 {
        return Err(AccountingError::ZeroBaseline("flops"));
    }
    let (kb, kc) = (
        kv_bytes(baseline, bytes_per_element),
        kv_bytes(compressed, bytes_per_element),
    );
    if kb == 0 {
        return Err(AccountingError::ZeroBaseline("kv_bytes"));
    }
    let (tb, tc) = (baseline.prefill_ms, compressed.prefill_ms);
    Ok(ReductionReport {
        flops: Metric {
            baseline: fb,
            compressed: fc,
            reduction_pct: pct(fb as f64, fc as f64),
        },
        kv_bytes: Metric {
            baseline: kb,
            compressed: kc,
            reduction_pct: pct(kb as f64, kc as f64),
        },
        prefill_ms: Metric {
            baseline: tb,
            compressed: tc,
            // untimed runs report zero on both sides
            reduction_pct: if tb > 0.0 { pct(tb, tc) } else { 0.0 },
        },
        config,
    })
}
