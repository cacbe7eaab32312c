//! End-to-end runs: vision stage, toy-model prefill with pruning, KV keep
//! mask, greedy decode and accounting, plus sweep point generation.

use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::accounting::{reduction_report, AccountingError, InferenceTrace, LayerRatio, ReductionReport};
use crate::io::{ConfigError, FrameEmbeddings, RunConfig, Stage, TextEmbedding};
use crate::model::{attention_ratio_trace, AttentionRatioError, DecodeOutput, ModelConfig, ModelError, ToyModel};
use crate::schedule::{kv_keep_mask, GroupCounts, KvKeepMask, PruneSchedule, ScheduleError};
use crate::vision::{run_vision_stage, EventPartition, VisionError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    AttentionRatio(#[from] AttentionRatioError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("text embedding has dim {text}, frames have dim {frames}")]
    TextDim { frames: usize, text: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulateOptions {
    pub steps: usize,
    pub bytes_per_element: usize,
    /// Record wall-clock prefill time. Off by default so traces are reproducible.
    pub wall_clock: bool,
    /// Skip the toy model and derive lengths from the schedule.
    pub analytic: bool,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            steps: 8,
            bytes_per_element: 2,
            wall_clock: false,
            analytic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: InferenceTrace,
    pub partition: EventPartition,
    pub decode: Option<DecodeOutput>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub baseline: RunOutcome,
    pub compressed: RunOutcome,
    pub report: ReductionReport,
}

/// Order-sensitive 64-bit digest of a logits vector, as hex.
pub fn logits_digest(logits: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in logits {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    format!("{h:016x}")
}

/// The keep mask a run applies before decoding.
pub fn decode_mask(cfg: &RunConfig, text: &[usize], visual: &[usize]) -> KvKeepMask {
    if cfg.stage_enabled(Stage::Decode) {
        kv_keep_mask(cfg.layer_boundaries[0], cfg.layers, text, visual)
    } else {
        KvKeepMask::keep_all(cfg.layers, text.len() + visual.len())
    }
}

/// Trace implied by the schedule alone, without running the model.
pub fn analytic_trace(
    origin: GroupCounts,
    text_len: usize,
    cfg: &RunConfig,
    steps: usize,
) -> Result<InferenceTrace, ScheduleError> {
    let sched = PruneSchedule::from_config(cfg)?;
    let lengths = sched.expected_lengths(origin, text_len);
    let drop_visual = cfg.stage_enabled(Stage::Decode);
    let cached = lengths
        .iter()
        .enumerate()
        .map(|(l, &n)| {
            if drop_visual && l >= cfg.layer_boundaries[0] {
                text_len
            } else {
                n
            }
        })
        .collect();
    Ok(InferenceTrace::analytic(
        cfg.d_model,
        cfg.mlp_ratio,
        origin,
        text_len,
        lengths,
        cached,
        steps,
    ))
}

/// One run of the whole pipeline under `cfg`.
pub fn run_once(
    frames: &FrameEmbeddings,
    text: &TextEmbedding,
    cfg: &RunConfig,
    opts: &SimulateOptions,
) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    if text.dim() != frames.dim() {
        return Err(PipelineError::TextDim {
            frames: frames.dim(),
            text: text.dim(),
        });
    }
    let (stream, partition) = run_vision_stage(frames, text, cfg)?;
    let (key, non_key) = stream.group_counts();
    let origin = GroupCounts { key, non_key };
    let text_len = text.prompt_ids().len();

    if opts.analytic {
        let trace = analytic_trace(origin, text_len, cfg, opts.steps)?;
        return Ok(RunOutcome {
            trace,
            partition,
            decode: None,
        });
    }

    let model = ToyModel::new(ModelConfig::from_run(cfg, frames.dim()))?;
    let input = model.build_input(&stream, text)?;
    let sched = PruneSchedule::from_config(cfg)?;
    let pre = model.prefill(&input, &sched)?;
    let mask = decode_mask(cfg, &input.text_positions(), &input.visual_positions());
    let cache = pre.cache.apply_mask(&mask);
    let cached_positions = cache.entry_counts();
    let decode = model.decode(cache, &pre.logits, opts.steps, None)?;
    let ratios = attention_ratio_trace(&decode)?;

    let trace = InferenceTrace {
        layers: cfg.layers,
        d_model: cfg.d_model,
        mlp_ratio: cfg.mlp_ratio,
        visual_tokens: origin,
        text_tokens: text_len,
        prefill_lengths: pre.lengths,
        cached_positions,
        decode_steps: opts.steps,
        generated: decode.tokens.clone(),
        logits_digests: decode.logits.iter().map(|l| logits_digest(l)).collect(),
        attention_ratio: ratios
            .into_iter()
            .enumerate()
            .map(|(layer, (visual, text))| LayerRatio { layer, visual, text })
            .collect(),
        prefill_ms: if opts.wall_clock {
            pre.elapsed.as_secs_f64() * 1e3
        } else {
            0.0
        },
    };
    trace.validate()?;
    Ok(RunOutcome {
        trace,
        partition,
        decode: Some(decode),
    })
}

/// Run `cfg` and its all-stages-off baseline and compare them.
pub fn simulate(
    frames: &FrameEmbeddings,
    text: &TextEmbedding,
    cfg: &RunConfig,
    opts: &SimulateOptions,
) -> Result<Simulation, PipelineError> {
    let baseline = run_once(frames, text, &cfg.baseline(), opts)?;
    let compressed = run_once(frames, text, cfg, opts)?;
    let report = reduction_report(
        &baseline.trace,
        &compressed.trace,
        opts.bytes_per_element,
        cfg.to_json(),
    )?;
    Ok(Simulation {
        baseline,
        compressed,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Beta,
    R,
    S1,
    S2,
    K,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::R => "r",
            SweepParam::S1 => "s1",
            SweepParam::S2 => "s2",
            SweepParam::K => "k",
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, SweepParam::S1 | SweepParam::S2 | SweepParam::K)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SweepError {
    #[error("expected NAME=V1,V2,..., got {0:?}")]
    Syntax(String),
    #[error("unknown sweep parameter {0:?} (use alpha, beta, r, s1, s2 or k)")]
    UnknownParam(String),
    #[error("bad value {value:?} for {param}")]
    BadValue { param: &'static str, value: String },
    #[error("parameter {0} given twice")]
    Duplicate(&'static str),
    #[error("sweep point {index} is invalid: {reason}")]
    InvalidPoint { index: usize, reason: String },
}

impl FromStr for SweepParam {
    type Err = SweepError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "alpha" => SweepParam::Alpha,
            "beta" => SweepParam::Beta,
            "r" => SweepParam::R,
            "s1" => SweepParam::S1,
            "s2" => SweepParam::S2,
            "k" => SweepParam::K,
            other => return Err(SweepError::UnknownParam(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for SweepAxis {
    type Err = SweepError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, list) = s.split_once('=').ok_or_else(|| SweepError::Syntax(s.to_string()))?;
        let param: SweepParam = name.trim().parse()?;
        let values = list
            .split(',')
            .map(|v| {
                let bad = || SweepError::BadValue {
                    param: param.as_str(),
                    value: v.to_string(),
                };
                let x: f64 = v.trim().parse().map_err(|_| bad())?;
                if !x.is_finite() || (param.is_integer() && (x.fract() != 0.0 || x < 0.0)) {
                    return Err(bad());
                }
                Ok(x)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SweepAxis { param, values })
    }
}

fn apply(cfg: &mut RunConfig, param: SweepParam, value: f64) {
    match param {
        SweepParam::Alpha => cfg.alpha = value,
        SweepParam::Beta => cfg.beta = value,
        SweepParam::R => cfg.r = value,
        SweepParam::S1 => cfg.s1 = value as usize,
        SweepParam::S2 => cfg.s2 = value as usize,
        SweepParam::K => cfg.k = value as usize,
    }
}

/// Cartesian product of the axes over `base`, first axis outermost.
pub fn sweep_points(base: &RunConfig, axes: &[SweepAxis]) -> Result<Vec<RunConfig>, SweepError> {
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].iter().any(|b| b.param == a.param) {
            return Err(SweepError::Duplicate(a.param.as_str()));
        }
    }
    let mut points = vec![base.clone()];
    for axis in axes {
        points = points
            .iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    apply(&mut q, axis.param, v);
                    q
                })
            })
            .collect();
    }
    for (index, p) in points.iter().enumerate() {
        p.validate().map_err(|e| SweepError::InvalidPoint {
            index,
            reason: e.to_string(),
        })?;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{gen_synthetic, EventProfile};

    fn small() -> RunConfig {
        RunConfig {
            k: 3,
            layers: 6,
            d_model: 32,
            layer_boundaries: [1, 3, 5],
            ..RunConfig::default()
        }
    }

    #[test]
    fn measured_trace_matches_analytic() {
        let syn = gen_synthetic(12, 4, 4, 8, 5, EventProfile::new(3).with_prompt_len(6)).unwrap();
        let cfg = small();
        let opts = SimulateOptions::default();
        let measured = run_once(&syn.frames, &syn.text, &cfg, &opts).unwrap();
        let analytic = run_once(
            &syn.frames,
            &syn.text,
            &cfg,
            &SimulateOptions { analytic: true, ..opts },
        )
        .unwrap();
        assert_eq!(measured.trace.prefill_lengths, analytic.trace.prefill_lengths);
        assert_eq!(measured.trace.cached_positions, analytic.trace.cached_positions);
        assert_eq!(measured.trace.generated.len(), opts.steps);
    }

    #[test]
    fn disabled_simulation_reports_zero() {
        let syn = gen_synthetic(12, 4, 4, 8, 5, EventProfile::new(3)).unwrap();
        let cfg = small().baseline();
        let sim = simulate(&syn.frames, &syn.text, &cfg, &SimulateOptions::default()).unwrap();
        assert_eq!(sim.report.flops.reduction_pct, 0.0);
        assert_eq!(sim.report.kv_bytes.reduction_pct, 0.0);
        assert_eq!(sim.report.prefill_ms.reduction_pct, 0.0);
        assert_eq!(sim.baseline.trace, sim.compressed.trace);
    }

    #[test]
    fn sweep_parsing_and_product() {
        let a: SweepAxis = "r=0.3,0.55,0.7".parse().unwrap();
        assert_eq!(a.values, vec![0.3, 0.55, 0.7]);
        let b: SweepAxis = "s1=1,2".parse().unwrap();
        let pts = sweep_points(&RunConfig::default(), &[a.clone(), b.clone()]).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!((pts[0].r, pts[0].s1), (0.3, 1));
        assert_eq!((pts[1].r, pts[1].s1), (0.3, 2));
        assert_eq!((pts[5].r, pts[5].s1), (0.7, 2));

        assert!(matches!("q=1".parse::<SweepAxis>(), Err(SweepError::UnknownParam(_))));
        assert!(matches!("r".parse::<SweepAxis>(), Err(SweepError::Syntax(_))));
        assert!(matches!("k=1.5".parse::<SweepAxis>(), Err(SweepError::BadValue { .. })));
        assert!(matches!(
            sweep_points(&RunConfig::default(), &[a.clone(), a]),
            Err(SweepError::Duplicate("r"))
        ));
        let s1: SweepAxis = "s1=4".parse().unwrap();
        assert!(matches!(
            sweep_points(&RunConfig::default(), &[s1]),
            Err(SweepError::InvalidPoint { index: 0, .. })
        ));
    }

    #[test]
    fn digest_is_bit_sensitive() {
        assert_eq!(logits_digest(&[1.0, 2.0]), logits_digest(&[1.0, 2.0]));
        assert_ne!(logits_digest(&[1.0, 2.0]), logits_digest(&[2.0, 1.0]));
        assert_ne!(logits_digest(&[0.0]), logits_digest(&[-0.0]));
    }
}
