use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use metok_core::io::{EventScoreMode, FrameReduction};
use metok_core::pipeline::SweepAxis;

#[derive(Debug, Parser)]
#[command(name = "metok", version, about = "Event-aware visual token compression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic video and prompt as MEBF files.
    Gen(GenArgs),
    /// Run the vision stage only and write token statistics.
    Compress(CompressArgs),
    /// Run the full pipeline against an uncompressed baseline.
    Simulate(SimulateArgs),
    /// Diagnostics.
    #[command(subcommand)]
    Diag(DiagCommand),
    /// Simulate every point of a parameter grid.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest after checking input digests.
    Replay(ReplayArgs),
    /// Analytic LongVA-scale efficiency replica.
    Replica(ReplicaArgs),
}

#[derive(Debug, Subcommand)]
pub enum DiagCommand {
    /// Per-layer split of decode attention between visual and text prompt tokens.
    AttentionRatio(DiagArgs),
}

/// Grid size written as `HxW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl std::str::FromStr for Grid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad grid extent {v:?}"));
        let (height, width) = (parse(h)?, parse(w)?);
        if height == 0 || width == 0 {
            return Err("grid extents must be positive".into());
        }
        Ok(Grid { height, width })
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub grid: Grid,
    #[arg(long)]
    pub dim: usize,
    /// Number of planted segments.
    #[arg(long)]
    pub events: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct InputArgs {
    /// JSON run config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Frame embeddings (MEBF type 1).
    #[arg(long)]
    pub input: PathBuf,
    /// Text embedding and prompt ids (MEBF type 2).
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long, value_parser = parse_event_score)]
    pub event_score: Option<EventScoreMode>,
    #[arg(long, value_parser = parse_frame_reduction)]
    pub frame_reduction: Option<FrameReduction>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_event_score(s: &str) -> Result<EventScoreMode, String> {
    s.parse()
}

fn parse_frame_reduction(s: &str) -> Result<FrameReduction, String> {
    s.parse()
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub bytes_per_element: u64,
    /// Record prefill wall-clock time (makes reports machine-dependent).
    #[arg(long)]
    pub wall_clock: bool,
    /// Derive lengths from the schedule instead of running the toy model.
    #[arg(long)]
    pub analytic: bool,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub io: InputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// `NAME=V1,V2,...` with NAME one of alpha, beta, r, s1, s2, k. Repeatable.
    #[arg(long = "param", required = true)]
    pub params: Vec<SweepAxis>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplicaArgs {
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}
