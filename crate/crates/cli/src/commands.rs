use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use metok_core::io::{
    gen_synthetic, read_embeddings, read_text, write_embeddings, write_text, EventProfile, FrameEmbeddings, RunConfig,
    TextEmbedding,
};
use metok_core::pipeline::{run_once, simulate, sweep_points, SimulateOptions};
use metok_core::replica::{run_replica, ReplicaSpec};
use metok_core::vision::run_vision_stage;
use serde_json::json;

use crate::args::{CompressArgs, DiagArgs, GenArgs, InputArgs, ReplicaArgs, RunArgs, SimulateArgs, SweepArgs};
use crate::manifest::RunManifest;
use crate::write_json;

struct Loaded {
    frames: FrameEmbeddings,
    text: TextEmbedding,
    config: RunConfig,
}

fn load(io: &InputArgs, manifest: &mut RunManifest) -> Result<Loaded> {
    let mut config = match &io.config {
        Some(p) => {
            manifest.add_input(p)?;
            RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = io.event_score {
        config.event_score = m;
    }
    if let Some(r) = io.frame_reduction {
        config.frame_reduction = r;
    }
    manifest.add_input(&io.input)?;
    manifest.add_input(&io.text)?;
    let frames = read_embeddings(&io.input).with_context(|| format!("reading {}", io.input.display()))?;
    let text = read_text(&io.text).with_context(|| format!("reading {}", io.text.display()))?;
    manifest.seed = Some(config.seed);
    manifest.config = Some(config.to_json());
    Ok(Loaded { frames, text, config })
}

fn options(run: &RunArgs) -> SimulateOptions {
    SimulateOptions {
        steps: run.steps as usize,
        bytes_per_element: run.bytes_per_element as usize,
        wall_clock: run.wall_clock,
        analytic: run.analytic,
    }
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn gen(args: &GenArgs, argv: &[String]) -> Result<()> {
    let profile = EventProfile::new(args.events).with_prompt_len(args.prompt_len);
    let syn = gen_synthetic(
        args.frames,
        args.grid.height,
        args.grid.width,
        args.dim,
        args.seed,
        profile,
    )?;
    prepare(&args.out)?;
    write_embeddings(&syn.frames, args.out.join("video.mebf"))?;
    write_text(&syn.text, args.out.join("text.mebf"))?;
    write_json(
        &args.out.join("truth.json"),
        &json!({ "boundaries": syn.boundaries, "text_segment": syn.text_segment }),
    )?;
    let mut m = RunManifest::new(argv, Some(args.seed), None);
    for name in ["video.mebf", "text.mebf", "truth.json"] {
        m.add_artifact(&args.out, name)?;
    }
    m.write(&args.out)?;
    println!(
        "wrote {} frames of {}x{}x{} to {}",
        args.frames,
        args.grid.height,
        args.grid.width,
        args.dim,
        args.out.display()
    );
    Ok(())
}

pub fn compress(args: &CompressArgs, argv: &[String]) -> Result<()> {
    let mut m = RunManifest::new(argv, None, None);
    let input = load(&args.io, &mut m)?;
    let (stream, partition) = run_vision_stage(&input.frames, &input.text, &input.config)?;
    let mut per_frame = vec![0usize; input.frames.frames()];
    for p in stream.provenance() {
        per_frame[p.frame] += 1;
    }
    let (key, non_key) = stream.group_counts();
    let stats = json!({
        "input_tokens": input.frames.frames() * input.frames.tokens_per_frame(),
        "output_tokens": stream.len(),
        "key_tokens": key,
        "non_key_tokens": non_key,
        "tokens_per_frame": per_frame,
        "partition": partition,
    });
    let out = &args.io.out;
    prepare(out)?;
    write_json(&out.join("stats.json"), &stats)?;
    m.add_artifact(out, "stats.json")?;
    m.write(out)?;
    println!(
        "{} -> {} visual tokens ({} key, {} non-key)",
        stats["input_tokens"],
        stream.len(),
        key,
        non_key
    );
    Ok(())
}

pub fn simulate_cmd(args: &SimulateArgs, argv: &[String]) -> Result<()> {
    let mut m = RunManifest::new(argv, None, None);
    let input = load(&args.io, &mut m)?;
    let sim = simulate(&input.frames, &input.text, &input.config, &options(&args.run))?;
    let out = &args.io.out;
    prepare(out)?;
    write_json(
        &out.join("trace.json"),
        &json!({ "baseline": sim.baseline.trace, "compressed": sim.compressed.trace }),
    )?;
    write_json(&out.join("report.json"), &sim.report)?;
    m.add_artifact(out, "trace.json")?;
    m.add_artifact(out, "report.json")?;
    m.write(out)?;
    println!(
        "flops {:.2}% kv {:.2}% prefill_ms {:.2}%",
        sim.report.flops.reduction_pct, sim.report.kv_bytes.reduction_pct, sim.report.prefill_ms.reduction_pct
    );
    Ok(())
}

pub fn attention_ratio(args: &DiagArgs, argv: &[String]) -> Result<()> {
    let mut m = RunManifest::new(argv, None, None);
    let input = load(&args.io, &mut m)?;
    let opts = SimulateOptions {
        steps: args.steps as usize,
        ..SimulateOptions::default()
    };
    let run = run_once(&input.frames, &input.text, &input.config, &opts)?;
    let mut csv = String::from("layer,visual_ratio,text_ratio\n");
    for r in &run.trace.attention_ratio {
        writeln!(csv, "{},{},{}", r.layer, r.visual, r.text)?;
    }
    let out = &args.io.out;
    prepare(out)?;
    fs::write(out.join("attention_ratio.csv"), &csv)?;
    m.add_artifact(out, "attention_ratio.csv")?;
    m.write(out)?;
    print!("{csv}");
    Ok(())
}

pub fn sweep(args: &SweepArgs, argv: &[String]) -> Result<()> {
    let mut m = RunManifest::new(argv, None, None);
    let input = load(&args.io, &mut m)?;
    let points = sweep_points(&input.config, &args.params)?;
    let opts = options(&args.run);
    let results = metok_core::par::map(&points, |cfg| simulate(&input.frames, &input.text, cfg, &opts));

    let out = &args.io.out;
    prepare(out)?;
    let mut csv = String::from(
        "point,alpha,beta,r,s1,s2,k,flops_baseline,flops_compressed,flops_reduction_pct,\
         kv_baseline,kv_compressed,kv_reduction_pct\n",
    );
    for (i, (cfg, res)) in points.iter().zip(results).enumerate() {
        let sim = res.with_context(|| format!("sweep point {i}"))?;
        let dir = format!("point_{i:03}");
        prepare(&out.join(&dir))?;
        write_json(&out.join(&dir).join("report.json"), &sim.report)?;
        write_json(
            &out.join(&dir).join("trace.json"),
            &json!({ "baseline": sim.baseline.trace, "compressed": sim.compressed.trace }),
        )?;
        m.add_artifact(out, &format!("{dir}/report.json"))?;
        m.add_artifact(out, &format!("{dir}/trace.json"))?;
        let (f, k) = (&sim.report.flops, &sim.report.kv_bytes);
        writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{},{},{},{},{}",
            cfg.alpha,
            cfg.beta,
            cfg.r,
            cfg.s1,
            cfg.s2,
            cfg.k,
            f.baseline,
            f.compressed,
            f.reduction_pct,
            k.baseline,
            k.compressed,
            k.reduction_pct
        )?;
    }
    fs::write(out.join("summary.csv"), &csv)?;
    m.add_artifact(out, "summary.csv")?;
    m.write(out)?;
    print!("{csv}");
    Ok(())
}

pub fn replica(args: &ReplicaArgs, argv: &[String]) -> Result<()> {
    let mut results = Vec::new();
    for spec in [ReplicaSpec::longva(), ReplicaSpec::longva_pooled_grid()] {
        let spec = ReplicaSpec {
            decode_steps: args.steps,
            ..spec
        };
        let r = run_replica(&spec)?;
        println!(
            "{}: flops {:.2}% kv {:.2}% ({} visual tokens kept of {})",
            spec.name,
            r.report.flops.reduction_pct,
            r.report.kv_bytes.reduction_pct,
            r.compressed.visual_tokens.total(),
            r.baseline.visual_tokens.total()
        );
        results.push(json!({ "spec": spec, "report": r.report }));
    }
    prepare(&args.out)?;
    write_json(&args.out.join("replica.json"), &results)?;
    let mut m = RunManifest::new(argv, Some(ReplicaSpec::longva().seed), None);
    m.add_artifact(&args.out, "replica.json")?;
    m.write(&args.out)?;
    Ok(())
}

pub fn replay(manifest: &Path, out: Option<&Path>) -> Result<Vec<String>> {
    let m = RunManifest::load(manifest)?;
    if m.command.first().map(String::as_str) == Some("replay") {
        bail!("manifest records a replay; replay the original run's manifest instead");
    }
    m.verify_inputs()?;
    Ok(match out {
        Some(dir) => crate::manifest::with_out(&m.command, dir),
        None => m.command.clone(),
    })
}
