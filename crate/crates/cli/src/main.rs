mod args;
mod commands;
mod manifest;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use serde::Serialize;

use args::{Cli, Command, DiagCommand};

/// Exit status for malformed or inconsistent input data.
const EXIT_DATA: u8 = 2;
/// Exit status for bad arguments or environment.
const EXIT_USAGE: u8 = 1;

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("METOK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("METOK_THREADS must be a positive integer, got {raw:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    log::debug!("built without parallel support; ignoring METOK_THREADS={n}");
    Ok(())
}

/// Dispatch one parsed command. `argv` excludes the program name and is
/// what the run's manifest records.
fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Gen(a) => commands::gen(&a, argv),
        Command::Compress(a) => commands::compress(&a, argv),
        Command::Simulate(a) => commands::simulate_cmd(&a, argv),
        Command::Diag(DiagCommand::AttentionRatio(a)) => commands::attention_ratio(&a, argv),
        Command::Sweep(a) => commands::sweep(&a, argv),
        Command::Replica(a) => commands::replica(&a, argv),
        Command::Replay(a) => {
            let replayed = commands::replay(&a.manifest, a.out.as_deref())?;
            let cli = parse(&replayed).context("recorded command no longer parses")?;
            let original = manifest::RunManifest::load(&a.manifest)?;
            run(cli, &replayed)?;
            let out = out_dir(&replayed).context("recorded command has no --out")?;
            let changed = original.diff_artifacts(Path::new(&out))?;
            if !changed.is_empty() {
                bail!("replay produced different artifacts: {}", changed.join(", "));
            }
            println!("replay matches all {} recorded artifacts", original.artifacts.len());
            Ok(())
        }
    }
}

fn out_dir(argv: &[String]) -> Option<String> {
    let i = argv.iter().position(|a| a == "--out")?;
    argv.get(i + 1)
        .cloned()
        .or_else(|| argv.iter().find_map(|a| a.strip_prefix("--out=").map(str::to_string)))
}

fn parse(argv: &[String]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("metok".to_string()).chain(argv.iter().cloned()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
