use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use smot::harness::{self, io, ConfigMap, HarnessError};

#[derive(Parser)]
#[command(name = "smot", version, about = "Multi-object tracking by anchor redetection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `section.key=value` lines.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene (gt.txt, embeddings, manifest, rasters).
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory (`output.dir`).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Track a scene and write MOTChallenge result rows.
    Track {
        #[command(flatten)]
        common: Common,
        /// Scene directory written by `simulate` (`input.scene`).
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Replay file; selects the replay backend.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Results file (`output.results`).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Record every backend answer to this replay file.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Tracking anchors per tracklet (`generator.k`).
        #[arg(short)]
        k: Option<usize>,
        /// identity | oracle | block_matching
        #[arg(long)]
        motion: Option<String>,
        /// Disable the appearance linker.
        #[arg(long)]
        no_linker: bool,
    },
    /// Score a result file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        results: PathBuf,
        /// IoU gate for a match.
        #[arg(long, default_value_t = 0.5)]
        gate: f64,
        /// Also write the report as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Per-frame latency over object-count buckets.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Also write the report as JSON (`output.report`).
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
}

fn load(common: &Common, flags: &[(&str, Option<String>)]) -> Result<ConfigMap, HarnessError> {
    let mut c = match &common.config {
        Some(p) => ConfigMap::load(p)?,
        None => ConfigMap::default(),
    };
    for kv in &common.set {
        c.set_override(kv)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, v);
        }
    }
    if let Some(s) = common.seed {
        c.set("seed", s);
    }
    Ok(c)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Run(e.to_string()))?;
    s.push('\n');
    io::write_text(path, &s)
}

fn run(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Simulate { common, out } => {
            let c = load(&common, &[("output.dir", path_flag(&out))])?;
            let s = harness::cmd_simulate(&c)?;
            println!(
                "wrote {} rows ({} identities, {} frames) to {}",
                s.rows,
                s.identities,
                s.frames,
                s.dir.display()
            );
            println!("config sha256 {}", s.config_sha256);
        }
        Cmd::Track {
            common,
            scene,
            replay,
            out,
            record,
            k,
            motion,
            no_linker,
        } => {
            let c = load(
                &common,
                &[
                    ("input.scene", path_flag(&scene)),
                    ("input.replay", path_flag(&replay)),
                    ("detector.backend", replay.as_ref().map(|_| "replay".to_string())),
                    ("output.results", path_flag(&out)),
                    ("output.record", path_flag(&record)),
                    ("generator.k", k.map(|k| k.to_string())),
                    ("motion.mode", motion),
                    ("linker.enabled", no_linker.then(|| "false".to_string())),
                ],
            )?;
            let s = harness::cmd_track(&c)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            let o = &s.output;
            print!(
                "{} frames, {} tracklets, {} terminations",
                o.frames.len(),
                o.tracklets,
                o.total_terminations()
            );
            if let Some(t) = o.tracks {
                print!(", {t} tracks");
            }
            println!(", {} rows -> {}", o.rows.len(), s.results.display());
        }
        Cmd::Eval {
            gt,
            results,
            gate,
            json,
        } => {
            let report = harness::cmd_eval(&gt, &results, gate)?;
            print!("{}", report.table());
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Cmd::Bench { common, json } => {
            let c = load(&common, &[("output.report", path_flag(&json))])?;
            let report = harness::cmd_bench(&c)?;
            print!("{}", report.table());
            if let Some(p) = c.get::<PathBuf>("output.report")? {
                write_json(&p, &report)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
