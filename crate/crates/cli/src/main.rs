//! `mel`: dataset generation, similarity analysis and filtering, training,
//! sampling and evaluation from one binary.
//!
//! Exit status is 0 on success, 2 for usage errors (bad flags, missing
//! files, invalid configuration) and 1 for runtime failures. Failures print
//! one JSON line to stderr.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mel_core::config::RunConfig;
use mel_core::exec::{init_workers, Execution};
use mel_core::pipeline::{self, SampleRequest};
use mel_core::Error;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "mel", version, about = "Text-conditioned motion editing toolkit")]
struct Cli {
    /// TOML configuration file; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the MEL_OUT environment variable takes precedence).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel stages; 1 runs sequentially.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic edit triplets and train/val/test manifests.
    Generate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        magnitude: Option<f64>,
    },
    /// Compute similarity curves for every manifest entry.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write PNG plots of the normalized curves.
        #[arg(long)]
        plots: bool,
        #[arg(long, default_value_t = 20)]
        plot_limit: usize,
    },
    /// Exclude entries whose MotionSNR is below the threshold.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to curves.jsonl in the output directory.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Defaults to similarity.snr_threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train on the included triplets of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Train on the editing loss only.
        #[arg(long)]
        no_aux: bool,
    },
    /// Edit a source motion according to an instruction.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Motion file or triplet file.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        s_text: Option<f64>,
        #[arg(long)]
        s_motion: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample edits for a manifest and write a metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("file not found: {}", path.display())))
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            require_file(path)?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    match std::env::var_os("MEL_OUT") {
        Some(out) if !out.is_empty() => cfg.out = out.into(),
        _ => {
            if let Some(out) = &cli.out {
                cfg.out = out.clone();
            }
        }
    }
    Ok(cfg)
}

fn execution(workers: usize) -> Execution {
    if workers > 1 {
        init_workers(workers);
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, Failure> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate { n, frames, magnitude } => {
            if let Some(n) = n {
                cfg.synth.n_triplets = *n;
            }
            if let Some(f) = frames {
                cfg.synth.frames = *f;
            }
            if let Some(m) = magnitude {
                cfg.synth.magnitude = *m;
            }
        }
        Command::Train { steps, no_aux, .. } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if *no_aux {
                cfg.train.aux_weight = 0.0;
            }
        }
        _ => {}
    }
    let cfg = cfg.resolve()?;
    let exec = execution(cfg.workers);
    let out = cfg.out.clone();

    Ok(match cli.command {
        Command::Generate { .. } => {
            let gen = pipeline::run_generate(&cfg, &out, exec)?;
            json!({ "triplets": gen.triplets, "manifests": gen.manifests })
        }
        Command::Analyze {
            manifest,
            plots,
            plot_limit,
        } => {
            require_file(&manifest)?;
            let records = pipeline::run_analyze(&cfg, &manifest, &out, exec)?;
            let mut written = 0;
            if plots {
                for r in records.iter().take(plot_limit) {
                    let path = out.join("plots").join(format!("{}.png", r.id));
                    plot::curve_png(&r.curve, cfg.similarity.classes, &path).map_err(Failure::Runtime)?;
                    written += 1;
                }
            }
            json!({ "curves": out.join(pipeline::CURVES_FILE), "count": records.len(), "plots": written })
        }
        Command::Filter {
            manifest,
            curves,
            threshold,
            output,
        } => {
            require_file(&manifest)?;
            let curves = curves.unwrap_or_else(|| out.join(pipeline::CURVES_FILE));
            require_file(&curves)?;
            let threshold = threshold.unwrap_or(cfg.similarity.snr_threshold);
            let output = output.unwrap_or_else(|| {
                let stem = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                out.join(format!("{stem}.filtered.jsonl"))
            });
            let filtered = pipeline::run_filter(&manifest, &curves, threshold, &output)?;
            json!({
                "manifest": output,
                "included": filtered.included().count(),
                "excluded": filtered.entries.len() - filtered.included().count(),
            })
        }
        Command::Train { manifest, .. } => {
            require_file(&manifest)?;
            let trained = pipeline::run_train(&cfg, &manifest, &out, exec)?;
            json!({
                "checkpoint": trained.checkpoint,
                "steps": trained.reports.len(),
                "final_loss": trained.reports.last().map(|r| r.total),
            })
        }
        Command::Sample {
            checkpoint,
            source,
            instruction,
            frames,
            s_text,
            s_motion,
            output,
        } => {
            require_file(&checkpoint)?;
            require_file(&source)?;
            let output = output.unwrap_or_else(|| out.join("edited.json"));
            let req = SampleRequest {
                checkpoint: &checkpoint,
                source: &source,
                instruction: &instruction,
                frames,
                s_text: s_text.unwrap_or(cfg.diffusion.guidance.s_text),
                s_motion: s_motion.unwrap_or(cfg.diffusion.guidance.s_motion),
                output: &output,
            };
            let edited = pipeline::run_sample(&cfg, &req)?;
            json!({ "output": output, "frames": edited.len() })
        }
        Command::Evaluate { checkpoint, manifest } => {
            require_file(&checkpoint)?;
            require_file(&manifest)?;
            let report = pipeline::run_evaluate(&cfg, &checkpoint, &manifest, &out, exec)?;
            json!({ "report": out.join(pipeline::REPORT_FILE), "r_at": report.r_at, "l2": report.l2 })
        }
    })
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").to_owned();
            return fail("usage", first.trim_start_matches("error: "), 2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => fail("usage", &msg, 2),
        Err(Failure::Runtime(e)) => fail(e.kind(), &e.to_string(), 1),
    }
}
