//! Command-line front end. The binary is a thin wrapper around [`main`].

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablation::{self, Axis};
use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::metrics::read_metrics;
use crate::train::{evaluate_checkpoint, provision_teacher, train, Session, Trainer};
use crate::viz::{self, VisualInput, DEFAULT_ATTENTION_TAU};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "diffkd", version, about = "Diffusion-denoised knowledge distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a student (the teacher checkpoint must exist; see `teacher`).
    Train {
        config: PathBuf,
        /// Continue from a student checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the teacher named by a config and write its checkpoint.
    Teacher { config: PathBuf },
    /// Print top-1 / top-5 accuracy of a checkpoint.
    Eval { checkpoint: PathBuf },
    /// Sweep one factor, one student per value and seed.
    Ablate {
        #[command(subcommand)]
        axis: AblateAxis,
    },
    /// Attention maps of teacher, student and denoised student features.
    Visualize {
        checkpoint: PathBuf,
        /// `batch`, `batch:<n>` or an image path.
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = DEFAULT_ATTENTION_TAU)]
        tau: f64,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
    /// γ histogram and per-epoch mean curve from a metrics log.
    Gamma {
        metrics: PathBuf,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
pub struct AblateArgs {
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    /// Seeds per value; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AblateAxis {
    Nfe(AblateArgs),
    AeDim(AblateArgs),
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// Single line: `error[<kind>]: <message>`.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m.clone()),
            Failure::Runtime(e) => (e.kind(), e.to_string()),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file not found: {}", path.display())));
    }
    Ok(ExperimentConfig::from_file(path)?)
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

/// Runs a parsed command, writing results to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| Failure::Runtime(Error::io("stdout", e)));
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = load_config(&config)?;
            let summary = match resume {
                Some(ckpt) => {
                    require_file(&ckpt, "checkpoint")?;
                    Trainer::resume(&ckpt, Some(cfg.logging.metrics_path.clone()))?.run()?
                }
                None => train(cfg)?,
            };
            w(out, format!("top1: {:.2}", summary.eval.top1))?;
            w(out, format!("top5: {:.2}", summary.eval.top5))?;
            w(out, format!("checkpoint: {}", summary.checkpoint.display()))?;
        }
        Command::Teacher { config } => {
            let cfg = load_config(&config)?;
            let r = provision_teacher(&cfg)?;
            w(out, format!("top1: {:.2}", r.top1))?;
            w(out, format!("top5: {:.2}", r.top5))?;
            w(out, format!("checkpoint: {}", cfg.teacher.checkpoint.display()))?;
        }
        Command::Eval { checkpoint } => {
            require_file(&checkpoint, "checkpoint")?;
            let r = evaluate_checkpoint(&checkpoint)?;
            w(out, format!("top1: {:.2}", r.top1))?;
            w(out, format!("top5: {:.2}", r.top5))?;
        }
        Command::Ablate { axis } => {
            let (axis, args) = match axis {
                AblateAxis::Nfe(a) => (Axis::Nfe, a),
                AblateAxis::AeDim(a) => (Axis::AeDim, a),
            };
            let cfg = load_config(&args.config)?;
            let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds };
            let rows = ablation::run(&cfg, axis, &args.values, &seeds, &args.out)?;
            let table = args.out.join(format!("{}.csv", axis.name()));
            ablation::write_table(&rows, axis, &table)?;
            w(out, format!("{:>8} {:>8} {:>8} {:>5}", axis.name(), "top1", "top5", "runs"))?;
            for (v, t1, t5, n) in ablation::summarize(&rows) {
                w(out, format!("{v:>8} {t1:>8.2} {t5:>8.2} {n:>5}"))?;
            }
            w(out, format!("table: {}", table.display()))?;
        }
        Command::Visualize { checkpoint, input, tau, out: dir } => {
            require_file(&checkpoint, "checkpoint")?;
            let input: VisualInput = input.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            if let VisualInput::Image(p) = &input {
                require_file(p, "input image")?;
            }
            let (session, _) = Session::from_checkpoint(&checkpoint)?;
            let images = viz::input_images(&session, &input)?;
            let maps = viz::visualize(&session, &images, tau, &dir, session.config.seed)?;
            w(out, format!("samples: {}", maps.len()))?;
            w(out, format!("output: {}", dir.display()))?;
        }
        Command::Gamma { metrics, out: dir } => {
            require_file(&metrics, "metrics log")?;
            let figs = viz::gamma_histogram(&read_metrics(&metrics)?, &dir)?;
            w(out, format!("buckets: {}", figs.histogram_csv.display()))?;
            w(out, format!("curve: {}", figs.curve_csv.display()))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "{}", f.line());
            f.exit_code()
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = main_with(std::iter::once("diffkd").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn missing_config_is_usage_error() {
        let (code, _, err) = run(&["train", "missing.toml"]);
        assert_eq!(code, 2);
        assert!(err.contains("missing.toml"));
        assert_eq!(err.trim().lines().count(), 1);
    }

    #[test]
    fn unknown_subcommand_and_flag() {
        assert_eq!(run(&["frobnicate"]).0, 2);
        assert_eq!(run(&["eval", "x", "--bogus"]).0, 2);
        assert_eq!(run(&["ablate", "nfe", "c.toml"]).0, 2);
    }

    #[test]
    fn runtime_error_is_one_line() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "seed = \"x\"\n").unwrap();
        let (code, _, err) = run(&["train", bad.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error[config]:"), "{err}");
        assert_eq!(err.trim().lines().count(), 1);
    }
}
