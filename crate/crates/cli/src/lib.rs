//! The `aagcn` command line: preprocessing, training, evaluation,
//! prediction, score fusion, graph export and gradient verification.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical failure.

pub mod commands;
pub mod config;
pub mod files;

use std::fs;
use std::path::PathBuf;

use aagcn::Modality;
use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<aagcn::Error> for CliError {
    fn from(e: aagcn::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "aagcn", version, about = "Skeleton action recognition with attention-enhanced adaptive graph convolutions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// joint, bone, joint_motion or bone_motion.
    #[arg(long, global = true)]
    pub modality: Option<Modality>,
    /// Fusion weights, comma separated.
    #[arg(long, global = true, value_delimiter = ',', value_name = "W1,W2,..")]
    pub weights: Option<Vec<f64>>,
    /// Recorded in outputs; runs are always single-threaded f64.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (preprocess, train) or file (other commands).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize raw or synthetic skeletons and write all four modality files.
    Preprocess {
        /// Raw joint samples (NDJSON) or a manifest (.json).
        #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
        input: Option<PathBuf>,
        /// Generate the synthetic dataset described by the config.
        #[arg(long)]
        synth: bool,
    },
    /// Train one stream.
    Train {
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Top-1/top-5 accuracy on labeled data, with an optional scores file.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Class scores for unlabeled data.
    Predict {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Weighted sum of stream score files.
    Fuse {
        #[arg(required = true, value_name = "SCORES")]
        scores: Vec<PathBuf>,
    },
    /// Dump learned graphs, gates and (for a sample) attention maps as JSON.
    ExportGraph {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Sample id inside `--data`; defaults to the first sample.
        #[arg(long, requires = "data")]
        sample: Option<String>,
    },
    /// Finite-difference check of every op and a toy model.
    Gradcheck {
        /// Add a deliberately wrong backward rule, which must fail.
        #[arg(long, hide = true)]
        negative_control: bool,
    },
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn require_out(cli: &Cli) -> Result<PathBuf, CliError> {
    cli.out.clone().ok_or_else(|| CliError::Usage("--out is required for this command".into()))
}

/// Runs one parsed invocation, printing its report to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let ov = Overrides {
        seed: cli.seed,
        modality: cli.modality,
        weights: cli.weights.clone(),
        deterministic: cli.deterministic,
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
    match &cli.command {
        Command::Preprocess { input, synth } => {
            let out = require_out(cli)?;
            let r = commands::cmd_preprocess(&cfg, input.as_deref(), *synth, &out)?;
            println!("preprocessed {} samples", r.samples);
            for f in r.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Train { resume } => {
            let out = require_out(cli)?;
            let r = commands::cmd_train(&cfg, &out, resume.as_deref())?;
            if let Some(last) = r.logs.last() {
                let val = last.val_acc.map(|v| format!(", val top-1 {}", pct(v))).unwrap_or_default();
                println!("epoch {}: loss {:.6}, train top-1 {}{val}", last.epoch, last.loss, pct(last.train_acc));
            }
            println!("wrote {}", r.checkpoint.display());
            println!("wrote {}", r.log.display());
        }
        Command::Eval { checkpoint, data } | Command::Predict { checkpoint, data } => {
            let labeled = matches!(cli.command, Command::Eval { .. });
            let r = commands::cmd_eval(&cfg, checkpoint, data.as_deref(), cli.modality, cli.out.as_deref(), labeled)?;
            match r.top_k {
                Some([t1, t5]) => println!("{} samples: top-1 {}, top-5 {}", r.scores.ids.len(), pct(t1), pct(t5)),
                None => println!("scored {} samples", r.scores.ids.len()),
            }
        }
        Command::Fuse { scores } => {
            let r = commands::cmd_fuse(scores, cfg.fusion_weights.as_deref(), cli.out.as_deref(), &cfg.to_json())?;
            for (f, acc) in scores.iter().zip(&r.per_stream_top_k) {
                println!("{}: top-1 {}, top-5 {}", f.display(), pct(acc[0]), pct(acc[1]));
            }
            println!("fused: top-1 {}, top-5 {}", pct(r.fused_top_k[0]), pct(r.fused_top_k[1]));
        }
        Command::ExportGraph { checkpoint, data, sample } => {
            let e = commands::cmd_export_graph(checkpoint, data.as_deref(), sample.as_deref())?;
            let text = serde_json::to_string_pretty(&e).map_err(|e| CliError::Data(e.to_string()))?;
            match &cli.out {
                Some(p) => {
                    fs::write(p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                    println!("exported {} layers to {}", e.layers.len(), p.display());
                }
                None => println!("{text}"),
            }
        }
        Command::Gradcheck { negative_control } => {
            let r = commands::cmd_gradcheck(*negative_control)?;
            for c in &r.cases {
                let verdict = if c.max_rel_error <= r.tolerance { "ok" } else { "FAIL" };
                println!("{:<20} {:>10.3e}  {verdict}  (worst at {})", c.name, c.max_rel_error, c.worst_at);
            }
            if let Some(p) = &cli.out {
                let rows: Vec<_> = r
                    .cases
                    .iter()
                    .map(|c| serde_json::json!({"case": c.name, "max_rel_error": c.max_rel_error, "worst_at": c.worst_at}))
                    .collect();
                let doc = serde_json::json!({"tolerance": r.tolerance, "cases": rows});
                fs::write(p, doc.to_string()).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            }
            let failed = r.failures();
            if !failed.is_empty() {
                let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
                return Err(CliError::Numerical(format!("gradient check exceeded {:e} in {names:?}", r.tolerance)));
            }
        }
    }
    Ok(())
}
