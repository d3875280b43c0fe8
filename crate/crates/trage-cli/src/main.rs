//! `trage` — header-payload differentiated traffic representation
//! learning: pre-train on captures, fine-tune a flow classifier, evaluate,
//! and analyze masking statistics, all driven by one declarative config.
//!
//! Exit codes: 0 success, 1 usage error (bad argv), 2 data error (bad
//! config file contents, unreadable or malformed inputs, failed runs).

mod commands;
mod config;
mod envelope;
mod lock;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{ArgGroup, Args, Parser, Subcommand};

use config::{absolutize, load_run_config, ConfigArgs, RunConfig};
use trage::encoder::Precision;

use commands::evaluate::EvalInput;

#[derive(Parser, Debug)]
#[command(
    name = "trage",
    version,
    about = "Differentiated pre-training and flow classification for network traffic",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train both encoders on captures with differentiated masking
    Pretrain(PretrainArgs),
    /// Fine-tune a flow classifier from a pre-trained checkpoint
    Finetune(FinetuneArgs),
    /// Score predictions against truth; write metrics and confusion CSVs
    Evaluate(EvaluateArgs),
    /// Field-length and masked-run-length statistics vs the geometric law
    MaskStats(MaskStatsArgs),
    /// Human-readable dump of an artifact or a capture's first records
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Capture file(s) forming the corpus (replaces the [dataset] list)
    #[arg(long = "pcap", value_name = "FILE")]
    pcaps: Vec<PathBuf>,
    /// Optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    /// Peak learning rate (1% linear warmup, then constant)
    #[arg(long)]
    lr: Option<f64>,
    /// Sequences per batch and stream
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fraction of maskable tokens hidden per sequence
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Success probability of the geometric span-length distribution
    #[arg(long)]
    geometric_p: Option<f64>,
    /// Redraw mask plans every step (true) or pin step-0 plans (false)
    #[arg(long, value_name = "BOOL")]
    dynamic_masking: Option<bool>,
    /// Field-level spans on headers (true) or uniform masking (false)
    #[arg(long, value_name = "BOOL")]
    field_level_header: Option<bool>,
}

impl PretrainArgs {
    fn merged(&self) -> Result<RunConfig> {
        let mut cfg = load_run_config(&self.cfg)?;
        if !self.pcaps.is_empty() {
            cfg.dataset.pcaps =
                self.pcaps.iter().map(|p| absolutize(p)).collect::<Result<_>>()?;
        }
        let p = &mut cfg.pretrain;
        copy_over(&mut p.steps, self.steps);
        copy_over(&mut p.lr, self.lr);
        copy_over(&mut p.batch_size, self.batch_size);
        copy_over(&mut p.mask_ratio, self.mask_ratio);
        copy_over(&mut p.geometric_p, self.geometric_p);
        copy_over(&mut p.dynamic_masking, self.dynamic_masking);
        copy_over(&mut p.field_level_header, self.field_level_header);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pre-trained checkpoint to start from
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Labeled-flow manifest CSV (overrides the [dataset] value)
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Passes over the training split
    #[arg(long)]
    epochs: Option<usize>,
    /// Constant fine-tuning learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Flows per optimizer step
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden width of the classification head
    #[arg(long)]
    head_hidden: Option<usize>,
    /// Leading packets of a flow that enter its representation
    #[arg(long)]
    n_max_packets: Option<usize>,
    /// Train the head only, leaving both encoders untouched
    #[arg(long, value_name = "BOOL")]
    freeze_encoders: Option<bool>,
    /// Most flows kept per class before the 8:1:1 split
    #[arg(long)]
    class_cap: Option<usize>,
}

impl FinetuneArgs {
    fn merged(&self) -> Result<RunConfig> {
        let mut cfg = load_run_config(&self.cfg)?;
        if let Some(m) = &self.manifest {
            cfg.dataset.manifest = Some(absolutize(m)?);
        }
        copy_over(&mut cfg.dataset.class_cap, self.class_cap);
        let f = &mut cfg.finetune;
        copy_over(&mut f.epochs, self.epochs);
        copy_over(&mut f.lr, self.lr);
        copy_over(&mut f.batch_size, self.batch_size);
        copy_over(&mut f.head_hidden, self.head_hidden);
        copy_over(&mut f.n_max_packets, self.n_max_packets);
        copy_over(&mut f.freeze_encoders, self.freeze_encoders);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
#[command(group = ArgGroup::new("source").required(true).args(["model", "predictions"]))]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Fine-tuned model to run (scores the flows of --manifest)
    #[arg(long, value_name = "FILE", requires = "manifest")]
    model: Option<PathBuf>,
    /// Labeled-flow manifest CSV scored by --model
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Predicted labels, one unsigned integer per line (needs --labels)
    #[arg(long, value_name = "FILE", requires = "labels", conflicts_with = "manifest")]
    predictions: Option<PathBuf>,
    /// True labels, one unsigned integer per line
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskStatsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Mask plans sampled for the run-length histogram
    #[arg(long, default_value_t = 10_000)]
    plans: usize,
    /// Real tokens in each synthetic sequence
    #[arg(long, default_value_t = 64)]
    sequence_len: usize,
    /// Success probability of the geometric span-length distribution
    #[arg(long)]
    geometric_p: Option<f64>,
    /// Fraction of maskable tokens hidden per sequence
    #[arg(long)]
    mask_ratio: Option<f64>,
}

#[derive(Args, Debug)]
#[command(group = ArgGroup::new("target").required(true).args(["artifact", "pcap"]))]
struct InspectArgs {
    /// A checkpoint or fine-tuned model to describe
    #[arg(long, value_name = "FILE")]
    artifact: Option<PathBuf>,
    /// A capture whose first records to dump
    #[arg(long, value_name = "FILE")]
    pcap: Option<PathBuf>,
    /// Records shown from a capture
    #[arg(long, default_value_t = 5)]
    packets: usize,
}

fn copy_over<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Pretrain(a) => {
            let cfg = a.merged()?;
            match cfg.precision {
                Precision::F32 => commands::pretrain::run::<f32>(&cfg),
                Precision::F64 => commands::pretrain::run::<f64>(&cfg),
            }
        }
        Command::Finetune(a) => {
            let cfg = a.merged()?;
            match cfg.precision {
                Precision::F32 => commands::finetune::run::<f32>(&cfg, &a.checkpoint),
                Precision::F64 => commands::finetune::run::<f64>(&cfg, &a.checkpoint),
            }
        }
        Command::Evaluate(a) => {
            let cfg = load_run_config(&a.cfg)?;
            cfg.validate()?;
            let input = if let Some(model) = &a.model {
                EvalInput::Model {
                    model,
                    manifest: a.manifest.as_ref().expect("clap enforces --manifest"),
                }
            } else {
                EvalInput::Files {
                    predictions: a.predictions.as_ref().expect("clap enforces the source group"),
                    labels: a.labels.as_ref().expect("clap enforces --labels"),
                }
            };
            commands::evaluate::run(&cfg, input)
        }
        Command::MaskStats(a) => {
            let mut cfg = load_run_config(&a.cfg)?;
            copy_over(&mut cfg.pretrain.geometric_p, a.geometric_p);
            copy_over(&mut cfg.pretrain.mask_ratio, a.mask_ratio);
            cfg.validate()?;
            commands::mask_stats::run(&cfg, a.plans, a.sequence_len)
        }
        Command::Inspect(a) => {
            if let Some(path) = &a.artifact {
                commands::inspect::artifact(path)
            } else {
                let pcap = a.pcap.as_ref().expect("clap enforces the target group");
                commands::inspect::capture(pcap, a.packets)
            }
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // usage errors print the synopsis to stderr and exit 1.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(2);
    }
}
