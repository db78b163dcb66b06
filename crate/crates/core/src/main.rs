use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use pointjem::config::RunConfig;
use pointjem::eval::ProbeMode;
use pointjem::pipeline::{cmd_diagnose, cmd_embed, cmd_gen, cmd_pretrain, cmd_probe, with_probe_flags, GenArgs};

/// Self-supervised point-cloud representation learning.
#[derive(Parser)]
#[command(name = "pointjem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigFlags {
    /// JSON file of namespaced keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic shape benchmark.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 125)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Pretrain encoder and projector; writes a checkpoint and CSV log.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Fit a probe on frozen representations and write its result.
    Probe {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        mode: Option<ProbeMode>,
        #[arg(long)]
        label_fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Mutual information and collapse report over the whole dataset.
    Diagnose {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
    /// Write representations as CSV.
    Embed {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigFlags,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn required<'a>(flag: &str, v: &'a Option<PathBuf>) -> Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::Usage(format!("missing required flag --{flag}")))
}

fn resolve(cfg: &ConfigFlags) -> Result<RunConfig, Failure> {
    RunConfig::resolve(cfg.config.as_deref(), &cfg.set).map_err(|e| Failure::Runtime(e.into()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { out, classes, per_class, points, seed } => {
            let out = required("out", &out)?;
            let manifest = cmd_gen(out, &GenArgs { classes, per_class, points, seed })?;
            eprintln!("wrote {}", manifest.display());
        }
        Command::Pretrain { data, out, log, cfg } => {
            let (data, out, log) = (required("data", &data)?, required("out", &out)?, required("log", &log)?);
            let config = resolve(&cfg)?;
            for line in config.echo_lines() {
                eprintln!("{line}");
            }
            cmd_pretrain(data, &config, out, log, |r| {
                eprintln!(
                    "epoch {:>4}  loss {:.6}  jed {:.6}  jeo {:.6}  ti {:.6}  lr {:.3e}  mi {:.3e}  hmin {:.4}",
                    r.epoch, r.loss_total, r.loss_jed, r.loss_jeo, r.loss_ti, r.lr, r.mean_offdiag_mi, r.min_segment_entropy
                )
            })?;
        }
        Command::Probe { data, ckpt, mode, label_fraction, out, cfg } => {
            let (data, ckpt, out) = (required("data", &data)?, required("ckpt", &ckpt)?, required("out", &out)?);
            let config = with_probe_flags(resolve(&cfg)?, mode, label_fraction)?;
            let r = cmd_probe(data, ckpt, &config, out)?;
            println!(
                "mode={:?} label_fraction={} train={} test={} accuracy={:.4}",
                r.mode, r.label_fraction, r.train_samples, r.test_samples, r.accuracy
            );
        }
        Command::Diagnose { data, ckpt, out, cfg } => {
            let (data, ckpt, out) = (required("data", &data)?, required("ckpt", &ckpt)?, required("out", &out)?);
            let r = cmd_diagnose(data, ckpt, &resolve(&cfg)?, out)?;
            println!(
                "mean_offdiag_mi={:.6e} min_segment_entropy={:.6} collapsed={}",
                r.mean_offdiag_mi,
                r.min_segment_entropy,
                r.collapsed_segments.len()
            );
        }
        Command::Embed { data, ckpt, out, cfg } => {
            let (data, ckpt, out) = (required("data", &data)?, required("ckpt", &ckpt)?, required("out", &out)?);
            let n = cmd_embed(data, ckpt, &resolve(&cfg)?, out)?;
            eprintln!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            let causes: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", causes.join(": "));
            ExitCode::from(1)
        }
    }
}
