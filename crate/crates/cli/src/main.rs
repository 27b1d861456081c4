use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::builder::styling::Styles;
use clap::{Parser, Subcommand};

use yolos_cli::commands;
use yolos_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "yolos", version, about = "Encoder-only detection transformer: train, evaluate, predict, and analyze")]
struct Cli {
    /// Configuration file (`key = value` lines, dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides single config keys, e.g. --set model.depth=2.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for checkpoints, logs, reports and renderings.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for the training batch (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trains a model and writes model.ckpt plus loss_log.jsonl.
    Train {
        /// Warm-start checkpoint; heads and detection tokens re-initialize.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluates a checkpoint (COCO-style AP) on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Shorter-side inference resolution; omitted = native size.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Runs one image through a checkpoint and emits predictions.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (.ppm or .png).
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also writes overlay.ppm with predicted boxes drawn in.
        #[arg(long)]
        overlay: bool,
    },
    /// FLOPs decomposition for a model preset (or the full preset table).
    Flops {
        /// Preset: ti | s | b | dwr | fast-dwr.
        #[arg(long, default_value = "ti")]
        model: String,
        /// Input resolution HxW; defaults to the preset's native size.
        #[arg(long)]
        resolution: Option<String>,
        /// Appended tokens: 1 ([CLS]) for pre-train shape, 100 for detection.
        #[arg(long, default_value_t = 1)]
        extra: usize,
        /// Count detector-head FLOPs for this many foreground classes.
        #[arg(long)]
        det_classes: Option<usize>,
        /// Prints all five presets as one table.
        #[arg(long)]
        table: bool,
    },
    /// Grows a preset to a FLOPs target under compound scaling.
    Scale {
        #[arg(long, default_value = "ti")]
        model: String,
        /// Target budget in FLOPs, e.g. 4.6e9.
        #[arg(long)]
        target: f64,
        /// uniform | fast.
        #[arg(long, default_value = "uniform")]
        strategy: String,
        /// Width emphasis in [0,1] for fast scaling.
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        extra: usize,
    },
    /// Detection-token analyses over the held-out split.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// geometry | class | scatter | categories | attention.
        #[arg(long)]
        which: String,
        /// Encoder layer for attention maps (default: last).
        #[arg(long)]
        layer: Option<usize>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("--set {pair:?}: expected KEY=VALUE"))?;
        cfg.set(key.trim(), value)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.display().to_string();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .with_context(|| format!("--resolution {s:?}: expected HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Train { init } => {
            let ckpt = commands::run_train(&cfg, init.as_deref())?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Eval { checkpoint, resolution } => {
            let report = commands::run_eval(&cfg, checkpoint, *resolution)?;
            match (report.ap50, report.mean_ap) {
                (Some(ap50), Some(mean)) => println!("AP@0.5 {ap50:.4}  mean AP {mean:.4}"),
                _ => println!("AP undefined: dataset has no ground truth"),
            }
        }
        Command::Predict {
            checkpoint,
            image,
            threshold,
            overlay,
        } => {
            let n = commands::run_predict(&cfg, checkpoint, image, *threshold, *overlay)?;
            println!("{n} detections at threshold {threshold}");
        }
        Command::Flops {
            model,
            resolution,
            extra,
            det_classes,
            table,
        } => {
            let res = resolution.as_deref().map(parse_resolution).transpose()?;
            commands::run_flops(model, res, *extra, *det_classes, *table, Some(cfg.out.as_ref()))?;
        }
        Command::Scale {
            model,
            target,
            strategy,
            alpha,
            extra,
        } => {
            commands::run_scale(model, *target, strategy, *alpha, *extra, Some(cfg.out.as_ref()))?;
        }
        Command::Analyze {
            checkpoint,
            which,
            layer,
        } => {
            let summary = commands::run_analyze(&cfg, checkpoint, which, *layer)?;
            println!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Plain output everywhere when NO_COLOR is set.
    let styles = if std::env::var_os("NO_COLOR").is_some() {
        Styles::plain()
    } else {
        Styles::default()
    };
    let cli = match Cli::try_parse_from_styled(styles) {
        Ok(cli) => cli,
        Err(e) => {
            // clap formats its own usage errors.
            e.exit();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

trait StyledParse: Sized {
    fn try_parse_from_styled(styles: Styles) -> Result<Self, clap::Error>;
}

impl StyledParse for Cli {
    fn try_parse_from_styled(styles: Styles) -> Result<Self, clap::Error> {
        use clap::{CommandFactory, FromArgMatches};
        let cmd = Cli::command().styles(styles);
        let matches = cmd.try_get_matches()?;
        Cli::from_arg_matches(&matches)
    }
}
