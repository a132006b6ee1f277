mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit status 2.
    #[error("usage error: {0}")]
    Usage(String),
    /// Anything that fails while running; exit status 1.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mmae", version, about = "Multi-modal masked autoencoder pipeline for H&E tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML run configuration (overrides built-in defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic H&E-like dataset with ground-truth stain images.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        size: Option<u32>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Separate H and E images for every tile of a dataset.
    Stainsep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fit one stain matrix on all tiles.
        #[arg(long)]
        shared: bool,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Sample mask plans and report their statistics.
    Maskplan {
        #[command(flatten)]
        common: Common,
        /// Dirichlet concentrations as `rgb,h,e`.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        /// Patches per side.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Pretrain the encoder by masked reconstruction.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// 1 for RGB only, 3 for RGB, H and E.
        #[arg(long)]
        modalities: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune with k-fold cross-validation and report test accuracy.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        n_labeled: Option<usize>,
        /// Ignore the checkpoint's encoder weights.
        #[arg(long)]
        random_init: bool,
        /// Train only the classification head.
        #[arg(long)]
        freeze: bool,
    },
    /// k-nearest-neighbour accuracy of global-token embeddings.
    Knn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Render per-head attention maps of the global token.
    Attnmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Dump global-token embeddings of every tile as CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn push<T: ToString>(sets: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        sets.push(format!("{key}={}", v.to_string()));
    }
}

fn path_value(p: Option<PathBuf>) -> Option<String> {
    // quoted so the value is always read as a string
    p.map(|p| format!("{:?}", p.to_string_lossy()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut sets = Vec::new();
    let (common, action) = match cli.command {
        Command::Synth { common, classes, size, count } => {
            push(&mut sets, "synth.image_size", size);
            push(&mut sets, "synth.count", count);
            (common, commands::Action::Synth { classes })
        }
        Command::Stainsep { common, data, shared, lambda } => {
            push(&mut sets, "paths.data", path_value(data));
            push(&mut sets, "stain.snmf.lambda", lambda);
            if shared {
                sets.push("stain.shared=true".into());
            }
            (common, commands::Action::Stainsep)
        }
        Command::Maskplan { common, alphas, budget, grid, trials } => {
            if let Some(a) = alphas {
                let v: Vec<&str> = a.split(',').map(str::trim).collect();
                if v.len() != 3 {
                    return Err(CliError::Usage(format!("--alphas needs three values, got {a:?}")));
                }
                for (key, x) in ["rgb", "h", "e"].iter().zip(v) {
                    let x: f64 = x.parse().map_err(|_| CliError::Usage(format!("bad alpha {x:?}")))?;
                    sets.push(format!("maskplan.alphas.{key}={x:?}"));
                }
            }
            push(&mut sets, "maskplan.budget", budget);
            push(&mut sets, "maskplan.grid", grid);
            push(&mut sets, "maskplan.trials", trials);
            (common, commands::Action::Maskplan)
        }
        Command::Pretrain { common, data, modalities, epochs, resume } => {
            push(&mut sets, "paths.data", path_value(data));
            push(&mut sets, "paths.resume", path_value(resume));
            push(&mut sets, "pretrain.epochs", epochs);
            if let Some(m) = modalities {
                push(&mut sets, "model.encoder.modalities", Some(m));
                push(&mut sets, "model.decoder.has_cross_attention", Some(m == 3));
            }
            (common, commands::Action::Pretrain)
        }
        Command::Finetune { common, data, ckpt, n_labeled, random_init, freeze } => {
            push(&mut sets, "paths.data", path_value(data));
            push(&mut sets, "paths.ckpt", path_value(ckpt));
            push(&mut sets, "data.n_labeled", n_labeled);
            if random_init {
                sets.push("eval.random_init=true".into());
            }
            if freeze {
                sets.push("finetune.freeze_encoder=true".into());
            }
            (common, commands::Action::Finetune)
        }
        Command::Knn { common, data, ckpt, k } => {
            push(&mut sets, "paths.data", path_value(data));
            push(&mut sets, "paths.ckpt", path_value(ckpt));
            push(&mut sets, "eval.k", k);
            (common, commands::Action::Knn)
        }
        Command::Attnmap { common, data, ckpt, images, layer, threshold } => {
            push(&mut sets, "paths.data", path_value(data));
            push(&mut sets, "paths.ckpt", path_value(ckpt));
            if !images.is_empty() {
                let list: Vec<String> = images.into_iter().map(|p| path_value(Some(p)).unwrap()).collect();
                sets.push(format!("paths.images=[{}]", list.join(",")));
            }
            push(&mut sets, "eval.layer", layer);
            push(&mut sets, "eval.threshold", threshold.map(|t| format!("{t:?}")));
            (common, commands::Action::Attnmap)
        }
        Command::Embed { common, data, ckpt } => {
            push(&mut sets, "paths.data", path_value(data));
            push(&mut sets, "paths.ckpt", path_value(ckpt));
            (common, commands::Action::Embed)
        }
    };
    let mut overrides = common.set.clone();
    push(&mut overrides, "seed", common.seed);
    overrides.extend(sets);
    let mut cfg = config::resolve(common.config.as_deref(), &overrides)?;
    if let commands::Action::Synth { classes: Some(k) } = action {
        cfg.synth = cfg.synth.with_classes(k).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let exec = if common.sequential {
        mmae::Exec::Sequential
    } else {
        mmae::Exec::Parallel
    };
    commands::execute(action, &cfg, &common.out, exec)
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
        Err(e) => {
            eprintln!("mmae: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
