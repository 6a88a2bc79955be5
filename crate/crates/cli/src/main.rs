//! `fusekit`: align vocabularies, project teacher distributions, train fused
//! targets and merge them.
//!
//! Every command except `inspect` takes an optional `--config` JSON file whose
//! keys are overridden by flags, writes into an empty `--out` directory and
//! echoes the effective config there as `config.json`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error. Failures are
//! reported on stderr as one JSON object per line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{overlay, PipelineConfig};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "fusekit",
    version,
    about = "Knowledge fusion pipeline for toy language models"
)]
struct Cli {
    /// Worker threads (defaults to all cores). Never changes any output.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing, must be empty).
    #[arg(long)]
    out: PathBuf,
    /// Allow a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    pivot_vocab: Option<String>,
    #[arg(long)]
    source_vocab: Option<String>,
    #[arg(long)]
    max_span: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Align a parallel corpus and write token mapping statistics.
    AlignStats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        align: AlignArgs,
    },
    /// Project a source dump into the pivot vocabulary.
    Project {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long)]
        dump: Option<String>,
        #[arg(long)]
        stats: Option<String>,
        /// EM, MinED or MS.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Fine-tune a copy of the pivot on supervised plus fusion loss.
    FuseTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        pivot_checkpoint: Option<String>,
        #[arg(long)]
        pivot_dump: Option<String>,
        #[arg(long)]
        source_dump: Option<String>,
        #[arg(long)]
        init_seed: Option<u64>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        embed: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Merge target checkpoints that share a pivot.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pivot: Option<String>,
        /// Target checkpoint; repeat for several.
        #[arg(long = "target")]
        targets: Vec<String>,
        /// sce, sce-ce, sce-c, linear, ta, ties or dare.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        trim_rate: Option<f64>,
        #[arg(long)]
        drop_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate an artifact file and print a summary.
    Inspect { path: PathBuf },
}

impl AlignArgs {
    fn apply(self, cfg: &mut PipelineConfig) {
        overlay(&mut cfg.corpus, self.corpus);
        overlay(&mut cfg.pivot_vocab, self.pivot_vocab);
        overlay(&mut cfg.source_vocab, self.source_vocab);
        overlay(&mut cfg.max_span, self.max_span);
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::AlignStats { common, align } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref())?;
            align.apply(&mut cfg);
            commands::align_stats(&cfg, &common.out, common.overwrite)
        }
        Command::Project {
            common,
            align,
            dump,
            stats,
            strategy,
            k,
        } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref())?;
            align.apply(&mut cfg);
            overlay(&mut cfg.dump, dump);
            overlay(&mut cfg.stats, stats);
            overlay(&mut cfg.strategy, strategy);
            overlay(&mut cfg.k, k);
            commands::project(&cfg, &common.out, common.overwrite)
        }
        Command::FuseTrain {
            common,
            dataset,
            pivot_checkpoint,
            pivot_dump,
            source_dump,
            init_seed,
            vocab_size,
            embed,
            hidden,
            lambda,
            learning_rate,
            epochs,
            k,
        } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref())?;
            overlay(&mut cfg.dataset, dataset);
            overlay(&mut cfg.pivot_checkpoint, pivot_checkpoint);
            overlay(&mut cfg.pivot_dump, pivot_dump);
            overlay(&mut cfg.source_dump, source_dump);
            overlay(&mut cfg.init_seed, init_seed);
            overlay(&mut cfg.vocab_size, vocab_size);
            overlay(&mut cfg.embed, embed);
            overlay(&mut cfg.hidden, hidden);
            overlay(&mut cfg.lambda, lambda);
            overlay(&mut cfg.learning_rate, learning_rate);
            overlay(&mut cfg.epochs, epochs);
            overlay(&mut cfg.k, k);
            commands::fuse_train(&cfg, &common.out, common.overwrite)
        }
        Command::Merge {
            common,
            pivot,
            targets,
            method,
            tau,
            scale,
            trim_rate,
            drop_rate,
            seed,
        } => {
            let mut cfg = PipelineConfig::load(common.config.as_deref())?;
            overlay(&mut cfg.pivot, pivot);
            overlay(&mut cfg.targets, (!targets.is_empty()).then_some(targets));
            overlay(&mut cfg.method, method);
            overlay(&mut cfg.tau, tau);
            overlay(&mut cfg.scale, scale);
            overlay(&mut cfg.trim_rate, trim_rate);
            overlay(&mut cfg.drop_rate, drop_rate);
            overlay(&mut cfg.seed, seed);
            commands::merge(&cfg, &common.out, common.overwrite)
        }
        Command::Inspect { path } => {
            print!("{}", commands::inspect(&path)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprintln!("{}", CliError::config(e.to_string().trim_end()).record());
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.workers {
        Some(0) => Err(CliError::config("`--workers` must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::data(format!("cannot start worker pool: {e}")))
            .and_then(|pool| pool.install(|| run(cli.command))),
        None => run(cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
