//! `csg0`: pretrain, extend, sample, verify and evaluate continual generators.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::TaskOverrides;

#[derive(Parser)]
#[command(
    name = "csg0",
    version,
    about = "Continual semantic image synthesis with zero forgetting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base generator on the first domain of the stream.
    Pretrain {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        task: TaskOverrides,
    },
    /// Add and train the delta for the next domain of the stream.
    Continue {
        #[arg(long)]
        config: PathBuf,
        /// Stream step to train (1 = second domain).
        #[arg(long)]
        step: usize,
        /// Input checkpoint; defaults to `<out_dir>/ckpt_step<step-1>.csg0`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        task: TaskOverrides,
    },
    /// Write generated images (PPM) and their masks (PGM).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Domain whose parameters generate the images.
        #[arg(long)]
        domain: String,
        /// Toy domain whose layouts serve as masks (defaults to --domain).
        #[arg(long, conflicts_with = "masks")]
        mask_domain: Option<String>,
        /// Directory of PGM masks to condition on instead of toy layouts.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Domain spec JSON for --mask-domain when it is not a built-in toy domain.
        #[arg(long)]
        mask_spec: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples")]
        out_dir: PathBuf,
    },
    /// Check that a later checkpoint reproduces every earlier domain exactly.
    Verify {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Proxy-FID, GAN-test mIoU and parameter counts as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domain: String,
        /// Run configuration; needed for --compare and custom domain specs.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of held-out scenes to generate and compare.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Seed of the held-out scenes and latent codes (`--seed` seeds baseline training).
        #[arg(id = "eval_seed", long = "eval-seed", default_value_t = 0)]
        seed: u64,
        /// Also train a baseline under the same budget and report it.
        #[arg(long, value_enum)]
        compare: Option<Compare>,
        /// Output CSV (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csg0")]
        run_id: String,
        #[command(flatten)]
        task: TaskOverrides,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Compare {
    /// A model trained from scratch on the evaluated domain.
    Scratch,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain {
            config,
            out_dir,
            task,
        } => commands::pretrain(&config, out_dir, &task),
        Command::Continue {
            config,
            step,
            checkpoint,
            out_dir,
            task,
        } => commands::continue_step(&config, step, checkpoint, out_dir, &task),
        Command::Sample {
            checkpoint,
            domain,
            mask_domain,
            masks,
            mask_spec,
            n,
            seed,
            out_dir,
        } => commands::sample(&commands::SampleArgs {
            checkpoint,
            domain,
            mask_domain,
            masks,
            mask_spec,
            n,
            seed,
            out_dir,
        }),
        Command::Verify {
            before,
            after,
            n_probes,
            seed,
        } => commands::verify(&before, &after, n_probes, seed),
        Command::Eval {
            checkpoint,
            domain,
            config,
            n,
            seed,
            compare,
            out,
            run_id,
            task,
        } => commands::eval(&commands::EvalArgs {
            checkpoint,
            domain,
            config,
            n,
            seed,
            compare_scratch: compare == Some(Compare::Scratch),
            out,
            run_id,
            task,
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let runtime = e
                .downcast_ref::<csg0_core::Error>()
                .is_some_and(|c| matches!(c, csg0_core::Error::NonFiniteGradient(_)));
            ExitCode::from(if runtime { 3 } else { 2 })
        }
    }
}
