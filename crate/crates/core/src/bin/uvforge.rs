use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uvforge::pipeline::{self, BakeMode, Outcome, Overrides};
use uvforge::trainer::{Ablation, StepLog};
use uvforge::Result;

#[derive(Parser)]
#[command(name = "uvforge", version, about = "Multiview-to-UV texture synthesis at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Leave wall-clock timings out of the artifacts.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// Output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Bake UV and view geometry maps.
    BakeGeometry(Common),
    /// Bake textures of the held-out scenes.
    BakeTexture {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "backproject")]
        mode: BakeMode,
        /// Checkpoint for `--mode model`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Train the configured arm.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train every ablation arm under the same seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Check every manifest below the output root.
    Verify(Common),
}

fn progress(arm: Ablation, e: &StepLog) {
    if (e.step + 1) % 100 == 0 {
        eprintln!("[{}] step {} loss {:.6}", arm.name(), e.step + 1, e.loss);
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let common = match &cli.command {
        Command::BakeGeometry(c) | Command::Verify(c) => c,
        Command::BakeTexture { common, .. }
        | Command::Train { common, .. }
        | Command::Ablate { common, .. }
        | Command::Eval { common, .. } => common,
    };
    let cfg = pipeline::resolve_config(
        &common.config,
        &Overrides {
            seed: common.seed,
            deterministic: common.deterministic,
            threads: common.threads,
            out: common.out.clone(),
        },
    )?;
    if let Some(n) = cfg.threads {
        uvforge::par::init_threads(n);
    }
    match &cli.command {
        Command::BakeGeometry(_) => pipeline::bake_geometry(&cfg),
        Command::BakeTexture { mode, ckpt, .. } => pipeline::bake_texture(&cfg, *mode, ckpt.as_deref()),
        Command::Train { resume, .. } => pipeline::train(&cfg, *resume, progress),
        Command::Ablate { resume, .. } => pipeline::ablate(&cfg, *resume, progress),
        Command::Eval { ckpt, .. } => pipeline::eval(&cfg, ckpt.as_deref()),
        Command::Verify(_) => pipeline::verify(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            print!("{}", out.report.to_text());
            println!("artifacts: {}", out.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
