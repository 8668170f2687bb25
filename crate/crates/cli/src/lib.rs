//! Command-line driver: configuration, run directories, stage commands and
//! report rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod render;
pub mod rundir;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Ctx, Inputs};
use crate::config::{parse_pairs, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "condensegan", version, about = "Condense a dataset into latent vectors of a frozen conditional GAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural shapes dataset and its splits.
    DatasetGen(Common),
    /// Train the conditional GAN and freeze its normalization statistics.
    GanPretrain(Common),
    /// Train classifiers and keep embedder snapshots binned by accuracy.
    PoolBuild(Common),
    /// Recover latents for real images by GAN inversion.
    Invert(Common),
    /// Optimize the latents against the frozen generator.
    Condense(Common),
    /// Compare gan-random, inversion, itgan and the real upper bound.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Train every `eval.archs` architecture on one latent set instead.
        #[arg(long)]
        cross_arch: bool,
    },
    /// Run the ablation studies and trend checks.
    Ablate(Common),
    /// Check aggregates and render plot-ready CSVs for a finished run.
    Report(Common),
    /// Run dataset-gen, gan-pretrain, pool-build, eval and report in one go.
    Pipeline(Common),
    /// Print every configuration key with its default.
    Keys,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run directory, or a name under $CONDENSEGAN_RUNS.
    #[arg(long, default_value = "default")]
    pub run: String,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable. Overrides win over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing stage directory.
    #[arg(long)]
    pub force: bool,
    /// Directory holding train/val/test.itgd.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator weights (ITGW).
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Snapshot pool directory.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Initial latents for condense (ITGZ).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Latents for cross-architecture evaluation (ITGZ).
    #[arg(long)]
    pub latents: Option<PathBuf>,
}

/// Builds the effective config: preset, then the run's stored config (or
/// `--config`), then `--set` pairs, then `--seed`.
pub fn resolve_config(common: &Common, run: &std::path::Path) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    let stored = run.join("config.txt");
    let base = common.config.clone().or_else(|| stored.exists().then_some(stored));
    if let Some(path) = base {
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::missing(&path, e))?;
        pairs.extend(parse_pairs(&text, &path.display().to_string())?);
    }
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    RunConfig::from_pairs(&pairs)
}

fn context(common: &Common) -> Result<Ctx> {
    let run = rundir::resolve_run(&common.run);
    let cfg = resolve_config(common, &run)?;
    std::fs::create_dir_all(&run).map_err(|e| CliError::Other(format!("{}: {e}", run.display())))?;
    let stored = run.join("config.txt");
    if !stored.exists() {
        std::fs::write(&stored, cfg.canonical()).map_err(|e| CliError::Other(format!("{}: {e}", stored.display())))?;
    }
    Ok(Ctx {
        run,
        cfg,
        inputs: Inputs {
            data: common.data.clone(),
            generator: common.generator.clone(),
            pool: common.pool.clone(),
            init: common.init.clone(),
            latents: common.latents.clone(),
        },
        force: common.force,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DatasetGen(c) => commands::dataset_gen(&context(&c)?),
        Command::GanPretrain(c) => commands::gan_pretrain(&context(&c)?),
        Command::PoolBuild(c) => commands::pool_build_cmd(&context(&c)?),
        Command::Invert(c) => commands::invert(&context(&c)?),
        Command::Condense(c) => commands::condense(&context(&c)?),
        Command::Eval { common, cross_arch } => {
            let ctx = context(&common)?;
            if cross_arch {
                commands::eval_cross(&ctx)
            } else {
                commands::eval(&ctx)
            }
        }
        Command::Ablate(c) => commands::ablate(&context(&c)?),
        Command::Report(c) => {
            let run = rundir::resolve_run(&c.run);
            let out = render::report_render(&run)?;
            for f in &out.files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Pipeline(c) => {
            let ctx = context(&c)?;
            commands::dataset_gen(&ctx)?;
            commands::gan_pretrain(&ctx)?;
            commands::pool_build_cmd(&ctx)?;
            commands::eval(&ctx)?;
            render::report_render(&ctx.run).map(|_| ())
        }
        Command::Keys => {
            print!("{}", RunConfig::describe());
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code,
/// printing a JSON error line to stderr on failure.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
