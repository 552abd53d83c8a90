use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixstyle_cli::{ConfigFile, Overrides, SeedTarget, cmd_ablate, cmd_diag, cmd_gen, cmd_train};

#[derive(Parser)]
#[command(name = "mixstyle", version, about = "MixStyle training, ablation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-domain benchmark.
    Gen(Common),
    /// Train one model and print its report as JSON.
    Train(Common),
    /// Run the configured ablation and print the comparison CSV.
    Ablate(Common),
    /// Project per-slot style statistics and features of a checkpoint.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (for `gen`, the dataset directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "target-domain")]
    target_domain: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Dataset directory, overriding `dataset.dir`.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self, seed_target: SeedTarget) -> mixstyle_core::Result<ConfigFile> {
        let overrides = Overrides {
            seed: self.seed,
            target_domain: self.target_domain,
            data_dir: self.data.clone(),
        };
        ConfigFile::load(self.config.as_deref(), &overrides, seed_target)
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn run(cli: Cli) -> mixstyle_core::Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = c.load(SeedTarget::Dataset)?;
            let out = c.out.clone().unwrap_or_else(|| cfg.dataset.dir.clone());
            let manifest = cmd_gen(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train(c) => {
            let cfg = c.load(SeedTarget::Train)?;
            let (json, secs) = cmd_train(&cfg, &c.out())?;
            print!("{json}");
            eprintln!("trained in {secs:.1}s");
        }
        Command::Ablate(c) => {
            let cfg = c.load(SeedTarget::Train)?;
            print!("{}", cmd_ablate(&cfg, &c.out(), c.jobs)?);
        }
        Command::Diag { common, checkpoint } => {
            let cfg = common.load(SeedTarget::Train)?;
            for path in cmd_diag(&cfg, &checkpoint, &common.out())? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
