use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trpts::config::RunConfig;
use trpts::pipeline::Pipeline;
use trpts::refine::PlacementMode;
use trpts::{Error, Result};

#[derive(Parser)]
#[command(
    name = "trpts",
    version,
    about = "Task-relevant parameter and token selection for ViT fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root shared by all stages.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing stage directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task A and task B splits.
    GenData(Common),
    /// Train the backbone on task A.
    Pretrain(Common),
    /// Estimate diagonal Fisher scores on task B.
    Score(Common),
    /// Pick task-relevant connections from the scores.
    Select {
        #[command(flatten)]
        common: Common,
        /// Percentage of scoped weights in the top set.
        #[arg(long)]
        top_m: Option<f64>,
        /// Connections per neuron in the least important block.
        #[arg(long)]
        c_min: Option<usize>,
    },
    /// Choose the token refining layers.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Token keep ratio.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<PlacementMode>,
        /// Comma-separated block indices for `--mode explicit`.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Masked fine-tuning on task B with token refinement.
    Finetune(Common),
    /// Accuracy of the fine-tuned model on task B.
    Eval(Common),
    /// Accuracy, trainable fraction and FLOPs summary.
    Report(Common),
    /// Component, placement and overlap studies.
    Ablate(Common),
}

fn parse_mode(s: &str) -> std::result::Result<PlacementMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    Ok(c)
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Select { common, .. } | Command::Plan { common, .. } => common,
            Command::GenData(c)
            | Command::Pretrain(c)
            | Command::Score(c)
            | Command::Finetune(c)
            | Command::Eval(c)
            | Command::Report(c)
            | Command::Ablate(c) => c,
        }
    }

    /// Applies subcommand flags on top of the loaded configuration.
    fn apply(&self, c: &mut RunConfig) {
        match self {
            Command::Select { top_m, c_min, .. } => {
                if let Some(m) = top_m {
                    c.selector.top_m_percent = *m;
                }
                if let Some(k) = c_min {
                    c.selector.c_min = *k;
                }
            }
            Command::Plan {
                rho, mode, layers, ..
            } => {
                if let Some(r) = rho {
                    c.refine.rho = *r;
                }
                if let Some(m) = mode {
                    c.refine.mode = *m;
                }
                if let Some(l) = layers {
                    c.refine.num_layers = l.len();
                    c.refine.layers = l.clone();
                }
            }
            _ => {}
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let mut config = load(common)?;
    cli.command.apply(&mut config);
    let p = Pipeline::new(config, &common.out, common.force)?;
    match cli.command {
        Command::GenData(_) => p.gen_data(),
        Command::Pretrain(_) => p.pretrain(),
        Command::Score(_) => p.score(),
        Command::Select { .. } => p.select(),
        Command::Plan { .. } => p.plan(),
        Command::Finetune(_) => p.finetune(),
        Command::Eval(_) => p.eval(),
        Command::Report(_) => p.report(),
        Command::Ablate(_) => p.ablate(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
