use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genrec::config::Config;
use genrec::pipeline::{self, PipelineError, Sweep, Workspace};

#[derive(Parser, Debug)]
#[command(name = "genrec", version, about = "Generative recommendation over quantized item IDs")]
struct Cli {
    /// Directory holding every artifact of the pipeline.
    #[arg(long, short = 'w', default_value = "work", global = true)]
    work_dir: PathBuf,
    /// `key = value` config file; defaults apply to absent keys.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for batch gradients and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a latent-factor synthetic dataset with modality features.
    Synth,
    /// Jointly train the graph encoder and the residual quantizer.
    TrainRqvae,
    /// Assign Rec-IDs from the trained quantizer.
    AssignIds,
    /// Train the sequence-to-sequence recommender.
    TrainRec,
    /// Write top-K recommendations.
    Recommend {
        /// Raw user ids; every user when omitted.
        #[arg(long = "user")]
        users: Vec<String>,
    },
    /// Test-split Recall@K / NDCG@K against the baselines.
    Evaluate,
    /// Per-user inference time over nested catalog sizes.
    Bench,
    /// Retrain under alternative settings and compare.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "pos,tokens,length,codebook")]
        sweep: Vec<Sweep>,
    },
}

fn resolve(cli: &Cli) -> Result<Config, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, PipelineError> {
    let cfg = resolve(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| PipelineError::Usage(e.to_string()))?;
    let ws = Workspace::new(&cli.work_dir)?;
    match &cli.command {
        Command::Synth => pipeline::synth(&ws, &cfg),
        Command::TrainRqvae => pipeline::train_rqvae(&ws, &cfg),
        Command::AssignIds => pipeline::assign_ids(&ws, &cfg),
        Command::TrainRec => pipeline::train_rec(&ws, &cfg),
        Command::Recommend { users } => pipeline::recommend(&ws, &cfg, users),
        Command::Evaluate => pipeline::evaluate(&ws, &cfg),
        Command::Bench => pipeline::bench(&ws, &cfg),
        Command::Ablate { sweep } => pipeline::ablate(&ws, &cfg, sweep),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
