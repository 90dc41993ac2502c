use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pod_cli::{
    cmd_classify, cmd_evaluate, cmd_gradcheck, cmd_pipeline, cmd_preprocess, cmd_pretrain, cmd_sweep, cmd_synth,
    CliResult, ExperimentConfig, Outcome, Overrides, SweepKind,
};

#[derive(Parser)]
#[command(name = "pod", version, about = "Multi-modal POD prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config file and POD_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort.
    Synth(Common),
    /// Run the preprocessing chain on the raw cohort.
    Preprocess(Common),
    /// Pretrain the representation model.
    Pretrain(Common),
    /// Fit the downstream classifiers.
    Classify(Common),
    /// Score the test split and export embeddings.
    Evaluate(Common),
    /// Run every stage in order.
    Pipeline(Common),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(Common),
    /// Rerun the experiment over a grid of TrendLoss weights or periods.
    Sweep {
        which: Which,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Lambda,
    Period,
}

fn run(command: Command) -> CliResult<Outcome> {
    let (common, which) = match &command {
        Command::Sweep { which, common } => (common.clone(), Some(*which)),
        Command::Synth(c)
        | Command::Preprocess(c)
        | Command::Pretrain(c)
        | Command::Classify(c)
        | Command::Evaluate(c)
        | Command::Pipeline(c)
        | Command::Gradcheck(c) => (c.clone(), None),
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out,
    };
    let cfg = ExperimentConfig::resolve(common.config.as_deref(), &overrides)?;
    match command {
        Command::Synth(_) => cmd_synth(&cfg),
        Command::Preprocess(_) => cmd_preprocess(&cfg),
        Command::Pretrain(_) => cmd_pretrain(&cfg),
        Command::Classify(_) => cmd_classify(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Pipeline(_) => cmd_pipeline(&cfg),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
        Command::Sweep { .. } => cmd_sweep(
            &cfg,
            match which.expect("sweep kind") {
                Which::Lambda => SweepKind::Lambda,
                Which::Period => SweepKind::Period,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.render_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
