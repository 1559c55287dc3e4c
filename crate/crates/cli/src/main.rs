use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cuedgen::generator::StrategyTag;
use cuedgen::pipeline::{
    cmd_evaluate, cmd_fit_pca, cmd_generate, cmd_plot, cmd_report, cmd_synth_data, cmd_train, cmd_train_acsr, run_all,
    EvalSource, ExperimentConfig, Layout, Phase,
};
use cuedgen::Error;

#[derive(Parser)]
#[command(name = "cuedgen", version, about = "Cued speech gesture generation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply to absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; falls back to the config's `output_dir`, then $CUEDGEN_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Av,
    Cs,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    S1,
    S2,
    S3,
}

impl From<StrategyArg> for StrategyTag {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::S1 => StrategyTag::S1Scratch,
            StrategyArg::S2 => StrategyTag::S2WarmStart,
            StrategyArg::S3 => StrategyTag::S3FrozenEncoder,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the audiovisual and cued-speech corpora.
    SynthData,
    /// Fit the landmark PCA models and write feature bundles.
    FitPca,
    /// Train the generator.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Defaults to the config's strategy.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Free-running generation for cued-speech utterances.
    Generate {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Utterance ids; every utterance when absent.
        #[arg(long, num_args = 0..)]
        ids: Option<Vec<String>>,
    },
    /// Train the recognizer on oracle features.
    TrainAcsr,
    /// Score generated (or, with --oracle, ground-truth) test features.
    Evaluate {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, conflicts_with = "oracle")]
        finetune_last_layer: bool,
        #[arg(long)]
        oracle: bool,
    },
    /// Write overlay and attention SVGs.
    Plot {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Utterance ids; the test split when absent.
        #[arg(long, num_args = 1..)]
        ids: Option<Vec<String>>,
    },
    /// Median accuracies over every evaluated seed.
    Report,
    /// Every stage for the given seeds and strategies.
    Run {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["s1", "s3"])]
        strategies: Vec<StrategyArg>,
    },
}

fn run(cli: Cli) -> cuedgen::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    let layout = Layout::resolve(cli.common.out.as_deref(), &cfg)?;
    let force = cli.common.force;
    let tag = |cfg: &mut ExperimentConfig, s: Option<StrategyArg>| -> StrategyTag {
        if let Some(s) = s {
            cfg.strategy = s.into();
        }
        cfg.strategy
    };
    match cli.command {
        Command::SynthData => cmd_synth_data(&layout, &cfg, force),
        Command::FitPca => cmd_fit_pca(&layout, &cfg, force),
        Command::TrainAcsr => cmd_train_acsr(&layout, &cfg, force),
        Command::Train { phase, strategy } => {
            let phase = match phase {
                PhaseArg::Av => Phase::Av,
                PhaseArg::Cs => Phase::Cs(tag(&mut cfg, strategy)),
            };
            cmd_train(&layout, &cfg, phase, force)
        }
        Command::Generate { strategy, ids } => {
            let t = tag(&mut cfg, strategy);
            cmd_generate(&layout, &cfg, t, ids.as_deref(), force)
        }
        Command::Evaluate {
            strategy,
            finetune_last_layer,
            oracle,
        } => {
            let source = if oracle { EvalSource::Oracle } else { EvalSource::Generated(tag(&mut cfg, strategy)) };
            let r = cmd_evaluate(&layout, &cfg, source, finetune_last_layer, force)?;
            println!("{} acc {:.2}% (N={} D={} S={} I={})", r.source, 100.0 * r.acc, r.n, r.d, r.s, r.i);
            Ok(())
        }
        Command::Plot { strategy, ids } => {
            let t = tag(&mut cfg, strategy);
            cmd_plot(&layout, &cfg, t, ids.as_deref(), force)
        }
        Command::Report => print_report(cmd_report(&layout, &cfg, force)?),
        Command::Run { seeds, strategies } => {
            let tags: Vec<StrategyTag> = strategies.into_iter().map(Into::into).collect();
            print_report(run_all(&layout, &cfg, &seeds, &tags, force)?)
        }
    }
}

fn print_report(r: cuedgen::pipeline::ExperimentReport) -> cuedgen::Result<()> {
    for row in &r.rows {
        let ft = if row.finetune_last_layer { " +ft" } else { "" };
        println!("{}{ft}: median {:.2}% over {} seed(s)", row.source, 100.0 * row.median, row.per_seed.len());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
