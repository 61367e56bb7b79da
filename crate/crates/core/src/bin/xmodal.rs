use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmodal::baselines::BaselineKind;
use xmodal::config::{load_config, RunConfig};
use xmodal::pipeline::{baseline_stage, eval_stage, gen_stage, run_experiment, train_stage, RunPaths};
use xmodal::Modality;

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Text-bridged audio distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file in `section.key = value` format. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides world.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write its embedding files.
    Gen(Common),
    /// Train the student adapter.
    Train(Common),
    /// Evaluate trained params from the output directory.
    Eval(Common),
    /// Evaluate one baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_kind)]
        kind: BaselineKind,
    },
    /// Run every stage and print the summary.
    Run(Common),
}

fn parse_kind(s: &str) -> Result<BaselineKind, String> {
    BaselineKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = BaselineKind::ALL.iter().map(|k| k.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn resolve(common: &Common) -> xmodal::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> xmodal::Result<()> {
    match cli.command {
        Command::Gen(common) => {
            let config = resolve(&common)?;
            gen_stage(&config)?;
            let paths = RunPaths::new(&config.output_dir);
            for m in Modality::ALL {
                println!("{}", paths.world_file(m).display());
            }
        }
        Command::Train(common) => {
            let config = resolve(&common)?;
            let report = train_stage(&config)?;
            println!("steps={}", report.steps);
            if let Some(loss) = report.loss_curve.last() {
                println!("final_loss={loss:.6}");
            }
        }
        Command::Eval(common) => {
            for r in eval_stage(&resolve(&common)?)? {
                println!("{}", r.to_record());
            }
        }
        Command::Baseline { common, kind } => {
            print!("{}", baseline_stage(&resolve(&common)?, kind)?.to_record());
        }
        Command::Run(common) => {
            print!("{}", run_experiment(&resolve(&common)?)?.render());
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
