use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use nas_cli::{
    cmd_derive, cmd_eval, cmd_export_dot, cmd_gen_data, cmd_pipeline, cmd_search, cmd_train, exit_code, DeriveSource,
    ExperimentConfig, Inputs, Run, SEARCH_CHECKPOINT,
};

/// Cell search with strength-proportional channel allocation.
///
/// Any configuration key can be set from the command line as
/// `--section.key value` (for example `--search.space S7`).
#[derive(Parser, Debug)]
#[command(name = "acanas", version)]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `$ACANAS_RUN_ROOT/<run.name>` (root `runs`).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search the super-net and write its checkpoint, trace and genotype.
    Search,
    /// Derive the genotype and channel allocation.
    Derive {
        /// Search checkpoint (default: the run's search.ckpt).
        #[arg(long, conflicts_with = "genotype")]
        checkpoint: Option<PathBuf>,
        /// Re-allocate an existing genotype file instead.
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Train the derived target network.
    Train {
        #[command(flatten)]
        inputs: InputArgs,
    },
    /// Evaluate a trained target network on the validation part.
    Eval {
        #[command(flatten)]
        inputs: InputArgs,
        /// Target checkpoint (default: the run's target.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Search, derive, train and export in one go.
    Pipeline,
    /// Write the derived cells as Graphviz files.
    ExportDot {
        #[command(flatten)]
        inputs: InputArgs,
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured dataset in the raw format.
    GenData {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Print the resolved configuration.
    Config,
}

#[derive(clap::Args, Debug)]
struct InputArgs {
    /// Genotype file (default: the run's genotype.txt).
    #[arg(long)]
    genotype: Option<PathBuf>,
    /// Allocation file (default: the run's allocation.txt).
    #[arg(long)]
    allocation: Option<PathBuf>,
}

impl From<InputArgs> for Inputs {
    fn from(a: InputArgs) -> Self {
        Inputs {
            genotype: a.genotype,
            allocation: a.allocation,
        }
    }
}

type Overrides = Vec<(String, String)>;

/// Pulls `--section.key value` and `--section.key=value` out of the
/// arguments; everything else is left for clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline.or_else(|| it.next()) {
            Some(v) => v,
            None => bail!("--{key} needs a value"),
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn run(cli: Cli, mut overrides: Overrides) -> Result<()> {
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let config = ExperimentConfig::resolve(cli.config.as_deref(), &overrides)?;
    let dir = nas_cli::config::run_dir(cli.run_dir.as_deref(), &config);
    let run = Run::new(config, dir);
    match cli.command {
        Command::Search => {
            let s = cmd_search(&run)?;
            println!(
                "search done: val_acc {:.4}, skip_fraction {:.3}, run {}",
                s.final_val_acc,
                s.skip_fraction,
                run.dir.display()
            );
        }
        Command::Derive { checkpoint, genotype } => {
            let source = match genotype {
                Some(g) => DeriveSource::Genotype(g),
                None => DeriveSource::Checkpoint(checkpoint.unwrap_or_else(|| run.path(SEARCH_CHECKPOINT))),
            };
            let (_, a) = cmd_derive(&run, &source)?;
            println!("derived genotype and {} allocation in {}", a.mode, run.dir.display());
        }
        Command::Train { inputs } => {
            let m = cmd_train(&run, &inputs.into())?;
            print!("{}", m.to_text());
        }
        Command::Eval { inputs, checkpoint } => {
            let m = cmd_eval(&run, &inputs.into(), checkpoint.as_deref())?;
            print!("{}", m.to_text());
        }
        Command::Pipeline => {
            let s = cmd_pipeline(&run)?;
            print!("{}", s.metrics.to_text());
        }
        Command::ExportDot { inputs, out } => {
            let out = out.unwrap_or_else(|| run.dir.clone());
            for p in cmd_export_dot(&run, &inputs.into(), &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::GenData { images, labels } => {
            let d = cmd_gen_data(&run, &images, &labels)?;
            println!("wrote {} samples ({} classes)", d.len(), d.classes);
        }
        Command::Config => print!("{}", run.config.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, ov) = split_overrides(strings(&[
            "acanas",
            "--run-dir",
            "a.b",
            "search",
            "--search.space",
            "S",
            "--eval.epochs=3",
            "--seed",
            "4",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["acanas", "--run-dir", "a.b", "search", "--seed", "4"]));
        assert_eq!(
            ov,
            vec![("search.space".into(), "S".into()), ("eval.epochs".into(), "3".into())]
        );
        assert!(split_overrides(strings(&["acanas", "--search.space"])).is_err());
    }
}
