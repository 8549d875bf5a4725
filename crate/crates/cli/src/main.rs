use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use maos_cli::{parse_embedding, run_evaluate, run_gradcheck, run_sweep, run_synth, run_train, run_translate, CliError, CliResult, Direction, RunConfig, SweepAxis, DEFAULT_TEST_PAIRS};

#[derive(Parser)]
#[command(name = "maos", version, about = "One-shot image translation: corpus synthesis, training, translation, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Xy,
    Yx,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Alpha,
    #[value(name = "n_threads")]
    NThreads,
    #[value(name = "part_size")]
    PartSize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with oracle-paired test images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TEST_PAIRS)]
        n_test: usize,
    },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Translate every image in a directory with a trained generator.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "xy")]
        direction: DirectionArg,
    },
    /// FID, optional paired SSIM and diversity of a generated set.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        paired_oracle: Option<PathBuf>,
        /// downsample[:K], random:DIM:SEED or external[:FILE]
        #[arg(long, default_value = "downsample:8")]
        embedding: String,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// One training run per value of a config axis, plus a summary CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn json(value: &impl serde::Serialize) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth { out, n, size, seed, n_test } => {
            let m = run_synth(&out, n, size, seed, n_test)?;
            println!("wrote {} images to {}", m.images.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            if let Some(report) = run_train(&cfg)? {
                println!("{}", json(&report)?);
            }
        }
        Command::Translate { ckpt, input, out, direction } => {
            let dir = match direction {
                DirectionArg::Xy => Direction::Xy,
                DirectionArg::Yx => Direction::Yx,
            };
            let written = run_translate(&ckpt, &input, &out, dir)?;
            println!("translated {} images into {}", written.len(), out.display());
        }
        Command::Evaluate { generated, reference, paired_oracle, embedding, report } => {
            let emb = parse_embedding(&embedding)?;
            let r = run_evaluate(&generated, &reference, paired_oracle.as_deref(), &emb)?;
            let text = json(&r)?;
            println!("{text}");
            if let Some(path) = report {
                std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Sweep { config, axis, values } => {
            let cfg = RunConfig::load(&config)?;
            let axis = match axis {
                AxisArg::Alpha => SweepAxis::Alpha,
                AxisArg::NThreads => SweepAxis::NThreads,
                AxisArg::PartSize => SweepAxis::PartSize,
            };
            let summary = run_sweep(&cfg, axis, &values)?;
            print!("{}", summary.csv);
            let failed = summary.rows.iter().filter(|r| r.outcome.is_err()).count();
            if failed > 0 {
                return Err(CliError::Sweep { failed, total: summary.rows.len() });
            }
        }
        Command::Gradcheck { seed } => {
            run_gradcheck(seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.to_exit()
        }
    }
}
