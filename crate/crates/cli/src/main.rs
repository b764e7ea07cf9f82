use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use translit_cli::{cmd_convert, cmd_eval, cmd_sweep, cmd_train, CliError, Overrides};

#[derive(Parser)]
#[command(name = "translit", version, about = "Cyrillic / Traditional Mongolian word transliteration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Where to write the trained model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to write the JSON-lines training report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert words read from standard input, one per line.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Print the Latin transcription instead of Traditional script.
        #[arg(long)]
        latin: bool,
    },
    /// Print WER/CER of a model on a corpus as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Train and evaluate every point of a config grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Where to write the CSV report (also printed to standard output).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            corpus,
            table,
            checkpoint,
            out,
            seed,
        } => cmd_train(
            &config,
            &Overrides {
                corpus,
                table,
                checkpoint,
                out,
                seed,
            },
        ),
        Command::Convert {
            checkpoint,
            table,
            beam,
            latin,
        } => cmd_convert(
            &checkpoint,
            table.as_deref(),
            beam.max(1),
            latin,
            BufReader::new(std::io::stdin().lock()),
            std::io::stdout().lock(),
            std::io::stderr().lock(),
        ),
        Command::Eval {
            checkpoint,
            corpus,
            table,
            beam,
        } => {
            let json = cmd_eval(&checkpoint, &corpus, table.as_deref(), beam.max(1))?;
            println!("{json}");
            Ok(())
        }
        Command::Sweep {
            config,
            corpus,
            table,
            out,
            seed,
        } => {
            let csv = cmd_sweep(
                &config,
                &Overrides {
                    corpus,
                    table,
                    checkpoint: None,
                    out,
                    seed,
                },
            )?;
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(csv.as_bytes());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("translit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
