use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sparsemod_cli::{commands, sweep};

#[derive(Parser)]
#[command(name = "sparsemod", version, about = "Sparse-data training for modular addition and LWE secret recovery")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a sparsity PDF.
    PdfTable {
        /// default, uni or inv_sqrt
        kind: String,
        n_terms: usize,
        q: u64,
        #[arg(long)]
        json: bool,
    },
    /// KL divergence of each named PDF from the default one.
    Kl {
        n_terms: usize,
        q: u64,
        #[arg(long)]
        json: bool,
    },
    /// Generate and store the training set of an experiment.
    GenData {
        config: PathBuf,
        /// Defaults to `<output_dir>/data.smds`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a `a_1 … a_N ; label` text export.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Train a model (or run the curriculum baseline).
    Train {
        config: PathBuf,
        /// Use a dataset written by gen-data instead of regenerating it.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from `<output_dir>/checkpoint.smck`.
        #[arg(long)]
        resume: bool,
    },
    /// Re-evaluate a checkpoint on the experiment's held-out sets.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// LWE secret recovery.
    Attack { config: PathBuf },
    /// Run every configuration of one experiment grid.
    Sweep {
        #[arg(long)]
        table: sweep::Table,
        /// Experiment whose settings fill everything the table does not vary.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        dry_run: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write raw `(x', y')` outputs on the test set as CSV.
    DumpPredictions {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::PdfTable { kind, n_terms, q, json } => commands::pdf_table(&kind, n_terms, q, json),
        Command::Kl { n_terms, q, json } => commands::kl(n_terms, q, json),
        Command::GenData { config, out, text } => commands::gen_data(&config, out, text),
        Command::Train { config, data, resume } => commands::train(&config, data, resume),
        Command::Eval { config, checkpoint } => commands::eval(&config, checkpoint),
        Command::Attack { config } => commands::attack(&config),
        Command::Sweep {
            table,
            base,
            dry_run,
            jobs,
        } => sweep::run(table, &base, dry_run, jobs),
        Command::DumpPredictions {
            config,
            checkpoint,
            out,
            limit,
        } => commands::dump_predictions(&config, checkpoint, out, limit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
