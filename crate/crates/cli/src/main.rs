//! `fedbat` command-line runner.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 for
//! runtime failures (missing data, IO, diverging training).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbat_core::evaluation::MetricRow;
use fedbat_core::experiment::{
    export_checkpoint_embeddings, run_sweep, Experiment, ExperimentConfig, RunManifest, HEADLINE_WINDOW,
};
use fedbat_core::federation::checkpoint;

#[derive(Debug, Parser)]
#[command(name = "fedbat", version, about = "Federated adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        /// Config file, or a preset name such as `mnist-fedbat`.
        config: String,
        /// Override a config key, e.g. `--set train.rounds=20`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint instead of the initial model.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Do not print per-round metrics.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run the FedBAT variant once per robustness ratio.
    Sweep {
        config: String,
        /// Comma-separated ratios, e.g. `0,1,5,10`.
        #[arg(long, value_delimiter = ',', required = true)]
        rho: Vec<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Write clean and adversarial embeddings of the test split to CSV.
    ExportEmbeddings { checkpoint: PathBuf, out: PathBuf },
}

fn load_config(source: &str, overrides: &[String]) -> fedbat_core::Result<ExperimentConfig> {
    let path = Path::new(source);
    if !path.exists() && !source.contains(['/', '.']) {
        return ExperimentConfig::parse(&format!("preset = \"{source}\"\n"), overrides);
    }
    ExperimentConfig::from_file(path, overrides)
}

fn print_row(prefix: &str, row: &MetricRow) {
    let robust: Vec<String> = row.robust.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    eprintln!(
        "{prefix}round {:>4}  loss {:.4}  clean {:.4}  {}",
        row.round,
        row.mean_loss,
        row.clean_acc,
        robust.join("  ")
    );
}

fn print_headline(m: &RunManifest) {
    let h = m.headline(HEADLINE_WINDOW);
    let robust: Vec<String> = h.robust.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!(
        "{} rounds {:?}: clean={:.4} {} mean_robust={:.4}",
        m.variant,
        h.rounds,
        h.clean_acc,
        robust.join(" "),
        h.mean_robust()
    );
}

fn run(cli: Cli) -> fedbat_core::Result<()> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            resume,
            quiet,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let start = resume.map(checkpoint::load).transpose()?.map(|c| c.server);
            let exp = Experiment::prepare(&cfg)?;
            let m = exp.run_and_write(start, |row| {
                if !quiet {
                    print_row("", row);
                }
            })?;
            print_headline(&m);
            eprintln!("wrote {}", cfg.output.dir.display());
        }
        Command::Sweep {
            config,
            rho,
            overrides,
            quiet,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let (manifests, path) = run_sweep(&cfg, &rho, |r, row| {
                if !quiet {
                    print_row(&format!("rho {r}: "), row);
                }
            })?;
            for (r, m) in rho.iter().zip(&manifests) {
                print!("rho={r} ");
                print_headline(m);
            }
            eprintln!("wrote {}", path.display());
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            let dump = export_checkpoint_embeddings(&checkpoint, &out)?;
            eprintln!("wrote {} rows to {}", dump.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
