use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedwba::ablation::{run_axis, Axis, ABLATION_CSV_COLUMNS};
use fedwba::artifacts::run_to_dir;
use fedwba::config::RunConfig;
use fedwba::par::with_workers;
use fedwba::validation::run_all;
use fedwba::Exec;

#[derive(Parser, Debug)]
#[command(name = "fedwba", version, about = "Personalized Bayesian federated learning with SVGD clients and Wasserstein barycenter aggregation")]
struct Cli {
    /// Override the run seed (for `ablate`, replaces the seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory. Takes precedence over FEDWBA_OUT and `run.out_dir`.
    #[arg(long, global = true, env = "FEDWBA_OUT")]
    out_dir: Option<PathBuf>,

    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one federated experiment and write its artifacts.
    Run { config: PathBuf },
    /// Run the built-in validation suites.
    Validate {
        #[arg(long, hide = true)]
        kl_eta: Option<f64>,
    },
    /// Sweep one hyperparameter axis and write a summary CSV.
    Ablate { axis: String, config: PathBuf },
}

/// Bad input from the user: exit code 2.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    UsageError(e.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if cli.print_defaults {
        print!("{}", RunConfig::default().to_toml_string()?);
        return Ok(ExitCode::SUCCESS);
    }
    let Some(command) = &cli.command else {
        return Err(usage(anyhow::anyhow!(
            "no subcommand given; try `fedwba --help`"
        )));
    };
    match command {
        Command::Run { config } => cmd_run(&cli, config),
        Command::Validate { kl_eta } => cmd_validate(&cli, *kl_eta),
        Command::Ablate { axis, config } => cmd_ablate(&cli, axis, config),
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(usage)?;
    if let Some(seed) = cli.seed {
        cfg.federation.seed = seed;
        cfg.ablation.seeds = vec![seed];
    }
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig, fallback: String) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| cfg.run.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(fallback))
}

fn cmd_run(cli: &Cli, path: &Path) -> Result<ExitCode> {
    let cfg = load_config(cli, path)?;
    let dir = out_dir(cli, &cfg, format!("seed{}", cfg.federation.seed));
    let out = with_workers(cfg.run.workers, || run_to_dir(&cfg, &dir, Exec::Parallel))
        .with_context(|| format!("run from {}", path.display()))?;
    for r in &out.outcome.reports {
        println!(
            "round {:>4}  acc {:.4}  ece {:.4}  w2 {:.4}  bytes {}",
            r.round, r.mean_accuracy, r.mean_ece, r.mean_w2_client_to_global, r.comm_bytes
        );
    }
    let s = &out.summary;
    println!(
        "final mean acc {:.4}  ece {:.4}  rounds {}  comm bytes {}  -> {}",
        s.final_mean_acc,
        s.final_mean_ece,
        s.rounds,
        s.comm_bytes_total,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(cli: &Cli, kl_eta: Option<f64>) -> Result<ExitCode> {
    let workers = cli.workers.unwrap_or(0);
    let reports = with_workers(workers, || run_all(kl_eta))?;
    let mut failed = Vec::new();
    for r in &reports {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:<20} {}  ({:.0} ms)", r.name, r.statistic, r.elapsed_ms);
        if !r.passed {
            failed.push(r);
        }
    }
    if failed.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for r in failed {
        eprintln!("suite {} failed: {}", r.name, r.statistic);
    }
    Ok(ExitCode::from(1))
}

fn cmd_ablate(cli: &Cli, axis: &str, path: &Path) -> Result<ExitCode> {
    let axis: Axis = axis.parse().map_err(usage)?;
    let cfg = load_config(cli, path)?;
    let dir = out_dir(cli, &cfg, format!("ablate-{axis}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join(format!("ablation_{axis}.csv"));
    let file = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{ABLATION_CSV_COLUMNS}")?;
    println!("{ABLATION_CSV_COLUMNS}");
    with_workers(cfg.run.workers, || {
        run_axis(axis, &cfg, Exec::Parallel, |row| {
            let _ = row.write_csv(std::io::stdout());
            row.write_csv(&mut csv)
                .and_then(|_| csv.flush())
                .map_err(|e| fedwba::Error::Io {
                    path: csv_path.clone(),
                    source: e,
                })
        })
    })?;
    eprintln!("wrote {}", csv_path.display());
    Ok(ExitCode::SUCCESS)
}
