use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use daefusion_cli::bench::{BENCH_HEADER, SLOPE_HEADER};
use daefusion_cli::commands::{gradcheck_table, write_rows, ABLATION_HEADER};
use daefusion_cli::{commands, run_ablation, run_bench, CliError, Kernel, Precision, RunConfig};
use daefusion_core::verify::Scope;

#[derive(Parser)]
#[command(name = "daefusion", version, about = "Dual-attention segmentation transformer toolkit")]
struct Cli {
    /// Flat JSON configuration (model, training and command keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed; falls back to the config, then DAEFUSION_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Model,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Time attention kernels over a token-count sweep.
    BenchAttn {
        #[arg(long, value_delimiter = ',')]
        kernels: Option<Vec<Kernel>>,
        /// Token counts, ascending.
        #[arg(long = "n", value_delimiter = ',')]
        n_sweep: Option<Vec<usize>>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_enum)]
        precision: Option<Precision>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Train on the synthetic task and write checkpoint, logs and metrics.
    TrainToy,
    /// Train every variant along one ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        kind: commands::AblationKind,
    },
    /// Print the exact learnable parameter count and its breakdown.
    ParamCount,
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.resolve_seed(cli.seed, std::env::var("DAEFUSION_SEED").ok().as_deref())?;
    if cli.threads == 0 {
        return Err(CliError::Config(vec!["--threads must be at least 1".into()]));
    }

    match &cli.command {
        Command::BenchAttn { kernels, n_sweep, d, reps, precision } => {
            let o = &mut cfg.options;
            o.kernels = kernels.clone().unwrap_or_else(|| o.kernels.clone());
            o.n_sweep = n_sweep.clone().unwrap_or_else(|| o.n_sweep.clone());
            o.d = d.unwrap_or(o.d);
            o.reps = reps.unwrap_or(o.reps);
            o.precision = precision.unwrap_or(o.precision);
            let problems = o.problems();
            if !problems.is_empty() {
                return Err(CliError::Config(problems));
            }
            let dir = out_dir(cli, "bench");
            commands::ensure_dir(&dir)?;
            let report = run_bench(&o.kernels, &o.n_sweep, o.d, o.reps, cfg.model.seed, o.precision)?;
            write_rows(&dir.join("bench_attn.csv"), &BENCH_HEADER, &report.rows)?;
            let slopes: Vec<(&str, f64)> = report.slopes.iter().map(|(k, s)| (k.name(), *s)).collect();
            write_rows(&dir.join("bench_slopes.csv"), &SLOPE_HEADER, &slopes)?;
            for r in &report.rows {
                println!("{:<10} n={:<6} d={:<4} median={:.6}s peak_bytes={}", r.kernel, r.n, r.d, r.median_seconds, r.peak_bytes);
            }
            for (k, s) in slopes {
                println!("slope {k}: {s:.3}");
            }
        }
        Command::Gradcheck { scope, corrupt } => {
            let scopes: Vec<Scope> = match scope {
                ScopeArg::Op => vec![Scope::Op],
                ScopeArg::Block => vec![Scope::Block],
                ScopeArg::Model => vec![Scope::Model],
                ScopeArg::All => Scope::ALL.to_vec(),
            };
            let results = commands::gradcheck(&scopes, cfg.model.seed, *corrupt)?;
            print!("{}", gradcheck_table(&results));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::Verification(failed.join(", ")));
            }
        }
        Command::TrainToy => {
            let dir = out_dir(cli, "train_toy");
            let s = commands::train_toy(&cfg, &dir)?;
            println!(
                "steps {} final_loss {:.4} dsc {:.4} params {} -> {}",
                s.log.len(),
                s.final_loss(),
                s.report.dsc(),
                s.param_count,
                dir.display()
            );
        }
        Command::Ablate { kind } => {
            let dir = out_dir(cli, "ablate");
            commands::ensure_dir(&dir)?;
            let rows = run_ablation(*kind, &cfg, cli.threads)?;
            let path = dir.join(format!("ablation_{}.csv", kind.name()));
            write_rows(&path, &ABLATION_HEADER, &rows)?;
            for r in &rows {
                println!("{:<18} params {:>8} final_loss {:.4} dsc {:.4}", r.variant, r.param_count, r.final_loss, r.dsc);
            }
            println!("-> {}", path.display());
        }
        Command::ParamCount => {
            let (_, text) = commands::param_count_report(&cfg.model)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
