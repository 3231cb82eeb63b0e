use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vmoba_cli::{cmd_analyze, cmd_bench, cmd_train_toy, cmd_verify, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "vmoba", version, about = "Block-sparse video attention: checks, benchmarks, analysis, toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Route equivalence, sparsity bounds, gradient check, partition bijectivity.
    Verify(Common),
    /// Dense vs sparse forward latency and FLOPs over a length sweep.
    Bench(Common),
    /// Block maps, query importance and concentration from VMTB Q/K files.
    Analyze(Common),
    /// Toy training runs, one per configured attention mode.
    TrainToy(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Worker thread cap; 1 gives bitwise reproducible output.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (Command::Verify(common) | Command::Bench(common) | Command::Analyze(common) | Command::TrainToy(common)) =
        &cli.command;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = RunConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    match cli.command {
        Command::Verify(_) => {
            let report = cmd_verify(&cfg, &out)?;
            for c in &report.checks {
                println!(
                    "{:<24} {} max_error={:e} tol={:e} cases={}",
                    c.name,
                    if c.passed { "ok  " } else { "FAIL" },
                    c.max_error,
                    c.tolerance,
                    c.cases
                );
            }
            Ok(report.passed)
        }
        Command::Bench(_) => {
            let report = cmd_bench(&cfg, &out)?;
            for r in &report.rows {
                println!(
                    "s={:<6} dense={:>9.3}ms vmoba={:>9.3}ms flops {} vs {}",
                    r.s, r.dense_ms, r.vmoba_ms, r.flops_dense, r.flops_vmoba
                );
            }
            if let (Some(d), Some(v)) = (report.dense_fit, report.vmoba_fit) {
                println!("quadratic a: dense={:e} vmoba={:e}", d.a, v.a);
            }
            Ok(true)
        }
        Command::Analyze(_) => {
            let report = cmd_analyze(&cfg, &out)?;
            for h in &report.heads {
                println!(
                    "head {} diagonal={:.4} (uniform {:.4}) importance={:.4}",
                    h.head, h.diagonal_mass, report.uniform_baseline, h.mean_importance
                );
            }
            Ok(true)
        }
        Command::TrainToy(_) => {
            let outcome = cmd_train_toy(&cfg, &out)?;
            for s in &outcome.summaries {
                match s.diverged_at {
                    Some(step) => println!("{}: diverged at step {step}", s.label),
                    None => println!(
                        "{}: loss {:.5} -> {:.5}, sparsity {:.3}",
                        s.label,
                        s.initial_loss.unwrap_or(f64::NAN),
                        s.final_loss.unwrap_or(f64::NAN),
                        s.mean_sparsity
                    ),
                }
            }
            Ok(!outcome.diverged())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
