use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use shdempc::experiments::{plate_study, scaling_comparison};

use shdempc_cli::audit::{audit_dir, AuditReport};
use shdempc_cli::config::{Overrides, RunConfig};
use shdempc_cli::{plot, sinks, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "shdempc",
    version,
    about = "Social hierarchy-based distributed economic MPC on the suspended-plate benchmark"
)]
struct Cli {
    /// More log output (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one seed and write its CSVs.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Seed to run (default: the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every configured seed; one sub-directory per seed plus summary.csv.
    Study {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Iterations-to-settle of the parallel and hierarchy variants over N.
    Scaling {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated agent counts.
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        #[arg(long)]
        scaling_time_steps: Option<usize>,
    },
    /// Re-check the invariants of a run directory from its files.
    Audit { dir: PathBuf },
    /// Render SVG figures from the CSVs in a directory.
    Plot { dir: PathBuf },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn init_logging(cli: &Cli, cfg_level: Option<log::LevelFilter>) {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        let base = cfg_level.unwrap_or(log::LevelFilter::Warn);
        match cli.verbose {
            0 => base,
            1 => base.max(log::LevelFilter::Info),
            2 => base.max(log::LevelFilter::Debug),
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

fn report_audit(dir: &Path, report: &AuditReport) -> Result<(), CliError> {
    println!("audit of {}:", dir.display());
    print!("{report}");
    if report.ok() {
        Ok(())
    } else {
        Err(CliError::Audit(format!("{} violates a run invariant", dir.display())))
    }
}

/// Write one run, then audit the files and the in-run checks.
fn emit_run(dir: &Path, cfg: &RunConfig, m: &shdempc::coordinator::RunMetrics) -> Result<(), CliError> {
    sinks::write_run(dir, cfg, m)?;
    if cfg.output.plots && cfg.output.csv {
        plot::render_dir(dir)?;
    }
    println!(
        "{}: V {:.9} -> {:.9}, {} mutations, settled after sample {}, {} solves ({} unconverged, {} infeasible)",
        dir.display(),
        m.samples().first().map_or(f64::NAN, |s| s.v),
        m.samples().last().map_or(f64::NAN, |s| s.v),
        m.total_mutations,
        m.iterations_to_settle,
        m.solver_stats.solves,
        m.solver_stats.unconverged,
        m.solver_stats.infeasible,
    );
    if cfg.output.csv {
        report_audit(dir, &audit_dir(dir)?)?;
    }
    if !m.audit_failures.is_empty() || !m.rollout_failures.is_empty() {
        for f in &m.audit_failures {
            eprintln!("t={} p={} agent {}: {}", f.time_step, f.iteration, f.agent, f.violation);
        }
        for (agent, v) in &m.rollout_failures {
            eprintln!("rollout of agent {agent}: {v}");
        }
        return Err(CliError::Audit(format!(
            "{} constraint audit failures, {} rollout failures",
            m.audit_failures.len(),
            m.rollout_failures.len()
        )));
    }
    Ok(())
}

fn single_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.experiment.seeds = vec![seed];
    c
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run { overrides, seed } => {
            let cfg = overrides.resolve()?;
            init_logging(cli, Some(cfg.log_level.filter()));
            let seed = seed.unwrap_or(cfg.experiment.seeds[0]);
            let cfg = single_seed(&cfg, seed);
            info!("running seed {seed}");
            let m = cfg.experiment.run(seed)?;
            emit_run(&cfg.output.dir, &cfg, &m)
        }
        Command::Study { overrides } => {
            let cfg = overrides.resolve()?;
            init_logging(cli, Some(cfg.log_level.filter()));
            let report = plate_study(&cfg.experiment)?;
            let dir = &cfg.output.dir;
            sinks::ensure_dir(dir)?;
            sinks::write_config(dir, &cfg)?;
            sinks::write_summary(&dir.join(sinks::SUMMARY_FILE), &sinks::summary_rows(&report))?;
            let mut first_err = None;
            for (seed, m) in &report.runs {
                if let Err(e) = emit_run(&dir.join(format!("seed-{seed}")), &single_seed(&cfg, *seed), m) {
                    eprintln!("seed {seed}: {e}");
                    if matches!(e, CliError::Io { .. }) {
                        return Err(e);
                    }
                    first_err.get_or_insert(e);
                }
            }
            first_err.map_or(Ok(()), Err)
        }
        Command::Scaling {
            overrides,
            ns,
            scaling_time_steps,
        } => {
            let mut cfg = overrides.resolve()?;
            if let Some(ns) = ns {
                cfg.scaling.ns = ns.clone();
            }
            if let Some(t) = scaling_time_steps {
                cfg.scaling.time_steps = *t;
            }
            cfg.validate()?;
            init_logging(cli, Some(cfg.log_level.filter()));
            let mut base = cfg.experiment.clone();
            base.time_steps = cfg.scaling.time_steps;
            let rows = scaling_comparison(&base, &cfg.scaling.ns, &cfg.scaling.variants)?;
            let dir = &cfg.output.dir;
            sinks::ensure_dir(dir)?;
            sinks::write_config(dir, &cfg)?;
            sinks::write_scaling(dir, &rows, &base.seeds)?;
            if cfg.output.plots {
                plot::render_dir(dir)?;
            }
            for r in &rows {
                println!(
                    "N={:>3} {:<9} median {:>7.1} per seed {:?}",
                    r.n_agents,
                    r.variant.as_str(),
                    r.median_settle,
                    r.settle_per_seed
                );
            }
            Ok(())
        }
        Command::Audit { dir } => {
            init_logging(cli, None);
            report_audit(dir, &audit_dir(dir)?)
        }
        Command::Plot { dir } => {
            init_logging(cli, None);
            for path in plot::render_dir(dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Config { overrides } => {
            print!("{}", overrides.resolve()?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
