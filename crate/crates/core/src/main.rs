use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asuflex::agents::{save_trajectory, Arch, TrajectoryRow};
use asuflex::harness::{self, HarnessError, RunConfig, CONFIG_HELP};
use asuflex::plant::ManipulatedVars;
use asuflex::sysid;
use clap::{Parser, Subcommand};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "asuflex", version, about = "Demand-response control of an air separation unit")]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run step tests on the plant, fit and validate the linear model.
    Sysid,
    /// Train DDPG for every configured seed.
    Train {
        /// `direct` or `hier`; overrides the config.
        #[arg(long)]
        arch: Option<Arch>,
    },
    /// Roll out a saved checkpoint on the evaluation day.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Directory for trajectories and the report; defaults to the
        /// checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay an MV script (CSV: n_mac,xi_tur,xi_top,f_drain) open loop.
    Simulate {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge per-seed learning curves into one CSV.
    ExportCurves {
        /// Run root; defaults to the configured output directory.
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as JSON.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, HarnessError::Config(_)) {
                eprintln!("\n{CONFIG_HELP}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Config => {
            println!("{}", cfg.to_json());
        }
        Command::Sysid => {
            let seed = cfg.seeds[0];
            let (model, _, report) = sysid::identify(&cfg.plant(), cfg.episode.dt, &cfg.sysid, seed)?;
            let nrmse = report.nrmse.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(", ");
            println!("nrmse per output ({}): {nrmse}", sysid::OUTPUT_NAMES.join(", "));
            if !report.pass {
                return Err(HarnessError::Sysid(sysid::SysidError::ValidationFailed(report.nrmse[0])));
            }
            if let Some(dir) = cfg.paths.model.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            model.save(&cfg.paths.model)?;
            println!("model written to {}", cfg.paths.model.display());
        }
        Command::Train { arch } => {
            if let Some(a) = arch {
                cfg.arch = a;
            }
            for s in harness::train(&cfg)? {
                println!(
                    "{} seed {}: best eval return {:.3} at step {}, 95% of best at {}",
                    s.arch,
                    s.seed,
                    s.best_eval_return,
                    s.best_step,
                    s.steps_to_95.map_or("-".to_string(), |n| n.to_string())
                );
            }
        }
        Command::Eval { checkpoint, episodes, out } => {
            let dir = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            let report = harness::evaluate(&checkpoint, &cfg, episodes, Some(&dir))?;
            for (k, m) in report.episodes.iter().enumerate() {
                println!(
                    "episode {k}: return {:.3}, cost {:.3}, violations {}, terminal dev {:.4}, price-power corr {}",
                    m.episode_return,
                    m.elec_cost,
                    m.total_violations(),
                    m.terminal_deviation,
                    report.price_power_corr[k].map_or("n/a".to_string(), |c| format!("{c:.3}"))
                );
            }
        }
        Command::Simulate { script, out } => {
            let rows = simulate(&cfg, &script)?;
            save_trajectory(&rows, &out)?;
            println!("{} steps written to {}", rows.len(), out.display());
        }
        Command::ExportCurves { runs, out } => {
            let root = runs.unwrap_or_else(|| cfg.out_dir());
            let n = harness::export_curves(&root, &out)?;
            println!("{n} runs merged into {}", out.display());
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ScriptRow {
    n_mac: f64,
    xi_tur: f64,
    xi_top: f64,
    f_drain: f64,
}

/// Replay one MV vector per step through the direct environment on the
/// evaluation day. Stops at the end of the script or the episode.
fn simulate(cfg: &RunConfig, script: &Path) -> Result<Vec<TrajectoryRow>, HarnessError> {
    let mut rdr = csv::Reader::from_path(script)?;
    let mvs = rdr
        .deserialize::<ScriptRow>()
        .map(|r| r.map(|r| ManipulatedVars { n_mac: r.n_mac, xi_tur: r.xi_tur, xi_top: r.xi_top, f_drain: r.f_drain }))
        .collect::<Result<Vec<_>, _>>()?;
    let mut env = cfg.build_env(Arch::Direct, cfg.eval_profile()?, None)?;
    env.reset(cfg.seeds[0])?;
    let mut rows = Vec::with_capacity(mvs.len());
    for mv in mvs.iter().take(cfg.episode.steps_per_episode) {
        let a = env.action_spec().to_normalized(&mv.to_array());
        let out = env.step(&a)?;
        rows.push(TrajectoryRow::from_outcome(&out));
    }
    Ok(rows)
}
