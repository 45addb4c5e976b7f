//! Command-line surface: train, evaluate, gradient-check, ablate, and plot.
//! All commands run offline against synthetic data; artifacts are plain
//! files (TOML config, CSV logs, SVG figures, one binary checkpoint).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bdlf::cli::{self, render_breakdown};
use bdlf::config::ExperimentConfig;
use bdlf::evalproto::ProtocolMode;

#[derive(Parser)]
#[command(
    name = "bdlf",
    about = "Base-detail feature learning on synthetic two-modality identity data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    VisToIr,
    IrToVis,
}

impl From<ModeArg> for ProtocolMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::VisToIr => ProtocolMode::VisToIr,
            ModeArg::IrToVis => ProtocolMode::IrToVis,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the desk-scale default configuration to a TOML file.
    InitConfig {
        #[arg(long, default_value = "bdlf.toml")]
        out: PathBuf,
    },
    /// Train a model and write config/metrics/checkpoint into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Override every stage seed with one master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained run: CMC curve and mAP for one protocol direction.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Override the config's choice of EMA vs live weights.
        #[arg(long)]
        use_ema: Option<bool>,
        /// Rank pre-extracted feature files instead of running the encoder.
        #[arg(long)]
        features_dir: Option<PathBuf>,
    },
    /// Finite-difference gradient suite plus the coupling round-trip check.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Check every coordinate instead of a seeded subsample.
        #[arg(long)]
        full: bool,
    },
    /// Train the component-toggle table (shared seed) and tabulate retrieval
    /// quality; optionally sweep the coupling-stack depth.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also train depth variants (2, 4, 6, 8 blocks).
        #[arg(long)]
        sweep_k: bool,
    },
    /// Emit loss curves, correlation trajectory, and the embedding scatter.
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, cli::CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<ExitCode, cli::CliError> {
    match cmd {
        Cmd::InitConfig { out } => {
            ExperimentConfig::desk_default().save(&out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Train { config, run_dir, seed } => {
            let cfg = load_config(&config, seed)?;
            let art = cli::cmd_train(&cfg, run_dir.as_deref())?;
            print!("{}", render_breakdown(&art.final_breakdown, art.final_corr));
            println!("run directory: {}", art.run_dir.display());
        }
        Cmd::Eval {
            run_dir,
            mode,
            use_ema,
            features_dir,
        } => {
            let mode: ProtocolMode = mode.into();
            let art = cli::cmd_eval(&run_dir, mode, use_ema, features_dir.as_deref())?;
            print!("{}", art.report.render(mode.as_str()));
            println!("report: {}", art.report_txt.display());
        }
        Cmd::Gradcheck { seed, full } => {
            let (report, pass) = cli::cmd_gradcheck(seed, full);
            print!("{report}");
            if !pass {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Ablate {
            config,
            run_dir,
            seed,
            sweep_k,
        } => {
            let cfg = load_config(&config, seed)?;
            let (table, rows) = cli::cmd_ablate(&cfg, run_dir.as_deref(), sweep_k)?;
            println!("{:<24} {:>8} {:>8} {:>8} {:>9}", "variant", "mAP", "rank-1", "c_base", "c_detail");
            for r in rows {
                println!(
                    "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>9.4}",
                    r.toggles.label(),
                    r.map,
                    r.rank1,
                    r.c_base,
                    r.c_detail
                );
            }
            println!("table: {}", table.display());
        }
        Cmd::Plot { run_dir } => {
            for f in cli::cmd_plot(&run_dir)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
