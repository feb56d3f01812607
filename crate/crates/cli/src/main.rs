use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use mid_core::config::RunConfig;
use mid_core::data::{export_dataset, generate_synthetic_dataset, Difficulty, ImageFormat, SyntheticSpec};
use mid_core::trainer::{fit_trainer, Trainer, BEST_CKPT, CONFIG_FILE, LAST_CKPT};
use mid_core::{MidError, Result};

mod curves;

#[derive(Parser, Debug)]
#[command(
    name = "mid",
    version,
    about = "Cross-modality re-identification with adaptive mixup and decomposed convolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic RGB/IR dataset as an image directory.
    GenData {
        #[arg(long, default_value_t = 16)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        imgs_per_id: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DifficultyArg::Easy)]
        difficulty: DifficultyArg,
        #[arg(long, default_value_t = 72)]
        height: usize,
        #[arg(long, default_value_t = 36)]
        width: usize,
        #[arg(long, value_enum, default_value_t = FormatArg::Png)]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `output_dir` from the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run every kernel on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Evaluate a checkpoint of a finished run in both retrieval directions.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        /// `best`, `last` or a checkpoint path.
        #[arg(long, default_value = "best")]
        ckpt: String,
        /// Report CSV; defaults to `<run-dir>/eval_report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split training and evaluation logs into one CSV series per metric.
    ExportCurves {
        #[arg(long)]
        run_dir: PathBuf,
        /// Defaults to `<run-dir>/curves`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also draw each series as an SVG line plot.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DifficultyArg {
    Easy,
    Hard,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Png,
    Pgm,
}

fn gen_data(spec: SyntheticSpec, format: ImageFormat, out: &Path) -> Result<()> {
    let ds = generate_synthetic_dataset(&spec)?;
    export_dataset(&ds, out, format)?;
    println!("wrote {} identities to {}", ds.n_identities(), out.display());
    Ok(())
}

fn train(config: Option<&Path>, out: Option<PathBuf>, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut trainer = Trainer::new(cfg)?;
    let start = Instant::now();
    let summary = fit_trainer(&mut trainer, |report| {
        let epoch = report.rows.first().map_or(0, |r| r.epoch);
        println!(
            "epoch {epoch:>3}  rank-1 {:.3}  mAP {:.3}  ({:.0?})",
            report.mean_rank1(),
            report.mean_map(),
            start.elapsed()
        );
    })?;
    match summary.best_epoch {
        Some(e) => {
            println!("best mAP {:.4} at epoch {e}; outputs in {}", summary.best_map, summary.output_dir.display())
        }
        None => println!("no epochs run; initial checkpoint in {}", summary.output_dir.display()),
    }
    Ok(())
}

fn eval(run_dir: &Path, ckpt: &str, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let ckpt_path = match ckpt {
        "best" => run_dir.join(BEST_CKPT),
        "last" => run_dir.join(LAST_CKPT),
        other => PathBuf::from(other),
    };
    let mut trainer = Trainer::new(cfg)?;
    trainer.load(&ckpt_path)?;
    let report = trainer.evaluate(trainer.config().epochs)?;
    let out = out.unwrap_or_else(|| run_dir.join("eval_report.csv"));
    let file = File::create(&out).map_err(|source| MidError::Io { path: out.clone(), source })?;
    report.write_csv(file)?;
    print!("{report}");
    println!("report written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { ids, imgs_per_id, seed, difficulty, height, width, format, out } => {
            let difficulty = match difficulty {
                DifficultyArg::Easy => Difficulty::Easy,
                DifficultyArg::Hard => Difficulty::Hard,
            };
            let format = match format {
                FormatArg::Png => ImageFormat::Png,
                FormatArg::Pgm => ImageFormat::Pgm,
            };
            gen_data(SyntheticSpec { n_ids: ids, imgs_per_id, height, width, seed, difficulty }, format, &out)
        }
        Command::Train { config, out, epochs, seed, sequential } => {
            if sequential {
                mid_core::par::set_parallel(false);
            }
            train(config.as_deref(), out, epochs, seed)
        }
        Command::Eval { run_dir, ckpt, out } => eval(&run_dir, &ckpt, out),
        Command::ExportCurves { run_dir, out, svg } => {
            let out = out.unwrap_or_else(|| run_dir.join("curves"));
            let written = curves::export(&run_dir, &out, svg)?;
            println!("wrote {written} series to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
