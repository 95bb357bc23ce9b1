use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spfm::cli::{self, Figure, Overrides};
use spfm::config::ExperimentConfig;
use spfm::{Result, SpfmError};

#[derive(Parser)]
#[command(name = "spfm", version, about = "Flow matching with a self-purifying label gate")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureArg {
    Fig2,
    Fig3,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for this command's random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or import) a dataset and corrupt its labels.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Import x1_x,x1_y,angle,radius rows from a CSV instead of generating.
        #[arg(long)]
        import: Option<PathBuf>,
        /// Write the binary format (dataset.bin).
        #[arg(long)]
        binary: bool,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        spfm: Option<Toggle>,
        /// Dataset file; defaults to <run.output_dir>/dataset.txt.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Sample from a checkpoint and score conditional MSE.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to dataset.txt beside the checkpoint's directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated guidance scales.
        #[arg(long)]
        omega: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Loss-difference sweep, detection scores and histograms.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated gate times.
        #[arg(long)]
        tprime: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
    },
    /// Regenerate a figure's artifacts end to end.
    Reproduce {
        #[arg(value_enum)]
        figure: FigureArg,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn default_dataset(checkpoint: &Path) -> PathBuf {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    dir.parent().unwrap_or(Path::new(".")).join(cli::DATASET_FILE)
}

fn checkpoint_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn run(args: Args) -> Result<String> {
    match args.command {
        Command::GenData { common, import, binary } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.dataset.seed = s;
            }
            Overrides { out: common.out.clone(), ..Default::default() }.apply(&mut cfg)?;
            let out = cfg.run.output_dir.clone();
            Ok(cli::cmd_gen_data(&cfg, &out, import.as_deref(), binary)?.to_string())
        }
        Command::Train { common, spfm, dataset } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.training.train_seed = s;
            }
            Overrides { spfm: spfm.map(|t| matches!(t, Toggle::On)), ..Default::default() }.apply(&mut cfg)?;
            let dataset = dataset.unwrap_or_else(|| cfg.run.output_dir.join(cli::DATASET_FILE));
            let out = common.out.clone().unwrap_or_else(|| {
                cfg.run.output_dir.join(if cfg.training.spfm_enabled { "spfm" } else { "baseline" })
            });
            Ok(cli::cmd_train(&cfg, &dataset, &out, !common.quiet)?.to_string())
        }
        Command::Eval { common, checkpoint, dataset, omega, steps, n_eval } => {
            let mut cfg = load_config(&common)?;
            let expected = common.config.as_ref().map(|_| cfg.hash());
            if let Some(s) = common.seed {
                cfg.sampler.seed = s;
            }
            if let Some(n) = n_eval {
                cfg.sampler.n_eval = n;
            }
            let omega = omega.as_deref().map(cli::parse_list).transpose()?;
            if omega.as_ref().is_some_and(|w| w.is_empty()) {
                return Err(SpfmError::Input("--omega list is empty".into()));
            }
            Overrides { omega, steps, ..Default::default() }.apply(&mut cfg)?;
            let dataset = dataset.unwrap_or_else(|| default_dataset(&checkpoint));
            let out = common.out.clone().unwrap_or_else(|| checkpoint_dir(&checkpoint).join("eval"));
            let summary = cli::cmd_eval(&cfg, &checkpoint, &dataset, expected, &out)?;
            for n in &summary.notes {
                eprintln!("{n}");
            }
            Ok(summary.to_string())
        }
        Command::Analyze { common, checkpoint, dataset, tprime, threshold } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.analysis.seed = s;
            }
            let tprime = tprime.as_deref().map(cli::parse_list).transpose()?;
            Overrides { tprime, threshold, ..Default::default() }.apply(&mut cfg)?;
            let dataset = dataset.unwrap_or_else(|| default_dataset(&checkpoint));
            let out = common.out.clone().unwrap_or_else(|| checkpoint_dir(&checkpoint).join("analysis"));
            Ok(cli::cmd_analyze(&cfg, &checkpoint, &dataset, &out)?.to_string())
        }
        Command::Reproduce { figure, common } => {
            let figure = match figure {
                FigureArg::Fig2 => Figure::Fig2,
                FigureArg::Fig3 => Figure::Fig3,
            };
            let mut cfg = match &common.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => figure.pinned_config(),
            };
            if let Some(s) = common.seed {
                cfg.training.train_seed = s;
            }
            Overrides { out: common.out.clone(), ..Default::default() }.apply(&mut cfg)?;
            let out = cfg.run.output_dir.clone();
            let summary = cli::cmd_reproduce(figure, &cfg, &out, !common.quiet)?;
            Ok(format!("manifest={} files={}", summary.manifest.display(), summary.files.len()))
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
