use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gatrans_core::bench::{bench_attention, BenchConfig};
use gatrans_core::checkpoint::{load_checkpoint, Checkpoint};
use gatrans_core::config::Config;
use gatrans_core::dataset::{load_dataset, read_image, save_dataset, synth_dataset, Dataset};
use gatrans_core::infer::sliding_window_infer;
use gatrans_core::metrics::MetricReport;
use gatrans_core::tensor::set_parallel;
use gatrans_core::train::{evaluate, train};
use gatrans_core::{Error, Result};

/// Semantic segmentation with bucketed-attention transformers and
/// adversarial training.
#[derive(Parser, Debug)]
#[command(name = "gatrans", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (and the synthetic data seed for `synth`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Total scenes.
        #[arg(long, default_value_t = 240)]
        images: usize,
        /// Side length in pixels (at least 32).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Scenes placed in the validation split (default: one sixth).
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train generator and discriminator; writes checkpoint.gatr and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; overrides `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset's validation split; writes metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Segment one PNG with the sliding window; writes <name>_label.png.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Time bucketed against dense attention.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "attn")]
        mode: String,
        #[arg(long, value_delimiter = ',', default_values_t = [1024, 2048, 4096, 8192])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        tokens_per_bucket: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Allow intra-op parallelism while timing.
        #[arg(long)]
        parallel: bool,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Dataset from an explicit directory, `data.dir`, or the synthetic generator.
fn dataset(cfg: &Config, dir: Option<&Path>) -> Result<Dataset> {
    let dir = dir.map(Path::to_path_buf).or_else(|| (!cfg.data.dir.is_empty()).then(|| PathBuf::from(&cfg.data.dir)));
    match dir {
        Some(d) => load_dataset(&d, &cfg.palette),
        None => synth_dataset(cfg.data.images, cfg.data.val, cfg.data.size, cfg.data.seed),
    }
}

fn write_metrics(cfg: &Config, ckpt: &Checkpoint, data: &Dataset, out: &Path) -> Result<MetricReport> {
    let cm = evaluate(&ckpt.g, &ckpt.g_params, &data.val, cfg)?;
    let report = MetricReport::from_confusion(&cm)?;
    report.save_csv(&out.join("metrics.csv"), &cfg.palette.names)?;
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            images,
            size,
            val,
        } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.data.seed);
            let ds = synth_dataset(images, val.unwrap_or(images / 6), size, seed)?;
            create_dir(&common.out)?;
            save_dataset(&common.out, &ds, &cfg.palette)?;
            log::info!("wrote {} train and {} val scenes to {}", ds.train.len(), ds.val.len(), common.out.display());
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let ds = dataset(&cfg, data.as_deref())?;
            create_dir(&common.out)?;
            write_file(&common.out.join("config.cfg"), &cfg.to_text())?;
            let outcome = train(&cfg, &ds, Some(&common.out))?;
            let ckpt = load_checkpoint(&common.out.join("checkpoint.gatr"))?;
            let report = write_metrics(&cfg, &ckpt, &ds, &common.out)?;
            log::info!(
                "best epoch {} with validation mean F1 {:.4}, OA {:.4}",
                outcome.best_epoch,
                report.mean_f1,
                report.overall_accuracy
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut cfg = ckpt.config.clone();
            if common.config.is_some() {
                cfg.infer = load_config(&common)?.infer;
            }
            let ds = dataset(&cfg, data.as_deref())?;
            create_dir(&common.out)?;
            let report = write_metrics(&cfg, &ckpt, &ds, &common.out)?;
            println!("mean_f1={} overall_accuracy={}", report.mean_f1, report.overall_accuracy);
        }
        Command::Infer {
            common,
            checkpoint,
            input,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut cfg = ckpt.config.clone();
            if common.config.is_some() {
                cfg.infer = load_config(&common)?.infer;
            }
            let image = read_image(&input)?;
            let labels = sliding_window_infer(&ckpt.g, &ckpt.g_params, &image, &cfg.infer)?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            create_dir(&common.out)?;
            let stem = input.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let path = common.out.join(format!("{stem}_label.png"));
            cfg.palette
                .encode(&labels, h, w)?
                .save(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
            log::info!("wrote {}", path.display());
        }
        Command::Bench {
            common,
            mode,
            sizes,
            channels,
            tokens_per_bucket,
            repeats,
            parallel,
        } => {
            if mode != "attn" {
                return Err(Error::InvalidArgument(format!("unknown bench mode {mode:?}; only attn exists")));
            }
            set_parallel(parallel);
            let report = bench_attention(&BenchConfig {
                sizes,
                channels,
                tokens_per_bucket,
                repeats,
                seed: common.seed.unwrap_or(0),
            })?;
            report.save(&common.out)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
