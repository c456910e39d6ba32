//! `rrae`: generate SII datasets, train and sweep autoencoders, run the DCT
//! baseline, and assemble reports.
//!
//! Failures print one line `error: <category>: <message>` to stderr and
//! exit with status 1 (2 for command-line usage errors).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use rrae_core::dct::{DctCode, Truncation};
use rrae_core::experiment::{
    build_report, collect_results, compare_compression, run_experiment, sweep, write_report,
    DatasetId, TrainConfig,
};
use rrae_core::imageio::Gray;
use rrae_core::models::Autoencoder;
use rrae_core::rrae::{LossKind, RraeConfig};
use rrae_core::sii::{downscale, generate_dataset, RotorParams, SiiImage};
use rrae_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "rrae",
    version,
    about = "Residual-recursion autoencoder experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the Savonius-rotor image dataset.
    GenerateSii {
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Only render the first N rotors.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train one configuration.
    Train(TrainArgs),
    /// Run a JSON list of training configs and write report.csv.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// DCT + zigzag truncation of one image.
    Dct(DctArgs),
    /// Collect result.json files below a directory into a CSV table.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a trained model's code length with the DCT baseline on one image.
    Compare {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Downscale (block majority) to the model resolution first.
        #[arg(long)]
        resize: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: DatasetId,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    z: usize,
    #[arg(long = "T")]
    trials: usize,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    loss: LossKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    detach: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Conditional VAE (mnist with the vae loss).
    #[arg(long)]
    conditional: bool,
    /// Comma-separated conv channel widths.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["k", "target_l1"])))]
struct DctArgs {
    #[arg(long)]
    image: PathBuf,
    /// Number of zigzag coefficients to keep.
    #[arg(long)]
    k: Option<usize>,
    /// Find the smallest k whose mean absolute error is at most this.
    #[arg(long)]
    target_l1: Option<f64>,
    /// Write the code file ("DCT1 H W k" header).
    #[arg(long)]
    code: Option<PathBuf>,
    /// Write the reconstruction as PNG.
    #[arg(long)]
    reconstruction: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_owned();
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.category());
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateSii {
            resolution,
            seed,
            out,
            limit,
        } => {
            let m = generate_dataset(resolution, seed, &out, limit)?;
            println!(
                "wrote {} images to {} (test fraction {:.4}, mean {:.6}, std {:.6})",
                m.entries.len(),
                out.display(),
                m.test_fraction(),
                m.stats.mean,
                m.stats.std
            );
        }
        Command::Train(args) => {
            let config = train_config(args);
            let r = run_experiment(&config)?;
            println!(
                "best {} {} at epoch {} of {}",
                r.metric, r.best_value, r.best_epoch, r.epochs
            );
        }
        Command::Sweep { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let configs: Vec<TrainConfig> =
                serde_json::from_str(&text).map_err(|e| Error::Format {
                    what: spec.display().to_string(),
                    offset: 0,
                    reason: e.to_string(),
                })?;
            let rows = sweep(&configs, &out)?;
            println!(
                "{} runs, report at {}",
                rows.len(),
                out.join("report.csv").display()
            );
        }
        Command::Dct(args) => dct(args)?,
        Command::Report { runs, out } => {
            let rows = build_report(&collect_results(&runs)?)?;
            write_report(&rows, &out)?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
        Command::Compare {
            image,
            checkpoint,
            resize,
            out,
        } => {
            let model = Autoencoder::load(&checkpoint)?;
            let r = model.resolution();
            let g = Gray::read(&image)?;
            let x = if resize && g.width != r {
                block_downscale(&g, r)?
            } else {
                g.to_unit_tensor()
            };
            let config = RraeConfig::new(model.spec().input_channels);
            let c = compare_compression(&x, &model, &config)?;
            println!("{}", serde_json::to_string(&c).expect("plain record"));
            if let Some(dir) = out {
                Gray::from_unit_tensor(&c.rrae_residual)?
                    .write_png(&dir.join("rrae_residual.png"))?;
                Gray::from_unit_tensor(&c.dct_residual)?
                    .write_png(&dir.join("dct_residual.png"))?;
            }
        }
    }
    Ok(())
}

fn train_config(a: TrainArgs) -> TrainConfig {
    TrainConfig {
        resolution: a.resolution,
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        weight_decay: a.wd,
        seed: a.seed,
        detach_trials: a.detach,
        out_dir: Some(a.out),
        conditional: a.conditional,
        train_limit: a.train_limit,
        test_limit: a.test_limit,
        data_seed: a.data_seed,
        channels: a.channels,
        ..TrainConfig::new(a.dataset, a.data, a.z, a.trials, a.loss)
    }
}

fn read_unit_image(path: &Path) -> Result<Tensor> {
    Ok(Gray::read(path)?.to_unit_tensor())
}

fn block_downscale(g: &Gray, target: usize) -> Result<Tensor> {
    let img = SiiImage::from_gray(
        g,
        RotorParams {
            h1: 0,
            l: 0,
            x1: 0,
            y1: 0,
        },
    )?;
    Ok(downscale(&img, target)?.to_tensor())
}

fn dct(args: DctArgs) -> Result<()> {
    let x = read_unit_image(&args.image)?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let plane = x.reshape(&[h, w])?;
    let t = Truncation::new(&plane)?;
    let (k, l1) = match (args.k, args.target_l1) {
        (Some(k), _) => (k, t.l1(k)?),
        (None, Some(target)) => t.smallest_k_for_l1(target)?,
        (None, None) => unreachable!("clap requires one mode"),
    };
    println!("k {k} l1 {l1}");
    let code: DctCode = t.encode(k)?;
    if let Some(path) = args.code {
        code.write(&path)?;
    }
    if let Some(path) = args.reconstruction {
        Gray::from_unit_tensor(&rrae_core::dct::decode_topk(&code)?)?.write_png(&path)?;
    }
    Ok(())
}
