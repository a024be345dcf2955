mod imageio;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use mamba_unet::bench::{bench_scan, BenchConfig};
use mamba_unet::fsio::write_atomic;
use mamba_unet::metrics::{dice_histogram, evaluate, DatasetPreset, LabelMap, MetricReport};
use mamba_unet::model::{load_weights, MambaUnet};
use mamba_unet::selftest::{run_selftest, SelftestOptions};
use mamba_unet::train::{evaluate_samples, train, Dataset, RunConfig, Split};
use mamba_unet::{Array, Error};

#[derive(Parser)]
#[command(name = "mamba-unet", version, about = "Train, evaluate and run a Mamba-UNet segmentation model")]
struct Cli {
    /// Worker threads for scans, batches and metrics (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic dataset described by the config.
    Train {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Dataset cache to read (or create) instead of generating in memory.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Score a split and write JSON, CSV and a Dice histogram.
    Eval {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Required unless --gt-as-prediction is given.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Score the ground truth against itself.
        #[arg(long)]
        gt_as_prediction: bool,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Name the classes after a benchmark layout (acdc, synapse).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Segment one image (binary PGM or raw float grid).
    Infer {
        #[arg(long, value_name = "PATH")]
        weights: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Time the sequential and parallel scans.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 4096, 16384])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [16usize])]
        states: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "U64", default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in invariant checks.
    Selftest {
        /// Also require this weight file to load and re-encode identically.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
    },
    /// Generate the synthetic dataset and write its cache.
    GenData {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
}

/// Exit status 2 for bad input or configuration, 1 for anything else.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::from_json_file(path)
        .with_context(|| format!("cannot load config {}", path.display()))
        .map_err(Failure::Usage)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    write_atomic(path, bytes.as_ref()).with_context(|| format!("writing {}", path.display()))
}

fn dataset(cfg: &RunConfig, cache: Option<&Path>) -> anyhow::Result<Dataset> {
    Ok(match cache {
        Some(p) => Dataset::load_or_generate(&cfg.data, p)?,
        None => Dataset::generate(&cfg.data)?,
    })
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, data: Option<&Path>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    create_dir(out)?;
    write(&out.join("config.json"), serde_json::to_string_pretty(&cfg).map_err(anyhow::Error::from)?)?;
    let data = dataset(&cfg, data)?;
    let model = MambaUnet::new(cfg.model.clone())?;
    log::info!(
        "training {} parameters on {} images ({} validation)",
        model.layout().total_numel(),
        data.train.len(),
        data.val.len()
    );
    let outcome = train(&model, &cfg.train, &data, Some(out))?;
    mamba_unet::model::save_weights(&model, &outcome.final_weights, &out.join("final.munt"))?;
    println!(
        "best validation dice {:.4} at iteration {} ({} evaluations)",
        outcome.best_val_dice,
        outcome.best_iteration,
        outcome.log.len()
    );
    Ok(())
}

fn write_report(out: &Path, report: &MetricReport, bins: usize) -> anyhow::Result<()> {
    create_dir(out)?;
    write(&out.join("metrics.json"), report.to_json()?)?;
    write(&out.join("metrics.csv"), report.to_csv())?;
    write(&out.join("dice_histogram.csv"), dice_histogram(&report.per_image_dice, bins)?.to_csv())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &Path,
    weights: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    split: &str,
    gt_as_prediction: bool,
    bins: usize,
    preset: Option<&str>,
    data: Option<&Path>,
) -> CmdResult {
    let cfg = load_config(config, seed)?;
    if bins == 0 {
        return Err(Failure::Usage(anyhow!("--bins must be positive")));
    }
    let preset = preset
        .map(|p| DatasetPreset::parse(p).ok_or_else(|| Failure::Usage(anyhow!("unknown preset {p:?}"))))
        .transpose()?;
    if let Some(p) = preset {
        if p.num_classes() != cfg.data.num_classes {
            return Err(Failure::Usage(anyhow!(
                "preset {p:?} has {} classes, the config has {}",
                p.num_classes(),
                cfg.data.num_classes
            )));
        }
    }
    let data = dataset(&cfg, data)?;
    let samples = data.split(Split::parse(split).expect("validated by clap"));
    let report = if gt_as_prediction {
        let pairs: Vec<(LabelMap, LabelMap)> = samples.iter().map(|s| (s.labels.clone(), s.labels.clone())).collect();
        evaluate(&pairs, cfg.data.num_classes, (1.0, 1.0))?
    } else {
        let path = weights.ok_or_else(|| Failure::Usage(anyhow!("--weights is required unless --gt-as-prediction")))?;
        let (model, w) = load_weights(path).with_context(|| format!("loading weights {}", path.display()))?;
        let m = model.config();
        if (m.input_h, m.input_w, m.num_classes) != (cfg.data.height, cfg.data.width, cfg.data.num_classes) {
            return Err(Failure::Usage(anyhow!(
                "weight file {} expects {}x{} images with {} classes; the dataset has {}x{} with {}",
                path.display(),
                m.input_h,
                m.input_w,
                m.num_classes,
                cfg.data.height,
                cfg.data.width,
                cfg.data.num_classes
            )));
        }
        evaluate_samples(&model, &w, &samples, (1.0, 1.0))?
    };
    let report = match preset {
        Some(p) => report.with_class_names(p.class_names()),
        None => report,
    };
    write_report(out, &report, bins)?;
    println!(
        "{} images: mean dice {:.4}, mean hd95 {}",
        report.images,
        report.mean_over_classes.dice,
        report.mean_over_classes.hd95.map_or("undefined".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn cmd_infer(weights: &Path, input: &Path, out: &Path) -> CmdResult {
    let (model, w) = load_weights(weights).with_context(|| format!("loading weights {}", weights.display()))?;
    let img = imageio::read_image(input)?;
    let m = model.config();
    if (img.height, img.width) != (m.input_h, m.input_w) || m.in_channels != 1 {
        return Err(Failure::Runtime(anyhow!(
            "{} is {}x{}; the model expects {}x{} with {} channel(s)",
            input.display(),
            img.height,
            img.width,
            m.input_h,
            m.input_w,
            m.in_channels
        )));
    }
    let image = Array::new(vec![img.height, img.width, 1], img.pixels)?;
    let labels = model.predict(&w, &image)?;
    create_dir(out)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let k = m.num_classes;
    write(&out.join(format!("{stem}_labels.pgm")), imageio::encode_label_pgm(&labels, img.height, img.width, k))?;
    write(&out.join(format!("{stem}_labels.raw")), imageio::encode_label_raw(&labels, img.height, img.width, k))?;
    let fg = labels.iter().filter(|&&l| l > 0).count();
    println!("{stem}: {fg} of {} pixels labelled foreground", labels.len());
    Ok(())
}

fn cmd_bench(cfg: BenchConfig, out: Option<&Path>) -> CmdResult {
    let report = bench_scan(&cfg)?;
    print!("{}", report.to_table());
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("bench_scan.csv"), report.to_csv())?;
        write(&dir.join("bench_scan.json"), serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?)?;
    }
    Ok(())
}

fn cmd_selftest(weights: Option<PathBuf>) -> CmdResult {
    let summary = run_selftest(&SelftestOptions { weights });
    print!("{}", summary.to_text());
    if summary.all_passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("selftest failed")))
    }
}

fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    create_dir(out)?;
    let data = Dataset::generate(&cfg.data)?;
    data.save(&out.join("dataset.bin"))?;
    write(&out.join("dataset.json"), serde_json::to_string_pretty(&cfg.data).map_err(anyhow::Error::from)?)?;
    println!(
        "{} images ({} train, {} val, {} test)",
        data.samples.len(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    match cli.command {
        Command::Train { config, out, seed, data } => cmd_train(&config, &out, seed, data.as_deref()),
        Command::Eval {
            config,
            weights,
            out,
            seed,
            split,
            gt_as_prediction,
            bins,
            preset,
            data,
        } => cmd_eval(
            &config,
            weights.as_deref(),
            &out,
            seed,
            &split,
            gt_as_prediction,
            bins,
            preset.as_deref(),
            data.as_deref(),
        ),
        Command::Infer { weights, input, out } => cmd_infer(&weights, &input, &out),
        Command::BenchScan {
            lengths,
            states,
            channels,
            repetitions,
            out,
            seed,
        } => cmd_bench(
            BenchConfig {
                lengths,
                state_sizes: states,
                channels,
                repetitions,
                seed,
                ..BenchConfig::default()
            },
            out.as_deref(),
        ),
        Command::Selftest { weights } => cmd_selftest(weights),
        Command::GenData { config, out, seed } => cmd_gen_data(&config, &out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
