//! `stampnet`: generate datasets, train, evaluate, and export stamps and
//! reconstructions.

mod config;
mod exit;
mod pgm;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use stampnet::data::{generate, load_dataset, load_mnist_idx, save_dataset, Dataset};
use stampnet::evaluation::evaluate;
use stampnet::model::{extract_predictions, StampNet};
use stampnet::numerics::{stream_rng, SeededRng, Stream};
use stampnet::training::{load_model, stack_images, Trainer};

use config::RunConfig;
use exit::Invalid;

const DEFAULT_TAU_EVAL: f64 = 0.01;

#[derive(Parser)]
#[command(
    name = "stampnet",
    version,
    about = "Unsupervised object discovery with learned stamps"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel generation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset container from the configuration.
    Gen,
    /// Train a model; writes checkpoints and a per-epoch report.
    Train {
        /// Training dataset (defaults to `paths.data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset (defaults to `paths.test_data`, then `paths.data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export the stamp bank as a PGM grid.
    Stamps {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write input, reconstruction and box overlays for selected samples.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated sample indices.
        #[arg(long, value_delimiter = ',', required = true)]
        indices: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit::code_for(&err)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        return Err(Invalid("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    let config = cli
        .config
        .as_deref()
        .map(|p| RunConfig::load(p).map(|c| c.with_seed(cli.seed)))
        .transpose()?;
    if let Some(c) = &config {
        c.validate()?;
    }
    let need_config = || {
        config
            .clone()
            .ok_or_else(|| anyhow::Error::from(Invalid("--config is required".into())))
    };
    let paths = config.as_ref().map(|c| c.paths.clone()).unwrap_or_default();
    match cli.command {
        Command::Gen => {
            let out = cli
                .out
                .or(paths.data)
                .ok_or_else(|| Invalid("no output: pass --out or set paths.data".into()))?;
            cmd_gen(&need_config()?, &out)
        }
        Command::Train { data, resume } => {
            let cfg = need_config()?;
            let data = data
                .or(paths.data)
                .ok_or_else(|| Invalid("no dataset: pass --data or set paths.data".into()))?;
            let out = cli.out.or(paths.checkpoints).ok_or_else(|| {
                Invalid("no output directory: pass --out or set paths.checkpoints".into())
            })?;
            cmd_train(&cfg, &data, &out, resume.as_deref())
        }
        Command::Eval { checkpoint, data } => {
            let data = data
                .or(paths.test_data)
                .or(paths.data)
                .ok_or_else(|| Invalid("no dataset: pass --data or set paths.test_data".into()))?;
            cmd_eval(
                config.as_ref(),
                cli.seed,
                &checkpoint,
                &data,
                cli.out.as_deref(),
            )
        }
        Command::Stamps { checkpoint } => {
            let out = cli
                .out
                .or(paths.outputs)
                .ok_or_else(|| Invalid("no output: pass --out".into()))?;
            cmd_stamps(&checkpoint, &out)
        }
        Command::Reconstruct {
            checkpoint,
            data,
            indices,
        } => {
            let data = data
                .or(paths.data)
                .ok_or_else(|| Invalid("no dataset: pass --data".into()))?;
            let out = cli
                .out
                .or(paths.outputs)
                .ok_or_else(|| Invalid("no output directory: pass --out".into()))?;
            cmd_reconstruct(
                config.as_ref(),
                cli.seed,
                &checkpoint,
                &data,
                &indices,
                &out,
            )
        }
    }
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn read_model(path: &Path, config: Option<&RunConfig>) -> anyhow::Result<StampNet> {
    let model =
        load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if let Some(c) = config {
        model.ensure_compatible(&c.model)?;
    }
    Ok(model)
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let d = &cfg.dataset;
    let mnist = match (&d.mnist_images, &d.mnist_labels) {
        (Some(i), Some(l)) if d.kind.needs_mnist() => {
            Some(load_mnist_idx(i, l).context("loading MNIST")?)
        }
        _ => None,
    };
    let dataset = generate(d, mnist.as_ref())?;
    save_dataset(&dataset, out).with_context(|| format!("writing {}", out.display()))?;
    let digest = Sha256::digest(fs::read(out)?);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    println!("samples = {}", dataset.len());
    println!("sha256 = {hex}");
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let dataset = read_dataset(data)?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            t.model.ensure_compatible(&cfg.model)?;
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => Trainer::new(
            StampNet::new(cfg.model.clone(), cfg.seed)?,
            cfg.train.clone(),
        )?,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report_path = out.join("train_report.txt");
    let mut report = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&report_path)
        .with_context(|| format!("opening {}", report_path.display()))?;
    trainer.fit(&dataset, |t, record| {
        println!("{record}");
        writeln!(report, "{record}")?;
        if t.checkpoint_due() {
            t.save(&out.join(format!("epoch-{:04}.ckpt", t.epoch)))?;
        }
        Ok(())
    })?;
    let last = out.join("final.ckpt");
    trainer.save(&last)?;
    println!("checkpoint = {}", last.display());
    Ok(())
}

fn cmd_eval(
    config: Option<&RunConfig>,
    seed: Option<u64>,
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let model = read_model(checkpoint, config)?;
    let dataset = read_dataset(data)?;
    let tau = config.map_or(DEFAULT_TAU_EVAL, |c| c.train.tau_eval);
    let seed = config.map_or(seed.unwrap_or(0), |c| c.seed);
    let report = evaluate(&model, &dataset, &data.display().to_string(), tau, seed)?;
    println!("corloc = {:.6}", report.corloc);
    println!("mean_iou = {:.6}", report.mean_iou);
    println!("purity = {:.6}", report.purity);
    if let Some(out) = out {
        report
            .export(out)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_stamps(checkpoint: &Path, out: &Path) -> anyhow::Result<()> {
    let model = read_model(checkpoint, None)?;
    let grid = pgm::stamp_grid(&model.stamp_bank(), model.config().v_max);
    pgm::write_pgm(&grid, out)?;
    println!(
        "{} stamps -> {} ({}x{})",
        model.config().stamps,
        out.display(),
        grid.width(),
        grid.height()
    );
    Ok(())
}

fn cmd_reconstruct(
    config: Option<&RunConfig>,
    seed: Option<u64>,
    checkpoint: &Path,
    data: &Path,
    indices: &[usize],
    out: &Path,
) -> anyhow::Result<()> {
    let model = read_model(checkpoint, config)?;
    let dataset = read_dataset(data)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        bail!(Invalid(format!(
            "index {bad} is out of range for {} samples",
            dataset.len()
        )));
    }
    let tau = config.map_or(DEFAULT_TAU_EVAL, |c| c.train.tau_eval);
    let seed = config.map_or(seed.unwrap_or(0), |c| c.seed);
    let c = model.config();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for &i in indices {
        let images = stack_images(&dataset.samples, &[i])?;
        let mut rngs: Vec<SeededRng> = vec![stream_rng(seed, Stream::Eval, i as u64)];
        let result = model.infer(&images, tau, &mut rngs)?;
        let preds = extract_predictions(&result.latents[0], c.stamp_width, c.stamp_height);
        let input = pgm::gray_image(&dataset.samples[i].image, c.v_max);
        let mut boxed = input.clone();
        for p in &preds {
            pgm::draw_outline(&mut boxed, &p.bbox, pgm::OUTLINE);
        }
        pgm::write_pgm(&input, &out.join(format!("input-{i}.pgm")))?;
        pgm::write_pgm(
            &pgm::gray_image(&result.reconstruction, c.v_max),
            &out.join(format!("reconstruction-{i}.pgm")),
        )?;
        pgm::write_pgm(&boxed, &out.join(format!("boxes-{i}.pgm")))?;
        let triples: Vec<String> = preds
            .iter()
            .map(|p| format!("({}, {}, {})", p.bbox.x, p.bbox.y, p.stamp))
            .collect();
        println!("sample {i}: {}", triples.join(" "));
    }
    Ok(())
}
