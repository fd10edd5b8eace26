use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use styleaug_core::config::ExperimentConfig;
use styleaug_core::pipeline::{stylize_dir, Pipeline, Preset};
use styleaug_core::translator::Generator;
use styleaug_core::{Error, Result};

#[derive(Parser)]
#[command(name = "styleaug", version, about = "Few-shot style cloning with diffusion-guided augmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Defaults to the run directory's stored copy, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    /// Number of augmented images added to the style set.
    #[arg(long)]
    k: Option<usize>,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the source, style and test sets.
    Datagen(RunArgs),
    /// Pretrain the conditional denoiser on the captioned corpus.
    TrainDiffusion(RunArgs),
    /// Learn the style token.
    Invert(RunArgs),
    /// Build the self- and cross-guided augmentation sets.
    Augment(RunArgs),
    /// Train the translator on the style set plus K augmented images.
    TrainTranslator(RunArgs),
    /// Score the translator on the test set.
    Evaluate(RunArgs),
    /// Run every stage, resuming from existing artifacts.
    Pipeline(RunArgs),
    /// Train and score every variant of an ablation preset.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// aug_size, self_vs_cross or guidance_factors
        #[arg(long)]
        preset: String,
    },
    /// Stylize every PNG in a directory with a translator checkpoint.
    Stylize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        in_dir: PathBuf,
        #[arg(long = "out")]
        out_dir: PathBuf,
        /// Run directory whose augmentation log provides the per-image sampling time to compare against.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let stored = args.run_dir.join("config.json");
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if stored.exists() => ExperimentConfig::load(&stored)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.root_seed = seed;
    }
    if let Some(k) = args.k {
        cfg.augment.k = Some(k);
    }
    Ok(cfg)
}

fn open(args: &RunArgs) -> Result<Pipeline> {
    Pipeline::open(load_config(args)?, &args.run_dir)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn gis_seconds_per_image(run_dir: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(run_dir.join("logs/augment.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v["gis_seconds_per_image"].as_f64()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Datagen(a) => {
            let m = open(&a)?.datagen()?;
            println!("{} images under {}", m.entries.len(), a.run_dir.join("data").display());
        }
        Command::TrainDiffusion(a) => {
            open(&a)?.train_diffusion()?;
            println!("denoiser ready");
        }
        Command::Invert(a) => {
            open(&a)?.invert()?;
            println!("style token written to {}", a.run_dir.join("embeddings/style_token.json").display());
        }
        Command::Augment(a) => {
            for pool in open(&a)?.augment()? {
                println!("{} t0={:.2}: {} images", pool.mode.as_str(), pool.t0, pool.manifest.entries.len());
            }
        }
        Command::TrainTranslator(a) => {
            let p = open(&a)?;
            let v = p.default_variant();
            p.train_translator(&v)?;
            println!("{}", p.translator_path(&v).display());
        }
        Command::Evaluate(a) => {
            let p = open(&a)?;
            print_json(&p.evaluate(&p.default_variant())?)?;
        }
        Command::Pipeline(a) => {
            print_json(&open(&a)?.run()?)?;
        }
        Command::Ablate { run, preset } => {
            let preset: Preset = preset.parse()?;
            let table = open(&run)?.ablate(preset)?;
            print!("{}", table.to_markdown());
        }
        Command::Stylize {
            checkpoint,
            in_dir,
            out_dir,
            run_dir,
        } => {
            let gen = Generator::load(&checkpoint)?;
            let s = stylize_dir(&gen, &in_dir, &out_dir)?;
            println!("stylized {} images ({} unreadable), {:.1} images/sec", s.written, s.failed, s.images_per_sec);
            if let Some(secs) = run_dir.as_deref().and_then(gis_seconds_per_image) {
                let gis_rate = 1.0 / secs;
                println!(
                    "guided sampling: {gis_rate:.3} images/sec, stylize is {:.0}x faster",
                    s.images_per_sec / gis_rate
                );
            }
            if s.written == 0 && s.failed > 0 {
                return Err(Error::Image {
                    path: in_dir,
                    msg: "no input image could be read".into(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
