//! Command-line surface for the geometry-conditioned synthesis toolkit.
//!
//! Exit codes: 0 on success, 2 on validation failures, 1 on other errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gis_forge::dataset::{generate_dataset, Dataset};
use gis_forge::error::GisError;
use gis_forge::eval::{ablation_table, emit_gallery, evaluate, run_ablation, write_report};
use gis_forge::gbuffer::{MaterialPalette, Modality};
use gis_forge::scene::SceneConfig;
use gis_forge::trainer::{fit, load_model, resume, synthesize, TrainConfig};

#[derive(Parser)]
#[command(name = "gis-forge", version, about = "Geometry-conditioned image synthesis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Training config file (flat key = value TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set steps=200 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for --set seed=...
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set out_dir=...
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig, GisError> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_toml_file(path)?,
            None => TrainConfig::default(),
        };
        for kv in &self.sets {
            cfg.apply_override(kv)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an oracle dataset of G-buffers and shaded targets.
    GenData {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Image size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        /// Pyramid level count the dataset must support.
        #[arg(long, default_value_t = 4)]
        levels: usize,
        /// Material palette (only "default" is built in).
        #[arg(long, default_value = "default")]
        palette: String,
    },
    /// Train a model from scratch.
    Train(ConfigArgs),
    /// Resume training from a saved state archive.
    Resume {
        /// state-*.bin file written during training.
        #[arg(long)]
        state: PathBuf,
        /// Extend the schedule by this many extra steps.
        #[arg(long)]
        extra_steps: Option<u64>,
    },
    /// Run a checkpoint on one dataset sample and write its K outputs.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory to read the sample from.
        #[arg(long)]
        data: PathBuf,
        /// Sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset (masked L1 / PSNR / diversity).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train ablation variants (excluded modalities) and compare them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Held-out dataset to evaluate on.
        #[arg(long)]
        eval_data: PathBuf,
        /// Comma-separated modalities to exclude one at a time.
        #[arg(long, default_value = "normals,depth,materials")]
        exclude: String,
        /// Optional JSON output for the comparison table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render per-sample contact sheets (inputs | target | K outputs).
    Gallery {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Limit the number of sheets.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), GisError> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| GisError::Config(format!("--size expects HxW, got '{s}'")))?;
    let h = h.parse().map_err(|_| GisError::Config(format!("bad height '{h}'")))?;
    let w = w.parse().map_err(|_| GisError::Config(format!("bad width '{w}'")))?;
    Ok((h, w))
}

fn run(cli: Cli) -> Result<(), GisError> {
    match cli.command {
        Command::GenData { n, seed, out, size, levels, palette } => {
            if palette != "default" {
                return Err(GisError::Config(format!("unknown palette '{palette}'")));
            }
            let (h, w) = parse_size(&size)?;
            let div = 1usize << (levels.max(1) - 1);
            if h % div != 0 || w % div != 0 {
                return Err(GisError::Config(format!(
                    "size {h}x{w} must be divisible by 2^(levels-1) = {div}"
                )));
            }
            let scene = SceneConfig { height: h, width: w, ..SceneConfig::default() };
            let palette = MaterialPalette::default_six();
            let manifest = generate_dataset(n, seed, &out, &scene, levels, &palette)?;
            println!("wrote {} samples to {}", manifest.samples.len(), out.display());
        }
        Command::Train(args) => {
            let cfg = args.build()?;
            let outcome = fit(cfg)?;
            println!(
                "trained {} steps; checkpoint {}",
                outcome.steps_run,
                outcome.final_checkpoint.display()
            );
        }
        Command::Resume { state, extra_steps } => {
            let outcome = resume(&state, extra_steps)?;
            println!(
                "resumed to step {}; checkpoint {}",
                outcome.steps_run,
                outcome.final_checkpoint.display()
            );
        }
        Command::Synthesize { checkpoint, data, index, out } => {
            let model = load_model(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let sample = dataset.load(index)?;
            let images = synthesize(&model, &sample)?;
            std::fs::create_dir_all(&out).map_err(|e| GisError::io(&out, e))?;
            for (k, img) in images.iter().enumerate() {
                let (_, h, w) = img.dim();
                let mut buf = image::RgbImage::new(w as u32, h as u32);
                for r in 0..h {
                    for c in 0..w {
                        buf.put_pixel(
                            c as u32,
                            r as u32,
                            image::Rgb([
                                (img[[0, r, c]].clamp(0.0, 1.0) * 255.0).round() as u8,
                                (img[[1, r, c]].clamp(0.0, 1.0) * 255.0).round() as u8,
                                (img[[2, r, c]].clamp(0.0, 1.0) * 255.0).round() as u8,
                            ]),
                        );
                    }
                }
                let path = out.join(format!("output-k{k}.png"));
                buf.save(&path)
                    .map_err(|e| GisError::Image { path: path.clone(), msg: e.to_string() })?;
            }
            println!("wrote {} outputs to {}", images.len(), out.display());
        }
        Command::Evaluate { checkpoint, data, out } => {
            let model = load_model(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let report = evaluate(&model, &dataset)?;
            print!("{report}");
            write_report(&report, out.as_ref())?;
        }
        Command::Ablate { config, eval_data, exclude, out } => {
            let cfg = config.build()?;
            let modalities: Vec<Modality> = exclude
                .split(',')
                .filter(|s| !s.is_empty())
                .map(Modality::parse)
                .collect::<Result<_, _>>()?;
            let rows = run_ablation(&cfg, &eval_data, &modalities)?;
            print!("{}", ablation_table(&rows));
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_vec_pretty(&rows)?)
                    .map_err(|e| GisError::io(&path, e))?;
            }
        }
        Command::Gallery { checkpoint, data, out, limit } => {
            let model = load_model(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let manifest = emit_gallery(&model, &dataset, &out, limit)?;
            println!("wrote {} sheets to {}", manifest.entries.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
