use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use panodr_core::checkpoint::load_structure;
use panodr_core::dataset::store::read_dataset;
use panodr_core::dataset::{split_dataset, DRSample, Splits};
use panodr_core::pano::{DiminishMask, Panorama};
use panodr_core::pipeline::{run_pipeline, Pipeline};
use panodr_core::trainer::{convergence_report, evaluate, evaluate_predictions, mean_fill_predictions, plot_convergence, structure_miou, train, RunLog, Stage, TrainConfig};

#[derive(Parser)]
#[command(about = "Train, evaluate and run the panorama diminishing models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Structure stage; the config's stage field is ignored.
    TrainStructure {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean full-frame mIoU of a structure checkpoint.
    EvalStructure {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Runs the stage named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-sample hole metrics as JSON lines, followed by the mean.
    Eval {
        #[arg(long)]
        ckpt_g: PathBuf,
        #[arg(long)]
        ckpt_s: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Score context-mean-fill composites instead of the generator.
        #[arg(long)]
        mean_fill: bool,
    },
    /// Steps to a psnr_hole threshold for two generator run logs.
    Compare {
        #[arg(long)]
        log_a: PathBuf,
        #[arg(long)]
        log_b: PathBuf,
        #[arg(long, default_value_t = 22.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Prints the default training config.
    PrintConfig,
    Diminish {
        #[arg(long)]
        pano: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        ckpt_g: PathBuf,
        #[arg(long)]
        ckpt_s: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layout_out: Option<PathBuf>,
    },
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn pick(data: &Path, split: Split) -> Result<Vec<DRSample>> {
    let samples = read_dataset(data)?;
    let Splits { train, val, test } = split_dataset(samples, TrainConfig::default().split)?;
    let set = match split {
        Split::Train => train,
        Split::Val => val,
        Split::Test => test,
        Split::All => train.into_iter().chain(val).chain(test).collect(),
    };
    if set.is_empty() {
        bail!("selected split is empty");
    }
    Ok(set)
}

fn run_training(cfg: &TrainConfig) -> Result<()> {
    let out = train(cfg)?;
    if let Some(last) = out.log.evals.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    match out.checkpoint {
        Some(p) => log::info!("checkpoint {}", p.display()),
        None => log::warn!("no checkpoint_dir set; nothing saved"),
    }
    Ok(())
}

fn main() -> Result<()> {
    panodr_cli::init_logging();
    match Cli::parse().cmd {
        Cmd::TrainStructure { config } => run_training(&TrainConfig { stage: Stage::Structure, ..read_config(&config)? })?,
        Cmd::Train { config } => run_training(&read_config(&config)?)?,
        Cmd::EvalStructure { ckpt, data, split } => {
            let (net, params, _) = load_structure(&ckpt)?;
            let samples = pick(&data, split)?;
            let miou = structure_miou(&net, &params, &samples)?;
            println!("{}", serde_json::json!({ "samples": samples.len(), "miou": miou }));
        }
        Cmd::Eval { ckpt_g, ckpt_s, data, split, out, mean_fill } => {
            let pipe = Pipeline::load(&ckpt_g, &ckpt_s)?;
            let samples = pick(&data, split)?;
            let (per, mean) = if mean_fill {
                evaluate_predictions(&pipe.structure, &pipe.structure_params, &samples, &mean_fill_predictions(&samples)?)?
            } else {
                evaluate(&pipe, &samples)?
            };
            let mut w = BufWriter::new(File::create(&out)?);
            for r in &per {
                writeln!(w, "{}", serde_json::to_string(r)?)?;
            }
            writeln!(w, "{}", serde_json::to_string(&mean)?)?;
            w.flush()?;
            println!("{}", serde_json::to_string(&mean)?);
        }
        Cmd::Compare { log_a, log_b, threshold, out, plot } => {
            let report = convergence_report(&RunLog::load(&log_a)?, &RunLog::load(&log_b)?, threshold)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            if let Some(p) = plot {
                plot_convergence(&report, &p)?;
            }
            println!("steps_a {:?} steps_b {:?}", report.steps_a, report.steps_b);
        }
        Cmd::PrintConfig => println!("{}", serde_json::to_string_pretty(&TrainConfig::default())?),
        Cmd::Diminish { pano, mask, ckpt_g, ckpt_s, out, layout_out } => {
            let pipe = Pipeline::load(&ckpt_g, &ckpt_s)?;
            let (p, m) = (Panorama::load_png(&pano)?, DiminishMask::load_png(&mask)?);
            let res = run_pipeline(&pipe, &p, &m)?;
            res.composite.save_png(&out)?;
            if let Some(path) = layout_out {
                res.layout.save_png(&path)?;
            }
        }
    }
    Ok(())
}
