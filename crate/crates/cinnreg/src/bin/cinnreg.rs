//! Command-line entry point tying the pipeline together: dataset
//! generation, two-stage training, test-set evaluation, and single-case
//! inference. Exit codes: 0 success, 1 validation error, 2 runtime error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use cinnreg::cinn::sample_posterior;
use cinnreg::config::RunConfig;
use cinnreg::dataset::{generate_split, DatasetManifest, InMemoryDataset, Split};
use cinnreg::drr::load_image;
use cinnreg::eval::{
    evaluate_testset, lao_histogram, write_histogram_csv, write_histogram_svg, write_outputs,
    EvalParams,
};
use cinnreg::modes::detect_modes;
use cinnreg::phantom::{load_volume, resample};
use cinnreg::train::{load_checkpoint, stage2_path, train};
use cinnreg::{Error, Result};

#[derive(Parser)]
#[command(name = "cinnreg", version, about = "Ambiguity-aware 2D/3D registration pipeline")]
struct Cli {
    /// JSON config file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set training.batch_size=16.
    /// Repeatable; applied in order after loading the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms, poses, and projections for both splits.
    GenData,
    /// Run (or resume) the two-stage training on the generated dataset.
    Train,
    /// Evaluate a trained checkpoint on the test split.
    Eval {
        /// Checkpoint path; defaults to <out>/model/stage2.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Emit LAO posterior histograms (CSV + SVG) for this many leading
        /// test cases.
        #[arg(long, default_value_t = 4)]
        histograms: usize,
    },
    /// Posterior and mode report for a single (volume, image) pair.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Print the fully resolved configuration as JSON.
    PrintConfig,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.overrides {
        cfg = cfg.apply_override(assignment)?;
    }
    if let Ok(root) = std::env::var("CINNREG_OUT") {
        cfg.out_dir = PathBuf::from(root);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Timestamps live only here; every other artifact is reproducible.
fn sidecar_log(root: &Path, what: &str) {
    let _ = std::fs::create_dir_all(root);
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(root.join("run.log"))
    {
        let t = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(f, "{t} {what}");
    }
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn model_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("model")
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    sidecar_log(&cfg.out_dir, "gen-data");
    let dir = data_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    cfg.save(&cfg.out_dir.join("config.json"))?;
    let train_m = generate_split(cfg, Split::Train, &dir)?;
    let test_m = generate_split(cfg, Split::Test, &dir)?;
    println!(
        "wrote {} train and {} test records to {} (norm constant {:.6})",
        train_m.records.len(),
        test_m.records.len(),
        dir.display(),
        train_m.header.norm_constant,
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    sidecar_log(&cfg.out_dir, "train");
    let manifest = DatasetManifest::load(&DatasetManifest::path_of(&data_dir(cfg), Split::Train))?;
    let ds = InMemoryDataset::load(&manifest, cfg.condnet.volume_input_dims)?;
    let out = model_dir(cfg);
    let ckpt = train(cfg, &ds, &out)?;
    let last = ckpt.loss_history.last().expect("nonempty history");
    println!(
        "training complete: stage 2 epoch {} train_nll {:.4}; checkpoints in {}",
        ckpt.epoch,
        last.loss,
        out.display()
    );
    Ok(())
}

fn eval_params(cfg: &RunConfig, manifest: &DatasetManifest) -> EvalParams {
    EvalParams {
        camera: manifest.header.camera.clone(),
        aic_threshold: cfg.aic_threshold,
        n_posterior_samples: cfg.n_posterior_samples,
        volume_input_dims: cfg.condnet.volume_input_dims,
    }
}

fn load_model(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<cinnreg::train::Checkpoint> {
    let path = checkpoint
        .clone()
        .unwrap_or_else(|| stage2_path(&model_dir(cfg)));
    let ckpt = load_checkpoint(&path)?;
    if ckpt.flow.is_none() {
        return Err(Error::Parameter(format!(
            "{} is a stage-1 checkpoint without a flow",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Option<PathBuf>, histograms: usize) -> Result<()> {
    sidecar_log(&cfg.out_dir, "eval");
    let manifest = DatasetManifest::load(&DatasetManifest::path_of(&data_dir(cfg), Split::Test))?;
    let mut ckpt = load_model(cfg, checkpoint)?;
    let params = eval_params(cfg, &manifest);
    let flow = ckpt.flow.as_mut().expect("checked in load_model");
    let (summary, cases) = evaluate_testset(flow, &mut ckpt.condnet, &manifest, &params)?;
    let out = cfg.out_dir.join("eval");
    write_outputs(&out, &cases, &summary)?;

    for (i, r) in manifest.records.iter().take(histograms).enumerate() {
        let volume = load_volume(&manifest.resolve(&r.volume_path))?;
        let ds = resample(&volume, params.volume_input_dims);
        let image = load_image(&manifest.resolve(&r.image_path))?;
        let (_, poses) = sample_posterior(
            flow,
            &mut ckpt.condnet,
            &ds,
            &image,
            params.n_posterior_samples,
            r.seed,
        )?;
        let bins = lao_histogram(&poses);
        write_histogram_csv(&out.join(format!("lao_hist_{i:04}.csv")), &bins)?;
        write_histogram_svg(&out.join(format!("lao_hist_{i:04}.svg")), &bins)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("per-case results in {}", out.display());
    Ok(())
}

fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Option<PathBuf>,
    volume: &Path,
    image: &Path,
) -> Result<()> {
    let mut ckpt = load_model(cfg, checkpoint)?;
    let vol = load_volume(volume)?;
    let img = load_image(image)?;
    let ds = resample(&vol, cfg.condnet.volume_input_dims);
    let flow = ckpt.flow.as_mut().expect("checked in load_model");
    let (vecs, _) = sample_posterior(
        flow,
        &mut ckpt.condnet,
        &ds,
        &img,
        cfg.n_posterior_samples,
        cfg.seed,
    )?;
    let report = detect_modes(&vecs, cfg.aic_threshold, cfg.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval {
            checkpoint,
            histograms,
        } => cmd_eval(&cfg, checkpoint, *histograms),
        Command::Infer {
            checkpoint,
            volume,
            image,
        } => cmd_infer(&cfg, checkpoint, volume, image),
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
