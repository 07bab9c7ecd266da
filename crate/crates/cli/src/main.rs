//! `ignet` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use ignet::config::KvFile;
use ignet::data::{self, add_awgn, load_grayscale, NoiseSpec};
use ignet::features::lh_refinement_grids;
use ignet::metrics::spectrum::{
    lowpass_psnr_curve, power_law_slope, radial_power_spectrum, subband_psnr,
};
use ignet::metrics::{psnr, ssim, write_curve, EvalReport, EvalRow};
use ignet::model::{ModelParams, Variant};
use ignet::training::ablation::{run_ablation, AblationSpec};
use ignet::training::trainer::{CHECKPOINT_FILE, LOG_FILE};
use ignet::training::{Checkpoint, TrainConfig, Trainer, TRAIN_KEYS};

#[derive(Parser)]
#[command(
    name = "ignet",
    version,
    about = "Wavelet-domain inter-frequency guided image denoiser"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of clean images.
    Train(TrainArgs),
    /// Denoise image files with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Add seeded noise to clean images, denoise them and report PSNR/SSIM.
    Evaluate(EvaluateArgs),
    /// Frequency analysis of a clean image under synthetic noise.
    Analyze(AnalyzeArgs),
    /// Train the stage-count × refinement-variant grid and compare.
    Ablate(AblateArgs),
    /// Save the high-band feature maps of one stage before and after refinement.
    DumpFeatures(DumpArgs),
}

/// Settings shared by the training commands. Each flag overrides the config
/// file, which overrides the built-in defaults.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Noise standard deviation in 8-bit units (15, 25, 50, or any float).
    #[arg(long)]
    sigma: Option<f64>,
    /// Seed for initialization, shuffling, augmentation and noise.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Number of epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Feature channels C.
    #[arg(long, value_name = "N")]
    channels: Option<usize>,
    /// Wavelet stages S (1, 2 or 3).
    #[arg(long, value_name = "S", value_parser = clap::value_parser!(u64).range(1..=3))]
    stages: Option<u64>,
    /// Batch size.
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
    /// Training patch size.
    #[arg(long, value_name = "N")]
    patch: Option<usize>,
    /// Refinement variant.
    #[arg(long, value_name = "full|no-lgr|no-band-sep")]
    variant: Option<Variant>,
    /// Directory of clean training images.
    #[arg(long, value_name = "DIR")]
    train_dir: Option<PathBuf>,
    /// Clip the global gradient norm to this value.
    #[arg(long, value_name = "NORM")]
    grad_clip: Option<f64>,
}

impl TrainFlags {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<TrainConfig> {
        let mut kv = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                KvFile::parse(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => KvFile::default(),
        };
        kv.check_known(&TRAIN_KEYS).with_context(|| {
            format!(
                "in {}",
                self.config.as_deref().unwrap_or(Path::new("-")).display()
            )
        })?;
        // Relative dataset paths in a config file are relative to the file.
        if let (Some(dir), Some(cfg)) = (kv.get("train_dir").map(PathBuf::from), &self.config) {
            if dir.is_relative() {
                let base = cfg.parent().unwrap_or(Path::new(""));
                kv.set("train_dir", base.join(dir).display());
            }
        }
        if let Some(v) = self.sigma {
            kv.set("sigma", v);
        }
        if let Some(v) = self.seed {
            kv.set("seed", v);
        }
        if let Some(v) = self.epochs {
            kv.set("epochs", v);
        }
        if let Some(v) = self.channels {
            kv.set("channels", v);
        }
        if let Some(v) = self.stages {
            kv.set("stages", v);
        }
        if let Some(v) = self.batch {
            kv.set("batch_size", v);
        }
        if let Some(v) = self.patch {
            kv.set("patch", v);
        }
        if let Some(v) = self.variant {
            kv.set("variant", v);
        }
        if let Some(v) = &self.train_dir {
            kv.set("train_dir", v.display());
        }
        if let Some(v) = self.grad_clip {
            kv.set("grad_clip", v);
        }
        Ok(TrainConfig::from_kv(&kv)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Output directory for the checkpoint and log.
    #[arg(long, value_name = "DIR", default_value = "runs/train")]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Print the resolved configuration and exit without training.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Noisy images or directories of them.
    #[arg(required = true, value_name = "INPUT")]
    inputs: Vec<PathBuf>,
    /// Output directory; results are written as `<name>_denoised.png`.
    #[arg(long, value_name = "DIR", default_value = "denoised")]
    out: PathBuf,
    /// Directory of clean images with matching names; prints PSNR per image.
    #[arg(long, value_name = "DIR")]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Directory of clean images.
    #[arg(value_name = "DIR")]
    data: PathBuf,
    /// Noise standard deviation in 8-bit units.
    #[arg(long, default_value_t = 25.0)]
    sigma: f64,
    /// Noise seed; image `i` uses `seed + i`.
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
    /// Also write `report.txt` and `report.jsonl` here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Clean image.
    #[arg(value_name = "IMAGE")]
    image: PathBuf,
    /// Noise standard deviation in 8-bit units.
    #[arg(long, default_value_t = 50.0)]
    sigma: f64,
    /// Noise seed.
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
    /// Low-pass cutoffs as fractions of the largest radial frequency.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75,1.0")]
    fractions: Vec<f64>,
    /// Radial spectrum bins.
    #[arg(long, default_value_t = 32)]
    bins: usize,
    /// Output directory for the curve files.
    #[arg(long, value_name = "DIR", default_value = "analysis")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Seeds to average over (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Cells as `stages:variant` (comma-separated); defaults to the full grid.
    #[arg(long, value_delimiter = ',', value_name = "S:VARIANT")]
    cells: Vec<String>,
    /// Output directory for `ablation.txt` and `ablation.jsonl`.
    #[arg(long, value_name = "DIR", default_value = "runs/ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Input image.
    #[arg(value_name = "IMAGE")]
    image: PathBuf,
    /// Wavelet stage whose high band is shown.
    #[arg(long, default_value_t = 0)]
    stage: usize,
    /// Last refinement round to show (default: all rounds of the stage).
    #[arg(long)]
    round: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "features")]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.model)
}

fn as_plane(img: &data::ImageSample) -> Result<ignet::tensor::Tensor<f32>> {
    Ok(img.pixels.reshape([img.height(), img.width()])?)
}

fn train(args: TrainArgs) -> Result<()> {
    let config = args.flags.resolve()?;
    if args.print_config {
        print!("{}", config.to_text());
        return Ok(());
    }
    let mut trainer = Trainer::from_dir(config)?;
    if let Some(path) = &args.resume {
        let ck = Checkpoint::load_for(path, &trainer.config.model)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        trainer = trainer.resume(ck)?;
        info!("resuming after epoch {}", trainer.epochs_done());
    }
    let mut trainer = trainer.with_output_dir(&args.out)?;
    trainer.run()?;
    if let Some(last) = trainer.log.last() {
        println!(
            "trained {} epochs; final loss {:.6}; held-out PSNR {}",
            last.epoch,
            last.train_loss,
            last.heldout_psnr
                .map_or_else(|| "n/a".into(), |p| format!("{p:.2} dB"))
        );
    }
    println!("checkpoint: {}", args.out.join(CHECKPOINT_FILE).display());
    println!("log: {}", args.out.join(LOG_FILE).display());
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(data::list_images(p, None)?);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// A file in `dir` with the same stem as `name`.
fn find_match(dir: &Path, name: &Path) -> Result<Option<PathBuf>> {
    let stem = name.file_stem().unwrap_or_default();
    Ok(data::list_images(dir, None)?
        .into_iter()
        .find(|p| p.file_stem() == Some(stem)))
}

fn denoise(args: DenoiseArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let m = model.config.size_multiple();
    create_dir(&args.out)?;
    let files = expand_inputs(&args.inputs)?;
    if files.is_empty() {
        bail!("no input images");
    }
    for path in files {
        let img = load_grayscale(&path)?;
        if img.height() < m || img.width() < m {
            warn!(
                "{}: {}x{} is smaller than {m}x{m}, skipped",
                path.display(),
                img.height(),
                img.width()
            );
            continue;
        }
        let noisy = as_plane(&img)?;
        let out = model.denoise(&noisy)?.clamp(0.0, 1.0);
        let dest = args.out.join(format!("{}_denoised.png", img.name()));
        data::save_grayscale(&dest, &out)?;
        match &args.gt {
            Some(gt_dir) => match find_match(gt_dir, &path)? {
                Some(gt_path) => {
                    let gt = as_plane(&load_grayscale(&gt_path)?)?;
                    println!(
                        "{}: noisy {:.2} dB -> denoised {:.2} dB",
                        img.name(),
                        psnr(&noisy, &gt)?,
                        psnr(&out, &gt)?
                    );
                }
                None => warn!("{}: no ground truth in {}", img.name(), gt_dir.display()),
            },
            None => println!("{}", dest.display()),
        }
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let images = data::load_dir(&args.data, None)?;
    if images.is_empty() {
        bail!("no images in {}", args.data.display());
    }
    let mut rows = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let clean = as_plane(img)?;
        let noisy = add_awgn(
            &clean,
            NoiseSpec {
                sigma: args.sigma,
                seed: args.seed.wrapping_add(i as u64),
            },
        );
        let out = model.denoise(&noisy)?.clamp(0.0, 1.0);
        rows.push(EvalRow {
            name: img.name(),
            noisy_psnr: Some(psnr(&noisy, &clean)?),
            psnr: psnr(&out, &clean)?,
            ssim: ssim(&out, &clean)?,
        });
    }
    let model_id = args
        .checkpoint
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let report = EvalReport::new(args.sigma, model_id, rows);
    print!("{}", report.to_table());
    if let Some(noisy) = report.mean_noisy_psnr {
        let expected = 20.0 * (255.0 / args.sigma).log10();
        println!(
            "noisy-input sanity: mean {noisy:.2} dB, expected {expected:.2} dB for sigma {}",
            args.sigma
        );
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        fs::write(dir.join("report.txt"), report.to_table())?;
        fs::write(dir.join("report.jsonl"), report.to_jsonl())?;
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let clean = as_plane(&load_grayscale(&args.image)?)?;
    let noisy = add_awgn(
        &clean,
        NoiseSpec {
            sigma: args.sigma,
            seed: args.seed,
        },
    );
    create_dir(&args.out)?;
    let curve = lowpass_psnr_curve(&clean, &noisy, &args.fractions)?;
    write_curve(
        args.out.join("lowpass_psnr.txt"),
        ("cutoff_fraction", "psnr_db"),
        &curve.fractions,
        &curve.psnr,
    )?;
    let spectrum = radial_power_spectrum(&clean, args.bins)?;
    write_curve(
        args.out.join("radial_spectrum.txt"),
        ("frequency", "power"),
        &spectrum.freqs,
        &spectrum.power,
    )?;
    let bands = subband_psnr(&clean, &noisy)?;
    write_curve(
        args.out.join("subband_psnr.txt"),
        ("band(0=LL,1=HL,2=LH,3=HH)", "psnr_db"),
        &[0.0, 1.0, 2.0, 3.0],
        &bands.as_array(),
    )?;
    for (f, p) in curve.fractions.iter().zip(&curve.psnr) {
        println!("cutoff {f:.2}: {p:.2} dB");
    }
    println!(
        "low-pass curve {}",
        if curve.is_non_increasing() {
            "is monotone non-increasing"
        } else {
            "is NOT monotone"
        }
    );
    match power_law_slope(&spectrum) {
        Some(s) => println!("spectrum slope {s:.2}"),
        None => println!("spectrum slope undefined"),
    }
    println!(
        "subband PSNR: LL {:.2}  HL {:.2}  LH {:.2}  HH {:.2} dB",
        bands.ll, bands.hl, bands.lh, bands.hh
    );
    Ok(())
}

fn parse_cell(s: &str) -> Result<(usize, Variant)> {
    let (stages, variant) = s
        .split_once(':')
        .with_context(|| format!("cell `{s}` is not `stages:variant`"))?;
    let stages: usize = stages
        .parse()
        .with_context(|| format!("bad stage count in `{s}`"))?;
    let variant = variant.parse::<Variant>().map_err(anyhow::Error::msg)?;
    Ok((stages, variant))
}

fn ablate(args: AblateArgs) -> Result<()> {
    let base = args.flags.resolve()?;
    let dir = base.train_dir.clone().context("`train_dir` is not set")?;
    let images = data::load_dir(&dir, base.pattern.as_deref())?;
    if images.is_empty() {
        bail!("`train_dir` {} contains no images", dir.display());
    }
    let (train, heldout) =
        data::heldout_split(&images, |s| s.source.as_path(), base.heldout_fraction);
    let mut spec = AblationSpec::full_grid(base, args.seeds);
    if !args.cells.is_empty() {
        spec.cells = args
            .cells
            .iter()
            .map(|c| parse_cell(c))
            .collect::<Result<_>>()?;
    }
    let report = run_ablation(&spec, &train, &heldout);
    let table = report.to_table();
    print!("{table}");
    create_dir(&args.out)?;
    fs::write(args.out.join("ablation.txt"), &table)?;
    fs::write(args.out.join("ablation.jsonl"), report.to_jsonl())?;
    let failed = report.failures().count();
    if failed > 0 {
        bail!("{failed} ablation cell(s) failed");
    }
    Ok(())
}

fn dump_features(args: DumpArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let image = as_plane(&load_grayscale(&args.image)?)?;
    let grids = lh_refinement_grids(&model, &image, args.stage, args.round)?;
    create_dir(&args.out)?;
    for g in grids {
        let dest = args.out.join(format!("h{}_lh_{}.png", args.stage, g.label));
        data::save_grayscale(&dest, &g.image)?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze(a),
        Command::Ablate(a) => ablate(a),
        Command::DumpFeatures(a) => dump_features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
