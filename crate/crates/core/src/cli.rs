//! Command-line front end. `main.rs` only parses and maps errors to exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::benchkit::{bench_inference, DEFAULT_SAMPLES, DEFAULT_WARMUP};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_set, extract_profile, lde_baseline, measure_particle, Point};
use crate::imgstore::{load_image, save_image, Domain, Image, ImageFormat};
use crate::preprocess::{normalize_raw, PreprocessConfig};
use crate::synthgen::{
    make_dataset, make_pair, pair_seeds, ContrastStyle, DatasetOptions, DoseModel, Manifest,
    SceneSpec, Split, HDE_MEAN_DOSE, LDE_MEAN_DOSE,
};
use crate::tensor::{load_checkpoint, save_checkpoint, DEFAULT_BASE_WIDTH};
use crate::trainer::{train, TrainConfig};

/// Suffix of the reproducibility record written next to every output.
pub const RECORD_SUFFIX: &str = "run.txt";

#[derive(Debug, Parser)]
#[command(
    name = "lowdose",
    version,
    about = "Low-dose micrograph restoration toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired synthetic dataset.
    Synth(SynthArgs),
    /// Fit a denoiser on a dataset.
    Train(TrainArgs),
    /// Denoise one image.
    Infer(InferArgs),
    /// Score a checkpoint on one split against the undenoised inputs.
    Eval(EvalArgs),
    /// Sample a line profile and measure the particle under it.
    Profile(ProfileArgs),
    /// Time single-image inference.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 224)]
    pub train: usize,
    #[arg(long, default_value_t = 36)]
    pub val: usize,
    /// strong_contrast, weak_contrast or mixed.
    #[arg(long, default_value = "mixed")]
    pub style: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Nanometres per pixel.
    #[arg(long, default_value_t = 1.0)]
    pub pixel_scale: f64,
    #[arg(long, default_value_t = HDE_MEAN_DOSE)]
    pub hde_dose: f64,
    #[arg(long, default_value_t = LDE_MEAN_DOSE)]
    pub lde_dose: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_BASE_WIDTH)]
    pub base_width: usize,
    /// Snapshot every N epochs into `--snapshot-dir`; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub snapshot_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `.rawf32` keeps the normalized output; `.pgm` quantizes it to 16 bits.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ax: f64,
    #[arg(long)]
    pub ay: f64,
    #[arg(long)]
    pub bx: f64,
    #[arg(long)]
    pub by: f64,
    #[arg(long)]
    pub report: PathBuf,
    /// Scene file used to estimate the background from particle-free pixels.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Image to time; a fixed synthetic LDE image when absent.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Side of the synthetic image.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value = "unspecified")]
    pub hardware: String,
    /// Defaults to `<ckpt>.bench.tsv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile(a),
        Command::Bench(a) => bench(a),
    }
}

/// Path of the record that sits beside `output`.
pub fn record_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(RECORD_SUFFIX);
    output.with_file_name(name)
}

/// Full flag set, no timestamps, so identical invocations give identical bytes.
fn write_record(path: &Path, command: &str, args: &impl std::fmt::Debug) -> Result<()> {
    let text = format!(
        "lowdose {}\ncommand {command}\n{args:#?}\n",
        env!("CARGO_PKG_VERSION")
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    ImageFormat::from_path(path).ok_or_else(|| {
        Error::InvalidImage(format!(
            "{}: unknown extension (use .pgm or .rawf32)",
            path.display()
        ))
    })
}

/// Load any supported image and bring it into the normalized domain.
fn load_normalized(path: &Path) -> Result<Image> {
    let img = load_image(path, format_of(path)?)?;
    match img.domain() {
        Domain::Normalized => Ok(img),
        Domain::Raw => normalize_raw(&img, &PreprocessConfig::default()),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let style = ContrastStyle::parse(&a.style)?;
    let opts = DatasetOptions {
        width: a.size,
        height: a.size,
        pixel_scale: a.pixel_scale,
        hde_mean: a.hde_dose,
        lde_mean: a.lde_dose,
        ..Default::default()
    };
    let m = make_dataset(&a.out, a.train, a.val, style, a.seed, &opts)?;
    write_record(&a.out.join(RECORD_SUFFIX), "synth", a)?;
    info!(
        "wrote {} train + {} val pairs to {}",
        m.count(Split::Train),
        m.count(Split::Val),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.data)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: a.snapshot_dir.clone(),
        seed: a.seed,
        base_width: a.base_width,
        ..Default::default()
    };
    let (ckpt, curve) = train(&manifest, &cfg)?;
    save_checkpoint(&ckpt, &a.out)?;
    let curve_path = a.out.with_extension("curve.tsv");
    fs::write(&curve_path, curve.to_tsv()).map_err(|e| Error::io(&curve_path, e))?;
    write_record(&record_path(&a.out), "train", a)?;
    info!(
        "saved {} (best epoch {})",
        a.out.display(),
        ckpt.meta("best_epoch").unwrap_or("?")
    );
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let out = ckpt.model.denoise(&load_normalized(&a.input)?)?;
    match format_of(&a.out)? {
        ImageFormat::RawF32 => save_image(&out, &a.out, ImageFormat::RawF32)?,
        ImageFormat::Pgm16 => {
            let counts: Vec<u16> = out
                .data()
                .iter()
                .map(|&v| (v * 65535.0).round() as u16)
                .collect();
            let q = Image::from_counts(out.width(), out.height(), &counts)?
                .with_pixel_scale(out.pixel_scale())?;
            save_image(&q, &a.out, ImageFormat::Pgm16)?;
        }
    }
    write_record(&record_path(&a.out), "infer", a)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let manifest = Manifest::load(&a.data)?;
    let split = Split::parse(&a.split)?;
    let model = evaluate_set(&ckpt, &manifest, split)?;
    let base = lde_baseline(&manifest, split)?;
    let (mae_m, _) = model.mae_stats();
    let (psnr_m, _) = model.psnr_stats();
    let (mae_b, _) = base.mae_stats();
    let (psnr_b, _) = base.psnr_stats();
    let mut text = model.to_tsv();
    let _ = writeln!(text, "lde_mean\t{mae_b:.6}\t{psnr_b:.4}");
    fs::write(&a.report, text).map_err(|e| Error::io(&a.report, e))?;
    write_record(&record_path(&a.report), "eval", a)?;
    println!("output vs hde: MAE {mae_m:.5}  PSNR {psnr_m:.3} dB");
    println!("lde vs hde:    MAE {mae_b:.5}  PSNR {psnr_b:.3} dB");
    Ok(())
}

fn profile(a: &ProfileArgs) -> Result<()> {
    let img = load_normalized(&a.input)?;
    let scene = match &a.scene {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(crate::synthgen::parse_scene(&text)?)
        }
        None => None,
    };
    let prof = extract_profile(
        &img,
        Point::new(a.ax, a.ay),
        Point::new(a.bx, a.by),
        scene.as_ref(),
    )?;
    let mut text = String::new();
    match measure_particle(&prof) {
        Ok(m) => {
            let opt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(text, "# diameter_nm\t{:.4}", m.diameter);
            let _ = writeln!(text, "# pseudo_diameter_nm\t{}", opt(m.pseudo_diameter));
            let _ = writeln!(text, "# edge_width_nm\t{}", opt(m.edge_width));
            let _ = writeln!(text, "# center_nm\t{:.4}", m.center);
            println!(
                "diameter {:.2} nm, pseudo-diameter {} nm",
                m.diameter,
                opt(m.pseudo_diameter)
            );
        }
        Err(e) => {
            let _ = writeln!(text, "# measurement\t{e}");
            println!("no measurement: {e}");
        }
    }
    text.push_str(&prof.to_tsv());
    fs::write(&a.report, text).map_err(|e| Error::io(&a.report, e))?;
    write_record(&record_path(&a.report), "profile", a)
}

/// Fixed LDE scene used when no bench image is given.
pub fn bench_image(size: usize) -> Result<Image> {
    let spec = SceneSpec::random(size, size, 1.0, ContrastStyle::Mixed, 0);
    let (_, hs, ls) = pair_seeds(0);
    let (pair, _) = make_pair(
        "bench",
        &spec,
        &DoseModel::new(HDE_MEAN_DOSE, hs)?,
        &DoseModel::new(LDE_MEAN_DOSE, ls)?,
        &PreprocessConfig::default(),
    )?;
    Ok(pair.lde)
}

fn bench(a: &BenchArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let img = match &a.input {
        Some(p) => load_image(p, format_of(p)?)?,
        None => bench_image(a.size)?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| Error::Bench(format!("thread pool: {e}")))?;
    let report = pool.install(|| bench_inference(&ckpt, &img, a.warmup, a.samples, &a.hardware))?;
    report.check_consistency(a.samples)?;
    let path = a
        .report
        .clone()
        .unwrap_or_else(|| a.ckpt.with_extension("bench.tsv"));
    fs::write(&path, report.to_tsv()).map_err(|e| Error::io(&path, e))?;
    write_record(&record_path(&path), "bench", a)?;
    println!(
        "{}x{} on {} threads: {:.2} +/- {:.2} ms over {} samples",
        report.width, report.height, report.threads, report.mean_ms, report.std_ms, a.samples
    );
    Ok(())
}
