//! Command-line front end. Flags may also come from a flat `key = value`
//! file given with `--config`; flags on the command line win.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::csvout;
use crate::error::{Error, Result};
use crate::flow::{ControlSet, Scheme};
use crate::imgcore::{load_pgm, psnr, save_pgm, Image, PgmDepth};
use crate::model::{restore, ModelFile};
use crate::spectral::{self, SpectralConfig, RESIDUAL_GATE};
use crate::stopping::{self, StoppingCurve};
use crate::synth::synthetic_image;
use crate::train::{self, DataSource, Task, TrainConfig};
use crate::tvl2::{self, TvConfig};

const SUBCOMMANDS: [&str; 6] = ["toy2d", "train", "restore", "sweep", "spectra", "tvl2"];

/// Comma-separated list flag, e.g. `--nu 0.2,0.4`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("'{}': {e}", p.trim())))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gradstop",
    version,
    about = "Early-stopped gradient flows for image restoration"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file with default flags for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimal stopping on the two-dimensional toy problem.
    Toy2d(Toy2dArgs),
    /// iPALM training of a stopping time and a regularizer.
    Train(TrainArgs),
    /// Runs a trained flow on a corrupted image.
    Restore(RestoreArgs),
    /// Energy and first-order condition over a grid of stopping times.
    Sweep(SweepArgs),
    /// Generalized eigenpairs of a trained regularizer.
    Spectra(SpectraArgs),
    /// PSNR of TV-L2 gradient descent over iterations and weights.
    Tvl2(Tvl2Args),
}

#[derive(Debug, Args)]
pub struct Toy2dArgs {
    #[arg(long, default_value = "toy2d")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, clap::ValueEnum)]
pub enum TaskKind {
    Denoise,
    Deblur,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long, value_enum, default_value = "denoise")]
    pub task: TaskKind,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.5)]
    pub tau: f64,
}

impl TaskArgs {
    fn task(&self) -> Task {
        match self.task {
            TaskKind::Denoise => Task::Denoise { sigma: self.sigma },
            TaskKind::Deblur => Task::Deblur {
                tau: self.tau,
                sigma: self.sigma,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// `synthetic` or a directory of PGM images.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    #[arg(long, default_value_t = 48)]
    pub nk: usize,
    #[arg(long, default_value_t = 7)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 63)]
    pub nw: usize,
    #[arg(long, default_value_t = 10)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 96)]
    pub patch: usize,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "euler")]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 1.0)]
    pub t_init: f64,
    #[arg(long, default_value_t = 1.0)]
    pub data_weight: f64,
    /// Output directory for `model.bin` and `history.csv`.
    #[arg(long, default_value = "train_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Stopping time; defaults to the trained one.
    #[arg(long = "T")]
    pub stop_time: Option<f64>,
    /// Ground truth for PSNR reporting.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImageSetArgs {
    /// `synthetic` or a directory of clean PGM images.
    #[arg(long, default_value = "synthetic")]
    pub images: String,
    /// Number and side of synthetic images.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub set: ImageSetArgs,
    /// Explicit stopping times; overrides `--t-max` and `--t-count`.
    #[arg(long)]
    pub grid: Option<List<f64>>,
    /// Grid end, default three times the trained stopping time.
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long, default_value_t = 30)]
    pub t_count: usize,
    /// Noise seed for the corrupted inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `curves.csv`, `mean.csv` and `crossings.csv`.
    #[arg(long, default_value = "sweep_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpectraArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 127)]
    pub size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    /// `synthetic` or a directory of PGM images to draw initial patches from.
    #[arg(long, default_value = "synthetic")]
    pub sources: String,
    #[arg(long, default_value = "spectra_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Tvl2Args {
    /// Clean PGM image; a synthetic one when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Side of the synthetic image.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "0.2,0.4,0.8,1.2,1.6")]
    pub nu: List<f64>,
    #[arg(long, default_value_t = 4000)]
    pub iters: usize,
    /// Iteration spacing of the recorded PSNR values.
    #[arg(long, default_value_t = 100)]
    pub every: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value = "tvl2.csv")]
    pub out: PathBuf,
}

/// Parses `key = value` lines (`#` starts a comment) into `--key=value` flags.
pub fn config_flags(text: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", n + 1)))?;
        let key = k.trim().trim_start_matches("--");
        if key.is_empty() {
            return Err(Error::invalid(format!("config line {}: empty key", n + 1)));
        }
        out.push(format!("--{key}={}", v.trim()).into());
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts the config-file flags right after the subcommand so that later
/// command-line flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let flags = config_flags(&text)?;
    let Some(pos) = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(args);
    };
    let mut out = args[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Dataset(_) => 2,
        _ => 1,
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("GRADSTOP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("GRADSTOP_THREADS must be a positive integer, got '{v}'")))?;
    if n == 0 {
        return Err(Error::invalid("GRADSTOP_THREADS must be at least 1"));
    }
    // a pool that was already built (tests, embedding) keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match init_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Toy2d(a) => cmd_toy2d(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Restore(a) => cmd_restore(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Spectra(a) => cmd_spectra(&a),
        Command::Tvl2(a) => cmd_tvl2(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|()| w.flush()).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |t| format!("{t:.6}"))
}

pub fn cmd_toy2d(a: &Toy2dArgs) -> Result<()> {
    let report = stopping::run_toy2d()?;
    report.write_dir(&a.out)?;
    println!(
        "T_bar {:.6} crossing {} second_order {:.6} ratio {:.6}",
        report.t_bar,
        fmt_opt(report.curve.zero_crossing()),
        report.second_order.value,
        report.second_order.ratio
    );
    Ok(())
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        num_kernels: a.nk,
        kernel_size: a.kernel_size,
        num_weights: a.nw,
        depth: a.depth,
        batch_size: a.batch,
        patch: a.patch,
        iters: a.iters,
        seed: a.seed,
        task: a.task.task(),
        scheme: a.scheme,
        data_weight: a.data_weight,
        t_init: a.t_init,
        ..TrainConfig::default()
    }
}

fn data_source(arg: &str) -> DataSource<'_> {
    if arg == "synthetic" {
        DataSource::Synthetic
    } else {
        DataSource::Directory(Path::new(arg))
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a);
    cfg.validate()?;
    let dataset = train::make_dataset(data_source(&a.data), cfg.patch, cfg.seed)?;
    create_dir(&a.out)?;
    let result = train::ipalm_train(&cfg, &dataset)?;
    let model = ModelFile::from_training(&cfg, result.params);
    model.save(a.out.join("model.bin"))?;
    write_file(&a.out.join("history.csv"), |w| {
        train::write_history_csv(&result.history, w)
    })?;
    let last = result.history.last().map_or(f64::NAN, |r| r.loss);
    println!("final loss {last:.6e} T {:.6}", model.stop_time());
    Ok(())
}

pub fn cmd_restore(a: &RestoreArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let input = load_pgm(&a.input)?;
    let out = restore(&model, &input, a.stop_time)?.clamped(0.0, 1.0);
    save_pgm(&out, &a.output, PgmDepth::Sixteen)?;
    let t = a.stop_time.unwrap_or(model.stop_time());
    match &a.truth {
        Some(p) => {
            let truth = load_pgm(p)?;
            println!(
                "T {t:.6} psnr_in {:.4} psnr_out {:.4}",
                psnr(&input, &truth, 1.0)?,
                psnr(&out, &truth, 1.0)?
            );
        }
        None => println!("T {t:.6}"),
    }
    Ok(())
}

fn image_set(a: &ImageSetArgs, seed: u64) -> Result<Vec<Image>> {
    match data_source(&a.images) {
        DataSource::Synthetic => {
            if a.count == 0 || a.size == 0 {
                return Err(Error::invalid("synthetic image count and size must be positive"));
            }
            Ok((0..a.count as u64)
                .map(|i| synthetic_image(a.size, a.size, seed + i))
                .collect())
        }
        DataSource::Directory(dir) => Ok(train::Dataset::from_dir(dir)?.images().to_vec()),
    }
}

/// Synthetic sweep and spectra images come from a seed range disjoint from
/// the training data.
const HELD_OUT_SEED: u64 = 900;

pub fn sweep_grid(a: &SweepArgs, trained_t: f64) -> Result<Vec<f64>> {
    if let Some(List(g)) = &a.grid {
        return Ok(g.clone());
    }
    let t_max = a.t_max.unwrap_or(3.0 * trained_t);
    if !(t_max > 0.0) || a.t_count == 0 {
        return Err(Error::invalid("sweep needs t_max > 0 and t_count >= 1"));
    }
    Ok((1..=a.t_count).map(|k| t_max * k as f64 / a.t_count as f64).collect())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let grid = sweep_grid(a, model.stop_time())?;
    let op = model.operator()?;
    let clean = image_set(&a.set, HELD_OUT_SEED)?;
    let mut curves = Vec::with_capacity(clean.len());
    for (i, xg) in clean.iter().enumerate() {
        let b = model.task.degrade(xg, &op, a.seed.wrapping_add(i as u64))?;
        let c = ControlSet::new(grid[0], model.bank(), &op, &b, &b)?;
        curves.push(stopping::sweep_t(&c, &grid, model.scheme, model.depth_rule(), xg)?);
    }
    let n = curves.len() as f64;
    let mean = StoppingCurve::new(
        grid.clone(),
        (0..grid.len())
            .map(|j| curves.iter().map(|c| c.energies[j]).sum::<f64>() / n)
            .collect(),
        (0..grid.len())
            .map(|j| curves.iter().map(|c| c.foc[j]).sum::<f64>() / n)
            .collect(),
    )?;

    create_dir(&a.out)?;
    write_file(&a.out.join("curves.csv"), |w| {
        csvout::header(w, &["image", "T", "J", "foc"])?;
        for (i, c) in curves.iter().enumerate() {
            for j in 0..c.len() {
                writeln!(
                    w,
                    "{i},{},{},{}",
                    csvout::num(c.t_values[j]),
                    csvout::num(c.energies[j]),
                    csvout::num(c.foc[j])
                )?;
            }
        }
        Ok(())
    })?;
    write_file(&a.out.join("mean.csv"), |w| mean.write_csv(w))?;
    write_file(&a.out.join("crossings.csv"), |w| {
        csvout::header(w, &["image", "T_cross", "T_argmin"])?;
        for (i, c) in curves.iter().enumerate() {
            let cross = c.zero_crossing().unwrap_or(f64::NAN);
            writeln!(w, "{i},{},{}", csvout::num(cross), csvout::num(c.argmin_t()))?;
        }
        let cross = mean.zero_crossing().unwrap_or(f64::NAN);
        writeln!(w, "mean,{},{}", csvout::num(cross), csvout::num(mean.argmin_t()))
    })?;
    for (i, c) in curves.iter().enumerate() {
        println!(
            "image {i} crossing {} argmin {:.6}",
            fmt_opt(c.zero_crossing()),
            c.argmin_t()
        );
    }
    println!(
        "mean crossing {} argmin {:.6}",
        fmt_opt(mean.zero_crossing()),
        mean.argmin_t()
    );
    Ok(())
}

pub fn cmd_spectra(a: &SpectraArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let side = (2 * a.size).max(64);
    let sources = image_set(
        &ImageSetArgs {
            images: a.sources.clone(),
            count: 4,
            size: side,
        },
        HELD_OUT_SEED,
    )?;
    let cfg = SpectralConfig {
        count: a.count,
        size: a.size,
        iters: a.iters,
        seed: a.seed,
        tol: a.tol,
        ..SpectralConfig::default()
    };
    let pairs = spectral::solve_eigenpairs(model.bank(), &sources, &cfg)?;
    spectral::write_pairs(&a.out, &pairs, model.stop_time(), model.depth)?;
    let ok = pairs.iter().filter(|p| p.converged).count();
    println!("{ok}/{} pairs below residual {RESIDUAL_GATE:e}", pairs.len());
    Ok(())
}

pub fn cmd_tvl2(a: &Tvl2Args) -> Result<()> {
    let clean = match &a.input {
        Some(p) => load_pgm(p)?,
        None => synthetic_image(a.size, a.size, HELD_OUT_SEED),
    };
    let noisy = crate::imgcore::add_gaussian_noise(&clean, a.sigma, a.seed)?;
    if a.every == 0 {
        return Err(Error::invalid("--every must be at least 1"));
    }
    let iter_grid: Vec<usize> = (0..=a.iters).step_by(a.every).collect();
    let cfg = TvConfig {
        eps: a.eps,
        step: a.step,
        ..TvConfig::default()
    };
    cfg.validate()?;
    let sweep = tvl2::tv_sweep(&noisy, &clean, &a.nu.0, &iter_grid, &cfg)?;
    write_file(&a.out, |w| sweep.write_csv(w))?;
    for (j, nu) in sweep.nu_grid.iter().enumerate() {
        let b = sweep.best_iter(j);
        println!(
            "nu {nu} best iters {} psnr {:.4} interior {}",
            sweep.iter_grid[b],
            sweep.psnr[j][b],
            sweep.has_interior_maximum(j)
        );
    }
    Ok(())
}
