mod config;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use hsvideo::csc::{reconstruct_csc, CscParams, FilterBank};
use hsvideo::metrics::{mean_ms_ssim, report, QualityReport};
use hsvideo::patch::{reconstruct_patch, train_patch_dictionary, PatchDictionary};
use hsvideo::shutter::{code_exposure, generate_shutter, sampling_stats};
use hsvideo::synthetic::{dead_leaves, panning_leaves, MotionVideo};
use hsvideo::tensor_io::{load_image, read_tensor, save_image, write_tensor, BitDepth};
use hsvideo::training::{contrast_normalize, train_filters};
use hsvideo::{Error, FrameSequence, Image};

use config::RunConfig;
use run::{load_capture, load_sequence, filter_mosaic, RunDir};

/// Coded-exposure high-speed video: capture simulation, sparse-coding
/// reconstruction, dictionary training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "hsvideo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value config file (a previous run's meta.txt works too)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Frames coded into one image (T)
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Exposure length of every pixel (L)
    #[arg(long, global = true)]
    bump: Option<usize>,
    /// Shutter seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fixed thread count and reduction order
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Code a frame sequence into one image with a random single-bump shutter
    Simulate(SimulateArgs),
    /// Recover frames with convolutional sparse coding
    ReconstructCsc(ReconstructArgs),
    /// Recover frames with the patch-based lasso baseline
    ReconstructPatch(ReconstructArgs),
    /// Learn a 2D filter bank from images
    TrainCsc(TrainArgs),
    /// Learn a patch dictionary with K-SVD from videos
    TrainPatch(TrainArgs),
    /// Compare an estimate against ground truth
    Evaluate(EvaluateArgs),
    /// Grid over beta_d and beta_2 on the synthetic motion videos
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Directory of frame_NNNN images
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Render a built-in motion video instead (moving_square, translating_gradient, rotating_bar)
    #[arg(long)]
    synthetic: Option<String>,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Run directory holding coded.cvt and shutter.cvt (and frames as ground truth)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Raw coded image tensor
    #[arg(long, requires = "shutter")]
    coded: Option<PathBuf>,
    /// Shutter mask tensor
    #[arg(long, requires = "coded")]
    shutter: Option<PathBuf>,
    /// Filter bank (csc) or patch dictionary (patch)
    #[arg(long, visible_alias = "dict")]
    dictionary: PathBuf,
    /// Spatial block step for the patch method (config key patch_stride)
    #[arg(long)]
    stride: Option<usize>,
    /// Ground truth for report.csv; defaults to the input run's frames
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training images (train-csc) or frame directories (train-patch); synthetic
    /// material is generated when omitted
    #[arg(long, visible_aliases = ["images", "videos"])]
    input: Vec<PathBuf>,
    /// Block selection strategy for train-patch (config key selection)
    #[arg(long)]
    strategy: Option<String>,
    /// Training blocks to select (config key selection_count)
    #[arg(long)]
    count: Option<usize>,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Filter bank used for every cell
    #[arg(long, visible_alias = "bank")]
    dictionary: PathBuf,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k, v)?;
    }
    if let Some(v) = cli.frames {
        cfg.frames = v;
    }
    if let Some(v) = cli.bump {
        cfg.bump = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.threads {
        cfg.threads = Some(v);
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn setup_threads(cfg: &RunConfig) -> Result<()> {
    // every parallel loop collects in index order, so pinning the pool size
    // is all determinism needs
    let threads = match (cfg.threads, cfg.deterministic) {
        (Some(n), _) => n,
        (None, true) => 1,
        (None, false) => return Ok(()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .context("configuring the worker pool")
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn simulate(cfg: &RunConfig, args: &SimulateArgs) -> Result<()> {
    let (mut seq, source) = match (&args.input, &args.synthetic) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                bail!("input directory {} does not exist", dir.display());
            }
            (load_sequence(dir)?, dir.display().to_string())
        }
        (None, Some(name)) => {
            let video = MotionVideo::from_name(name)
                .with_context(|| format!("unknown synthetic video {name:?}"))?;
            (video.render(cfg.size, cfg.frames), format!("synthetic:{name}"))
        }
        (None, None) => bail!("give --input or --synthetic"),
    };
    if seq.frames > cfg.frames {
        warn!("input has {} frames, coding only the first {}", seq.frames, cfg.frames);
        seq = seq.truncated(cfg.frames);
    } else if seq.frames < cfg.frames {
        bail!("input has {} frames, need {}", seq.frames, cfg.frames);
    }
    let shutter = generate_shutter(seq.width, seq.height, cfg.frames, cfg.bump, cfg.seed)?;
    let coded = code_exposure(&seq, &shutter)?;
    let stats = sampling_stats(&shutter);

    let dir = RunDir::create(&args.out)?;
    dir.write_frames(&seq)?;
    dir.write_capture(&coded, &shutter)?;
    let per_frame: Vec<String> = stats.per_frame.iter().map(|v| format!("{v:.6}")).collect();
    dir.write_meta(
        "simulate",
        cfg,
        &[
            kv("input", source),
            kv("width", seq.width),
            kv("height", seq.height),
            kv("sampling_ratio", format!("{:.6}", stats.overall)),
            kv("sampling_per_frame", per_frame.join(",")),
        ],
    )?;
    info!(
        "coded {} frames of {}x{}, {:.1}% of samples taken",
        cfg.frames,
        seq.width,
        seq.height,
        100.0 * stats.overall
    );
    Ok(())
}

fn quality_fields(run: &mut Vec<(String, String)>, q: &QualityReport) {
    run.push(kv("mean_ms_ssim", format!("{:.6}", q.mean_ms_ssim)));
    run.push(kv("mean_psnr_db", q.mean_psnr));
    run.push(kv("ms_ssim_scales", q.scales));
}

/// Ground truth for a reconstruction: `--truth`, else the input run's frames.
fn find_truth(args: &ReconstructArgs) -> Result<Option<FrameSequence>> {
    if let Some(p) = &args.truth {
        return load_sequence(p).map(Some);
    }
    match &args.input {
        Some(r) if r.join(run::FRAMES_RAW).is_file() || r.join(run::FRAMES_DIR).is_dir() => {
            load_sequence(r).map(Some)
        }
        _ => Ok(None),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Method {
    Csc,
    Patch,
}

fn reconstruct(mut cfg: RunConfig, args: &ReconstructArgs, method: Method) -> Result<()> {
    let (coded, shutter) = load_capture(args.input.as_deref(), args.coded.as_deref(), args.shutter.as_deref())?;
    cfg.frames = shutter.frames;
    cfg.bump = shutter.bump;
    if let Some(s) = shutter.seed {
        cfg.seed = s;
    }
    let truth = find_truth(args)?;
    let tensor = read_tensor(&args.dictionary)?;
    let dir = RunDir::create(&args.out)?;
    let mut run = vec![kv("dictionary", args.dictionary.display())];
    if let Some(i) = &args.input {
        run.push(kv("input", i.display()));
    }

    let (frames, seconds) = match method {
        Method::Csc => {
            let bank = FilterBank::from_tensor(&tensor).with_context(|| {
                format!("{} is not a filter bank for reconstruct-csc", args.dictionary.display())
            })?;
            let start = Instant::now();
            let rec = reconstruct_csc(&coded, &shutter, &bank, &cfg.csc)?;
            let seconds = start.elapsed().as_secs_f64();
            let mut csv = String::from("iteration,data,sparsity,temporal,total\n");
            for (i, t) in rec.history.iter().enumerate() {
                csv += &format!("{},{:e},{:e},{:e},{:e}\n", i + 1, t.data, t.sparsity, t.temporal, t.total);
            }
            dir.write_text(run::OBJECTIVE, &csv)?;
            save_image(&filter_mosaic(&bank), &dir.path(run::MOSAIC), BitDepth::Eight)?;
            run.push(kv("solver", cfg.csc.quad_solver));
            run.push(kv("filters", bank.count()));
            run.push(kv("filter_size", bank.size));
            run.push(kv("iterations", rec.iterations));
            run.push(kv("quad_warnings", rec.quad_warnings));
            (rec.frames.clamped(), seconds)
        }
        Method::Patch => {
            let dict = PatchDictionary::from_tensor(&tensor).with_context(|| {
                format!("{} is not a patch dictionary for reconstruct-patch", args.dictionary.display())
            })?;
            let pcfg = cfg.patch_config();
            let start = Instant::now();
            let frames = reconstruct_patch(&coded, &shutter, &dict, &pcfg)?;
            let seconds = start.elapsed().as_secs_f64();
            run.push(kv("solver", "lasso"));
            run.push(kv("stride", pcfg.stride));
            run.push(kv("atoms", dict.atoms));
            (frames.clamped(), seconds)
        }
    };
    run.push(kv("wall_seconds", format!("{seconds:.6}")));
    info!("reconstructed {} frames in {seconds:.2} s", frames.frames);

    dir.write_frames(&frames)?;
    dir.write_capture(&coded, &shutter)?;
    if let Some(truth) = truth {
        let q = report(&truth, &frames)?;
        dir.write_text(run::REPORT, &q.to_csv())?;
        quality_fields(&mut run, &q);
        info!("mean MS-SSIM {:.4}, mean PSNR {} dB", q.mean_ms_ssim, q.mean_psnr);
    }
    let name = match method {
        Method::Csc => "reconstruct-csc",
        Method::Patch => "reconstruct-patch",
    };
    dir.write_meta(name, &cfg, &run)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn train_csc(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let mut images: Vec<Image> = Vec::new();
    for p in &args.input {
        if p.is_dir() {
            for f in image_files(p)? {
                images.push(load_image(&f)?);
            }
        } else {
            images.push(load_image(p)?);
        }
    }
    let source = if args.input.is_empty() {
        images = (0..cfg.train_count as u64)
            .map(|i| dead_leaves(cfg.train_size, cfg.train.seed + i))
            .collect();
        format!("dead_leaves x{}", cfg.train_count)
    } else {
        format!("{} images", images.len())
    };
    if images.is_empty() {
        return Err(Error::Param("no training images found".into()).into());
    }
    let images: Vec<Image> = images
        .iter()
        .map(|img| contrast_normalize(img, cfg.train_contrast_sigma))
        .collect();
    let start = Instant::now();
    let trained = train_filters(&images, &cfg.train)?;
    let seconds = start.elapsed().as_secs_f64();

    let dir = RunDir::create(&args.out)?;
    write_tensor(dir.path("bank.cvt"), &trained.bank.to_tensor())?;
    save_image(&filter_mosaic(&trained.bank), &dir.path(run::MOSAIC), BitDepth::Eight)?;
    let mut csv = String::from("alternation,objective\n");
    for (i, v) in trained.history.iter().enumerate() {
        csv += &format!("{},{v:e}\n", i + 1);
    }
    dir.write_text(run::OBJECTIVE, &csv)?;
    dir.write_meta(
        "train-csc",
        cfg,
        &[kv("input", source), kv("wall_seconds", format!("{seconds:.6}"))],
    )
}

fn train_patch(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let pcfg = cfg.patch_config();
    let (videos, source) = if args.input.is_empty() {
        let v: Vec<FrameSequence> = (0..cfg.train_count as u64)
            .map(|i| panning_leaves(cfg.train_size, pcfg.pt, cfg.selection.seed + i))
            .collect();
        (v, format!("panning_leaves x{}", cfg.train_count))
    } else {
        let v = args.input.iter().map(|p| load_sequence(p)).collect::<Result<Vec<_>>>()?;
        (v, format!("{} videos", args.input.len()))
    };
    let start = Instant::now();
    let result = train_patch_dictionary(&videos, &pcfg, &cfg.selection)?;
    let seconds = start.elapsed().as_secs_f64();

    let dir = RunDir::create(&args.out)?;
    write_tensor(dir.path("dictionary.cvt"), &result.dictionary.to_tensor())?;
    let mut csv = String::from("iteration,representation_error\n");
    for (i, v) in result.history.iter().enumerate() {
        csv += &format!("{},{v:e}\n", i + 1);
    }
    dir.write_text(run::OBJECTIVE, &csv)?;
    dir.write_meta(
        "train-patch",
        cfg,
        &[kv("input", source), kv("wall_seconds", format!("{seconds:.6}"))],
    )
}

fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let truth = load_sequence(&args.truth)?;
    let estimate = load_sequence(&args.estimate)?;
    let q = report(&truth, &estimate)?;
    let dir = RunDir::create(&args.out)?;
    dir.write_text(run::REPORT, &q.to_csv())?;
    let mut run = vec![
        kv("truth", args.truth.display()),
        kv("estimate", args.estimate.display()),
    ];
    quality_fields(&mut run, &q);
    dir.write_meta("evaluate", cfg, &run)?;
    println!("mean_ms_ssim={:.6} mean_psnr_db={}", q.mean_ms_ssim, q.mean_psnr);
    Ok(())
}

fn sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<()> {
    if cfg.sweep_videos.is_empty() {
        return Err(Error::Param("sweep needs at least one video".into()).into());
    }
    if cfg.sweep_beta_d.is_empty() || cfg.sweep_beta_2.is_empty() {
        return Err(Error::Param("sweep grid is empty".into()).into());
    }
    let bank = FilterBank::from_tensor(&read_tensor(&args.dictionary)?)
        .with_context(|| format!("{} is not a filter bank", args.dictionary.display()))?;
    let shutter = generate_shutter(cfg.size, cfg.size, cfg.frames, cfg.bump, cfg.seed)?;
    let cases = cfg
        .sweep_videos
        .iter()
        .map(|v| {
            let truth = v.render(cfg.size, cfg.frames);
            let coded = code_exposure(&truth, &shutter)?;
            Ok((truth, coded))
        })
        .collect::<Result<Vec<_>>>()?;

    let names: Vec<&str> = cfg.sweep_videos.iter().map(|v| v.name()).collect();
    let mut csv = format!("beta_d,beta_2,mean_ms_ssim,{}\n", names.join(","));
    let mut cells = Vec::new();
    let start = Instant::now();
    for &beta_d in &cfg.sweep_beta_d {
        for &beta_2 in &cfg.sweep_beta_2 {
            let params = CscParams { beta_d, beta_2, ..cfg.csc.clone() };
            let scores = cases
                .iter()
                .map(|(truth, coded)| {
                    let rec = reconstruct_csc(coded, &shutter, &bank, &params)?;
                    Ok(mean_ms_ssim(truth, &rec.frames.clamped())?)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            info!("beta_d={beta_d} beta_2={beta_2}: mean MS-SSIM {mean:.4}");
            let per: Vec<String> = scores.iter().map(|s| format!("{s:.6}")).collect();
            csv += &format!("{beta_d},{beta_2},{mean:.6},{}\n", per.join(","));
            cells.push((beta_d, beta_2, mean));
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let best = cells
        .iter()
        .copied()
        .fold((f64::NAN, f64::NAN, f64::NEG_INFINITY), |b, c| if c.2 > b.2 { c } else { b });

    let dir = RunDir::create(&args.out)?;
    dir.write_text("sweep.csv", &csv)?;
    let mut summary = format!(
        "best beta_d={} beta_2={} mean_ms_ssim={:.6}\n",
        best.0, best.1, best.2
    );
    let mut run = vec![
        kv("dictionary", args.dictionary.display()),
        kv("best_beta_d", best.0),
        kv("best_beta_2", best.1),
        kv("best_ms_ssim", format!("{:.6}", best.2)),
        kv("wall_seconds", format!("{seconds:.6}")),
    ];
    if let Some(d) = cells.iter().find(|c| c.0 == 100.0 && c.1 == 1.0) {
        summary += &format!("beta_d=100 beta_2=1 mean_ms_ssim={:.6} gap={:.6}\n", d.2, best.2 - d.2);
        run.push(kv("default_cell_gap", format!("{:.6}", best.2 - d.2)));
    }
    dir.write_text("best.txt", &summary)?;
    print!("{summary}");
    dir.write_meta("sweep", cfg, &run)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::ReconstructCsc(a) | Command::ReconstructPatch(a) => {
            if let Some(v) = a.stride {
                cfg.set("patch_stride", &v.to_string())?;
            }
        }
        Command::TrainCsc(a) | Command::TrainPatch(a) => {
            if let Some(v) = &a.strategy {
                cfg.set("selection", v)?;
            }
            if let Some(v) = a.count {
                cfg.set("selection_count", &v.to_string())?;
            }
        }
        _ => {}
    }
    setup_threads(&cfg)?;
    match &cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::ReconstructCsc(a) => reconstruct(cfg, a, Method::Csc),
        Command::ReconstructPatch(a) => reconstruct(cfg, a, Method::Patch),
        Command::TrainCsc(a) => train_csc(&cfg, a),
        Command::TrainPatch(a) => train_patch(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Sweep(a) => sweep(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
