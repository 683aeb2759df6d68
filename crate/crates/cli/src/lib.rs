//! The `splatperc` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

pub mod config;
pub mod selftest;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use splatperc::analysis::{compare_report_files, erank_histogram, DEFAULT_BINS};
use splatperc::elo::{elo_fit_registered, read_vote_log, DEFAULT_PRIOR_SCALE};
use splatperc::image_io::{load_image, save_image, ImageBuffer};
use splatperc::losses::{LossKind, SigmaMap};
use splatperc::ratecodec::{encode_quantized, load_quantized, rd_sweep, save_quantized, RateMode, RateModel, rate_bits, SPQ_HEADER_LEN};
use splatperc::splat::{load_checkpoint_meta, load_splats, meta_path, render, save_checkpoint, CheckpointMeta};
use splatperc::testimage::{textured, TEXTURED_SIDE};
use splatperc::trainer::{fit, Init, TrainReport};

use config::RunConfig;

/// Target name that loads the bundled test image.
pub const BUILTIN_TARGET: &str = "builtin:textured";

#[derive(Debug, Parser)]
#[command(name = "splatperc", version, about = "Fit, analyse and code 2D Gaussian splat images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit splats to a target image.
    Fit(FitArgs),
    /// Render a checkpoint to an image.
    Render(RenderArgs),
    /// Compare checkpoints against a target (PSNR, SSIM, WD, erank).
    Eval(EvalArgs),
    /// Effective-rank histogram of a checkpoint.
    Erank(ErankArgs),
    /// Rate–distortion fits over a sweep of λ.
    RdSweep(RdSweepArgs),
    /// Quantize and entropy-code a checkpoint.
    Encode(EncodeArgs),
    /// Decode a coded file back to a checkpoint.
    Decode(DecodeArgs),
    /// Run the blind A/B preference study service.
    StudyServe(StudyServeArgs),
    /// Fit Elo ratings to a vote log.
    EloReport(EloReportArgs),
    /// Run gradient and oracle checks and print a pass/fail table.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// JSON run configuration (keys seed, train, loss, rate); flags override it [default: none]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimization iterations [default: 2000]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Warm-up iterations on the original loss [default: 15% of --iters]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Splats at initialization [default: 200]
    #[arg(long)]
    pub init_count: Option<usize>,
    /// Upper bound on the splat count during densification [default: 5000]
    #[arg(long)]
    pub max_splats: Option<usize>,
    /// Densification threshold τ on the mean positional gradient, per image diagonal [default: 2e-4]
    #[arg(long)]
    pub grad_threshold: Option<f64>,
    /// Iterations between densification steps [default: 100]
    #[arg(long)]
    pub densify_interval: Option<usize>,
    /// Fraction of the run after which densification stops [default: 0.5]
    #[arg(long)]
    pub densify_stop: Option<f64>,
    /// Background color r,g,b in [0, 1] [default: 0,0,0]
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub background: Option<Vec<f64>>,
    /// Objective: original | composite | wd | wd_r [default: original]
    #[arg(long)]
    pub loss: Option<String>,
    /// Global scale γ of the wd and wd_r objectives (unitless) [default: 1]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weight β of the original loss inside wd_r (unitless) [default: 11.111]
    #[arg(long)]
    pub beta: Option<f64>,
    /// WD pooling width σ in pixels [default: 4]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Grayscale image giving a per-pixel σ (intensity × --sigma-map-scale pixels) [default: none]
    #[arg(long, value_name = "PATH")]
    pub sigma_map: Option<PathBuf>,
    /// Pixels of σ per unit of --sigma-map intensity
    #[arg(long, default_value_t = 16.0)]
    pub sigma_map_scale: f64,
    /// Worker threads, 0 = one per core [default: $SPLATPERC_THREADS, else 0]
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Target image (PNG/PPM/PGM) or `builtin:textured` [required]
    #[arg(long, value_name = "PATH")]
    pub target: String,
    /// Checkpoint to write; a .meta.json, .report.json and .loss.csv go next to it
    #[arg(long, default_value = "fit.spl2")]
    pub out: PathBuf,
    /// Start from this checkpoint instead of a random initialization [default: none]
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
    /// Also write the final render here [default: none]
    #[arg(long, value_name = "PATH")]
    pub render_out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Checkpoint to render [required]
    #[arg(long)]
    pub splats: PathBuf,
    /// Output image (.png, .ppm or .pgm) [required]
    #[arg(long)]
    pub out: PathBuf,
    /// Width in pixels [default: from the checkpoint's .meta.json]
    #[arg(long)]
    pub width: Option<usize>,
    /// Height in pixels [default: from the checkpoint's .meta.json]
    #[arg(long)]
    pub height: Option<usize>,
    /// Background color r,g,b in [0, 1] [default: from .meta.json, else 0,0,0]
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub background: Option<Vec<f64>>,
    /// Worker threads, 0 = one per core [default: $SPLATPERC_THREADS, else 0]
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference image or `builtin:textured` [required]
    #[arg(long)]
    pub target: String,
    /// Checkpoints to compare, in table order [required]
    #[arg(long, num_args = 1.., required = true)]
    pub splats: Vec<PathBuf>,
    /// Background color r,g,b in [0, 1] [default: 0,0,0]
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub background: Option<Vec<f64>>,
    /// Write the table as CSV here [default: print CSV to stdout]
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the table as JSON here [default: none]
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// JSON run configuration supplying the loss settings [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads, 0 = one per core [default: $SPLATPERC_THREADS, else 0]
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ErankArgs {
    /// Checkpoint to analyse [required]
    #[arg(long)]
    pub splats: PathBuf,
    /// Histogram bins on [1, 2]
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Output prefix for <prefix>.erank.dat (gnuplot) and <prefix>.erank.json [default: the checkpoint path]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RdSweepArgs {
    /// Target image or `builtin:textured` [required]
    #[arg(long)]
    pub target: String,
    /// Rate weights λ, rate in mean bits per splat [default: 1/9,1/27,1/81,1/243]
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Directory for rd.json, rd.csv and one .spq per λ
    #[arg(long, default_value = "rd-sweep")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Checkpoint to code [required]
    #[arg(long)]
    pub splats: PathBuf,
    /// Coded output file [required]
    #[arg(long)]
    pub out: PathBuf,
    /// Quantization steps: position (px), log-scale, rotation (rad), color logit, opacity logit [default: 1/16,1/64,1/64,1/32,1/32]
    #[arg(long, value_delimiter = ',', num_args = 5)]
    pub steps: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Coded input file [required]
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint to write [required]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyServeArgs {
    /// Study configuration JSON (methods, reference_dir, vote_log, crop_side, ...) [required]
    #[arg(long)]
    pub config: PathBuf,
    /// Listen address
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct EloReportArgs {
    /// Vote log, one JSON object per line [required]
    #[arg(long)]
    pub votes: PathBuf,
    /// Prior standard deviation of the skills, natural-log units
    #[arg(long, default_value_t = DEFAULT_PRIOR_SCALE)]
    pub prior_scale: f64,
    /// Write the rating table here [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Random seeds per gradient check
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

/// An error in how the command was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                1
            } else {
                2
            }
        }
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Erank(a) => cmd_erank(a),
        Command::RdSweep(a) => cmd_rd_sweep(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::StudyServe(a) => cmd_study_serve(a),
        Command::EloReport(a) => cmd_elo_report(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}

fn set_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        splatperc::parallel::set_thread_count(n);
    }
}

pub fn load_target(spec: &str) -> anyhow::Result<ImageBuffer> {
    if spec == BUILTIN_TARGET {
        return Ok(textured(TEXTURED_SIDE));
    }
    Ok(load_image(spec).with_context(|| format!("loading target {spec}"))?.to_rgb())
}

fn background(v: &[f64]) -> anyhow::Result<[f64; 3]> {
    let b: [f64; 3] = v.try_into().map_err(|_| usage("background needs three values"))?;
    if b.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(usage("background values must be in [0, 1]"));
    }
    Ok(b)
}

/// Applies `flags` over `cfg` (which already holds defaults and the file).
pub fn apply_flags(cfg: &mut RunConfig, flags: &RunFlags) -> anyhow::Result<()> {
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = flags.iters {
        t.iterations = v;
    }
    if let Some(v) = flags.warmup {
        t.warmup_iterations = Some(v);
    }
    if let Some(v) = flags.init_count {
        t.init_count = v;
    }
    if let Some(v) = flags.max_splats {
        t.densify.max_splats = v;
    }
    if let Some(v) = flags.grad_threshold {
        t.densify.grad_threshold = v;
    }
    if let Some(v) = flags.densify_interval {
        t.densify_interval = v;
    }
    if let Some(v) = flags.densify_stop {
        t.densify_stop_fraction = v;
    }
    if let Some(v) = &flags.background {
        t.background = background(v)?;
    }
    let l = &mut cfg.loss;
    if let Some(k) = &flags.loss {
        l.kind = LossKind::parse(k).ok_or_else(|| usage(format!("unknown loss {k:?} (original | composite | wd | wd_r)")))?;
    }
    if let Some(v) = flags.gamma {
        l.gamma = v;
    }
    if let Some(v) = flags.beta {
        l.beta = v;
    }
    if let Some(v) = flags.sigma {
        l.sigma = v;
    }
    t.validate().map_err(|e| usage(e.to_string()))?;
    l.validate().map_err(|e| usage(e.to_string()))?;
    Ok(())
}

fn resolve_run(flags: &RunFlags) -> anyhow::Result<RunConfig> {
    set_threads(flags.threads);
    let mut cfg = RunConfig::load(flags.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    apply_flags(&mut cfg, flags)?;
    Ok(cfg)
}

fn load_sigma_map(flags: &RunFlags, target: &ImageBuffer) -> anyhow::Result<Option<SigmaMap>> {
    let Some(path) = &flags.sigma_map else {
        return Ok(None);
    };
    let img = load_image(path).with_context(|| format!("loading sigma map {}", path.display()))?;
    if (img.width(), img.height()) != (target.width(), target.height()) {
        bail!(
            "sigma map is {}x{}, target is {}x{}",
            img.width(),
            img.height(),
            target.width(),
            target.height()
        );
    }
    Ok(Some(SigmaMap::from_image(&img, flags.sigma_map_scale)?))
}

/// Provenance written next to fitted checkpoints.
#[derive(Serialize)]
struct Stamp<'a> {
    command: &'a str,
    target: &'a str,
    sigma_map: Option<(&'a Path, f64)>,
    width: usize,
    height: usize,
    config: &'a RunConfig,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_metrics(report: &TrainReport) {
    if let Some(m) = &report.final_metrics {
        println!(
            "psnr {:.3} dB  ssim {:.4}  wd(σ=0) {:.5}  wd(σ=4) {:.5}",
            m.psnr, m.ssim, m.wd_sigma0, m.wd_sigma4
        );
    }
}

fn cmd_fit(a: FitArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = resolve_run(&a.run)?;
    let target = load_target(&a.target)?;
    cfg.loss.sigma_map = load_sigma_map(&a.run, &target)?;
    let init = match &a.init {
        Some(p) => Init::Splats(load_splats(p).with_context(|| format!("loading {}", p.display()))?),
        None => Init::Count(cfg.train.init_count),
    };
    let (splats, report) = fit(&target, init, &cfg.loss, &cfg.train, cfg.seed)?;
    let stamp = Stamp {
        command: "fit",
        target: &a.target,
        sigma_map: a.run.sigma_map.as_deref().map(|p| (p, a.run.sigma_map_scale)),
        width: target.width(),
        height: target.height(),
        config: &cfg,
    };
    let meta = CheckpointMeta {
        loss: cfg.loss.kind.name().into(),
        gamma: cfg.loss.gamma,
        iteration: cfg.train.iterations,
        seed: Some(cfg.seed),
        config: Some(serde_json::to_value(&stamp)?),
    };
    save_checkpoint(&splats, &meta, &a.out)?;
    write(&with_suffix(&a.out, ".report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write(&with_suffix(&a.out, ".loss.csv"), report.to_csv())?;
    if let Some(p) = &a.render_out {
        let img = render(&splats, target.width(), target.height(), cfg.train.background)?.image;
        save_image(&img, p)?;
    }
    println!("{} splats -> {}", splats.len(), a.out.display());
    print_metrics(&report);
    eprintln!("wall time {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> anyhow::Result<()> {
    set_threads(a.threads);
    let splats = load_splats(&a.splats)?;
    let stamp = if meta_path(&a.splats).exists() {
        load_checkpoint_meta(&a.splats)?.config
    } else {
        None
    };
    let from_stamp = |key: &str| stamp.as_ref().and_then(|s| s.get(key)).and_then(|v| v.as_u64()).map(|v| v as usize);
    let width = a.width.or_else(|| from_stamp("width")).ok_or_else(|| usage("--width is required (no .meta.json)"))?;
    let height = a.height.or_else(|| from_stamp("height")).ok_or_else(|| usage("--height is required (no .meta.json)"))?;
    let bg = match &a.background {
        Some(v) => background(v)?,
        None => stamp
            .as_ref()
            .and_then(|s| s.pointer("/config/train/background"))
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or([0.0; 3]),
    };
    let img = render(&splats, width, height, bg)?.image;
    save_image(&img, &a.out)?;
    println!("{width}x{height} -> {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    set_threads(a.threads);
    let cfg = RunConfig::load(a.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let target = load_target(&a.target)?;
    let bg = match &a.background {
        Some(v) => background(v)?,
        None => [0.0; 3],
    };
    let report = compare_report_files(&target, &a.splats, bg, &cfg.loss)?;
    if let Some(p) = &a.json {
        write(p, report.to_json() + "\n")?;
    }
    match &a.csv {
        Some(p) => write(p, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_erank(a: ErankArgs) -> anyhow::Result<()> {
    if a.bins == 0 {
        return Err(usage("--bins must be ≥ 1"));
    }
    let splats = load_splats(&a.splats)?;
    let r = erank_histogram(&splats, a.bins)?;
    let prefix = a.out.unwrap_or_else(|| a.splats.clone());
    write(&with_suffix(&prefix, ".erank.dat"), r.histogram.to_gnuplot())?;
    write(&with_suffix(&prefix, ".erank.json"), serde_json::to_string_pretty(&r)? + "\n")?;
    println!("median erank {:.6}  mean {:.6}  splats {}", r.median, r.mean, r.values.len());
    Ok(())
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    target: &'a str,
    config: &'a RunConfig,
    points: Vec<&'a splatperc::ratecodec::RdPoint>,
}

fn cmd_rd_sweep(a: RdSweepArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = resolve_run(&a.run)?;
    if let Some(l) = &a.lambdas {
        cfg.rate.lambdas = l.clone();
    }
    let target = load_target(&a.target)?;
    cfg.loss.sigma_map = load_sigma_map(&a.run, &target)?;
    let rd = cfg.rd(cfg.rate.lambdas.first().copied().unwrap_or(0.0));
    rd.validate().map_err(|e| usage(e.to_string()))?;
    let results = rd_sweep(&target, &rd, cfg.seed)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut csv = String::from("lambda,splats,bits,bpp,file_bytes,psnr,ssim,wd_sigma0,wd_sigma4\n");
    for (k, r) in results.iter().enumerate() {
        let p = &r.point;
        save_quantized(&r.splats, &r.model, a.out_dir.join(format!("rd_{k}.spq")))?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.lambda, p.splats, p.bits, p.bpp, p.file_bytes, p.metrics.psnr, p.metrics.ssim, p.metrics.wd_sigma0, p.metrics.wd_sigma4
        ));
    }
    let out = SweepOutput {
        target: &a.target,
        config: &cfg,
        points: results.iter().map(|r| &r.point).collect(),
    };
    write(&a.out_dir.join("rd.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    write(&a.out_dir.join("rd.csv"), &csv)?;
    print!("{csv}");
    eprintln!("wall time {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> anyhow::Result<()> {
    let splats = load_splats(&a.splats)?;
    let mut model = match &a.steps {
        Some(s) => RateModel::with_steps(s.as_slice().try_into().map_err(|_| usage("--steps needs five values"))?),
        None => RateModel::default(),
    };
    model.validate().map_err(|e| usage(e.to_string()))?;
    model.match_moments(&splats);
    let model = model.to_f32();
    let bits = rate_bits(&splats, &model, RateMode::Eval)?.bits;
    let bytes = encode_quantized(&splats, &model)?;
    write(&a.out, &bytes)?;
    println!(
        "{} splats, model {:.1} bits, {} bytes ({} payload) -> {}",
        splats.len(),
        bits,
        bytes.len(),
        bytes.len() - SPQ_HEADER_LEN,
        a.out.display()
    );
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> anyhow::Result<()> {
    let (splats, header) = load_quantized(&a.input)?;
    splatperc::splat::save_splats(&splats, &a.out)?;
    println!("{} splats -> {}", header.count, a.out.display());
    Ok(())
}

fn cmd_study_serve(a: StudyServeArgs) -> anyhow::Result<()> {
    let cfg = splatperc_study::StudyConfig::from_json_file(&a.config).map_err(|e| usage(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let study = splatperc_study::Study::open(cfg)?;
        splatperc_study::serve(study, a.addr).await
    })?;
    Ok(())
}

fn cmd_elo_report(a: EloReportArgs) -> anyhow::Result<()> {
    let (header, votes) = read_vote_log(&a.votes)?;
    let table = elo_fit_registered(&header.methods, &votes, a.prior_scale)?;
    let json = serde_json::to_string_pretty(&table)? + "\n";
    match &a.out {
        Some(p) => write(p, json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> anyhow::Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be ≥ 1"));
    }
    let rows = selftest::run_all(a.seeds);
    print!("{}", selftest::table(&rows));
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(anyhow!("{failed} of {} checks failed", rows.len()));
    }
    Ok(())
}
