//! `tta-inpaint` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use super::{default_out_dir, run_benchmark, ExperimentConfig, FeatureBackend, MetricBackends, MetricSettings};
use crate::degrade::apply_mask;
use crate::error::{Error, Result};
use crate::generator::{load_checkpoint, save_checkpoint, Architecture, GeneratorParams};
use crate::imagedata::{ingest_dataset, load_image, save_image, DatasetSpec};
use crate::masks::{gen_parent_mask, load_mask, mask_rate, save_mask, BrushConfig, MaskFamily, RateConfig, RateRange};
use crate::metrics::{internal_similarity, score_image, MetricReport};
use crate::optimize::{adapt, composite_output, infer, pretrain, AdaptConfig, AdaptMode, PretrainConfig};
use crate::seeding::{label_tag, rng_from};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tta-inpaint",
    version,
    about = "Single-image inpainting by test-time adaptation",
    arg_required_else_help = true
)]
struct Cli {
    /// Base seed for masks, crops, initialization and batches.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (default: $TTA_INPAINT_OUT or ./tta-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Supervised pre-training on a directory of clean images.
    Pretrain(PretrainArgs),
    /// Adapt (AdaFill) or train from scratch (ZeroFill) on one masked image.
    Adapt(AdaptArgs),
    /// Fill a hole with a saved generator.
    Infer(InferArgs),
    /// Generate a parent mask.
    Maskgen(MaskgenArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
    /// Internal-similarity score of an image.
    Similarity(SimilarityArgs),
    /// Run the benchmark described by --config.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct ArchArgs {
    /// Channel widths of the three resolution levels, e.g. 64,128,256.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    res_blocks: Option<usize>,
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Log progress every N iterations.
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Directory of PNG images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_images: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    downsample: Option<usize>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long, default_value = "zerofill")]
    mode: AdaptMode,
    /// Image to fill; hole pixels are overwritten with white first.
    #[arg(long)]
    image: PathBuf,
    /// Hole mask (white = hole).
    #[arg(long)]
    mask: PathBuf,
    /// Family non-parent-like child masks are drawn from.
    #[arg(long, default_value = "irregular")]
    family: MaskFamily,
    /// Pre-trained generator (required for adafill).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Keep valid pixels from the input.
    #[arg(long)]
    composite: bool,
}

#[derive(Debug, Args)]
struct MaskgenArgs {
    #[arg(long, default_value = "irregular")]
    family: MaskFamily,
    /// Hole-rate bounds as lo:hi (default: the family's protocol range).
    #[arg(long)]
    rate: Option<RateRange>,
    /// Square size; overridden by --height/--width.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Number of masks; more than one writes mask_NNNN.png files into --out.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Debug, Args)]
struct MetricArgs {
    /// Perceptual backend: none, stub or vgg.
    #[arg(long, value_parser = parse_backend)]
    perceptual: Option<FeatureBackend>,
    /// Feature extractor for internal similarity: stub or vgg.
    #[arg(long, value_parser = parse_backend)]
    extractor: Option<FeatureBackend>,
    /// Weights file for the vgg backend.
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Hole mask, required by --hole-only.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    hole_only: bool,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Debug, Args)]
struct SimilarityArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Override the dataset directory of the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_backend(s: &str) -> std::result::Result<FeatureBackend, String> {
    match s {
        "none" => Ok(FeatureBackend::None),
        "stub" => Ok(FeatureBackend::Stub),
        "vgg" => Ok(FeatureBackend::Vgg),
        _ => Err(format!("unknown backend '{s}' (none|stub|vgg)")),
    }
}

/// Sections a config file may hold for the single-image commands.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    architecture: Option<Architecture>,
    adapt: Option<AdaptConfig>,
    pretrain: Option<PretrainConfig>,
    dataset: Option<DatasetSpec>,
    rates: Option<RateConfig>,
    brush: Option<BrushConfig>,
    metrics: Option<MetricSettings>,
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    // usage errors, including the help shown for a bare invocation
                    let _ = writeln!(std::io::stderr(), "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn apply_arch(base: Architecture, args: &ArchArgs) -> Architecture {
    let mut a = base;
    if let Some(w) = &args.widths {
        a.widths = [w[0], w[1], w[2]];
    }
    if let Some(r) = args.res_blocks {
        a.res_blocks = r;
    }
    a
}

fn apply_optim(cfg: &mut AdaptConfig, args: &OptimArgs, seed: Option<u64>) {
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch {
        cfg.batch_size = b;
    }
    if let Some(l) = args.log_every {
        cfg.log_every = l;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = read_file_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed);
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a, file, seed, cli.out.as_deref()),
        Command::Adapt(a) => cmd_adapt(a, file, seed, cli.out.as_deref()),
        Command::Infer(a) => cmd_infer(a, cli.out.as_deref()),
        Command::Maskgen(a) => cmd_maskgen(a, file, seed, cli.out.as_deref()),
        Command::Eval(a) => cmd_eval(a, file, cli.out.as_deref()),
        Command::Similarity(a) => cmd_similarity(a, file),
        Command::Bench(a) => cmd_bench(a, cli.config.as_deref(), seed, cli.out.as_deref()),
    }
}

fn out_file(out: Option<&Path>, default_name: &str) -> Result<PathBuf> {
    let dir = default_out_dir(None);
    Ok(match out {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            dir.join(default_name)
        }
    })
}

fn cmd_pretrain(a: PretrainArgs, file: FileConfig, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut spec = file.dataset.unwrap_or_default();
    spec.source_dir = a.data;
    if let Some(v) = a.max_images {
        spec.max_images = v;
    }
    if let Some(v) = a.crop {
        spec.crop_size = v;
    }
    if let Some(v) = a.downsample {
        spec.downsample_factor = v;
    }
    let mut cfg = file.pretrain.unwrap_or_default();
    if let Some(a) = file.adapt {
        cfg.optimizer = a;
    }
    apply_optim(&mut cfg.optimizer, &a.optim, seed);
    spec.seed = cfg.optimizer.seed;
    if let Some(s) = a.steps {
        cfg.steps = Some(s);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        cfg.steps = None;
    }
    let arch = apply_arch(file.architecture.unwrap_or_default(), &a.arch);
    let images: Vec<_> = ingest_dataset(&spec)?.into_iter().map(|(_, img)| img).collect();
    let init = GeneratorParams::init(arch, cfg.optimizer.seed)?;
    let trained = pretrain(&init, &images, &cfg)?;
    let path = out_file(out, "pretrained.ckpt")?;
    save_checkpoint(&trained.params, &path)?;
    trained.trace.save_csv(path.with_extension("loss.csv"))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_adapt(a: AdaptArgs, file: FileConfig, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = file.adapt.unwrap_or_else(|| AdaptConfig::for_mode(a.mode));
    cfg.mode = a.mode;
    cfg.iterations = a.iters.unwrap_or(a.mode.default_iterations());
    apply_optim(&mut cfg, &a.optim, seed);
    let image = load_image(&a.image)?;
    let parent = load_mask(&a.mask)?;
    let x_d = apply_mask(&image, &parent)?;
    let initial = match (a.mode, &a.checkpoint) {
        (AdaptMode::AdaFill, None) => {
            return Err(Error::Config("adafill needs --checkpoint".into()));
        }
        (_, Some(p)) => load_checkpoint(p, None)?,
        (AdaptMode::ZeroFill, None) => {
            let arch = apply_arch(file.architecture.unwrap_or_default(), &a.arch);
            GeneratorParams::init(arch, rng_seed(cfg.seed, "init"))?
        }
    };
    let trained = adapt(&initial, &x_d, &parent, a.family, &cfg)?;
    let dir = default_out_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let raw = infer(&trained.params, &x_d, &parent, false)?;
    save_image(&raw, dir.join("raw.png"))?;
    save_image(&composite_output(&raw, &x_d, &parent)?, dir.join("composite.png"))?;
    save_checkpoint(&trained.params, dir.join("adapted.ckpt"))?;
    trained.trace.save_csv(dir.join("loss.csv"))?;
    println!("{}", dir.display());
    Ok(())
}

fn rng_seed(seed: u64, label: &str) -> u64 {
    crate::seeding::derive_seed(seed, &[label_tag(label)])
}

fn cmd_infer(a: InferArgs, out: Option<&Path>) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint, None)?;
    let image = load_image(&a.image)?;
    let parent = load_mask(&a.mask)?;
    let x_d = apply_mask(&image, &parent)?;
    let result = infer(&params, &x_d, &parent, a.composite)?;
    let path = out_file(out, "inpainted.png")?;
    save_image(&result, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_maskgen(a: MaskgenArgs, file: FileConfig, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let (h, w) = (a.height.unwrap_or(a.size), a.width.unwrap_or(a.size));
    let mut rates = file.rates.unwrap_or_default();
    if let Some(r) = a.rate {
        r.validate()?;
        match a.family {
            MaskFamily::Irregular => rates.irregular = r,
            MaskFamily::Box => rates.r#box = r,
        }
    }
    let brush = file.brush.unwrap_or_default();
    let mut rng = rng_from(seed.unwrap_or(0), &[label_tag("maskgen")]);
    let paths: Vec<PathBuf> = if a.count == 1 {
        vec![out_file(out, "mask.png")?]
    } else {
        let dir = default_out_dir(out);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        (0..a.count).map(|i| dir.join(format!("mask_{i:04}.png"))).collect()
    };
    for path in paths {
        let m = gen_parent_mask(h, w, a.family, &rates, &brush, &mut rng)?;
        save_mask(&m, &path)?;
        println!("{} rate {:.4}", path.display(), mask_rate(&m));
    }
    Ok(())
}

fn metric_settings(file: &FileConfig, a: &MetricArgs) -> MetricSettings {
    let mut s = file.metrics.clone().unwrap_or_default();
    if let Some(p) = a.perceptual {
        s.perceptual = p;
    }
    if let Some(e) = a.extractor {
        s.similarity = e;
    }
    if let Some(w) = &a.vgg_weights {
        s.vgg_weights = Some(w.clone());
    }
    s
}

fn cmd_eval(a: EvalArgs, file: FileConfig, out: Option<&Path>) -> Result<()> {
    let settings = metric_settings(&file, &a.metrics);
    let backends = MetricBackends::resolve(&settings)?;
    let gt = load_image(&a.gt)?;
    let pred = load_image(&a.pred)?;
    let mask = a.mask.as_ref().map(load_mask).transpose()?;
    let region = match (a.hole_only || settings.hole_only, &mask) {
        (true, None) => return Err(Error::Config("--hole-only needs --mask".into())),
        (true, Some(m)) => Some(m),
        (false, _) => None,
    };
    let id = a.pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let entry = score_image(&id, &gt, &pred, backends.similarity(), backends.perceptual(), region)?;
    let report = MetricReport::from_entries(vec![entry], vec![]);
    print!("{}", report.to_table());
    if let Some(p) = out {
        std::fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn cmd_similarity(a: SimilarityArgs, file: FileConfig) -> Result<()> {
    let settings = metric_settings(&file, &a.metrics);
    let backends = MetricBackends::resolve(&settings)?;
    let image = load_image(&a.image)?;
    let features = backends.similarity().extract(&image)?;
    println!("{:.6}", internal_similarity(&features));
    Ok(())
}

fn cmd_bench(a: BenchArgs, config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let path = config.ok_or_else(|| Error::Config("bench needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    } else if std::env::var_os(super::OUT_DIR_ENV).is_some() && cfg.output_dir == PathBuf::from(super::DEFAULT_OUT_DIR) {
        cfg.output_dir = default_out_dir(None);
    }
    if let Some(d) = a.data {
        cfg.dataset.source_dir = d;
    }
    let manifest = run_benchmark(&cfg)?;
    print!("{}", manifest.report.to_table());
    println!("{}", manifest.report_json.display());
    Ok(())
}
