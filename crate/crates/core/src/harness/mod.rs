//! Experiment configuration, the benchmark loop over images × mask families ×
//! modes, run manifests and report files. The command-line front end lives in
//! [`cli`].

pub mod cli;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::apply_mask;
use crate::error::{Error, Result};
use crate::generator::{load_checkpoint, params_digest, Architecture, GeneratorParams};
use crate::imagedata::{ingest_entries, save_image, DatasetSpec, Image};
use crate::masks::{gen_parent_mask, save_mask, BrushConfig, Mask, MaskFamily, RateConfig};
use crate::metrics::{
    psnr, psnr_in, score_image, Failure, FeatureExtractor, MetricEntry, MetricReport, StubExtractor, Vgg19Extractor,
};
use crate::optimize::{adapt, composite_output, infer, AdaptConfig, AdaptMode};
use crate::seeding::{derive_seed, label_tag, rng_from};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TTA_INPAINT_OUT";
const DEFAULT_OUT_DIR: &str = "tta-out";

/// Output directory from `--out`, else the environment, else `tta-out`.
pub fn default_out_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "adafill")]
    AdaFill,
    #[serde(rename = "zerofill")]
    ZeroFill,
    #[serde(rename = "pretrained-only")]
    PretrainedOnly,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::AdaFill => "adafill",
            RunMode::ZeroFill => "zerofill",
            RunMode::PretrainedOnly => "pretrained-only",
        }
    }

    fn needs_checkpoint(self) -> bool {
        !matches!(self, RunMode::ZeroFill)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adafill" => Ok(RunMode::AdaFill),
            "zerofill" => Ok(RunMode::ZeroFill),
            "pretrained-only" => Ok(RunMode::PretrainedOnly),
            _ => Err(Error::Config(format!("unknown mode '{s}' (adafill|zerofill|pretrained-only)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Iterations {
    pub adafill: usize,
    pub zerofill: usize,
}

impl Default for Iterations {
    fn default() -> Self {
        Iterations {
            adafill: AdaptMode::AdaFill.default_iterations(),
            zerofill: AdaptMode::ZeroFill.default_iterations(),
        }
    }
}

/// Which feature extractor a metric uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureBackend {
    None,
    Stub,
    Vgg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    /// Extractor for the internal-similarity score (`none` is not allowed).
    pub similarity: FeatureBackend,
    pub perceptual: FeatureBackend,
    pub vgg_weights: Option<PathBuf>,
    /// Restrict PSNR/SSIM (and the input baseline) to the hole.
    pub hole_only: bool,
    /// Score the raw network output instead of the composite.
    pub score_raw: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            similarity: FeatureBackend::Stub,
            perceptual: FeatureBackend::None,
            vgg_weights: None,
            hole_only: false,
            score_raw: false,
        }
    }
}

/// Extractors resolved from [`MetricSettings`].
pub struct MetricBackends {
    similarity: Box<dyn FeatureExtractor>,
    perceptual: Option<Box<dyn FeatureExtractor>>,
}

impl MetricBackends {
    pub fn resolve(settings: &MetricSettings) -> Result<Self> {
        let make = |b: FeatureBackend| -> Result<Option<Box<dyn FeatureExtractor>>> {
            Ok(match b {
                FeatureBackend::None => None,
                FeatureBackend::Stub => Some(Box::new(StubExtractor::default())),
                FeatureBackend::Vgg => {
                    let path = settings
                        .vgg_weights
                        .as_ref()
                        .ok_or_else(|| Error::Config("the vgg backend needs vgg_weights".into()))?;
                    Some(Box::new(Vgg19Extractor::load(path)?))
                }
            })
        };
        let similarity = make(settings.similarity)?
            .ok_or_else(|| Error::Config("internal similarity needs an extractor (stub or vgg)".into()))?;
        let perceptual = match make(settings.perceptual) {
            Ok(p) => p,
            Err(Error::BackendUnavailable(msg)) => {
                log::warn!("perceptual metric skipped: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(MetricBackends { similarity, perceptual })
    }

    pub fn similarity(&self) -> &dyn FeatureExtractor {
        self.similarity.as_ref()
    }

    pub fn perceptual(&self) -> Option<&dyn FeatureExtractor> {
        self.perceptual.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub modes: Vec<RunMode>,
    pub families: Vec<MaskFamily>,
    /// Pre-trained generator, required by `adafill` and `pretrained-only`.
    pub checkpoint: Option<PathBuf>,
    /// Network shape for `zerofill` (the checkpoint defines it otherwise).
    pub architecture: Architecture,
    pub dataset: DatasetSpec,
    pub rates: RateConfig,
    pub brush: BrushConfig,
    /// Optimizer settings; `iterations`, `mode` and `seed` are set per run.
    pub adapt: AdaptConfig,
    pub iterations: Iterations,
    pub metrics: MetricSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from(DEFAULT_OUT_DIR),
            modes: vec![RunMode::ZeroFill],
            families: MaskFamily::ALL.to_vec(),
            checkpoint: None,
            architecture: Architecture::default(),
            dataset: DatasetSpec::default(),
            rates: RateConfig::default(),
            brush: BrushConfig::default(),
            adapt: AdaptConfig::default(),
            iterations: Iterations::default(),
            metrics: MetricSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("at least one mode is required".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("at least one mask family is required".into()));
        }
        if self.checkpoint.is_none() {
            if let Some(m) = self.modes.iter().find(|m| m.needs_checkpoint()) {
                return Err(Error::Config(format!("mode {m} requires a pre-trained checkpoint")));
            }
        }
        for f in &self.families {
            self.rates.for_family(*f).validate()?;
        }
        self.brush.validate()?;
        self.dataset.validate()?;
        self.architecture.validate()?;
        let mut probe = self.adapt.clone();
        probe.iterations = 0;
        probe.validate()
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    fn adapt_config(&self, mode: AdaptMode, seed: u64) -> AdaptConfig {
        AdaptConfig {
            mode,
            seed,
            iterations: match mode {
                AdaptMode::AdaFill => self.iterations.adafill,
                AdaptMode::ZeroFill => self.iterations.zerofill,
            },
            ..self.adapt.clone()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Files written for one (image, family, mode) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunArtifacts {
    pub image_id: String,
    pub family: MaskFamily,
    pub mode: RunMode,
    pub input: PathBuf,
    pub mask: PathBuf,
    pub degraded: PathBuf,
    pub output_raw: PathBuf,
    pub output_composite: PathBuf,
    pub loss_trace: Option<PathBuf>,
    /// Digest of the parameters used for inference.
    pub params_digest: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub runs: Vec<RunArtifacts>,
    pub report_json: PathBuf,
    pub report_table: PathBuf,
    pub failures: usize,
    pub total_seconds: f64,
    #[serde(skip)]
    pub report: MetricReport,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Seed of one (image, family) cell; independent of every other cell.
pub fn cell_seed(global: u64, image_index: usize, family: MaskFamily) -> u64 {
    derive_seed(global, &[image_index as u64, label_tag(family.name())])
}

fn safe_id(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

struct Cell<'a> {
    clean: &'a Image,
    parent: Mask,
    x_d: Image,
    family: MaskFamily,
    seed: u64,
}

/// Runs every image × family × mode combination and writes artifacts,
/// `report.json`, `report.txt` and `manifest.json` under the output directory.
///
/// Failures of single images are recorded in the report and do not stop the run.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let backends = MetricBackends::resolve(&config.metrics)?;
    let checkpoint = match &config.checkpoint {
        Some(p) if config.modes.iter().any(|m| m.needs_checkpoint()) => Some(load_checkpoint(p, None)?),
        _ => None,
    };
    let dataset = DatasetSpec {
        seed: derive_seed(config.seed, &[label_tag("dataset")]),
        ..config.dataset.clone()
    };
    let images = ingest_entries(&dataset)?;
    let out = &config.output_dir;
    create_dir(out)?;

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut runs = Vec::new();
    let fail = |failures: &mut Vec<Failure>, id: &str, family: Option<MaskFamily>, mode: Option<RunMode>, e: &Error| {
        log::warn!("{id} {family:?} {mode:?}: {e}");
        failures.push(Failure {
            image_id: id.to_string(),
            family,
            mode: mode.map(|m| m.name().to_string()),
            error: e.to_string(),
        });
    };
    for (index, (name, loaded)) in images.iter().enumerate() {
        let id = safe_id(name);
        let clean = match loaded {
            Ok(img) => img,
            Err(e) => {
                fail(&mut failures, &id, None, None, e);
                continue;
            }
        };
        for &family in &config.families {
            let cell_dir = out.join("images").join(&id).join(family.name());
            let cell = (|| -> Result<Cell> {
                let seed = cell_seed(config.seed, index, family);
                let (h, w) = clean.dims();
                let mut rng = rng_from(seed, &[label_tag("parent")]);
                let parent = gen_parent_mask(h, w, family, &config.rates, &config.brush, &mut rng)?;
                let x_d = apply_mask(clean, &parent)?;
                create_dir(&cell_dir)?;
                save_image(clean, cell_dir.join("input.png"))?;
                save_mask(&parent, cell_dir.join("mask.png"))?;
                save_image(&x_d, cell_dir.join("degraded.png"))?;
                Ok(Cell {
                    clean,
                    parent,
                    x_d,
                    family,
                    seed,
                })
            })();
            let cell = match cell {
                Ok(c) => c,
                Err(e) => {
                    fail(&mut failures, &id, Some(family), None, &e);
                    continue;
                }
            };
            for &mode in &config.modes {
                match run_cell(config, &cell, mode, checkpoint.as_ref(), &backends, &cell_dir, &id) {
                    Ok((entry, artifacts)) => {
                        entries.push(MetricEntry {
                            family: Some(family),
                            ..entry
                        });
                        runs.push(artifacts);
                    }
                    Err(e) => fail(&mut failures, &id, Some(family), Some(mode), &e),
                }
            }
        }
    }
    let report = MetricReport::from_entries(entries, failures);
    let manifest = RunManifest {
        config_hash: config.hash(),
        output_dir: out.clone(),
        runs,
        report_json: out.join("report.json"),
        report_table: out.join("report.txt"),
        failures: report.failure_count,
        total_seconds: started.elapsed().as_secs_f64(),
        report,
    };
    emit_report(&manifest)?;
    Ok(manifest)
}

fn run_cell(
    config: &ExperimentConfig,
    cell: &Cell,
    mode: RunMode,
    checkpoint: Option<&GeneratorParams>,
    backends: &MetricBackends,
    cell_dir: &Path,
    id: &str,
) -> Result<(MetricEntry, RunArtifacts)> {
    let started = Instant::now();
    let dir = cell_dir.join(mode.name());
    create_dir(&dir)?;
    let mode_seed = derive_seed(cell.seed, &[label_tag(mode.name())]);
    let pretrained = || checkpoint.cloned().ok_or_else(|| Error::Config(format!("mode {mode} requires a checkpoint")));
    let family = cell.family;
    let (params, trace) = match mode {
        RunMode::PretrainedOnly => (pretrained()?, None),
        RunMode::AdaFill => {
            let cfg = config.adapt_config(AdaptMode::AdaFill, mode_seed);
            let t = adapt(&pretrained()?, &cell.x_d, &cell.parent, family, &cfg)?;
            (t.params, Some(t.trace))
        }
        RunMode::ZeroFill => {
            let init = GeneratorParams::init(config.architecture, derive_seed(mode_seed, &[label_tag("init")]))?;
            let cfg = config.adapt_config(AdaptMode::ZeroFill, mode_seed);
            let t = adapt(&init, &cell.x_d, &cell.parent, family, &cfg)?;
            (t.params, Some(t.trace))
        }
    };
    let raw = infer(&params, &cell.x_d, &cell.parent, false)?;
    let composite = composite_output(&raw, &cell.x_d, &cell.parent)?;
    let output_raw = dir.join("raw.png");
    let output_composite = dir.join("composite.png");
    save_image(&raw, &output_raw)?;
    save_image(&composite, &output_composite)?;
    let loss_trace = match &trace {
        Some(t) => {
            let p = dir.join("loss.csv");
            t.save_csv(&p)?;
            Some(p)
        }
        None => None,
    };
    let scored = if config.metrics.score_raw { &raw } else { &composite };
    let region = config.metrics.hole_only.then_some(&cell.parent);
    let mut entry = score_image(id, cell.clean, scored, backends.similarity(), backends.perceptual(), region)?;
    entry.mode = Some(mode.name().to_string());
    entry.baseline_psnr = Some(match region {
        Some(r) => psnr_in(cell.clean, &cell.x_d, r)?,
        None => psnr(cell.clean, &cell.x_d)?,
    });
    let artifacts = RunArtifacts {
        image_id: id.to_string(),
        family,
        mode,
        input: cell_dir.join("input.png"),
        mask: cell_dir.join("mask.png"),
        degraded: cell_dir.join("degraded.png"),
        output_raw,
        output_composite,
        loss_trace,
        params_digest: params_digest(&params),
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((entry, artifacts))
}

/// Writes the report (JSON + text table) and the manifest.
pub fn emit_report(manifest: &RunManifest) -> Result<()> {
    manifest.report.write(&manifest.report_json, &manifest.report_table)?;
    let path = manifest.output_dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))
}
