//! Command-line front end: `protect`, `train-encoder` and `evaluate`.
//!
//! Exit codes: 0 on success, 2 for usage and input errors, 3 when an internal
//! invariant fails (a budget violation, a diverged run).

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendRegistry, NoisePredictor};
use crate::conditioner::ConditionerRegistry;
use crate::config::{parse_config, Config, DEFAULT_CONFIG};
use crate::encoder::{ane_init, encoder_protect, load_checkpoint, save_checkpoint, train_ane_into, TrainLog};
use crate::error::{Error, Result};
use crate::eval::{
    config_hash, ism, parse_transforms, psnr, quality_score, robustness_suite, ssim, AdvProbe, EvalReport, IsmSummary, MetricValue, PairReport,
    ReportMetadata, ScorerRegistry, SSIM_WINDOW,
};
use crate::io::{quantize_8bit, read_image, write_perturbation, write_png};
use crate::loss::Objective;
use crate::pgd::pgd_protect;
use crate::types::{ImageTensor, LossWeights, Method, NoiseBudget, Perturbation, ProtectionRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "antiref", version, about = "Protect images against diffusion-based customization")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Add protective noise to images.
    Protect(ProtectArgs),
    /// Train the noise encoder on a directory of images.
    TrainEncoder(TrainArgs),
    /// Compute invisibility, identity and robustness metrics.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML configuration file, or `default` for the built-in one.
    #[arg(long, default_value = DEFAULT_CONFIG)]
    config: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Backend identifiers, replacing the configured list.
    #[arg(long = "backend", num_args = 1..)]
    backends: Vec<String>,
    /// Conditioner identifiers; each must appear in the configured list so
    /// that its weight is known.
    #[arg(long = "conditioner", num_args = 1..)]
    conditioners: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Pgd,
    Encoder,
}

#[derive(Args, Debug)]
struct ProtectArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value = "pgd")]
    method: MethodArg,
    /// Input images.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Encoder checkpoint, required with `--method encoder`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// l-infinity radius for PGD, or the noise clamp for the encoder.
    #[arg(long)]
    radius: Option<f64>,
    /// PGD iterations.
    #[arg(long)]
    steps: Option<usize>,
    /// PGD step size.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Image files or directories of images.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Directory for the training log.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to write (and to read with `--resume`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue from `--checkpoint` instead of a fresh initialization.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps in this session.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Manifests written by `protect`.
    #[arg(long = "in", num_args = 1..)]
    manifests: Vec<PathBuf>,
    /// Original images, paired in order with `--protected`.
    #[arg(long, num_args = 1..)]
    original: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    protected: Vec<PathBuf>,
    /// Comma-separated transforms, e.g. `jpeg:75,crop:0.9`.
    #[arg(long)]
    robustness: Option<String>,
    /// Output directory; the report is written to `report.json`.
    #[arg(long)]
    out: PathBuf,
}

/// Written next to each protected image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub method: Method,
    /// Seed of this image, derived from the run seed and the input index.
    pub seed: u64,
    pub run_seed: u64,
    pub input: PathBuf,
    pub protected: PathBuf,
    pub perturbation: PathBuf,
    pub budget: NoiseBudget,
    pub clamp_radius: Option<f64>,
    /// Norm of the floating-point perturbation.
    pub linf: f64,
    /// Norm after 8-bit quantization of the written PNG.
    pub linf_quantized: f64,
    pub psnr: MetricValue,
    pub psnr_quantized: MetricValue,
    pub objective_trace: Vec<(usize, f64)>,
    pub eval_trace: Vec<(usize, f64)>,
    pub backend_ids: Vec<String>,
    pub conditioner_ids: Vec<String>,
    pub forward_calls: usize,
    pub encoder_step: Option<u64>,
    pub config_hash: String,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Invariant(_) | Error::GradientOverflow { .. } | Error::NonFiniteObjective { .. } | Error::Diverged { .. } => EXIT_INVARIANT,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Protect(a) => cmd_protect(a),
        Command::TrainEncoder(a) => cmd_train_encoder(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn usage(reason: impl Into<String>) -> Error {
    Error::invalid("arguments", reason)
}

/// Weights for the `chosen` conditioners, taken from their positions in `all`.
fn select_weights(weights: &LossWeights, all: &[String], chosen: &[String]) -> Result<LossWeights> {
    let w_con = chosen
        .iter()
        .map(|id| match all.iter().position(|a| a == id) {
            Some(i) => Ok(weights.w_con[i]),
            None => Err(Error::Config(format!("no weight configured for conditioner `{id}`; add it to objective.conditioners"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossWeights { w_adv: weights.w_adv, w_con, w_reg: weights.w_reg })
}

fn resolve_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = parse_config(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if !common.backends.is_empty() {
        cfg.backends.ids = common.backends.clone();
    }
    if !common.conditioners.is_empty() {
        let all = cfg.objective.conditioners.clone();
        cfg.pgd.weights = select_weights(&cfg.pgd.weights, &all, &common.conditioners)?;
        cfg.training.weights = select_weights(&cfg.training.weights, &all, &common.conditioners)?;
        cfg.objective.conditioners = common.conditioners.clone();
    }
    Ok(cfg)
}

fn resolve_backends(cfg: &Config, ids: &[String]) -> Result<Vec<Arc<dyn NoisePredictor>>> {
    let registry = BackendRegistry::new();
    ids.iter().map(|id| registry.resolve(id, &cfg.backends.options)).collect()
}

fn build_objective(cfg: &Config, weights: LossWeights) -> Result<Objective> {
    let backends = resolve_backends(cfg, &cfg.backends.ids)?;
    let conditioners = ConditionerRegistry::from_ids(&cfg.objective.conditioners, &ConditionerRegistry::new())?;
    let mut obj = Objective::new(backends, conditioners.specs().to_vec(), weights, cfg.diffusion_schedule()?)?;
    obj.reduction = cfg.objective.reduction;
    obj.target = cfg.objective.target;
    obj.num_samples = cfg.objective.num_samples;
    Ok(obj)
}

/// Independent seed for input `index`.
pub fn image_seed(run_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn absolute(path: &Path) -> PathBuf {
    std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

fn cmd_protect(args: ProtectArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(s) = args.steps {
        cfg.pgd.steps = s;
    }
    if let Some(a) = args.alpha {
        cfg.pgd.alpha = a;
    }
    let method = match args.method {
        MethodArg::Pgd => Method::Pgd,
        MethodArg::Encoder => Method::Encoder,
    };
    match method {
        Method::Pgd => {
            if let Some(r) = args.radius {
                cfg.pgd.radius = r;
            }
        }
        Method::Encoder => {
            if args.radius.is_some() {
                cfg.training.clamp_radius = args.radius;
            }
        }
    }
    cfg.validate()?;

    let mut stems = HashSet::new();
    for p in &args.inputs {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if stem.is_empty() || !stems.insert(stem.clone()) {
            return Err(usage(format!("input `{}` has an empty or duplicate file name", p.display())));
        }
    }
    let encoder = match method {
        Method::Encoder => {
            let path = args.checkpoint.as_ref().ok_or_else(|| usage("--method encoder requires --checkpoint PATH"))?;
            Some(load_checkpoint(path)?)
        }
        Method::Pgd => None,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let hash = config_hash(&cfg)?;
    let objective = match method {
        Method::Pgd => Some(build_objective(&cfg, cfg.pgd.weights.clone())?),
        Method::Encoder => None,
    };

    let results: Vec<Result<()>> = args
        .inputs
        .par_iter()
        .enumerate()
        .map(|(index, input)| {
            let image = read_image(input)?;
            let seed = image_seed(cfg.seed, index);
            let (record, clamp) = match (&objective, &encoder) {
                (Some(obj), _) => {
                    let budget = cfg.pgd_budget()?;
                    let rec = pgd_protect(&image, obj, budget, cfg.pgd_options(), seed)?;
                    (rec, Some(budget.radius))
                }
                (None, Some(enc)) => {
                    let rec = encoder_protect(enc, &image, cfg.training.clamp_radius)?;
                    log::info!("{}: 1 encoder forward pass", input.display());
                    (rec, cfg.training.clamp_radius)
                }
                (None, None) => unreachable!("method resolved above"),
            };
            let linf = record.perturbation.linf_norm();
            if let Some(r) = clamp {
                if linf > r + 1e-6 {
                    return Err(Error::Invariant(format!("{}: perturbation norm {linf} exceeds radius {r}", input.display())));
                }
            }
            record.check_consistency()?;
            write_outputs(&args.out, input, &record, seed, &cfg, clamp, &hash, encoder.as_ref().map(|e| e.step))
        })
        .collect();
    results.into_iter().collect()
}

#[allow(clippy::too_many_arguments)]
fn write_outputs(
    out: &Path,
    input: &Path,
    record: &ProtectionRecord,
    seed: u64,
    cfg: &Config,
    clamp: Option<f64>,
    hash: &str,
    encoder_step: Option<u64>,
) -> Result<()> {
    let stem = input.file_stem().expect("checked").to_string_lossy();
    let png = out.join(format!("{stem}.protected.png"));
    let npy = out.join(format!("{stem}.perturbation.npy"));
    write_png(&png, &record.protected)?;
    write_perturbation(&npy, &record.perturbation)?;
    let quantized = quantize_8bit(&record.protected);
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        method: record.method,
        seed,
        run_seed: cfg.seed,
        input: absolute(input),
        protected: absolute(&png),
        perturbation: absolute(&npy),
        budget: record.budget,
        clamp_radius: clamp,
        linf: record.perturbation.linf_norm(),
        linf_quantized: quantized.linf_distance(&record.original)?,
        psnr: MetricValue(psnr(&record.original, &record.protected)?),
        psnr_quantized: MetricValue(psnr(&record.original, &quantized)?),
        objective_trace: record.objective_trace.clone(),
        eval_trace: record.eval_trace.clone(),
        backend_ids: record.backend_ids.clone(),
        conditioner_ids: match record.method {
            Method::Pgd => cfg.objective.conditioners.clone(),
            Method::Encoder => Vec::new(),
        },
        forward_calls: record.forward_calls,
        encoder_step,
        config_hash: hash.to_string(),
    };
    write_json(&out.join(format!("{stem}.manifest.json")), &manifest)?;
    println!("{} -> {} (linf {:.5}, psnr {:.3} dB)", input.display(), png.display(), manifest.linf, manifest.psnr.0);
    Ok(())
}

fn is_image(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "jpg" | "jpeg"))
}

/// Expands directories into their image files, sorted by name.
fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_image(f))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_train_encoder(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    cfg.validate()?;
    let files = collect_images(&args.inputs)?;
    if files.is_empty() {
        return Err(usage("dataset is empty: no .png or .jpg images found under --in"));
    }
    let dataset = files.iter().map(|f| read_image(f)).collect::<Result<Vec<ImageTensor>>>()?;

    let log_path = args.out.join("train_log.json");
    let (mut encoder, mut log) = if args.resume {
        let enc = load_checkpoint(&args.checkpoint)?;
        if enc.config() != &cfg.encoder {
            log::warn!("checkpoint architecture differs from the configuration; using the checkpoint's");
        }
        let log = if log_path.exists() { read_json(&log_path)? } else { TrainLog::default() };
        (enc, log)
    } else {
        (ane_init(&cfg.encoder, cfg.seed)?, TrainLog::default())
    };
    let start = encoder.step;

    let objective = build_objective(&cfg, cfg.training.weights.clone())?;
    let phases = &cfg.training.phases;
    let pool = if phases.phase2_steps > 0 { resolve_backends(&cfg, &phases.backend_pool)? } else { Vec::new() };
    let mut options = cfg.training.optimizer.clone();
    if let Some(s) = args.steps {
        options.max_steps = Some(s);
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let outcome = train_ane_into(&mut encoder, &dataset, &objective, &cfg.augment, phases, &pool, &options, cfg.seed, &mut log);
    // on divergence the encoder holds the last good step
    save_checkpoint(&encoder, &args.checkpoint)?;
    write_json(&log_path, &log)?;
    outcome?;
    let last = log.steps.last().map(|s| s.objective).unwrap_or(f64::NAN);
    println!("trained steps {start}..{} of {}; last J {last:.5}; checkpoint {}", encoder.step, phases.total_steps(), args.checkpoint.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    cfg.validate()?;
    if args.original.len() != args.protected.len() {
        return Err(usage(format!("{} --original paths but {} --protected paths", args.original.len(), args.protected.len())));
    }
    let mut pairs: Vec<(PathBuf, PathBuf)> = args.original.iter().cloned().zip(args.protected.iter().cloned()).collect();
    for m in &args.manifests {
        let manifest: Manifest = read_json(m)?;
        pairs.push((manifest.input, manifest.protected));
    }
    if pairs.is_empty() {
        return Err(usage("nothing to evaluate: pass --in MANIFEST or --original/--protected pairs"));
    }

    let scorers = ScorerRegistry::with_defaults();
    let embedder = cfg.eval.embedding_scorer.as_deref().map(|id| scorers.embedding(id)).transpose()?;
    let quality = cfg.eval.quality_scorer.as_deref().map(|id| scorers.quality(id)).transpose()?;
    let transforms = args.robustness.as_deref().map(parse_transforms).transpose()?;
    let probe = match &transforms {
        Some(_) => {
            let id = cfg.eval.probe_backend.clone().unwrap_or_else(|| cfg.backends.ids[0].clone());
            let backend = resolve_backends(&cfg, std::slice::from_ref(&id))?.remove(0);
            Some(AdvProbe::new(backend, cfg.diffusion_schedule()?, cfg.eval.probe_samples, cfg.seed))
        }
        None => None,
    };

    let mut reports = Vec::with_capacity(pairs.len());
    let mut ism_values = Vec::new();
    for (orig_path, prot_path) in &pairs {
        let original = read_image(orig_path)?;
        let protected = read_image(prot_path)?;
        original.same_shape(&protected)?;
        let mut r = PairReport { original: orig_path.display().to_string(), protected: prot_path.display().to_string(), ..Default::default() };
        r.metrics.insert("psnr".into(), MetricValue(psnr(&original, &protected)?));
        if original.height() >= SSIM_WINDOW && original.width() >= SSIM_WINDOW {
            r.metrics.insert("ssim".into(), MetricValue(ssim(&original, &protected)?));
        }
        r.metrics.insert("linf".into(), MetricValue(protected.linf_distance(&original)?));
        if let Some(s) = &embedder {
            let v = ism(s.as_ref(), &protected, &original)?;
            ism_values.push(v);
            r.ism = Some(v);
        }
        if let Some(q) = &quality {
            r.metrics.insert("quality_original".into(), MetricValue(quality_score(q.as_ref(), &original)?));
            r.metrics.insert("quality_protected".into(), MetricValue(quality_score(q.as_ref(), &protected)?));
        }
        if let (Some(ts), Some(p)) = (&transforms, &probe) {
            let record = ProtectionRecord {
                perturbation: Perturbation::between(&original, &protected, None)?,
                original,
                protected,
                method: Method::Pgd,
                seed: cfg.seed,
                budget: NoiseBudget::default(),
                objective_trace: Vec::new(),
                eval_trace: Vec::new(),
                backend_ids: Vec::new(),
                forward_calls: 0,
            };
            r.robustness = Some(robustness_suite(&record, ts, p)?);
        }
        reports.push(r);
    }

    let metadata = ReportMetadata {
        seeds: vec![cfg.seed],
        backend_ids: probe.iter().map(|p| p.backend.id().to_string()).collect(),
        scorers: embedder.iter().map(|s| s.id().to_string()).chain(quality.iter().map(|s| s.id().to_string())).collect(),
        config_hash: config_hash(&cfg)?,
    };
    let ism_summary = embedder.as_ref().map(|s| IsmSummary::new(s.id(), &ism_values));
    let report = EvalReport::new(reports, ism_summary, metadata);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("report.json");
    write_json(&path, &report)?;
    for (k, v) in &report.summary {
        println!("{k}: {}", if v.0.is_finite() { format!("{:.4}", v.0) } else { MetricValue::INFINITE.to_string() });
    }
    println!("report: {}", path.display());
    Ok(())
}
