//! Command-line front end: corpus generation, training, inference,
//! evaluation, ablation sweeps, and observation-distribution inspection.
//!
//! Every artifact is JSON with a version string, the effective
//! configuration, and the seed that produced it, so any file can be
//! regenerated bit for bit from its own metadata. Exit codes: 0 on
//! success, 1 for usage errors, 2 for runtime failures.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use diffkit_core::metrics::MetricReport;
use diffkit_core::pipeline::{self, InferConfig, Predictions};
use diffkit_core::posedist::{fit_gmm_em, EmOptions, GmmParams, UncertainPoseDist};
use diffkit_core::rng::{self, tag};
use diffkit_core::skeleton::{gen_dataset, z_histogram, Dataset, GenConfig, DATASET_VERSION};
use diffkit_core::trainer::{
    load_checkpoint, save_checkpoint, train, write_json_atomic, TrainConfig, TrainMode,
};

const PREDICTIONS_VERSION: &str = "diffkit-predictions/1";
const EVAL_VERSION: &str = "diffkit-eval/1";
const ABLATION_VERSION: &str = "diffkit-ablation/1";
const INSPECT_VERSION: &str = "diffkit-inspect/1";

// ── Argument parsing ────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "diffkit", version, about = "Pose estimation via mixture-centered diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pose corpus
    GenData(GenDataArgs),
    /// Train a denoiser and write a checkpoint
    Train(TrainArgs),
    /// Predict test poses with a trained checkpoint
    Infer(InferArgs),
    /// Score predictions against ground truth
    Eval(EvalArgs),
    /// Train and compare the standard model variants on one dataset
    Ablate(AblateArgs),
    /// Inspect one sample's observation distribution and its mixture fit
    InspectHk(InspectArgs),
}

/// Seeds resolve in precedence order: the --seed flag, then --set seed=N,
/// then the DIFFKIT_SEED environment variable, then the config default.
#[derive(Args)]
struct GenDataArgs {
    /// Output dataset path
    #[arg(long)]
    out: PathBuf,
    /// Training samples
    #[arg(long)]
    train_count: Option<usize>,
    /// Test samples
    #[arg(long)]
    test_count: Option<usize>,
    /// Sequence half-length; sequences have 2T+1 frames
    #[arg(long)]
    half_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any generation config field, e.g. --set heatmap.size=48
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset path
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Supervision mode: diffpose, stand_diff, baseline_a, baseline_b
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any training config field, e.g. --set pretrain.epochs=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint path
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input dataset path
    #[arg(long)]
    data: PathBuf,
    /// Output predictions path
    #[arg(long)]
    out: PathBuf,
    /// Hypotheses averaged per sample
    #[arg(long)]
    draws: Option<usize>,
    /// Reverse steps; defaults to the checkpoint's full schedule
    #[arg(long)]
    steps: Option<usize>,
    /// Evaluate every n-th test sample
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any inference config field, e.g. --set n_draws=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions file from `diffkit infer`
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset the predictions were made on
    #[arg(long)]
    data: PathBuf,
    /// Optional full per-sample report path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Input dataset path
    #[arg(long)]
    data: PathBuf,
    /// Output comparison path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hypotheses averaged per sample at inference
    #[arg(long, default_value_t = 5)]
    draws: usize,
    /// Evaluate every n-th test sample
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Override the shared training config, e.g. --set latent=64
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    /// Input dataset path
    #[arg(long)]
    data: PathBuf,
    /// Train-split sample index to inspect
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Observation draws to analyze
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    /// Mixture components to fit
    #[arg(long, default_value_t = 5)]
    components: usize,
    /// Depth histogram resolution
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; prints to stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

// ── Error handling ──────────────────────────────────────────────────────

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<diffkit_core::error::Error> for Failure {
    fn from(e: diffkit_core::error::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::InspectHk(args) => cmd_inspect(args),
    };
    if let Err(f) = result {
        eprintln!("error: {}", f.message());
        std::process::exit(f.code());
    }
}

// ── Config plumbing ─────────────────────────────────────────────────────

/// `DIFFKIT_SEED` as a parsed seed, if set.
fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var("DIFFKIT_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("DIFFKIT_SEED {v:?} is not a valid seed"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Failure::Usage(format!("DIFFKIT_SEED: {e}"))),
    }
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn set_path(
    value: &mut serde_json::Value,
    segments: &[&str],
    raw: &str,
    full_key: &str,
) -> Result<(), Failure> {
    let map = value
        .as_object_mut()
        .ok_or_else(|| Failure::Usage(format!("config key {full_key:?} does not name a field")))?;
    let entry = map
        .get_mut(segments[0])
        .ok_or_else(|| Failure::Usage(format!("unknown config key {full_key:?}")))?;
    if segments.len() == 1 {
        *entry = parse_scalar(raw);
        Ok(())
    } else {
        set_path(entry, &segments[1..], raw, full_key)
    }
}

/// Applies `key=value` overrides to any serializable config. Keys use dot
/// paths into the JSON form; unknown keys are rejected rather than
/// silently ignored.
fn apply_overrides<T: Serialize + DeserializeOwned>(
    base: &T,
    pairs: &[String],
) -> Result<T, Failure> {
    let mut value = serde_json::to_value(base)
        .map_err(|e| Failure::Runtime(format!("config serialization failed: {e}")))?;
    for pair in pairs {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set {pair:?} is not KEY=VALUE")))?;
        let segments: Vec<&str> = key.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(Failure::Usage(format!("--set key {key:?} is malformed")));
        }
        set_path(&mut value, &segments, raw, key)?;
    }
    serde_json::from_value(value)
        .map_err(|e| Failure::Usage(format!("invalid --set value: {e}")))
}

fn parse_mode(raw: &str) -> Result<TrainMode, Failure> {
    serde_json::from_value(serde_json::Value::String(raw.to_string())).map_err(|_| {
        Failure::Usage(format!(
            "unknown mode {raw:?}; expected diffpose, stand_diff, baseline_a, or baseline_b"
        ))
    })
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::Runtime(format!("cannot read dataset {}: {e}", path.display())))?;
    let dataset: Dataset = serde_json::from_slice(&bytes)
        .map_err(|e| Failure::Runtime(format!("cannot parse dataset {}: {e}", path.display())))?;
    if dataset.version != DATASET_VERSION {
        return Err(Failure::Runtime(format!(
            "dataset version {:?} is not the supported {DATASET_VERSION:?}",
            dataset.version
        )));
    }
    Ok(dataset)
}

// ── Artifact shapes ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PredictionsFile {
    version: String,
    config: InferConfig,
    predictions: Predictions,
}

#[derive(Serialize)]
struct EvalFile {
    version: String,
    n_draws: usize,
    steps: usize,
    seed: u64,
    metrics: MetricReport,
}

#[derive(Clone, Serialize, Deserialize)]
struct AblationRow {
    name: String,
    mode: String,
    gmm_components: usize,
    steps: usize,
    n_draws: usize,
    mpjpe: f64,
    p_mpjpe: f64,
    pck: f64,
    auc: f64,
}

#[derive(Serialize, Deserialize)]
struct AblationFile {
    version: String,
    seed: u64,
    epochs: usize,
    sample_stride: usize,
    rows: Vec<AblationRow>,
}

/// Per-joint moments of the observation draws, population convention.
#[derive(Serialize)]
struct JointStats {
    mean: [f64; 3],
    cov: [[f64; 3]; 3],
}

#[derive(Serialize)]
struct InspectFile {
    version: String,
    sample_index: usize,
    sample_id: usize,
    draws: usize,
    components: usize,
    z_bins: usize,
    seed: u64,
    empirical: Vec<JointStats>,
    mixture: GmmParams,
    ll_trace: Vec<f64>,
    reinit_count: usize,
}

// ── Commands ────────────────────────────────────────────────────────────

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let mut cfg = GenConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    cfg = apply_overrides(&cfg, &args.set)?;
    if let Some(n) = args.train_count {
        cfg.train_count = n;
    }
    if let Some(n) = args.test_count {
        cfg.test_count = n;
    }
    if let Some(t) = args.half_len {
        cfg.seq_half_len = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let dataset = gen_dataset(&cfg)?;
    write_json_atomic(&dataset, &args.out)?;
    eprintln!(
        "wrote {} ({} train, {} test, seed {})",
        args.out.display(),
        dataset.train.len(),
        dataset.test.len(),
        dataset.seed
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data)?;
    let mut cfg = TrainConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    cfg = apply_overrides(&cfg, &args.set)?;
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let mut stdout = std::io::stdout();
    let result = train(&dataset, &cfg, |log| {
        if let Ok(line) = serde_json::to_string(log) {
            let _ = writeln!(stdout, "{line}");
            let _ = stdout.flush();
        }
    })?;
    save_checkpoint(&result.checkpoint, &args.out)?;
    match result.logs.last() {
        Some(log) => eprintln!(
            "wrote {} after {} epochs (final loss {:.6}, seed {})",
            args.out.display(),
            result.checkpoint.epoch,
            log.loss,
            cfg.seed
        ),
        None => eprintln!("wrote {} (0 epochs, seed {})", args.out.display(), cfg.seed),
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), Failure> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let mut cfg = InferConfig { steps: checkpoint.config.k_max, ..InferConfig::default() };
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    cfg = apply_overrides(&cfg, &args.set)?;
    if let Some(n) = args.draws {
        cfg.n_draws = n;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.stride {
        cfg.sample_stride = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate(checkpoint.config.k_max).map_err(|e| Failure::Usage(e.to_string()))?;
    let predictions = pipeline::infer(&checkpoint, &dataset, &cfg)?;
    let file = PredictionsFile {
        version: PREDICTIONS_VERSION.to_string(),
        config: cfg,
        predictions,
    };
    write_json_atomic(&file, &args.out)?;
    eprintln!(
        "wrote {} ({} samples, {} draws, {} steps)",
        args.out.display(),
        file.predictions.ids.len(),
        file.config.n_draws,
        file.config.steps
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let bytes = std::fs::read(&args.predictions).map_err(|e| {
        Failure::Runtime(format!("cannot read predictions {}: {e}", args.predictions.display()))
    })?;
    let file: PredictionsFile = serde_json::from_slice(&bytes).map_err(|e| {
        Failure::Runtime(format!("cannot parse predictions {}: {e}", args.predictions.display()))
    })?;
    if file.version != PREDICTIONS_VERSION {
        return Err(Failure::Runtime(format!(
            "predictions version {:?} is not the supported {PREDICTIONS_VERSION:?}",
            file.version
        )));
    }
    let dataset = load_dataset(&args.data)?;
    let report = pipeline::evaluate(&file.predictions, &dataset)?;
    let mut stdout = std::io::stdout();
    let line = serde_json::to_string(&report.mean)?;
    writeln!(stdout, "{line}")?;
    stdout.flush()?;
    if let Some(out) = &args.out {
        let full = EvalFile {
            version: EVAL_VERSION.to_string(),
            n_draws: file.predictions.n_draws,
            steps: file.predictions.steps,
            seed: file.predictions.seed,
            metrics: report,
        };
        write_json_atomic(&full, out)?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data)?;
    let mut base = TrainConfig::default();
    if let Some(seed) = env_seed()? {
        base.seed = seed;
    }
    base = apply_overrides(&base, &args.set)?;
    if let Some(epochs) = args.epochs {
        base.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    if args.draws == 0 || args.stride == 0 {
        return Err(Failure::Usage("--draws and --stride must be positive".to_string()));
    }

    // Trained variants: the full method, its two supervision controls,
    // and the mixture-size sweep. Component counts that the shared draw
    // budget cannot support are dropped up front.
    let mut variants: Vec<(String, TrainMode, usize)> = vec![
        ("diffpose".to_string(), TrainMode::Diffpose, base.gmm_components),
        ("stand_diff".to_string(), TrainMode::StandDiff, base.gmm_components),
        ("baseline_a".to_string(), TrainMode::BaselineA, base.gmm_components),
        ("baseline_b".to_string(), TrainMode::BaselineB, base.gmm_components),
    ];
    for m in [1, 9] {
        if m != base.gmm_components && base.gmm_samples >= 10 * m {
            variants.push((format!("gmm_m{m}"), TrainMode::Diffpose, m));
        }
    }

    let mut stdout = std::io::stdout();
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut emit = |row: AblationRow, stdout: &mut std::io::Stdout| -> Result<(), Failure> {
        let line = serde_json::to_string(&row)?;
        writeln!(stdout, "{line}")?;
        stdout.flush()?;
        rows.push(row);
        Ok(())
    };

    let total = variants.len();
    let mut diffpose_ckpt = None;
    for (i, (name, mode, components)) in variants.into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.mode = mode;
        cfg.gmm_components = components;
        cfg.validate().map_err(|e| Failure::Usage(format!("{name}: {e}")))?;
        eprintln!("[{}/{total}] training {name}", i + 1);
        let trained = train(&dataset, &cfg, |log| {
            eprintln!("  epoch {} loss {:.6} ({} ms)", log.epoch, log.loss, log.wall_ms);
        })?;
        let infer_cfg = InferConfig {
            n_draws: args.draws,
            steps: mode.natural_steps(cfg.k_max, cfg.k_stack),
            sample_stride: args.stride,
            seed: base.seed,
        };
        let preds = pipeline::infer(&trained.checkpoint, &dataset, &infer_cfg)?;
        let report = pipeline::evaluate(&preds, &dataset)?;
        let mode_name = serde_json::to_value(mode)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        emit(
            AblationRow {
                name: name.clone(),
                mode: mode_name,
                gmm_components: components,
                steps: infer_cfg.steps,
                n_draws: infer_cfg.n_draws,
                mpjpe: report.mean.mpjpe,
                p_mpjpe: report.mean.p_mpjpe,
                pck: report.mean.pck,
                auc: report.mean.auc,
            },
            &mut stdout,
        )?;
        if name == "diffpose" {
            diffpose_ckpt = Some(trained.checkpoint);
        }
    }

    // Inference-time sweeps reuse the trained full model: fewer reverse
    // steps, and single-draw versus averaged hypotheses.
    let ckpt = diffpose_ckpt.expect("diffpose variant always runs");
    let mut steps: Vec<usize> = [base.k_max / 10, base.k_max / 5, base.k_max / 2]
        .into_iter()
        .filter(|&s| s >= 1 && s < base.k_max)
        .collect();
    steps.dedup();
    let sweeps: Vec<(String, usize, usize)> = steps
        .iter()
        .map(|&s| (format!("diffpose_s{s}"), s, args.draws))
        .chain(std::iter::once(("diffpose_n1".to_string(), base.k_max, 1)))
        .collect();
    for (name, s, draws) in sweeps {
        eprintln!("inference sweep {name}");
        let infer_cfg = InferConfig {
            n_draws: draws,
            steps: s,
            sample_stride: args.stride,
            seed: base.seed,
        };
        let preds = pipeline::infer(&ckpt, &dataset, &infer_cfg)?;
        let report = pipeline::evaluate(&preds, &dataset)?;
        emit(
            AblationRow {
                name,
                mode: "diffpose".to_string(),
                gmm_components: base.gmm_components,
                steps: s,
                n_draws: draws,
                mpjpe: report.mean.mpjpe,
                p_mpjpe: report.mean.p_mpjpe,
                pck: report.mean.pck,
                auc: report.mean.auc,
            },
            &mut stdout,
        )?;
    }

    let file = AblationFile {
        version: ABLATION_VERSION.to_string(),
        seed: base.seed,
        epochs: base.epochs,
        sample_stride: args.stride,
        rows,
    };
    write_json_atomic(&file, &args.out)?;
    eprintln!("wrote {} ({} rows)", args.out.display(), file.rows.len());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&args.data)?;
    let seed = match (args.seed, env_seed()?) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => 0,
    };
    if args.draws == 0 {
        return Err(Failure::Usage("--draws must be positive".to_string()));
    }
    let sample = dataset.train.get(args.sample).ok_or_else(|| {
        Failure::Runtime(format!(
            "train split has {} samples, no index {}",
            dataset.train.len(),
            args.sample
        ))
    })?;
    let zhist = z_histogram(&dataset, args.bins)?;
    let dist =
        UncertainPoseDist::new(&sample.heatmaps, &zhist, &dataset.camera, &dataset.norm_stats)?;
    let mut draw_rng = rng::stream2(seed, tag::HK_TRAIN, args.sample as u64, 0);
    let draws = dist.sample_hk_many(args.draws, &mut draw_rng)?;

    let joints = dataset.skeleton.joint_count();
    let n = args.draws as f64;
    let empirical: Vec<JointStats> = (0..joints)
        .map(|j| {
            let mut mean = [0.0; 3];
            for row in 0..args.draws {
                for a in 0..3 {
                    mean[a] += draws.at(row, 3 * j + a) / n;
                }
            }
            let mut cov = [[0.0; 3]; 3];
            for row in 0..args.draws {
                let d: Vec<f64> =
                    (0..3).map(|a| draws.at(row, 3 * j + a) - mean[a]).collect();
                for (r, dr) in d.iter().enumerate() {
                    for (c, dc) in d.iter().enumerate() {
                        cov[r][c] += dr * dc / n;
                    }
                }
            }
            JointStats { mean, cov }
        })
        .collect();

    let mut em_rng = rng::stream(seed, tag::GMM_FIT, args.sample as u64);
    let fit = fit_gmm_em(&draws, args.components, &EmOptions::default(), &mut em_rng)?;
    let file = InspectFile {
        version: INSPECT_VERSION.to_string(),
        sample_index: args.sample,
        sample_id: sample.id,
        draws: args.draws,
        components: args.components,
        z_bins: args.bins,
        seed,
        empirical,
        mixture: fit.params,
        ll_trace: fit.ll_trace,
        reinit_count: fit.reinit_count,
    };
    match &args.out {
        Some(path) => {
            write_json_atomic(&file, path)?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            let mut stdout = std::io::stdout();
            writeln!(stdout, "{}", serde_json::to_string_pretty(&file)?)?;
            stdout.flush()?;
        }
    }
    Ok(())
}
