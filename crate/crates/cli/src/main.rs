//! Command-line pipeline: synthetic data generation, dataset preparation,
//! training, prediction, trajectory composition, evaluation, the PCA
//! baseline, and the gradient check suite.
//!
//! Every run that owns an output directory refuses to reuse a non-empty one
//! without --force and echoes its effective configuration into
//! `<out>/config.txt`, so reruns are reproducible from the artifacts alone.

use clap::{Args, Parser, Subcommand};
use lsvo_core::flow::{self, FlowEncoding};
use lsvo_core::geometry::{self, MotionVector, Pose};
use lsvo_core::loss::TrainConfig;
use lsvo_core::model::{self, ModelArch};
use lsvo_core::synth::{Camera, DepthModel, MotionSpec};
use lsvo_core::train::DataSet;
use lsvo_core::{eval, layers, loss, pca};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lsvo",
    about = "Optical-flow ego-motion estimation pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flow dataset with known motion labels.
    Synth(SynthArgs),
    /// Build train/eval manifests from flow files and a pose file,
    /// including sub-sampled and blurred variants.
    Prepare(PrepareArgs),
    /// Train a model on prepared manifests.
    Train(TrainArgs),
    /// Run a checkpoint over a manifest and write the motion estimates.
    Predict(PredictArgs),
    /// Compose frame-to-frame motions into a trajectory file.
    Compose(ComposeArgs),
    /// Score an estimated trajectory against ground truth.
    Evaluate(EvaluateArgs),
    /// Fit or compare the linear flow-subspace baseline.
    #[command(subcommand)]
    Pca(PcaCommand),
    /// Finite-difference checks for every layer and loss.
    Gradcheck(GradcheckArgs),
}

// ── Errors and exit codes ────────────────────────────────────────────

enum AppError {
    /// Violated preconditions, malformed inputs, failed validation.
    Contract(String),
    /// Filesystem / OS level failures.
    Io(String),
}

impl AppError {
    fn exit_code(&self) -> ExitCode {
        match self {
            AppError::Contract(_) => ExitCode::from(1),
            AppError::Io(_) => ExitCode::from(2),
        }
    }
}

type Result<T> = std::result::Result<T, AppError>;

fn io_err(e: std::io::Error) -> AppError {
    AppError::Io(e.to_string())
}

macro_rules! contract_from {
    ($($ty:ty),+ $(,)?) => {$(
        impl From<$ty> for AppError {
            fn from(e: $ty) -> Self {
                AppError::Contract(e.to_string())
            }
        }
    )+};
}

contract_from!(
    lsvo_core::loss::LossError,
    lsvo_core::tensor::TensorError,
    lsvo_core::geometry::GeometryError,
    lsvo_core::layers::LayerError,
);

impl From<flow::FlowError> for AppError {
    fn from(e: flow::FlowError) -> Self {
        match e {
            flow::FlowError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Contract(other.to_string()),
        }
    }
}

impl From<lsvo_core::model::ModelError> for AppError {
    fn from(e: lsvo_core::model::ModelError) -> Self {
        match e {
            lsvo_core::model::ModelError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Contract(other.to_string()),
        }
    }
}

impl From<lsvo_core::train::TrainError> for AppError {
    fn from(e: lsvo_core::train::TrainError) -> Self {
        match e {
            lsvo_core::train::TrainError::Io(io) => AppError::Io(io.to_string()),
            lsvo_core::train::TrainError::Flow(f) => f.into(),
            lsvo_core::train::TrainError::Model(m) => m.into(),
            other => AppError::Contract(other.to_string()),
        }
    }
}

impl From<lsvo_core::eval::EvalError> for AppError {
    fn from(e: lsvo_core::eval::EvalError) -> Self {
        match e {
            lsvo_core::eval::EvalError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Contract(other.to_string()),
        }
    }
}

impl From<lsvo_core::synth::SynthError> for AppError {
    fn from(e: lsvo_core::synth::SynthError) -> Self {
        match e {
            lsvo_core::synth::SynthError::Flow(f) => f.into(),
            other => AppError::Contract(other.to_string()),
        }
    }
}

impl From<lsvo_core::pca::PcaError> for AppError {
    fn from(e: lsvo_core::pca::PcaError) -> Self {
        match e {
            lsvo_core::pca::PcaError::Model(m) => m.into(),
            other => AppError::Contract(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Compose(args) => cmd_compose(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Pca(cmd) => match cmd {
            PcaCommand::Fit(args) => cmd_pca_fit(args),
            PcaCommand::Compare(args) => cmd_pca_compare(args),
        },
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                AppError::Contract(msg) => eprintln!("error: {msg}"),
                AppError::Io(msg) => eprintln!("i/o error: {msg}"),
            }
            e.exit_code()
        }
    }
}

// ── Output directories and config echo ───────────────────────────────

/// Claims an output directory: refuses to reuse a non-empty one unless
/// forced, then writes the effective configuration into it.
fn claim_out_dir(dir: &Path, force: bool, config: &BTreeMap<String, String>) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir).map_err(io_err)?.next().is_some();
        if occupied && !force {
            return Err(AppError::Contract(format!(
                "output directory {} is not empty; pass --force to reuse it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut text = String::new();
    for (k, v) in config {
        let _ = writeln!(text, "{k}={v}");
    }
    std::fs::write(dir.join("config.txt"), text).map_err(io_err)?;
    Ok(())
}

fn config_entry(map: &mut BTreeMap<String, String>, key: &str, value: impl ToString) {
    map.insert(key.to_string(), value.to_string());
}

// ── synth ────────────────────────────────────────────────────────────

#[derive(Args)]
struct SynthArgs {
    /// Output directory for flow files and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Number of flow/label pairs.
    #[arg(long)]
    count: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 94)]
    height: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 300)]
    width: usize,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 300.0)]
    focal: f64,
    /// Comma-separated dynamics multipliers; each sample draws one
    /// (1 = original dynamics, 3 = three-fold sub-sampled dynamics).
    #[arg(long, default_value = "1", value_delimiter = ',')]
    dynamics: Vec<f64>,
    /// Depth model: "const:<z>" or "ramp:<top>,<bottom>" (meters).
    #[arg(long, default_value = "ramp:45,7")]
    depth: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source frame rate recorded in the manifest.
    #[arg(long, default_value_t = 10.0)]
    frame_rate: f64,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn parse_depth(spec: &str) -> Result<DepthModel> {
    if let Some(z) = spec.strip_prefix("const:") {
        let z: f64 = z
            .parse()
            .map_err(|e| AppError::Contract(format!("depth '{spec}': {e}")))?;
        return Ok(DepthModel::Constant(z));
    }
    if let Some(rest) = spec.strip_prefix("ramp:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() == 2 {
            let top: f64 = parts[0]
                .parse()
                .map_err(|e| AppError::Contract(format!("depth '{spec}': {e}")))?;
            let bottom: f64 = parts[1]
                .parse()
                .map_err(|e| AppError::Contract(format!("depth '{spec}': {e}")))?;
            return Ok(DepthModel::Ramp { top, bottom });
        }
    }
    Err(AppError::Contract(format!(
        "depth model '{spec}' not understood; use const:<z> or ramp:<top>,<bottom>"
    )))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = BTreeMap::new();
    config_entry(&mut cfg, "command", "synth");
    config_entry(&mut cfg, "count", args.count);
    config_entry(&mut cfg, "height", args.height);
    config_entry(&mut cfg, "width", args.width);
    config_entry(&mut cfg, "focal", args.focal);
    config_entry(
        &mut cfg,
        "dynamics",
        args.dynamics
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    config_entry(&mut cfg, "depth", &args.depth);
    config_entry(&mut cfg, "seed", args.seed);
    config_entry(&mut cfg, "frame_rate", args.frame_rate);

    let depth = parse_depth(&args.depth)?;
    let camera = Camera::new(args.focal, args.height, args.width)?;
    claim_out_dir(&args.out, args.force, &cfg)?;
    let spec = MotionSpec::driving(args.dynamics.clone());
    let manifest = lsvo_core::synth::generate_dataset(
        args.count,
        &spec,
        &depth,
        &camera,
        args.seed,
        &args.out.join("flows"),
        args.frame_rate,
    )?;
    flow::write_manifest(&manifest, &args.out.join("dataset.manifest"))?;
    println!(
        "wrote {} samples to {}",
        manifest.entries.len(),
        args.out.display()
    );
    Ok(())
}

// ── prepare ──────────────────────────────────────────────────────────

#[derive(Args)]
struct PrepareArgs {
    /// Directory containing `{frame_i}_{frame_j}.flo` files.
    #[arg(long)]
    flows: PathBuf,
    /// Ground-truth pose file (12 values per line).
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sub-sample factors to build manifests for.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    subsample: Vec<usize>,
    /// Also emit non-overlapping chain manifests for trajectory work.
    #[arg(long)]
    chain: bool,
    /// Blur radius; applies the Gaussian directly to flow channels (the
    /// proper pipeline blurs source imagery before flow extraction).
    #[arg(long)]
    blur_radius: Option<usize>,
    /// Resize flows to HxW, e.g. 94x300.
    #[arg(long)]
    resize: Option<String>,
    #[arg(long, default_value_t = 10.0)]
    frame_rate: f64,
    #[arg(long, default_value = "seq")]
    sequence_id: String,
    #[arg(long)]
    force: bool,
}

fn parse_resize(spec: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() == 2 {
        if let (Ok(h), Ok(w)) = (parts[0].parse(), parts[1].parse()) {
            return Ok((h, w));
        }
    }
    Err(AppError::Contract(format!(
        "resize '{spec}' not understood; use HxW, e.g. 94x300"
    )))
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let mut cfg = BTreeMap::new();
    config_entry(&mut cfg, "command", "prepare");
    config_entry(&mut cfg, "flows", args.flows.display());
    config_entry(&mut cfg, "poses", args.poses.display());
    config_entry(
        &mut cfg,
        "subsample",
        args.subsample
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    config_entry(&mut cfg, "chain", args.chain);
    config_entry(
        &mut cfg,
        "blur_radius",
        args.blur_radius.map_or("none".to_string(), |r| r.to_string()),
    );
    config_entry(
        &mut cfg,
        "resize",
        args.resize.clone().unwrap_or_else(|| "none".to_string()),
    );
    config_entry(&mut cfg, "frame_rate", args.frame_rate);
    config_entry(&mut cfg, "sequence_id", &args.sequence_id);

    // Validate inputs before claiming the output directory.
    let resize = args.resize.as_deref().map(parse_resize).transpose()?;
    let poses = flow::parse_poses(&args.poses)?;
    let frame_ids: Vec<String> = (0..poses.len()).map(|i| format!("{i:06}")).collect();
    claim_out_dir(&args.out, args.force, &cfg)?;

    if args.blur_radius.is_some() {
        eprintln!(
            "warning: blurring flow channels directly; blurring source imagery \
             before flow extraction is the faithful pipeline"
        );
    }

    for &s in &args.subsample {
        let mut manifest = flow::make_subsampled_manifest(
            &frame_ids,
            &poses,
            s,
            &args.flows,
            &args.sequence_id,
            args.frame_rate,
        )?;
        // Materialize processed flows when any transform is requested.
        if resize.is_some() || args.blur_radius.is_some() {
            let processed_dir = args.out.join(format!("flows_d{s}"));
            std::fs::create_dir_all(&processed_dir).map_err(io_err)?;
            for entry in &mut manifest.entries {
                let mut field = flow::read_flo(&entry.flow_path)?;
                if let Some(r) = args.blur_radius {
                    field = flow::gaussian_blur_flow(&field, r);
                }
                if let Some((h, w)) = resize {
                    field = flow::resize_flow(&field, h, w)?;
                }
                let name = entry.flow_path.file_name().unwrap();
                let dst = processed_dir.join(name);
                flow::write_flo(&field, &dst)?;
                entry.flow_path = dst;
            }
        } else {
            // Validate that the referenced files exist up front.
            for entry in &manifest.entries {
                if !entry.flow_path.exists() {
                    return Err(AppError::Contract(format!(
                        "missing flow file {}",
                        entry.flow_path.display()
                    )));
                }
            }
        }
        flow::write_manifest(&manifest, &args.out.join(format!("d{s}.manifest")))?;
        if args.chain {
            flow::write_manifest(
                &manifest.chain(),
                &args.out.join(format!("d{s}_chain.manifest")),
            )?;
        }
        println!("d{s}: {} pairs", manifest.entries.len());
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    /// Architecture: lsvo (two-branch) or stvo (single task).
    #[arg(long)]
    model: String,
    /// Training manifest.
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest (early stopping).
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value config file; recognized keys: beta, lambda,
    /// learning_rate, batch_size, epochs, seed, patience, width_div,
    /// encode_bound.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys, e.g. --set epochs=20.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    force: bool,
}

struct EffectiveTrainConfig {
    train_cfg: TrainConfig,
    width_div: usize,
    encode_bound: f64,
}

fn parse_train_config(file: Option<&Path>, overrides: &[String]) -> Result<EffectiveTrainConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(io_err)?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                AppError::Contract(format!(
                    "{}:{}: expected key=value",
                    path.display(),
                    idx + 1
                ))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| AppError::Contract(format!("override '{ov}': expected key=value")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }

    let mut cfg = TrainConfig::default();
    let mut width_div = 1usize;
    let mut encode_bound = FlowEncoding::default().bound;
    for (k, v) in pairs {
        let float = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|e| AppError::Contract(format!("config key {k}: {e}")))
        };
        let int = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|e| AppError::Contract(format!("config key {k}: {e}")))
        };
        match k.as_str() {
            "beta" => cfg.beta = float(&v)?,
            "lambda" => cfg.lambda = float(&v)?,
            "learning_rate" => cfg.learning_rate = float(&v)?,
            "batch_size" => cfg.batch_size = int(&v)?,
            "epochs" => cfg.epochs = int(&v)?,
            "seed" => {
                cfg.seed = v
                    .parse()
                    .map_err(|e| AppError::Contract(format!("config key seed: {e}")))?
            }
            "patience" => cfg.patience = int(&v)?,
            "width_div" => width_div = int(&v)?,
            "encode_bound" => encode_bound = float(&v)?,
            other => {
                return Err(AppError::Contract(format!(
                    "unknown config key '{other}' (expected one of beta, lambda, \
                     learning_rate, batch_size, epochs, seed, patience, width_div, \
                     encode_bound)"
                )))
            }
        }
    }
    Ok(EffectiveTrainConfig {
        train_cfg: cfg,
        width_div,
        encode_bound,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let arch = match args.model.as_str() {
        "lsvo" => ModelArch::Lsvo,
        "stvo" => ModelArch::Stvo,
        other => {
            return Err(AppError::Contract(format!(
                "unknown model '{other}', expected lsvo or stvo"
            )))
        }
    };
    let eff = parse_train_config(args.config.as_deref(), &args.overrides)?;
    let cfg = &eff.train_cfg;
    cfg.validate()?;

    let mut echo = BTreeMap::new();
    config_entry(&mut echo, "command", "train");
    config_entry(&mut echo, "model", &args.model);
    config_entry(&mut echo, "train", args.train.display());
    config_entry(&mut echo, "val", args.val.display());
    config_entry(&mut echo, "beta", cfg.beta);
    config_entry(&mut echo, "lambda", cfg.lambda);
    config_entry(&mut echo, "learning_rate", cfg.learning_rate);
    config_entry(&mut echo, "batch_size", cfg.batch_size);
    config_entry(&mut echo, "epochs", cfg.epochs);
    config_entry(&mut echo, "seed", cfg.seed);
    config_entry(&mut echo, "patience", cfg.patience);
    config_entry(&mut echo, "width_div", eff.width_div);
    config_entry(&mut echo, "encode_bound", eff.encode_bound);

    // Load and validate everything before the output directory is touched.
    let encoding = FlowEncoding {
        bound: eff.encode_bound,
    };
    let train_manifest = flow::read_manifest(&args.train)?;
    let val_manifest = flow::read_manifest(&args.val)?;
    let train_data = DataSet::from_manifest(&train_manifest, None, &encoding)?;
    let val_data = DataSet::from_manifest(&val_manifest, None, &encoding)?;
    if train_data.is_empty() {
        return Err(AppError::Contract("training manifest is empty".to_string()));
    }
    let shape = train_data.inputs[0].shape().to_vec();
    let (h, w) = (shape[0], shape[1]);

    let mut graph = match arch {
        ModelArch::Lsvo => model::build_lsvo(h, w, eff.width_div, cfg.seed)?,
        ModelArch::Stvo => model::build_stvo(h, w, eff.width_div, cfg.seed)?,
    };
    claim_out_dir(&args.out, args.force, &echo)?;
    println!(
        "training {} at {}x{} (width/{}): {} parameters, {} train / {} val samples",
        args.model,
        h,
        w,
        eff.width_div,
        graph.parameter_count(),
        train_data.len(),
        val_data.len()
    );
    let outcome = lsvo_core::train::train(&mut graph, &train_data, &val_data, cfg, &args.out)?;
    let last = outcome.history.last();
    println!(
        "done: best val_em {:.6e} at epoch {}{}; last train_em {:.6e}",
        outcome.best_val_em,
        outcome.best_epoch,
        if outcome.stopped_early { " (early stop)" } else { "" },
        last.map_or(f64::NAN, |h| h.train_em)
    );
    println!("checkpoint: {}", outcome.best_checkpoint.display());
    Ok(())
}

// ── predict ──────────────────────────────────────────────────────────

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output motions file (one "τx τy τz θx θy θz" line per pair).
    #[arg(long)]
    out: PathBuf,
    /// Flow encoding bound; must match training.
    #[arg(long, default_value_t = 64.0)]
    encode_bound: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let graph = model::load_checkpoint(&args.checkpoint)?;
    let manifest = flow::read_manifest(&args.manifest)?;
    let encoding = FlowEncoding {
        bound: args.encode_bound,
    };
    let data = DataSet::from_manifest(&manifest, None, &encoding)?;
    if data.is_empty() {
        return Err(AppError::Contract("manifest is empty".to_string()));
    }
    let mut lines = String::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(args.batch_size.max(1)) {
        let sample = &data.inputs[chunk[0]];
        let per = sample.len();
        let mut xs = Vec::with_capacity(chunk.len() * per);
        for &i in chunk {
            xs.extend_from_slice(data.inputs[i].values());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(sample.shape());
        let batch = lsvo_core::Tensor::new(shape, xs)?;
        let pred = graph.predict(&batch)?;
        for m in pred.motions {
            let a = m.to_array();
            let _ = writeln!(lines, "{} {} {} {} {} {}", a[0], a[1], a[2], a[3], a[4], a[5]);
        }
    }
    std::fs::write(&args.out, lines).map_err(io_err)?;
    println!(
        "wrote {} motion estimates to {}",
        data.len(),
        args.out.display()
    );
    Ok(())
}

// ── compose ──────────────────────────────────────────────────────────

#[derive(Args)]
struct ComposeArgs {
    /// Motions file as written by predict.
    #[arg(long)]
    motions: PathBuf,
    /// Output trajectory in pose-per-line format; an x-z CSV appears
    /// alongside.
    #[arg(long)]
    out: PathBuf,
}

fn read_motions(path: &Path) -> Result<Vec<MotionVector>> {
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut motions = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(AppError::Contract(format!(
                "{}:{}: expected 6 fields, got {}",
                path.display(),
                idx + 1,
                fields.len()
            )));
        }
        let mut vals = [0.0f64; 6];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.parse().map_err(|e| {
                AppError::Contract(format!(
                    "{}:{}: field {}: {e}",
                    path.display(),
                    idx + 1,
                    k + 1
                ))
            })?;
        }
        motions.push(MotionVector::from_array(vals));
    }
    Ok(motions)
}

fn cmd_compose(args: ComposeArgs) -> Result<()> {
    let motions = read_motions(&args.motions)?;
    let poses = geometry::compose_trajectory(&motions, &Pose::identity())?;
    let csv = eval::export_trajectory(&poses, &args.out)?;
    eval::write_trajectory_plot_script(&csv)?;
    println!("wrote {} poses to {}", poses.len(), args.out.display());
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory (pose per line).
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth trajectory (pose per line).
    #[arg(long)]
    gt: PathBuf,
    /// Source frame rate; pass the original rate even for sub-sampled
    /// sequences (their speeds then appear multiplied, as intended).
    #[arg(long, default_value_t = 10.0)]
    frame_rate: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    // Validate all inputs before any output is written.
    let est = flow::parse_poses(&args.est)?;
    let gt = flow::parse_poses(&args.gt)?;
    let report = eval::trajectory_errors(&est, &gt, args.frame_rate)?;

    let mut cfg = BTreeMap::new();
    config_entry(&mut cfg, "command", "evaluate");
    config_entry(&mut cfg, "est", args.est.display());
    config_entry(&mut cfg, "gt", args.gt.display());
    config_entry(&mut cfg, "frame_rate", args.frame_rate);
    claim_out_dir(&args.out, args.force, &cfg)?;
    let csv_path = args.out.join("report.csv");
    eval::write_report_csv(&report, &csv_path)?;
    eval::write_report_plot_script(&csv_path)?;
    if report.too_short {
        println!("warning: trajectory shorter than the smallest evaluation length; empty report");
    } else {
        println!(
            "translational {:.4}% rotational {:.6} deg/m over {} subsequences",
            report.trans_pct, report.rot_degpm, report.count
        );
    }
    Ok(())
}

// ── pca ──────────────────────────────────────────────────────────────

#[derive(Subcommand)]
enum PcaCommand {
    /// Fit the linear subspace to the flows of a manifest.
    Fit(PcaFitArgs),
    /// Compare subspace and auto-encoder reconstructions on a manifest.
    Compare(PcaCompareArgs),
}

#[derive(Args)]
struct PcaFitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Latent dimension.
    #[arg(long, default_value_t = 32)]
    latent: usize,
    /// Output subspace container file.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_pca_fit(args: PcaFitArgs) -> Result<()> {
    let manifest = flow::read_manifest(&args.manifest)?;
    let mut fields = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        fields.push(flow::read_flo(&e.flow_path)?);
    }
    let model = pca::fit(&fields, args.latent)?;
    pca::save_subspace(&model, &args.out)?;
    println!(
        "fit subspace of dimension {} over {} fields; leading singular values {:?}",
        args.latent,
        fields.len(),
        &model.singular_values[..model.singular_values.len().min(4)]
    );
    Ok(())
}

#[derive(Args)]
struct PcaCompareArgs {
    /// Subspace container from `pca fit`.
    #[arg(long)]
    subspace: PathBuf,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV of per-field scores.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64.0)]
    encode_bound: f64,
}

fn cmd_pca_compare(args: PcaCompareArgs) -> Result<()> {
    let subspace = pca::load_subspace(&args.subspace)?;
    let graph = model::load_checkpoint(&args.checkpoint)?;
    let manifest = flow::read_manifest(&args.manifest)?;
    let mut fields = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        fields.push(flow::read_flo(&e.flow_path)?);
    }
    let encoding = FlowEncoding {
        bound: args.encode_bound,
    };
    let report = pca::compare_subspaces(&subspace, &graph, &fields, &encoding)?;
    let mut csv = String::from("index,pca_rmsle,ae_rmsle\n");
    for (i, row) in report.rows.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{}", row.pca_rmsle, row.ae_rmsle);
    }
    std::fs::write(&args.out, csv).map_err(io_err)?;
    println!(
        "mean reconstruction error: subspace {:.6e}, auto-encoder {:.6e} ({} fields)",
        report.pca_mean,
        report.ae_mean,
        report.rows.len()
    );
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

#[derive(Args)]
struct GradcheckArgs {
    /// Random initializations per case.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut report = layers::gradient_suite(args.seeds)?;
    report.merge(loss::gradient_suite(args.seeds)?);
    for line in report.lines() {
        println!("{line}");
    }
    let worst = report.worst();
    if report.passed() {
        println!(
            "gradcheck: {} checks passed, worst relative error {:.3e}",
            report.entries.len(),
            worst
        );
        Ok(())
    } else {
        Err(AppError::Contract(format!(
            "gradient checks failed; worst relative error {worst:.3e}"
        )))
    }
}
