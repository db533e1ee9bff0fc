//! Command-line surface: one binary whose subcommands chain the synthetic
//! table generator, cohort construction, feature extraction, model
//! training, and evaluation into reproducible batch runs.
//!
//! Every run validates its configuration before touching the filesystem,
//! writes its outputs under an explicit or data-root-derived path, and
//! leaves a `manifest.json` recording the configuration, seeds, and
//! content hashes of inputs and outputs, sufficient to reproduce the run
//! bit for bit. `--jobs 1` forces the deterministic serial path; reruns
//! with identical configuration produce byte-identical files.

use crate::config::{DiagnosisGroups, VariableSet};
use crate::discretize::Standardizer;
use crate::features::{
    extract_features, feature_layout_csv, FeatureMatrix, FeatureScaler, FEATURE_DIM,
};
use crate::linear::{train_linear, LinearModel, Regularization, TrainOptions as LinearOptions};
use crate::metrics;
use crate::pipeline::{
    read_episodes, read_listfile, run_build, split_train_test, BuildOptions, SplitManifest,
};
use crate::rnn::{Arch, ModelSpec, RnnModel, TaskHeads};
use crate::syngen::{plant_signal, SignalKind, SynthConfig};
use crate::train::{
    evaluate_task, predict_episodes, train_model, LossSpec, MultitaskWeights, ScoredInstance,
    TrainOptions as RnnOptions, TrainOutcome,
};
use crate::types::{EpisodeTimeline, Target, Task, TaskInstance, N_PHENOTYPES};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Environment variable naming the default data root (fallback `./data`).
pub const DATA_ROOT_ENV: &str = "ICUBENCH_DATA_ROOT";

// ---------------------------------------------------------------------------
// Argument surface

#[derive(Debug, Parser)]
#[command(
    name = "icubench",
    version,
    about = "ICU clinical prediction benchmarks: synthetic cohorts, task datasets, linear and LSTM baselines, evaluation"
)]
pub struct RunConfig {
    /// Worker threads for parallel sections; 1 forces the serial path.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root for default data paths (overrides $ICUBENCH_DATA_ROOT).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate synthetic source tables (patients, admissions, stays,
    /// events, diagnoses) with ground-truth counts.
    Synth(SynthArgs),
    /// Extract subjects, validate events, build episode timelines, split
    /// patients, and write the four task datasets.
    Build(BuildArgs),
    /// Extract per-instance summary features into a CSV.
    Features(FeaturesArgs),
    /// Train a model on a task dataset.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Score a trained model on a split and report metrics.
    Evaluate(EvaluateArgs),
    /// Post-hoc reports: metrics with confidence intervals, calibration
    /// curves, task-label correlations.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for the raw tables [default: <root>/raw].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    patients: usize,
    /// Plant a learnable outcome signal of this kind.
    #[arg(long, value_enum)]
    signal: Option<SignalArg>,
    /// Signal strength in [0,1]; defaults to 1 when --signal is given.
    #[arg(long)]
    signal_strength: Option<f64>,
    /// Generate no anomalies (clean cohort).
    #[arg(long)]
    clean: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SignalArg {
    Linear,
    Xor,
    Decomp,
    Los,
}

impl From<SignalArg> for SignalKind {
    fn from(s: SignalArg) -> SignalKind {
        match s {
            SignalArg::Linear => SignalKind::Linear,
            SignalArg::Xor => SignalKind::Xor,
            SignalArg::Decomp => SignalKind::Decomp,
            SignalArg::Los => SignalKind::Los,
        }
    }
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// Raw table directory [default: <root>/raw].
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Output directory [default: <root>/built].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Patient fraction held out as the test split.
    #[arg(long, default_value_t = 0.15)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    /// Built dataset directory [default: <root>/built].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long, value_enum)]
    split: DataSplit,
    /// Output CSV [default: <root>/features/<task>_<split>.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataSplit {
    Train,
    Test,
}

impl DataSplit {
    fn name(self) -> &'static str {
        match self {
            DataSplit::Train => "train",
            DataSplit::Test => "test",
        }
    }
}

#[derive(Debug, Subcommand)]
enum TrainCmd {
    /// Logistic (or softmax) regression on summary features.
    Linear(TrainLinearArgs),
    /// Standard LSTM over the discretized hourly input.
    Lstm(TrainRnnArgs),
    /// Channel-wise LSTM: one recurrence per variable, then a shared stack.
    Channelwise(TrainRnnArgs),
}

#[derive(Debug, Args)]
struct TrainLinearArgs {
    /// Built dataset directory [default: <root>/built].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Model output directory [default: <root>/models/linear_<task>].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RegArg::L2)]
    regularization: RegArg,
    /// Inverse regularization strength.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    /// Patient fraction held out of the training set for validation.
    #[arg(long, default_value_t = 0.15)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RegArg {
    L1,
    L2,
}

impl From<RegArg> for Regularization {
    fn from(r: RegArg) -> Regularization {
        match r {
            RegArg::L1 => Regularization::L1,
            RegArg::L2 => Regularization::L2,
        }
    }
}

#[derive(Debug, Args)]
struct TrainRnnArgs {
    /// Built dataset directory [default: <root>/built].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Single task to train on (mutually exclusive with --multitask).
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Train all four task heads jointly.
    #[arg(long)]
    multitask: bool,
    /// Model output directory [default: <root>/models/<model>_<task>].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Per-variable units of the channel-wise recurrences.
    #[arg(long, default_value_t = 8)]
    channel_units: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Bidirectional recurrence (instance-grouped models are causal and
    /// reject this).
    #[arg(long)]
    bidirectional: bool,
    /// Supervise every step: per-step targets for decompensation and
    /// length of stay, target replication for mortality and phenotypes.
    #[arg(long)]
    deep_supervision: bool,
    /// Replication strength α in [0,1].
    #[arg(long, default_value_t = 0.5)]
    target_replication_alpha: f64,
    /// Regress raw remaining hours instead of the 10-bucket softmax.
    #[arg(long)]
    raw_los: bool,
    /// Learn bias terms on the input and forget gates.
    #[arg(long)]
    gate_biases: bool,
    #[arg(long, default_value_t = 1.0)]
    lambda_decomp: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_mortality: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_los: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_pheno: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_instances: usize,
    #[arg(long, default_value_t = 8)]
    batch_stays: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Patient fraction held out of the training set for validation.
    #[arg(long, default_value_t = 0.15)]
    val_fraction: f64,
    /// Stop after this many epochs without any task improving.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Built dataset directory [default: <root>/built].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained model directory.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long, value_enum)]
    split: EvalSplit,
    /// Required to touch the test split.
    #[arg(long = "final")]
    confirm_final: bool,
    /// Which checkpoint of the run to score.
    #[arg(long, value_enum, default_value_t = CkptArg::Best)]
    checkpoint: CkptArg,
    /// Also write per-instance scores to this CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Report text output [default: <root>/reports/<model>_<task>_<split>.txt].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prediction batch cap.
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    /// Training-side instances (validation patients excluded).
    Train,
    /// The held-out validation patients of the training run.
    Val,
    /// The untouched test split; requires --final.
    Test,
}

impl EvalSplit {
    fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CkptArg {
    /// The per-task best-validation-epoch snapshot.
    Best,
    /// The final-epoch parameters.
    Final,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Scores CSV from `evaluate --scores`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Task the scores belong to (required with --scores).
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Built dataset directory; enables the label-correlation report.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory [default: <root>/reports].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Calibration deciles.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    Task::from_str(s).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Entry points

/// Process entry: parse real arguments, run, map errors to exit codes.
pub fn main_entry() -> i32 {
    let cfg = match RunConfig::try_parse_from(std::env::args_os()) {
        Ok(cfg) => cfg,
        Err(e) => {
            // clap prints its own help/usage; usage errors share the
            // invalid-arguments code.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Library entry for tests: parse the given arguments (element 0 is the
/// binary name) and run the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = RunConfig::try_parse_from(args)
        .map_err(|e| Error::invalid(e.render().to_string()))?;
    dispatch(cfg)
}

fn dispatch(cfg: RunConfig) -> Result<()> {
    if let Some(jobs) = cfg.jobs {
        if jobs == 0 {
            return Err(Error::invalid("--jobs must be at least 1"));
        }
        // First configuration wins; later in-process runs keep the
        // existing pool (all parallel sections are order-deterministic).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let root = cfg
        .data_root
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    match &cfg.cmd {
        Cmd::Synth(args) => cmd_synth(&root, args),
        Cmd::Build(args) => cmd_build(&root, args),
        Cmd::Features(args) => cmd_features(&root, args),
        Cmd::Train(TrainCmd::Linear(args)) => cmd_train_linear(&root, args),
        Cmd::Train(TrainCmd::Lstm(args)) => cmd_train_rnn(&root, args, Arch::Standard),
        Cmd::Train(TrainCmd::Channelwise(args)) => cmd_train_rnn(&root, args, Arch::Channelwise),
        Cmd::Evaluate(args) => cmd_evaluate(&root, args),
        Cmd::Report(args) => cmd_report(&root, args),
    }
}

fn pick(opt: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    opt.clone().unwrap_or(default)
}

// ---------------------------------------------------------------------------
// Run manifests

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Content hash of every file under `dir`, keyed by relative path. The
/// top-level `manifest.json` is excluded so a manifest never hashes itself.
fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(dir: &Path, rel: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort();
        for path in entries {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let key = if rel.is_empty() {
                name.clone()
            } else {
                format!("{rel}/{name}")
            };
            if path.is_dir() {
                walk(&path, &key, out)?;
            } else {
                if rel.is_empty() && name == "manifest.json" {
                    continue;
                }
                out.insert(key, hash_file(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, "", &mut out)?;
    Ok(out)
}

fn json_hashes(map: &BTreeMap<String, String>) -> serde_json::Value {
    serde_json::Value::Object(
        map.iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect(),
    )
}

/// Write `manifest.json` (for a directory target) or `<file>.manifest.json`
/// (for a file target) describing one run.
fn write_manifest(
    target: &Path,
    subcommand: &str,
    args: serde_json::Value,
    inputs: serde_json::Value,
) -> Result<()> {
    let (path, outputs) = if target.is_dir() {
        (target.join("manifest.json"), json_hashes(&hash_tree(target)?))
    } else {
        let mut single = BTreeMap::new();
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        single.insert(name, hash_file(target)?);
        (
            PathBuf::from(format!("{}.manifest.json", target.display())),
            json_hashes(&single),
        )
    };
    let manifest = serde_json::json!({
        "tool": format!("icubench {}", env!("CARGO_PKG_VERSION")),
        "subcommand": subcommand,
        "args": args,
        "inputs": inputs,
        "outputs": outputs,
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// synth

fn cmd_synth(root: &Path, args: &SynthArgs) -> Result<()> {
    let out = pick(&args.out, root.join("raw"));
    let mut cfg = SynthConfig::new(args.seed, args.patients);
    if args.clean {
        cfg = cfg.without_anomalies();
    }
    if let Some(kind) = args.signal {
        cfg.signal_kind = kind.into();
    }
    let strength = args
        .signal_strength
        .unwrap_or(if args.signal.is_some() { 1.0 } else { 0.0 });
    let report = plant_signal(&cfg, strength, &out)?;
    write_manifest(
        &out,
        "synth",
        serde_json::json!({
            "seed": args.seed,
            "patients": args.patients,
            "signal": args.signal.map(|s| format!("{s:?}").to_lowercase()),
            "signal_strength": strength,
            "clean": args.clean,
        }),
        serde_json::json!({}),
    )?;
    println!(
        "wrote raw tables to {} ({} patients, {} stays, {} events)",
        out.display(),
        report.patients,
        report.stays,
        report.events
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// build

fn cmd_build(root: &Path, args: &BuildArgs) -> Result<()> {
    let raw = pick(&args.raw, root.join("raw"));
    let out = pick(&args.out, root.join("built"));
    let inputs = json_hashes(&hash_tree(&raw)?);
    let built = run_build(
        &raw,
        &out,
        &BuildOptions {
            fraction: args.test_fraction,
            seed: args.seed,
        },
    )?;
    write_manifest(
        &out,
        "build",
        serde_json::json!({
            "raw": raw.display().to_string(),
            "test_fraction": args.test_fraction,
            "seed": args.seed,
        }),
        inputs,
    )?;
    println!(
        "built {} episodes under {}",
        built.episodes.len(),
        out.display()
    );
    for (task, data) in &built.datasets {
        println!(
            "  {}: {} train / {} test instances",
            task,
            data.train.len(),
            data.test.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// features

fn listfile_path(data: &Path, task: Task, split: &str) -> PathBuf {
    data.join(task.name()).join(format!("{split}_listfile.csv"))
}

fn load_episodes_and_instances(
    data: &Path,
    task: Task,
    split: &str,
) -> Result<(Vec<EpisodeTimeline>, Vec<TaskInstance>)> {
    let vars = VariableSet::builtin();
    let episodes = read_episodes(&data.join("episodes"), vars)?;
    let instances = read_listfile(&listfile_path(data, task, split), task)?;
    Ok((episodes, instances))
}

fn episode_map(episodes: &[EpisodeTimeline]) -> BTreeMap<i64, &EpisodeTimeline> {
    episodes.iter().map(|e| (e.stay_id, e)).collect()
}

fn feature_rows(
    episodes: &BTreeMap<i64, &EpisodeTimeline>,
    instances: &[TaskInstance],
) -> Result<FeatureMatrix> {
    let vars = VariableSet::builtin();
    let rows = instances
        .iter()
        .map(|inst| {
            let ep = episodes.get(&inst.stay_id).ok_or_else(|| {
                Error::invalid(format!("stay {} has no built episode", inst.stay_id))
            })?;
            extract_features(ep, inst.window_end_hours, vars)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_rows(rows)
}

fn target_header(task: Task) -> Vec<String> {
    match task {
        Task::Ihm | Task::Decomp => vec!["label".to_string()],
        Task::Los => vec!["bucket".to_string(), "remaining_hours".to_string()],
        Task::Pheno => (0..N_PHENOTYPES).map(|k| format!("y{k:02}")).collect(),
    }
}

fn target_fields(target: &Target) -> Vec<String> {
    match target {
        Target::Mortality(m) => vec![m.to_string()],
        Target::Decomp(d) => vec![d.to_string()],
        Target::Los {
            remaining_hours,
            bucket,
        } => vec![bucket.to_string(), remaining_hours.to_string()],
        Target::Pheno(bits) => bits.iter().map(|b| b.to_string()).collect(),
    }
}

fn cmd_features(root: &Path, args: &FeaturesArgs) -> Result<()> {
    let data = pick(&args.data, root.join("built"));
    let out = pick(
        &args.out,
        root.join("features")
            .join(format!("{}_{}.csv", args.task.name(), args.split.name())),
    );
    let (episodes, instances) = load_episodes_and_instances(&data, args.task, args.split.name())?;
    let by_stay = episode_map(&episodes);
    let x = feature_rows(&by_stay, &instances)?;

    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["stay_id".to_string(), "window_end_hours".to_string()];
    header.extend(target_header(args.task));
    header.extend((0..FEATURE_DIM).map(|j| format!("f{j:03}")));
    w.write_record(&header).map_err(Error::Csv)?;
    for (i, inst) in instances.iter().enumerate() {
        let mut rec = vec![inst.stay_id.to_string(), inst.window_end_hours.to_string()];
        rec.extend(target_fields(&inst.target));
        rec.extend(x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(Error::Csv)?;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    drop(w);

    let layout_path = out.with_file_name("feature_layout.csv");
    write_text(&layout_path, &feature_layout_csv(VariableSet::builtin()))?;
    write_manifest(
        &out,
        "features",
        serde_json::json!({
            "data": data.display().to_string(),
            "task": args.task.name(),
            "split": args.split.name(),
        }),
        json_hashes(&hash_tree(&data)?),
    )?;
    println!(
        "wrote {} instances x {} features to {}",
        instances.len(),
        FEATURE_DIM,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train linear

/// Patient-level validation partition of training instances, mirroring the
/// recurrent lane's protocol.
fn val_partition(
    episodes: &BTreeMap<i64, &EpisodeTimeline>,
    instances: &[TaskInstance],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>, SplitManifest)> {
    let mut patients = BTreeSet::new();
    for inst in instances {
        let ep = episodes.get(&inst.stay_id).ok_or_else(|| {
            Error::invalid(format!("stay {} has no built episode", inst.stay_id))
        })?;
        patients.insert(ep.patient_id);
    }
    let patients: Vec<i64> = patients.into_iter().collect();
    let manifest = split_train_test(&patients, val_fraction, seed)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for inst in instances {
        if manifest.is_test(episodes[&inst.stay_id].patient_id) {
            val.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "validation split left one side empty; adjust --val-fraction",
        ));
    }
    Ok((train, val, manifest))
}

fn binary_labels(instances: &[TaskInstance]) -> Result<Vec<u8>> {
    instances
        .iter()
        .map(|inst| match &inst.target {
            Target::Mortality(m) => Ok(*m),
            Target::Decomp(d) => Ok(*d),
            other => Err(Error::invalid(format!(
                "expected a binary target, got {other:?}"
            ))),
        })
        .collect()
}

fn bucket_labels(instances: &[TaskInstance]) -> Result<Vec<u8>> {
    instances
        .iter()
        .map(|inst| match &inst.target {
            Target::Los { bucket, .. } => Ok(*bucket),
            other => Err(Error::invalid(format!(
                "expected a length-of-stay target, got {other:?}"
            ))),
        })
        .collect()
}

fn pheno_label_column(instances: &[TaskInstance], k: usize) -> Result<Vec<u8>> {
    instances
        .iter()
        .map(|inst| match &inst.target {
            Target::Pheno(bits) => Ok(bits[k]),
            other => Err(Error::invalid(format!(
                "expected a phenotype target, got {other:?}"
            ))),
        })
        .collect()
}

/// The trained artifact of one linear run: a single model, or one
/// independent binary model per phenotype label.
enum LinearArtifact {
    Single(LinearModel),
    PerLabel(Vec<LinearModel>),
}

impl LinearArtifact {
    fn score(&self, x: &FeatureMatrix, instances: &[TaskInstance]) -> Result<Vec<ScoredInstance>> {
        let rows: Vec<Vec<f64>> = match self {
            LinearArtifact::Single(m) if m.classes == 1 => m
                .predict_binary(x)?
                .into_iter()
                .map(|s| vec![s])
                .collect(),
            LinearArtifact::Single(m) => m.predict(x)?,
            LinearArtifact::PerLabel(models) => {
                let per_label: Vec<Vec<f64>> = models
                    .iter()
                    .map(|m| m.predict_binary(x))
                    .collect::<Result<_>>()?;
                (0..x.rows)
                    .map(|i| per_label.iter().map(|col| col[i]).collect())
                    .collect()
            }
        };
        Ok(instances
            .iter()
            .zip(rows)
            .map(|(inst, scores)| ScoredInstance {
                stay_id: inst.stay_id,
                window_end_hours: inst.window_end_hours,
                target: inst.target.clone(),
                scores,
            })
            .collect())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        match self {
            LinearArtifact::Single(m) => m.save(&dir.join("model.txt")),
            LinearArtifact::PerLabel(models) => {
                let sub = dir.join("pheno_models");
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                for (k, m) in models.iter().enumerate() {
                    m.save(&sub.join(format!("label_{k:02}.txt")))?;
                }
                Ok(())
            }
        }
    }

    fn load(dir: &Path, task: Task) -> Result<LinearArtifact> {
        match task {
            Task::Pheno => {
                let sub = dir.join("pheno_models");
                let models = (0..N_PHENOTYPES)
                    .map(|k| LinearModel::load(&sub.join(format!("label_{k:02}.txt"))))
                    .collect::<Result<_>>()?;
                Ok(LinearArtifact::PerLabel(models))
            }
            _ => Ok(LinearArtifact::Single(LinearModel::load(
                &dir.join("model.txt"),
            )?)),
        }
    }
}

fn fit_linear(
    task: Task,
    x: &FeatureMatrix,
    instances: &[TaskInstance],
    reg: Regularization,
    c: f64,
    opts: LinearOptions,
) -> Result<LinearArtifact> {
    match task {
        Task::Ihm | Task::Decomp => {
            let labels = binary_labels(instances)?;
            Ok(LinearArtifact::Single(train_linear(
                x, &labels, 2, reg, c, opts,
            )?))
        }
        Task::Los => {
            let labels = bucket_labels(instances)?;
            Ok(LinearArtifact::Single(train_linear(
                x,
                &labels,
                crate::types::N_LOS_BUCKETS,
                reg,
                c,
                opts,
            )?))
        }
        Task::Pheno => {
            let models = (0..N_PHENOTYPES)
                .map(|k| {
                    let labels = pheno_label_column(instances, k)?;
                    train_linear(x, &labels, 2, reg, c, opts.clone())
                })
                .collect::<Result<_>>()?;
            Ok(LinearArtifact::PerLabel(models))
        }
    }
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Ihm | Task::Decomp => "auc_roc",
        Task::Los => "linear_kappa",
        Task::Pheno => "macro_auc_roc",
    }
}

fn cmd_train_linear(root: &Path, args: &TrainLinearArgs) -> Result<()> {
    let data = pick(&args.data, root.join("built"));
    let out = pick(
        &args.out,
        root.join("models").join(format!("linear_{}", args.task.name())),
    );
    let (episodes, instances) = load_episodes_and_instances(&data, args.task, "train")?;
    let by_stay = episode_map(&episodes);
    let (train_insts, val_insts, manifest) =
        val_partition(&by_stay, &instances, args.val_fraction, args.seed)?;

    let mut x_train = feature_rows(&by_stay, &train_insts)?;
    let scaler = FeatureScaler::fit(&x_train)?;
    scaler.apply(&mut x_train)?;
    let mut x_val = feature_rows(&by_stay, &val_insts)?;
    scaler.apply(&mut x_val)?;

    let opts = LinearOptions {
        max_iters: args.max_iters,
        seed: args.seed,
        ..LinearOptions::default()
    };
    let artifact = fit_linear(
        args.task,
        &x_train,
        &train_insts,
        args.regularization.into(),
        args.c,
        opts,
    )?;
    let train_scored = artifact.score(&x_train, &train_insts)?;
    let val_scored = artifact.score(&x_val, &val_insts)?;
    let train_metric = evaluate_task(&train_scored, args.task)?;
    let val_metric = evaluate_task(&val_scored, args.task)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    artifact.save(&out)?;
    scaler.save(&out.join("scaler.txt"))?;
    manifest.save(&out.join("validation.txt"))?;
    write_text(
        &out.join("metrics.txt"),
        &format!(
            "model linear\ntask {}\nregularization {}\nc {}\nmetric_name {}\n\
             train_instances {}\nval_instances {}\ntrain_metric {}\nval_metric {}\n",
            args.task,
            Regularization::from(args.regularization).name(),
            args.c,
            metric_name(args.task),
            train_insts.len(),
            val_insts.len(),
            train_metric,
            val_metric,
        ),
    )?;
    write_manifest(
        &out,
        "train linear",
        serde_json::json!({
            "data": data.display().to_string(),
            "task": args.task.name(),
            "regularization": Regularization::from(args.regularization).name(),
            "c": args.c,
            "max_iters": args.max_iters,
            "val_fraction": args.val_fraction,
            "seed": args.seed,
        }),
        json_hashes(&hash_tree(&data)?),
    )?;
    println!(
        "linear {}: train {} {:.4}, val {:.4} -> {}",
        args.task,
        metric_name(args.task),
        train_metric,
        val_metric,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train lstm / channelwise

fn rnn_spec_from(args: &TrainRnnArgs, arch: Arch) -> Result<(ModelSpec, LossSpec)> {
    let heads = match (args.task, args.multitask) {
        (Some(task), false) => TaskHeads::Single(task),
        (None, true) => TaskHeads::Multitask,
        (Some(_), true) => {
            return Err(Error::invalid("--task and --multitask are mutually exclusive"));
        }
        (None, false) => {
            return Err(Error::invalid("pass --task <task> or --multitask"));
        }
    };
    let mut spec = ModelSpec::new(arch, heads, args.hidden, args.seed);
    spec.layers = args.layers;
    spec.dropout = args.dropout;
    spec.deep_supervision = args.deep_supervision;
    spec.bidirectional = args.bidirectional;
    spec.gate_biases = args.gate_biases;
    spec.raw_los = args.raw_los;
    if arch == Arch::Channelwise {
        spec.channel_units = args.channel_units;
    }
    spec.validate()?;
    let loss = LossSpec {
        deep_supervision: args.deep_supervision,
        alpha: args.target_replication_alpha,
        weights: MultitaskWeights {
            decomp: args.lambda_decomp,
            mortality: args.lambda_mortality,
            los: args.lambda_los,
            pheno: args.lambda_pheno,
        },
        raw_los: args.raw_los,
    };
    loss.validate()?;
    Ok((spec, loss))
}

fn rnn_model_name(arch: Arch, heads: TaskHeads) -> String {
    let target = match heads {
        TaskHeads::Single(task) => task.name().to_string(),
        TaskHeads::Multitask => "multitask".to_string(),
    };
    format!("{}_{target}", arch.name())
}

fn train_summary(outcome: &TrainOutcome) -> String {
    let mut text = String::new();
    for (task, best) in &outcome.best {
        text.push_str(&format!(
            "best_epoch_{task} {}\nbest_val_{task} {}\n",
            best.epoch, best.metric
        ));
    }
    if let Some(last) = outcome.history.last() {
        text.push_str(&format!(
            "epochs_run {}\nfinal_train_loss {}\n",
            outcome.history.len(),
            last.train_loss
        ));
    }
    text
}

fn cmd_train_rnn(root: &Path, args: &TrainRnnArgs, arch: Arch) -> Result<()> {
    let (spec, loss) = rnn_spec_from(args, arch)?;
    let data = pick(&args.data, root.join("built"));
    let out = pick(
        &args.out,
        root.join("models").join(rnn_model_name(arch, spec.heads)),
    );
    let vars = VariableSet::builtin();
    let episodes = read_episodes(&data.join("episodes"), vars)?;
    let tasks: Vec<Task> = match spec.heads {
        TaskHeads::Single(task) => vec![task],
        TaskHeads::Multitask => Task::ALL.to_vec(),
    };
    let mut datasets = BTreeMap::new();
    for task in tasks {
        datasets.insert(
            task,
            read_listfile(&listfile_path(&data, task, "train"), task)?,
        );
    }
    let opts = RnnOptions {
        epochs: args.epochs,
        batch_instances: args.batch_instances,
        batch_stays: args.batch_stays,
        learning_rate: args.learning_rate,
        val_fraction: args.val_fraction,
        seed: args.seed,
        patience: args.patience,
    };
    let outcome = train_model(&spec, &loss, &episodes, &datasets, vars, &opts, Some(&out))?;
    write_text(
        &out.join("metrics.txt"),
        &format!(
            "model {}\ntarget {}\n{}",
            arch.name(),
            match spec.heads {
                TaskHeads::Single(task) => task.name().to_string(),
                TaskHeads::Multitask => "multitask".to_string(),
            },
            train_summary(&outcome)
        ),
    )?;
    write_manifest(
        &out,
        "train rnn",
        serde_json::json!({
            "arch": arch.name(),
            "data": data.display().to_string(),
            "task": args.task.map(|t| t.name().to_string()),
            "multitask": args.multitask,
            "hidden": args.hidden,
            "channel_units": if arch == Arch::Channelwise { Some(args.channel_units) } else { None },
            "layers": args.layers,
            "dropout": args.dropout,
            "bidirectional": args.bidirectional,
            "deep_supervision": args.deep_supervision,
            "target_replication_alpha": args.target_replication_alpha,
            "raw_los": args.raw_los,
            "gate_biases": args.gate_biases,
            "lambdas": [args.lambda_decomp, args.lambda_mortality, args.lambda_los, args.lambda_pheno],
            "epochs": args.epochs,
            "batch_instances": args.batch_instances,
            "batch_stays": args.batch_stays,
            "learning_rate": args.learning_rate,
            "val_fraction": args.val_fraction,
            "patience": args.patience,
            "seed": args.seed,
        }),
        json_hashes(&hash_tree(&data)?),
    )?;
    for (task, best) in &outcome.best {
        println!(
            "{} {}: best val {} {:.4} at epoch {}",
            arch.name(),
            task,
            metric_name(*task),
            best.metric,
            best.epoch
        );
    }
    println!("model written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn split_instances(
    data: &Path,
    model_dir: &Path,
    episodes: &BTreeMap<i64, &EpisodeTimeline>,
    task: Task,
    split: EvalSplit,
) -> Result<Vec<TaskInstance>> {
    match split {
        EvalSplit::Test => read_listfile(&listfile_path(data, task, "test"), task),
        EvalSplit::Train | EvalSplit::Val => {
            let all = read_listfile(&listfile_path(data, task, "train"), task)?;
            let manifest = SplitManifest::load(&model_dir.join("validation.txt"))?;
            let want_val = split == EvalSplit::Val;
            let mut out = Vec::new();
            for inst in all {
                let ep = episodes.get(&inst.stay_id).ok_or_else(|| {
                    Error::invalid(format!("stay {} has no built episode", inst.stay_id))
                })?;
                if manifest.is_test(ep.patient_id) == want_val {
                    out.push(inst);
                }
            }
            Ok(out)
        }
    }
}

/// Group per-instance indices by stay: the resampling unit of the
/// stay-level bootstrap.
fn stay_units(scored: &[ScoredInstance]) -> Vec<Vec<usize>> {
    let mut by_stay: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, s) in scored.iter().enumerate() {
        by_stay.entry(s.stay_id).or_default().push(i);
    }
    by_stay.into_values().collect()
}

fn ci_lines(name: &str, ci: &metrics::CiResult) -> String {
    format!(
        "{name} {}\n{name}_ci_low {}\n{name}_ci_high {}\n",
        ci.point, ci.lower, ci.upper
    )
}

/// The metric block shared by `evaluate` and `report`: per-task headline
/// metrics with stay-level bootstrap confidence intervals.
fn metric_report(
    scored: &[ScoredInstance],
    task: Task,
    resamples: usize,
    seed: u64,
) -> Result<String> {
    if scored.is_empty() {
        return Err(Error::Metric {
            message: "no instances to evaluate".to_string(),
        });
    }
    let units = stay_units(scored);
    let mut text = format!(
        "task {task}\ninstances {}\nstays {}\n",
        scored.len(),
        units.len()
    );
    match task {
        Task::Ihm | Task::Decomp => {
            let (scores, labels) = crate::train::binary_pairs(scored)?;
            let roc = metrics::bootstrap_ci_grouped(&units, resamples, seed, |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                metrics::auc_roc(&s, &l).ok()
            })?;
            text.push_str(&ci_lines("auc_roc", &roc));
            let pr = metrics::bootstrap_ci_grouped(&units, resamples, seed, |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                metrics::auc_pr(&s, &l).ok()
            })?;
            text.push_str(&ci_lines("auc_pr", &pr));
        }
        Task::Los => {
            let (pred, truth) = crate::train::los_buckets(scored)?;
            let kappa = metrics::bootstrap_ci_grouped(&units, resamples, seed, |idx| {
                let p: Vec<u8> = idx.iter().map(|&i| pred[i]).collect();
                let t: Vec<u8> = idx.iter().map(|&i| truth[i]).collect();
                metrics::linear_kappa(&p, &t, crate::types::N_LOS_BUCKETS).ok()
            })?;
            text.push_str(&ci_lines("linear_kappa", &kappa));
            if scored[0].scores.len() == 1 {
                let mad = metrics::bootstrap_ci_grouped(&units, resamples, seed, |idx| {
                    let mut p = Vec::with_capacity(idx.len());
                    let mut t = Vec::with_capacity(idx.len());
                    for &i in idx {
                        let Target::Los {
                            remaining_hours, ..
                        } = scored[i].target
                        else {
                            return None;
                        };
                        p.push(scored[i].scores[0]);
                        t.push(remaining_hours);
                    }
                    metrics::mad(&p, &t).ok()
                })?;
                text.push_str(&ci_lines("mad_hours", &mad));
            }
        }
        Task::Pheno => {
            let (scores, labels) = crate::train::pheno_rows(scored)?;
            let summary = metrics::multilabel_auc(&scores, &labels)?;
            let macro_ci = metrics::bootstrap_ci_grouped(&units, resamples, seed, |idx| {
                let s: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
                let l: Vec<Vec<u8>> = idx.iter().map(|&i| labels[i].clone()).collect();
                metrics::multilabel_auc(&s, &l).map(|m| m.macro_auc).ok()
            })?;
            text.push_str(&ci_lines("macro_auc_roc", &macro_ci));
            text.push_str(&format!("micro_auc_roc {}\n", summary.micro_auc));
            for (k, auc) in summary.per_label.iter().enumerate() {
                match auc {
                    Some(v) => text.push_str(&format!("auc_label_{k:02} {v}\n")),
                    None => text.push_str(&format!("auc_label_{k:02} undefined\n")),
                }
            }
        }
    }
    text.push_str(&format!("resamples {resamples}\nci_seed {seed}\n"));
    Ok(text)
}

// ---------------------------------------------------------------------------
// Scores CSV

fn scores_header(task: Task, width: usize) -> Vec<String> {
    let mut header = vec!["stay_id".to_string(), "window_end_hours".to_string()];
    match task {
        Task::Ihm | Task::Decomp => {
            header.push("label".to_string());
            header.push("score".to_string());
        }
        Task::Los => {
            header.push("bucket".to_string());
            header.push("remaining_hours".to_string());
            if width == 1 {
                header.push("pred_hours".to_string());
            } else {
                header.extend((0..width).map(|k| format!("p{k}")));
            }
        }
        Task::Pheno => {
            header.extend((0..N_PHENOTYPES).map(|k| format!("y{k:02}")));
            header.extend((0..N_PHENOTYPES).map(|k| format!("s{k:02}")));
        }
    }
    header
}

fn write_scores_csv(path: &Path, scored: &[ScoredInstance], task: Task) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let width = scored.first().map_or(1, |s| s.scores.len());
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(scores_header(task, width)).map_err(Error::Csv)?;
    for s in scored {
        let mut rec = vec![s.stay_id.to_string(), s.window_end_hours.to_string()];
        rec.extend(target_fields(&s.target));
        rec.extend(s.scores.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(Error::Csv)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_field<T: FromStr>(field: &str, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Schema {
        message: format!("bad {what} value {field:?} in scores file"),
    })
}

fn read_scores_csv(path: &Path, task: Task) -> Result<Vec<ScoredInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let header = r.headers().map_err(Error::Csv)?.clone();
    let fixed = match task {
        Task::Ihm | Task::Decomp => 4,
        Task::Los => 4,
        Task::Pheno => 2 + 2 * N_PHENOTYPES,
    };
    if header.len() < fixed {
        return Err(Error::Schema {
            message: format!(
                "scores file for {task} needs at least {fixed} columns, found {}",
                header.len()
            ),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(Error::Csv)?;
        let stay_id: i64 = parse_field(&rec[0], "stay_id")?;
        let window_end_hours: f64 = parse_field(&rec[1], "window_end_hours")?;
        let (target, scores) = match task {
            Task::Ihm => (
                Target::Mortality(parse_field(&rec[2], "label")?),
                vec![parse_field::<f64>(&rec[3], "score")?],
            ),
            Task::Decomp => (
                Target::Decomp(parse_field(&rec[2], "label")?),
                vec![parse_field::<f64>(&rec[3], "score")?],
            ),
            Task::Los => {
                let bucket = parse_field(&rec[2], "bucket")?;
                let remaining_hours = parse_field(&rec[3], "remaining_hours")?;
                let scores = (4..rec.len())
                    .map(|j| parse_field::<f64>(&rec[j], "score"))
                    .collect::<Result<Vec<f64>>>()?;
                (
                    Target::Los {
                        remaining_hours,
                        bucket,
                    },
                    scores,
                )
            }
            Task::Pheno => {
                let bits = (0..N_PHENOTYPES)
                    .map(|k| parse_field::<u8>(&rec[2 + k], "label"))
                    .collect::<Result<Vec<u8>>>()?;
                let scores = (0..N_PHENOTYPES)
                    .map(|k| parse_field::<f64>(&rec[2 + N_PHENOTYPES + k], "score"))
                    .collect::<Result<Vec<f64>>>()?;
                (Target::Pheno(bits), scores)
            }
        };
        out.push(ScoredInstance {
            stay_id,
            window_end_hours,
            target,
            scores,
        });
    }
    Ok(out)
}

fn cmd_evaluate(root: &Path, args: &EvaluateArgs) -> Result<()> {
    // Test-set discipline comes before any I/O.
    if args.split == EvalSplit::Test && !args.confirm_final {
        return Err(Error::FinalGuard);
    }
    let data = pick(&args.data, root.join("built"));
    let model_dir = &args.model;
    let vars = VariableSet::builtin();
    let episodes = read_episodes(&data.join("episodes"), vars)?;
    let by_stay = episode_map(&episodes);
    let instances = split_instances(&data, model_dir, &by_stay, args.task, args.split)?;
    if instances.is_empty() {
        return Err(Error::Metric {
            message: format!("no {} instances on the {} split", args.task, args.split.name()),
        });
    }

    let is_rnn = model_dir.join("final.ckpt").exists();
    let scored = if is_rnn {
        let ckpt = match args.checkpoint {
            CkptArg::Final => model_dir.join("final.ckpt"),
            CkptArg::Best => {
                let best = model_dir.join(format!("best_{}.ckpt", args.task));
                if !best.exists() {
                    return Err(Error::invalid(format!(
                        "{} has no best checkpoint for {}; pass --checkpoint final",
                        model_dir.display(),
                        args.task
                    )));
                }
                best
            }
        };
        let model = RnnModel::load(&ckpt)?;
        let standardizer = Standardizer::load(&model_dir.join("standardizer.txt"))?;
        predict_episodes(&model, &episodes, &instances, &standardizer, args.batch)?
    } else if model_dir.join("model.txt").exists() || model_dir.join("pheno_models").is_dir() {
        let artifact = LinearArtifact::load(model_dir, args.task)?;
        let scaler = FeatureScaler::load(&model_dir.join("scaler.txt"))?;
        let mut x = feature_rows(&by_stay, &instances)?;
        scaler.apply(&mut x)?;
        let mut scored = artifact.score(&x, &instances)?;
        scored.sort_by_key(|s| (s.stay_id, s.window_end_hours.to_bits()));
        scored
    } else {
        return Err(Error::invalid(format!(
            "{} holds neither a recurrent checkpoint nor a linear model",
            model_dir.display()
        )));
    };

    let mut text = format!(
        "split {}\nmodel {}\ncheckpoint {}\n",
        args.split.name(),
        model_dir.display(),
        if is_rnn {
            match args.checkpoint {
                CkptArg::Best => "best",
                CkptArg::Final => "final",
            }
        } else {
            "linear"
        }
    );
    text.push_str(&metric_report(&scored, args.task, args.resamples, args.seed)?);

    let model_name = model_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    let out = pick(
        &args.out,
        root.join("reports").join(format!(
            "{model_name}_{}_{}.txt",
            args.task.name(),
            args.split.name()
        )),
    );
    write_text(&out, &text)?;
    if let Some(scores_path) = &args.scores {
        write_scores_csv(scores_path, &scored, args.task)?;
    }
    let mut inputs = hash_tree(&data)?;
    for (k, v) in hash_tree(model_dir)? {
        inputs.insert(format!("model/{k}"), v);
    }
    write_manifest(
        &out,
        "evaluate",
        serde_json::json!({
            "data": data.display().to_string(),
            "model": model_dir.display().to_string(),
            "task": args.task.name(),
            "split": args.split.name(),
            "final": args.confirm_final,
            "checkpoint": format!("{:?}", args.checkpoint).to_lowercase(),
            "resamples": args.resamples,
            "seed": args.seed,
        }),
        json_hashes(&inputs),
    )?;
    print!("{text}");
    println!("report written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

fn calibration_csv(scored: &[ScoredInstance], task: Task, bins: usize) -> Result<(String, usize)> {
    let (scores, labels): (Vec<f64>, Vec<u8>) = match task {
        Task::Ihm | Task::Decomp => crate::train::binary_pairs(scored)?,
        Task::Pheno => {
            let (rows, bits) = crate::train::pheno_rows(scored)?;
            (
                rows.into_iter().flatten().collect(),
                bits.into_iter().flatten().collect(),
            )
        }
        Task::Los => {
            return Err(Error::Metric {
                message: "calibration applies to probability scores, not stay-length output"
                    .to_string(),
            });
        }
    };
    let (curve, merged) = metrics::calibration_curve(&scores, &labels, bins)?;
    let mut out = String::from("bin,mean_predicted,observed_rate,count\n");
    for (i, b) in curve.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            b.mean_predicted, b.observed_rate, b.count
        ));
    }
    Ok((out, merged))
}

/// Per-stay task labels for the correlation report, over stays carrying a
/// phenotype instance.
fn correlation_rows(
    episodes: &BTreeMap<i64, &EpisodeTimeline>,
    data: &Path,
) -> Result<Vec<metrics::TaskLabelRow>> {
    let mut decomp_any: BTreeMap<i64, u8> = BTreeMap::new();
    let mut los_sum: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for split in ["train", "test"] {
        for inst in read_listfile(&listfile_path(data, Task::Decomp, split), Task::Decomp)? {
            if let Target::Decomp(d) = inst.target {
                let e = decomp_any.entry(inst.stay_id).or_insert(0);
                *e = (*e).max(d);
            }
        }
        for inst in read_listfile(&listfile_path(data, Task::Los, split), Task::Los)? {
            if let Target::Los {
                remaining_hours, ..
            } = inst.target
            {
                let e = los_sum.entry(inst.stay_id).or_insert((0.0, 0));
                e.0 += remaining_hours;
                e.1 += 1;
            }
        }
    }
    let mut rows = Vec::new();
    for split in ["train", "test"] {
        for inst in read_listfile(&listfile_path(data, Task::Pheno, split), Task::Pheno)? {
            let Target::Pheno(bits) = &inst.target else {
                continue;
            };
            let ep = episodes.get(&inst.stay_id).ok_or_else(|| {
                Error::invalid(format!("stay {} has no built episode", inst.stay_id))
            })?;
            let mean_los = los_sum
                .get(&inst.stay_id)
                .map(|(sum, n)| sum / *n as f64)
                .unwrap_or_else(|| ep.los_hours.unwrap_or(ep.end_hours));
            rows.push(metrics::TaskLabelRow {
                mortality: u8::from(ep.mortality),
                any_decomp: decomp_any.get(&inst.stay_id).copied().unwrap_or(0),
                mean_remaining_los_hours: mean_los,
                pheno: bits.clone(),
            });
        }
    }
    Ok(rows)
}

fn cmd_report(root: &Path, args: &ReportArgs) -> Result<()> {
    if args.scores.is_none() && args.data.is_none() {
        return Err(Error::invalid(
            "pass --scores <csv> (with --task) and/or --data <built dir>",
        ));
    }
    if args.scores.is_some() && args.task.is_none() {
        return Err(Error::invalid("--scores needs --task to interpret the file"));
    }
    let out = pick(&args.out, root.join("reports"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut inputs = BTreeMap::new();

    if let (Some(scores_path), Some(task)) = (&args.scores, args.task) {
        let scored = read_scores_csv(scores_path, task)?;
        inputs.insert(
            scores_path.display().to_string(),
            hash_file(scores_path)?,
        );
        let mut text = metric_report(&scored, task, args.resamples, args.seed)?;
        match calibration_csv(&scored, task, args.bins) {
            Ok((csv, merged)) => {
                write_text(&out.join("calibration.csv"), &csv)?;
                text.push_str(&format!("calibration_bins_merged {merged}\n"));
                println!("wrote {}", out.join("calibration.csv").display());
            }
            Err(Error::Metric { .. }) => {}
            Err(e) => return Err(e),
        }
        write_text(&out.join("metrics.txt"), &text)?;
        println!("wrote {}", out.join("metrics.txt").display());
    }

    if let Some(data) = &args.data {
        let vars = VariableSet::builtin();
        let episodes = read_episodes(&data.join("episodes"), vars)?;
        let by_stay = episode_map(&episodes);
        let rows = correlation_rows(&by_stay, data)?;
        let names: Vec<String> = DiagnosisGroups::builtin().names().to_vec();
        let matrix = metrics::task_label_correlations(&rows, &names)?;
        write_text(&out.join("correlation.csv"), &matrix.to_csv())?;
        for (k, v) in hash_tree(data)? {
            inputs.insert(format!("data/{k}"), v);
        }
        println!("wrote {}", out.join("correlation.csv").display());
    }

    write_manifest(
        &out,
        "report",
        serde_json::json!({
            "scores": args.scores.as_ref().map(|p| p.display().to_string()),
            "task": args.task.map(|t| t.name().to_string()),
            "data": args.data.as_ref().map(|p| p.display().to_string()),
            "bins": args.bins,
            "resamples": args.resamples,
            "seed": args.seed,
        }),
        json_hashes(&inputs),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
