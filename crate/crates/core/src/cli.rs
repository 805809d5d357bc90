//! The `neft` command line: one subcommand per pipeline stage, every stage
//! reading and writing files.
//!
//! Each written artifact is logged to stdout as a JSON line
//! `{"artifact": .., "path": .., "hash": ..}` where `hash` is the FNV-1a of
//! the file bytes. Failures print one JSON line `{"error": kind, "message": ..}`
//! to stderr and exit 1; usage errors exit 2.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{categorize, rank_diff, utilization_profile, Threshold, UtilizationProfile};
use crate::error::{Error, Result};
use crate::hash::{fnv1a, to_hex};
use crate::io::reports::{rank_diff_plot, JsonArtifact};
use crate::io::{
    load_checkpoint, load_mask, read_file, save_checkpoint, save_mask, write_file, Dataset,
    PlantedTask, SyntheticKind,
};
use crate::model::{record_trace, ActivationTrace, ModelConfig, ParameterSet, MAX_TRACE_TOKENS};
use crate::selector::{
    fit_probe, neuron_similarity, overlap, pooled_hidden_states, probe_select, select_neurons,
    union_masks, NeuronMask, ProbeModel, SelectionMode, SimilarityReport,
};
use crate::trainer::{evaluate, Optimizer, TrainOptions, Trainer, TrainingMask};

/// Percentile bucket edges used when none are given.
pub const DEFAULT_BUCKET_EDGES: [f64; 10] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];

const TRACE_BATCH: usize = 64;

#[derive(Parser, Debug)]
#[command(name = "neft", version, about = "Neuron-level fine-tuning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Seeded initial checkpoint from a model config file.
    Init(InitArgs),
    /// Synthetic dataset; planted-neurons can also emit its reference model and planted mask.
    Synth(SynthArgs),
    /// Fine-tune a checkpoint, optionally restricted to a neuron mask.
    Train(TrainArgs),
    /// Loss and accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-neuron cosine similarity between two checkpoints.
    Diff(DiffArgs),
    /// Mask of the least (or most) similar neurons of a report.
    Select(SelectArgs),
    /// Ridge probe on pooled hidden states.
    ProbeFit(ProbeFitArgs),
    /// Mask of the up-neurons best aligned with a probe.
    ProbeSelect(ProbeSelectArgs),
    /// Union of two masks.
    Union(PairArgs),
    /// Overlap proportion of two masks.
    Overlap(OverlapArgs),
    /// Activation trace of every neuron over a dataset.
    Trace(TraceArgs),
    /// Utilization ranks from a trace.
    Profile(ProfileArgs),
    /// Rank changes between two profiles.
    Rankdiff(RankdiffArgs),
    /// Strongly affected, suppressed and indirectly affected neurons.
    Categorize(CategorizeArgs),
    /// Every stage in sequence from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct InitArgs {
    /// Model config, TOML or JSON; a `seed` key is ignored.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    kind: SyntheticKind,
    #[arg(long)]
    config: PathBuf,
    /// Seed of the model the task is built around.
    #[arg(long)]
    model_seed: u64,
    /// Seed of the example draw.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Planted pairs; defaults to the task's own choice.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    reference_out: Option<PathBuf>,
    #[arg(long)]
    planted_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Keep embedding and head trainable under a mask.
    #[arg(long)]
    unfreeze_embed_head: bool,
    /// Base options file, TOML or JSON; flags below override it.
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `sgd` or `adam`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    no_shuffle: bool,
    /// Evaluated after training; the result lands in the log.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct DiffArgs {
    #[arg(long)]
    org: PathBuf,
    #[arg(long)]
    ft: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value = "sensitive")]
    mode: SelectionMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeFitArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Residual stream index, 0 (embeddings) to n_layers (last block output).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    no_intercept: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeSelectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    /// Number of up-neurons to keep.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OverlapArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = MAX_TRACE_TOKENS)]
    max_tokens: usize,
    /// Seed of the token subsample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RankdiffArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Comma-separated percentile upper edges.
    #[arg(long, value_delimiter = ',')]
    edges: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    /// Tab-separated `bucket avg_abs_delta` rows.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CategorizeArgs {
    #[arg(long)]
    diff: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Absolute |ΔRank| threshold.
    #[arg(long, conflicts_with = "threshold_fraction")]
    threshold: Option<usize>,
    /// Threshold as a share of all neurons.
    #[arg(long)]
    threshold_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Pipeline config, TOML or JSON. Relative paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let message = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            let message = message.trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": message}));
            return 2;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}

/// Sizes the global rayon pool from `NEFT_THREADS` (default 1).
fn configure_threads() -> Result<()> {
    let threads = match std::env::var("NEFT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::InvalidArgument(format!("NEFT_THREADS={v:?} is not a positive integer")))?,
        Err(_) => 1,
    };
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Init(a) => {
            let config = read_model_config(&a.config, a.seed)?;
            let params = ParameterSet::<f32>::init(&config)?;
            emit("checkpoint", &a.out, &save_checkpoint(&params)?)
        }
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => {
            let params = load_params(&a.ckpt)?;
            let data = load_dataset(&a.data)?;
            let r = evaluate(&params, &data)?;
            println!(
                "{}",
                json!({"loss": r.loss, "accuracy": r.accuracy, "examples": data.len(),
                       "model_hash": to_hex(params.content_hash()), "dataset_hash": to_hex(data.hash())})
            );
            Ok(())
        }
        Command::Diff(a) => {
            let org = load_params(&a.org)?;
            let ft = load_params(&a.ft)?;
            emit("similarity", &a.out, &neuron_similarity(&org, &ft)?.to_json()?)
        }
        Command::Select(a) => {
            let report = SimilarityReport::from_json(&read_file(&a.report)?)?;
            emit("mask", &a.out, &save_mask(&select_neurons(&report, a.fraction, a.mode)?)?)
        }
        Command::ProbeFit(a) => {
            let params = load_params(&a.ckpt)?;
            let data = load_dataset(&a.data)?;
            let layer = a.layer.unwrap_or(params.config.n_layers);
            let probe = fit_from(&params, &data, layer, a.lambda, !a.no_intercept)?;
            emit("probe", &a.out, &probe.to_json()?)
        }
        Command::ProbeSelect(a) => {
            let params = load_params(&a.ckpt)?;
            let probe = ProbeModel::from_json(&read_file(&a.probe)?)?;
            emit("mask", &a.out, &save_mask(&probe_select(&params, &probe, a.k)?)?)
        }
        Command::Union(a) => {
            let m = union_masks(&read_mask(&a.a)?, &read_mask(&a.b)?)?;
            emit("mask", &a.out, &save_mask(&m)?)
        }
        Command::Overlap(a) => {
            let (ma, mb) = (read_mask(&a.a)?, read_mask(&a.b)?);
            let v = overlap(&ma, &mb)?;
            println!(
                "{}",
                json!({"overlap": v, "a": ma.len(), "b": mb.len(), "shared": ma.intersection_len(&mb)})
            );
            Ok(())
        }
        Command::Trace(a) => {
            let params = load_params(&a.ckpt)?;
            let data = load_dataset(&a.data)?;
            let t = trace_of(&params, &data, a.max_tokens, a.seed)?;
            emit("trace", &a.out, &t.to_json()?)
        }
        Command::Profile(a) => {
            let trace = ActivationTrace::from_json(&read_file(&a.trace)?)?;
            emit("profile", &a.out, &utilization_profile(&trace)?.to_json()?)
        }
        Command::Rankdiff(a) => {
            let pa = UtilizationProfile::from_json(&read_file(&a.a)?)?;
            let pb = UtilizationProfile::from_json(&read_file(&a.b)?)?;
            let edges = a.edges.unwrap_or_else(|| DEFAULT_BUCKET_EDGES.to_vec());
            let report = rank_diff(&pa, &pb, &edges)?;
            emit("rankdiff", &a.out, &report.to_json()?)?;
            if let Some(plot) = &a.plot {
                emit("plot", plot, rank_diff_plot(&report).as_bytes())?;
            }
            Ok(())
        }
        Command::Categorize(a) => {
            let diff = crate::analysis::RankDiffReport::from_json(&read_file(&a.diff)?)?;
            let mask = read_mask(&a.mask)?;
            let threshold = match (a.threshold, a.threshold_fraction) {
                (Some(c), _) => Threshold::Count(c),
                (None, Some(f)) => Threshold::Fraction(f),
                (None, None) => Threshold::default(),
            };
            emit("categories", &a.out, &categorize(&diff, &mask, threshold)?.to_json()?)
        }
        Command::Pipeline(a) => pipeline(&a.config),
    }
}

/// Writes `bytes` and logs the artifact line.
fn emit(kind: &str, path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)?;
    println!(
        "{}",
        json!({"artifact": kind, "path": path.display().to_string(), "hash": to_hex(fnv1a(bytes))})
    );
    Ok(())
}

fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        toml::from_str(text).map_err(|e| Error::Malformed(format!("{}: {}", path.display(), e.message())))
    }
}

/// Model config file fields; the seed always comes from the command line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: crate::autodiff::Activation,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_activation() -> crate::autodiff::Activation {
    crate::autodiff::Activation::Silu
}

impl ModelSpec {
    pub fn with_seed(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            n_layers: self.n_layers,
            n_classes: self.n_classes,
            activation: self.activation,
            seed,
        }
    }
}

fn read_model_config(path: &Path, seed: u64) -> Result<ModelConfig> {
    let spec: ModelSpec = read_structured(path)?;
    let config = spec.with_seed(seed);
    config.validate()?;
    Ok(config)
}

fn load_params(path: &Path) -> Result<ParameterSet<f32>> {
    load_checkpoint(&read_file(path)?)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_jsonl(&read_file(path)?)
}

fn read_mask(path: &Path) -> Result<NeuronMask> {
    load_mask(&read_file(path)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = read_model_config(&a.config, a.model_seed)?;
    match a.kind {
        SyntheticKind::Blobs => {
            if a.reference_out.is_some() || a.planted_out.is_some() || a.pairs.is_some() {
                return Err(Error::InvalidArgument(
                    "--pairs, --reference-out and --planted-out apply to planted-neurons only".into(),
                ));
            }
            let data = crate::io::make_synthetic_dataset(a.kind, &config, a.n, a.seed)?;
            emit("dataset", &a.out, &data.to_jsonl())
        }
        SyntheticKind::PlantedNeurons => {
            let task = match a.pairs {
                Some(p) => PlantedTask::with_pairs(&config, p)?,
                None => PlantedTask::new(&config)?,
            };
            emit("dataset", &a.out, &task.sample(a.n, a.seed)?.to_jsonl())?;
            if let Some(path) = &a.reference_out {
                emit("checkpoint", path, &save_checkpoint(&task.reference)?)?;
            }
            if let Some(path) = &a.planted_out {
                let mask = task.planted_mask(task.reference.content_hash());
                emit("mask", path, &save_mask(&mask)?)?;
            }
            Ok(())
        }
    }
}

/// Optional train options; absent fields fall back to [`TrainOptions::default`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub max_steps: Option<usize>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<String>,
    pub shuffle: Option<bool>,
}

impl TrainSpec {
    pub fn resolve(&self, seed: u64) -> Result<TrainOptions> {
        let d = TrainOptions::default();
        let optimizer = match &self.optimizer {
            Some(name) => parse_optimizer(name)?,
            None => d.optimizer,
        };
        let opts = TrainOptions {
            max_steps: self.max_steps.unwrap_or(d.max_steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            optimizer,
            seed,
            shuffle: self.shuffle.unwrap_or(d.shuffle),
            max_epochs: self.max_epochs.or(d.max_epochs),
        };
        opts.validate()?;
        Ok(opts)
    }
}

fn parse_optimizer(name: &str) -> Result<Optimizer> {
    match name {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::adam()),
        other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut spec: TrainSpec = match &a.options {
        Some(p) => read_structured(p)?,
        None => TrainSpec::default(),
    };
    spec.max_steps = a.max_steps.or(spec.max_steps);
    spec.max_epochs = a.max_epochs.or(spec.max_epochs);
    spec.batch_size = a.batch_size.or(spec.batch_size);
    spec.learning_rate = a.lr.or(spec.learning_rate);
    spec.optimizer = a.optimizer.clone().or(spec.optimizer);
    if a.no_shuffle {
        spec.shuffle = Some(false);
    }
    let opts = spec.resolve(a.seed)?;
    if a.unfreeze_embed_head && a.mask.is_none() {
        return Err(Error::InvalidArgument("--unfreeze-embed-head needs --mask".into()));
    }

    let init = load_params(&a.init)?;
    let data = load_dataset(&a.data)?;
    let eval = a.eval.as_deref().map(load_dataset).transpose()?;
    let mask = match &a.mask {
        Some(p) => Some(TrainingMask::new(mask_for(&read_mask(p)?, &init)?).with_embed_head(a.unfreeze_embed_head)),
        None => None,
    };
    let run = Trainer::new(opts).mask(mask.as_ref()).eval_set(eval.as_ref()).run(&init, &data)?;
    emit("checkpoint", &a.out, &save_checkpoint(&run.params)?)?;
    if let Some(log) = &a.log {
        emit("train_log", log, &run.log.to_json()?)?;
    }
    Ok(())
}

/// A mask must come from the model it is applied to.
fn mask_for(mask: &NeuronMask, params: &ParameterSet<f32>) -> Result<NeuronMask> {
    let h = params.content_hash();
    if mask.model_hash != h {
        return Err(Error::ModelHashMismatch(mask.model_hash, h));
    }
    mask.validate_for(&params.config)?;
    Ok(mask.clone())
}

fn fit_from(
    params: &ParameterSet<f32>,
    data: &Dataset,
    layer: usize,
    lambda: f64,
    intercept: bool,
) -> Result<ProbeModel> {
    data.validate(&params.config)?;
    let xs = pooled_hidden_states(params, data.examples(), layer, TRACE_BATCH)?;
    fit_probe(&xs, &data.labels(), params.config.n_classes, lambda, intercept)
}

fn trace_of(params: &ParameterSet<f32>, data: &Dataset, max_tokens: usize, seed: u64) -> Result<ActivationTrace> {
    data.validate(&params.config)?;
    record_trace(params, data.examples(), data.hash(), max_tokens, seed, TRACE_BATCH)
}

/// `neft pipeline` config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    /// Seed for init and for both training runs.
    pub seed: u64,
    /// Either `model` (a fresh seeded init) or `init_checkpoint`.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    pub train_data: PathBuf,
    /// Scored after NeFT training, and traced for the utilization analysis.
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    /// The quick full fine-tune whose diff drives selection.
    #[serde(default)]
    pub selection_train: TrainSpec,
    /// The masked fine-tune.
    #[serde(default)]
    pub train: TrainSpec,
    pub selection: SelectionSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub fraction: f64,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub unfreeze_embed_head: bool,
}

fn default_mode() -> String {
    "sensitive".into()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default)]
    pub bucket_edges: Option<Vec<f64>>,
    /// Absolute threshold; takes precedence over `threshold_fraction`.
    #[serde(default)]
    pub threshold: Option<usize>,
    #[serde(default)]
    pub threshold_fraction: Option<f64>,
    #[serde(default)]
    pub max_trace_tokens: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = read_structured(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        rebase(&mut cfg.train_data);
        cfg.eval_data.as_mut().map(rebase);
        cfg.init_checkpoint.as_mut().map(rebase);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model, &self.init_checkpoint) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::InvalidArgument(
                    "pipeline config needs exactly one of `model` and `init_checkpoint`".into(),
                ))
            }
            _ => {}
        }
        let f = self.selection.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!("selection fraction {f} is outside (0, 1]")));
        }
        self.selection.mode.parse::<SelectionMode>()?;
        let inputs = [Some(&self.train_data), self.eval_data.as_ref(), self.init_checkpoint.as_ref()];
        for p in inputs.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn pipeline(path: &Path) -> Result<()> {
    let cfg = PipelineConfig::load(path)?;
    let out = |name: &str| cfg.output_dir.join(name);
    let mut artifacts = Vec::new();
    let mut save = |kind: &str, name: &str, bytes: &[u8]| -> Result<()> {
        emit(kind, &out(name), bytes)?;
        artifacts.push(json!({"artifact": kind, "file": name, "hash": to_hex(fnv1a(bytes))}));
        Ok(())
    };

    let org = match (&cfg.model, &cfg.init_checkpoint) {
        (Some(spec), _) => ParameterSet::<f32>::init(&spec.with_seed(cfg.seed))?,
        (None, Some(p)) => load_params(p)?,
        (None, None) => unreachable!("validated"),
    };
    save("checkpoint", "org.ckpt", &save_checkpoint(&org)?)?;
    let train = load_dataset(&cfg.train_data)?;
    let eval = cfg.eval_data.as_deref().map(load_dataset).transpose()?;

    let sel_opts = cfg.selection_train.resolve(cfg.seed)?;
    let ft = Trainer::new(sel_opts).run(&org, &train)?;
    save("checkpoint", "ft.ckpt", &save_checkpoint(&ft.params)?)?;
    save("train_log", "ft.log.json", &ft.log.to_json()?)?;

    let report = neuron_similarity(&org, &ft.params)?;
    save("similarity", "similarity.json", &report.to_json()?)?;
    let mode: SelectionMode = cfg.selection.mode.parse()?;
    let mask = select_neurons(&report, cfg.selection.fraction, mode)?;
    save("mask", "mask.json", &save_mask(&mask)?)?;

    let tmask = TrainingMask::new(mask.clone()).with_embed_head(cfg.selection.unfreeze_embed_head);
    let neft = Trainer::new(cfg.train.resolve(cfg.seed)?)
        .mask(Some(&tmask))
        .eval_set(eval.as_ref())
        .run(&org, &train)?;
    save("checkpoint", "neft.ckpt", &save_checkpoint(&neft.params)?)?;
    save("train_log", "neft.log.json", &neft.log.to_json()?)?;

    let trace_data = eval.as_ref().unwrap_or(&train);
    let max_tokens = cfg.analysis.max_trace_tokens.unwrap_or(MAX_TRACE_TOKENS);
    let trace_a = trace_of(&org, trace_data, max_tokens, cfg.seed)?;
    let trace_b = trace_of(&neft.params, trace_data, max_tokens, cfg.seed)?;
    let profile_a = utilization_profile(&trace_a)?;
    let profile_b = utilization_profile(&trace_b)?;
    save("profile", "profile.org.json", &profile_a.to_json()?)?;
    save("profile", "profile.neft.json", &profile_b.to_json()?)?;
    let edges = cfg.analysis.bucket_edges.clone().unwrap_or_else(|| DEFAULT_BUCKET_EDGES.to_vec());
    let diff = rank_diff(&profile_a, &profile_b, &edges)?;
    save("rankdiff", "rankdiff.json", &diff.to_json()?)?;
    save("plot", "rankdiff.tsv", rank_diff_plot(&diff).as_bytes())?;
    let threshold = match (cfg.analysis.threshold, cfg.analysis.threshold_fraction) {
        (Some(c), _) => Threshold::Count(c),
        (None, Some(f)) => Threshold::Fraction(f),
        (None, None) => Threshold::default(),
    };
    save("categories", "categories.json", &categorize(&diff, &mask, threshold)?.to_json()?)?;

    let summary = json!({
        "format_version": crate::io::FORMAT_VERSION,
        "artifacts": artifacts,
        "final_eval": neft.log.final_eval.as_ref().map(|e| json!({"loss": e.loss, "accuracy": e.accuracy})),
    });
    emit("summary", &out("pipeline.json"), &crate::io::to_json_bytes(&summary)?)
}
