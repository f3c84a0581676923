//! The `modurec` command line: train, eval, reproduce, replay, gradcheck.
//!
//! Datasets are never downloaded. `--data-dir` must contain
//!
//! ```text
//! ml-100k/u.data u.user u.item u1.base u1.test ... u5.base u5.test
//! ml-1m/ratings.dat users.dat movies.dat
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointHeader};
use crate::dataio::{self, DataError, FeatureMatrices, RatingDataset, SplitBundle};
use crate::eval::{self, Cell, GridResult, SeedRun};
use crate::model::{ModelParams, Problem, Variant};
use crate::modulation::{CombinerMode, ColdRule};
use crate::optim::OptimizerKind;
use crate::training::{self, Batching, SyntheticSize, TrainConfig};
use crate::Orientation;

pub const ARTIFACT_VERSION: &str = concat!("modurec ", env!("CARGO_PKG_VERSION"), " / format 1");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Failed(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "ml-100k")]
    Ml100k,
    #[serde(rename = "ml-1m")]
    Ml1m,
}

impl FromStr for DatasetId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ml-100k" => Ok(Self::Ml100k),
            "ml-1m" => Ok(Self::Ml1m),
            "ml-10m" => Err("ml-10m is out of scope: supported datasets are ml-100k and ml-1m".into()),
            other => Err(format!("unknown dataset {other:?}: expected ml-100k or ml-1m")),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ml100k => "ml-100k",
            Self::Ml1m => "ml-1m",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    Provided(u8),
    Random,
}

impl FromStr for SplitSpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "random" {
            return Ok(Self::Random);
        }
        match s.strip_prefix("provided:").map(str::parse::<u8>) {
            Some(Ok(k @ 1..=5)) => Ok(Self::Provided(k)),
            _ => Err(format!("bad split {s:?}: expected provided:1..5 or random")),
        }
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Provided(k) => write!(f, "provided:{k}"),
            Self::Random => f.write_str("random"),
        }
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s.to_ascii_lowercase().as_str() {
        "base" => Ok(Variant::Base),
        "d" => Ok(Variant::D),
        "dt" => Ok(Variant::DT),
        "dft" => Ok(Variant::DFT),
        _ => Err(format!("unknown variant {s:?}: variants are Base, D, DT, DFT")),
    }
}

fn parse_combiner(s: &str) -> std::result::Result<CombinerMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "nothing" => Ok(CombinerMode::Nothing),
        "static" => Ok(CombinerMode::Static),
        "adaptive" => Ok(CombinerMode::Adaptive),
        _ => Err(format!("unknown combiner {s:?}: expected nothing, static or adaptive")),
    }
}

fn parse_orientation(s: &str) -> std::result::Result<Orientation, String> {
    match s {
        "as-written" => Ok(Orientation::AsWritten),
        "transposed" => Ok(Orientation::Transposed),
        _ => Err(format!("unknown orientation {s:?}: expected as-written or transposed")),
    }
}

fn parse_cold_rule(s: &str) -> std::result::Result<ColdRule, String> {
    match s {
        "either-zero" => Ok(ColdRule::EitherZero),
        "both-zero" => Ok(ColdRule::BothZero),
        _ => Err(format!("unknown cold rule {s:?}: expected either-zero or both-zero")),
    }
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer {s:?}: expected adam or sgd")),
    }
}

fn parse_batch(s: &str) -> std::result::Result<Batching, String> {
    if s == "full" {
        return Ok(Batching::Full);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Batching::Rows(n)),
        _ => Err(format!("bad batch {s:?}: expected full or a positive row count")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "modurec", version, about = "Time- and feature-modulated autoencoder for rating prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics, checkpoint and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test events of its split.
    Eval(EvalArgs),
    /// Run the seeded grid behind one results table.
    Reproduce(ReproduceArgs),
    /// Re-run a manifest and compare every metric with the recorded ones.
    Replay(ReplayArgs),
    /// Finite-difference check of all gradients on a small synthetic instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, default_value = "ml-100k")]
    pub dataset: DatasetId,
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    /// `provided:K` (ML-100K uK.base/uK.test) or `random`.
    #[arg(long)]
    pub split: Option<SplitSpec>,
    /// Fraction of all events used for testing (random split only).
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Fraction of the non-test events held out for early stopping.
    #[arg(long, default_value_t = 0.05)]
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    /// base, d, dt or dft.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// nothing, static or adaptive.
    #[arg(long, value_parser = parse_combiner)]
    pub combiner: Option<CombinerMode>,
    /// either-zero or both-zero.
    #[arg(long, value_parser = parse_cold_rule)]
    pub cold_rule: Option<ColdRule>,
    /// as-written (user rows) or transposed (item rows).
    #[arg(long, value_parser = parse_orientation)]
    pub orientation: Option<Orientation>,
    /// Autoencoder embedding width.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout_input: Option<f64>,
    #[arg(long)]
    pub dropout_embedding: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// sgd or adam.
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// Learning-rate multiplier of the FiLM and combiner scalars.
    #[arg(long)]
    pub scalar_lr_scale: Option<f64>,
    /// `full` or a row batch size.
    #[arg(long, value_parser = parse_batch)]
    pub batch: Option<Batching>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = eval::DEFAULT_QUANTILE)]
    pub quantile: f64,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Holdout seed of the split; defaults to the seed stored in the checkpoint.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = eval::DEFAULT_QUANTILE)]
    pub quantile: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TableId {
    Table2,
    Table3,
    Table4,
}

impl TableId {
    pub fn cells(self) -> Vec<Cell> {
        let cell = |variant, combiner| Cell { variant, combiner };
        match self {
            Self::Table2 => vec![
                cell(Variant::Base, CombinerMode::Nothing),
                cell(Variant::D, CombinerMode::Nothing),
                cell(Variant::DT, CombinerMode::Nothing),
                cell(Variant::DFT, CombinerMode::Adaptive),
            ],
            Self::Table3 => vec![
                cell(Variant::D, CombinerMode::Nothing),
                cell(Variant::DT, CombinerMode::Nothing),
            ],
            Self::Table4 => vec![
                cell(Variant::DFT, CombinerMode::Nothing),
                cell(Variant::DFT, CombinerMode::Static),
                cell(Variant::DFT, CombinerMode::Adaptive),
            ],
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub table: TableId,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// First seed; runs use `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of seeds per cell.
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    pub seeds: usize,
    #[arg(long, default_value_t = eval::DEFAULT_QUANTILE)]
    pub quantile: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const DEFAULT_SEEDS: usize = 10;
/// Tables with fewer seeds than this carry a low-confidence flag.
pub const MIN_CONFIDENT_SEEDS: usize = 3;

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the replay writes; defaults to `<original out>/replay`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = parse_combiner, default_value = "adaptive")]
    pub combiner: CombinerMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Data selection as recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub dataset: DatasetId,
    pub data_dir: PathBuf,
    pub split: SplitSpec,
    pub test_fraction: f64,
    pub holdout_fraction: f64,
}

impl DataSpec {
    fn from_args(a: &DataArgs) -> Result<Self> {
        let split = a.split.unwrap_or(match a.dataset {
            DatasetId::Ml100k => SplitSpec::Provided(1),
            DatasetId::Ml1m => SplitSpec::Random,
        });
        if a.dataset == DatasetId::Ml1m && split != SplitSpec::Random {
            return Err(CliError::Usage("ml-1m ships no predefined splits; use --split random".into()));
        }
        for (name, f) in [("test", a.test_fraction), ("holdout", a.holdout_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(CliError::Usage(format!("--{name}-fraction {f} is not in [0, 1)")));
            }
        }
        Ok(Self {
            dataset: a.dataset,
            data_dir: a.data_dir.clone(),
            split,
            test_fraction: a.test_fraction,
            holdout_fraction: a.holdout_fraction,
        })
    }

    fn dir(&self) -> PathBuf {
        self.data_dir.join(self.dataset.to_string())
    }

    fn catalog_files(&self) -> [PathBuf; 3] {
        let d = self.dir();
        match self.dataset {
            DatasetId::Ml100k => [d.join("u.data"), d.join("u.user"), d.join("u.item")],
            DatasetId::Ml1m => [d.join("ratings.dat"), d.join("users.dat"), d.join("movies.dat")],
        }
    }

    fn split_files(&self) -> Vec<PathBuf> {
        match self.split {
            SplitSpec::Provided(k) => vec![self.dir().join(format!("u{k}.base")), self.dir().join(format!("u{k}.test"))],
            SplitSpec::Random => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RunKind {
    Train,
    Reproduce { table: TableId },
}

/// Everything needed to re-run a command bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub run: RunKind,
    pub data: DataSpec,
    pub dataset_checksum: String,
    /// Fully resolved training config of each cell; `seed` is replaced per run.
    pub configs: Vec<TrainConfig>,
    pub seeds: Vec<u64>,
    pub quantile: f64,
    pub out_dir: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Defaults per dataset and variant, overridable flag by flag. Variants
/// with the time module overfit sooner and get stronger regularization;
/// the combiner scalars start far from their converged values and move
/// faster.
pub fn preset(dataset: DatasetId, variant: Variant, combiner: CombinerMode) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.variant = variant;
    c.model.combiner = combiner;
    c.model.orientation = Orientation::Transposed;
    c.batch = Batching::Rows(64);
    c.epochs = 800;
    c.early_stop_patience = 30;
    match dataset {
        DatasetId::Ml100k | DatasetId::Ml1m => {
            if variant.time() {
                c.learning_rate = 2e-4;
                c.weight_decay = 1.5e-3;
                c.model.dropout_input = 0.6;
                c.model.dropout_embedding = 0.3;
                if variant.features() {
                    c.scalar_lr_scale = 10.0;
                }
            } else {
                c.learning_rate = 3e-4;
                c.weight_decay = 1e-3;
                c.model.dropout_input = 0.3;
                c.model.dropout_embedding = 0.3;
            }
        }
    }
    c
}

pub const DEFAULT_VARIANT: Variant = Variant::DT;
pub const DEFAULT_COMBINER: CombinerMode = CombinerMode::Adaptive;

/// The preset of `variant`/`combiner` with every given flag applied.
pub fn resolve(
    dataset: DatasetId,
    variant: Variant,
    combiner: CombinerMode,
    h: &HyperArgs,
    seed: u64,
) -> Result<TrainConfig> {
    let mut c = preset(dataset, variant, combiner);
    let m = &mut c.model;
    if let Some(v) = h.cold_rule {
        m.cold_rule = v;
    }
    if let Some(v) = h.orientation {
        m.orientation = v;
    }
    if let Some(v) = h.latent_dim {
        m.latent = v;
    }
    if let Some(v) = h.dropout_input {
        m.dropout_input = v;
    }
    if let Some(v) = h.dropout_embedding {
        m.dropout_embedding = v;
    }
    if let Some(v) = h.lr {
        c.learning_rate = v;
    }
    if let Some(v) = h.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = h.epochs {
        c.epochs = v;
    }
    if let Some(v) = h.patience {
        c.early_stop_patience = v;
    }
    if let Some(v) = h.optimizer {
        c.optimizer = v;
    }
    if let Some(v) = h.batch {
        c.batch = v;
    }
    if let Some(v) = h.scalar_lr_scale {
        c.scalar_lr_scale = v;
    }
    c.seed = seed;
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

pub struct LoadedData {
    pub spec: DataSpec,
    pub catalog: RatingDataset,
    pub features: FeatureMatrices,
    pub checksum: String,
}

/// Reads the catalog and features; `needs_features` turns missing side
/// files into a usage error.
pub fn load_data(spec: &DataSpec, needs_features: bool) -> Result<LoadedData> {
    let [ratings, users, items] = spec.catalog_files();
    if needs_features {
        for p in [&users, &items] {
            if !p.exists() {
                return Err(CliError::Usage(format!(
                    "the feature variant needs the side-information file {}",
                    p.display()
                )));
            }
        }
    }
    let (catalog, features) = match spec.dataset {
        DatasetId::Ml100k => dataio::parse_ml100k(&ratings, &users, &items)?,
        DatasetId::Ml1m => dataio::parse_ml1m(&ratings, &users, &items)?,
    };
    let mut files = vec![ratings, users, items];
    files.extend(spec.split_files());
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let checksum = dataio::checksum_files(&refs)?;
    Ok(LoadedData { spec: spec.clone(), catalog, features, checksum })
}

impl LoadedData {
    /// The split of one seed: the provided files with a seeded holdout, or
    /// a fresh random partition.
    pub fn split(&self, seed: u64) -> Result<SplitBundle> {
        let s = &self.spec;
        Ok(match s.split {
            SplitSpec::Provided(_) => {
                let files = s.split_files();
                dataio::load_ml100k_split(&files[0], &files[1], &self.catalog, s.holdout_fraction, seed)?
            }
            SplitSpec::Random => {
                let holdout = s.holdout_fraction * (1.0 - s.test_fraction);
                dataio::random_split(&self.catalog, s.test_fraction, holdout, seed)?
            }
        })
    }
}

struct Records {
    out: BufWriter<File>,
    path: PathBuf,
}

impl Records {
    fn create(path: PathBuf) -> Result<Self> {
        let out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        Ok(Self { out, path })
    }

    fn push(&mut self, v: &Value) -> Result<()> {
        writeln!(self.out, "{v}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn epoch_records(run: &SeedRun, cell: &str) -> Vec<Value> {
    run.train
        .epochs
        .iter()
        .map(|e| {
            json!({
                "record": "epoch", "cell": cell, "seed": run.seed, "epoch": e.epoch,
                "train_loss": e.train_loss, "holdout_rmse": e.holdout_rmse, "seconds": e.seconds,
            })
        })
        .collect()
}

fn run_record(run: &SeedRun, cell: &str) -> Value {
    json!({
        "record": "run", "cell": cell, "seed": run.seed,
        "best_epoch": run.train.best_epoch,
        "best_holdout_rmse": run.train.best_holdout_rmse,
        "test_rmse": run.train.test_rmse,
        "wall_seconds": run.train.wall_seconds,
        "film": run.train.film,
        "combiner": run.train.combiner,
        "eval": run.eval,
    })
}

fn summary_text(run: &SeedRun) -> String {
    let e = &run.eval;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    format!(
        "seed {}: best epoch {}, holdout RMSE {}, test RMSE {:.4}\n\
         few-ratings RMSE {} ({} events, {:.2}%), many-ratings RMSE {} ({} events, {:.2}%)\n",
        run.seed,
        run.train.best_epoch,
        opt(run.train.best_holdout_rmse),
        e.overall_rmse,
        opt(e.few_ratings_rmse),
        e.few_count,
        100.0 * e.few_fraction,
        opt(e.many_ratings_rmse),
        e.many_count,
        100.0 * e.many_fraction,
    )
}

/// Runs a manifest, writing every artifact under `manifest.out_dir`.
/// Returns whether every requested run completed.
pub fn execute(manifest: &RunManifest, data: &LoadedData) -> Result<bool> {
    let out = &manifest.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join(MANIFEST_FILE), manifest)?;
    let mut records = Records::create(out.join(METRICS_FILE))?;
    match manifest.run {
        RunKind::Train => execute_train(manifest, data, &mut records),
        RunKind::Reproduce { table } => execute_reproduce(manifest, table, data, &mut records),
    }
}

fn execute_train(manifest: &RunManifest, data: &LoadedData, records: &mut Records) -> Result<bool> {
    let seed = manifest.seeds[0];
    let mut config = manifest.configs[0].clone();
    config.seed = seed;
    let split = data.split(seed)?;
    let problem = Problem::from_split(&split, &data.features)?;
    let params = ModelParams::init(&config.model, &problem, seed);
    let (report, params) =
        training::train_problem(&problem, params, &split.holdout.events, &split.test.events, &config)?;
    let eval = eval::evaluate(
        &problem,
        &params,
        &config.model,
        &split.test.events,
        &split.user_train_counts,
        &split.item_train_counts,
        manifest.quantile,
    )
    .map_err(|e| CliError::Failed(e.to_string()))?;
    let run = SeedRun { seed, train: report, eval };
    let label = config.model.variant.label();
    for r in epoch_records(&run, label) {
        records.push(&r)?;
    }
    records.push(&run_record(&run, label))?;

    let header = CheckpointHeader {
        model: config.model.clone(),
        num_users: problem.num_users(),
        num_items: problem.num_items(),
        user_feature_dim: problem.user_features.ncols(),
        item_feature_dim: problem.item_features.ncols(),
        run: json!({ "data": manifest.data, "seed": seed }),
    };
    checkpoint::save(&manifest.out_dir.join(CHECKPOINT_FILE), &header, &params)?;
    let text = format!("{} on {} ({})\n{}", label, manifest.data.dataset, manifest.data.split, summary_text(&run));
    write_text(&manifest.out_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(true)
}

fn execute_reproduce(manifest: &RunManifest, table: TableId, data: &LoadedData, records: &mut Records) -> Result<bool> {
    let split_for = |seed: u64| data.split(seed).map_err(|e| e.to_string());
    let mut sink_error = None;
    let grid = eval::run_ablation_grid(
        &split_for,
        &data.features,
        &manifest.configs,
        &manifest.seeds,
        manifest.quantile,
        &mut |cell, outcome| {
            let label = cell.label();
            let lines = match outcome {
                Ok(run) => {
                    eprintln!("{label} seed {}: test RMSE {:.4}", run.seed, run.eval.overall_rmse);
                    let mut v = epoch_records(run, &label);
                    v.push(run_record(run, &label));
                    v
                }
                Err(msg) => {
                    eprintln!("{label}: run failed: {msg}");
                    vec![json!({ "record": "failure", "cell": label, "message": msg })]
                }
            };
            for l in lines {
                if let Err(e) = records.push(&l) {
                    sink_error.get_or_insert(e);
                }
            }
        },
    );
    if let Some(e) = sink_error {
        return Err(e);
    }
    for c in &grid.cells {
        records.push(&json!({
            "record": "cell", "cell": c.cell.label(), "runs": c.runs.len(),
            "failures": c.failures, "overall": c.overall, "few": c.few, "many": c.many,
            "alpha_static": c.alpha_static,
        }))?;
    }
    let text = render_table(table, manifest, &grid);
    write_text(&manifest.out_dir.join(format!("{}.txt", table_name(table))), &text)?;
    write_json(&manifest.out_dir.join("grid.json"), &grid)?;
    print!("{text}");
    Ok(grid.complete())
}

fn table_name(t: TableId) -> &'static str {
    match t {
        TableId::Table2 => "table2",
        TableId::Table3 => "table3",
        TableId::Table4 => "table4",
    }
}

fn cell_value(v: Option<eval::MeanStd>) -> String {
    v.map_or("failed".to_string(), |m| m.to_string())
}

/// Human-readable table of a finished grid.
pub fn render_table(table: TableId, manifest: &RunManifest, grid: &GridResult) -> String {
    let mut s = String::new();
    let n = grid.seeds.len();
    let title = match table {
        TableId::Table2 => "Ablation: test RMSE per variant",
        TableId::Table3 => "Effect of adding time information",
        TableId::Table4 => "Cold start: RMSE on the few- and many-ratings subsets",
    };
    s += &format!("{title}\n");
    s += &format!(
        "dataset {}, split {}, orientation {:?}, {} seed(s) starting at {}, mean ± std\n",
        manifest.data.dataset,
        manifest.data.split,
        manifest.configs[0].model.orientation,
        n,
        grid.seeds.first().copied().unwrap_or(0),
    );
    if n < MIN_CONFIDENT_SEEDS {
        s += &format!("LOW CONFIDENCE: only {n} seed(s); spreads are not meaningful\n");
    }
    s += "\n";
    match table {
        TableId::Table2 => {
            s += &format!("{:<12} {}\n", "model", "RMSE");
            for c in &grid.cells {
                let name = match c.cell.variant {
                    Variant::Base => "Autorec".to_string(),
                    v => format!("Modurec_{}", v.label()),
                };
                s += &format!("{:<12} {}\n", name, cell_value(c.overall));
            }
        }
        TableId::Table3 => {
            s += &format!("{:<14} {}\n", "", "Modurec_D");
            for c in &grid.cells {
                let name = if c.cell.variant.time() { "with time" } else { "without time" };
                s += &format!("{:<14} {}\n", name, cell_value(c.overall));
            }
        }
        TableId::Table4 => {
            s += &format!("{:<10} {:<18} {:<18}\n", "combiner", "few ratings", "many ratings");
            for c in &grid.cells {
                s += &format!(
                    "{:<10} {:<18} {:<18}\n",
                    format!("{:?}", c.cell.combiner),
                    cell_value(c.few),
                    cell_value(c.many)
                );
            }
            if let Some(c) = grid.cell(Variant::DFT, CombinerMode::Static) {
                if let Some(a) = c.alpha_static {
                    s += &format!("\nstatic combiner weight alpha: {a}\n");
                }
            }
            if let Some(r) = grid.cells.iter().flat_map(|c| c.runs.first()).next() {
                s += &format!(
                    "subset sizes (q = {}): few {:.2}%, many {:.2}% of test events\n",
                    manifest.quantile,
                    100.0 * r.eval.few_fraction,
                    100.0 * r.eval.many_fraction
                );
            }
        }
    }
    for c in &grid.cells {
        for (seed, msg) in &c.failures {
            s += &format!("{} seed {seed} failed: {msg}\n", c.cell.label());
        }
    }
    s
}

fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 0.5 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--quantile {q} is not in (0, 0.5)")))
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<bool> {
    check_quantile(a.quantile)?;
    let spec = DataSpec::from_args(&a.data)?;
    let variant = a.hyper.variant.unwrap_or(DEFAULT_VARIANT);
    let combiner = a.hyper.combiner.unwrap_or(DEFAULT_COMBINER);
    let train = resolve(spec.dataset, variant, combiner, &a.hyper, a.seed)?;
    let data = load_data(&spec, train.model.uses_features())?;
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        run: RunKind::Train,
        data: spec,
        dataset_checksum: data.checksum.clone(),
        configs: vec![train],
        seeds: vec![a.seed],
        quantile: a.quantile,
        out_dir: a.out.clone(),
    };
    execute(&manifest, &data)
}

pub fn cmd_reproduce(a: &ReproduceArgs) -> Result<bool> {
    check_quantile(a.quantile)?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let spec = DataSpec::from_args(&a.data)?;
    if a.hyper.variant.is_some() || a.hyper.combiner.is_some() {
        return Err(CliError::Usage("reproduce fixes the variant and combiner of every cell".into()));
    }
    let configs = a
        .table
        .cells()
        .iter()
        .map(|c| resolve(spec.dataset, c.variant, c.combiner, &a.hyper, a.seed))
        .collect::<Result<Vec<_>>>()?;
    let needs_features = table_needs_features(a.table);
    let data = load_data(&spec, needs_features)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", table_name(a.table), spec.dataset)));
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        run: RunKind::Reproduce { table: a.table },
        data: spec,
        dataset_checksum: data.checksum.clone(),
        configs,
        seeds: (a.seed..a.seed + a.seeds as u64).collect(),
        quantile: a.quantile,
        out_dir: out,
    };
    execute(&manifest, &data)
}

fn table_needs_features(t: TableId) -> bool {
    t.cells().iter().any(|c| c.variant.features() && c.combiner != CombinerMode::Nothing)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<bool> {
    check_quantile(a.quantile)?;
    let (header, params) = checkpoint::load(&a.checkpoint)?;
    let spec = DataSpec::from_args(&a.data)?;
    let data = load_data(&spec, header.model.uses_features())?;
    let (m, n) = (data.catalog.num_users, data.catalog.num_items);
    if (m, n) != (header.num_users, header.num_items) {
        return Err(CliError::Shape(format!(
            "checkpoint was trained on {} users x {} items, {} has {m} x {n}",
            header.num_users, header.num_items, spec.dataset
        )));
    }
    let (du, di) = (data.features.user.ncols(), data.features.item.ncols());
    if (du, di) != (header.user_feature_dim, header.item_feature_dim) {
        return Err(CliError::Shape(format!(
            "checkpoint expects {} user / {} item features, dataset has {du} / {di}",
            header.user_feature_dim, header.item_feature_dim
        )));
    }
    let seed = a.seed.or_else(|| header.run.get("seed").and_then(Value::as_u64)).unwrap_or(0);
    let split = data.split(seed)?;
    let problem = Problem::from_split(&split, &data.features)?;
    let report = eval::evaluate(
        &problem,
        &params,
        &header.model,
        &split.test.events,
        &split.user_train_counts,
        &split.item_train_counts,
        a.quantile,
    )
    .map_err(|e| CliError::Failed(e.to_string()))?;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "overall RMSE {:.4}\nfew-ratings RMSE {} ({} events, {:.2}%)\nmany-ratings RMSE {} ({} events, {:.2}%)",
        report.overall_rmse,
        opt(report.few_ratings_rmse),
        report.few_count,
        100.0 * report.few_fraction,
        opt(report.many_ratings_rmse),
        report.many_count,
        100.0 * report.many_fraction,
    );
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.with_extension("eval.json"));
    write_json(&out, &report)?;
    Ok(true)
}

/// Drops wall-clock fields, which legitimately differ between runs.
fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("seconds");
            map.remove("wall_seconds");
            map.values_mut().for_each(strip_timings);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

fn read_records(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: Value = serde_json::from_str(l)?;
            strip_timings(&mut v);
            Ok(v)
        })
        .collect()
}

/// Lists the differences between two metric streams (timings excluded).
pub fn compare_metrics(original: &Path, replayed: &Path) -> Result<Vec<String>> {
    let a = read_records(original)?;
    let b = read_records(replayed)?;
    let mut diffs = Vec::new();
    if a.len() != b.len() {
        diffs.push(format!("{} records originally, {} on replay", a.len(), b.len()));
    }
    for (k, (x, y)) in a.iter().zip(&b).enumerate() {
        if x != y {
            diffs.push(format!("record {}: {x} != {y}", k + 1));
        }
    }
    Ok(diffs)
}

pub fn cmd_replay(a: &ReplayArgs) -> Result<bool> {
    let text = fs::read_to_string(&a.manifest).map_err(io_err(&a.manifest))?;
    let mut manifest: RunManifest = serde_json::from_str(&text)?;
    let original = a.manifest.parent().unwrap_or(Path::new(".")).join(METRICS_FILE);
    let data = load_data(&manifest.data, false)?;
    if data.checksum != manifest.dataset_checksum {
        return Err(CliError::Failed(format!(
            "dataset checksum {} differs from the recorded {}",
            data.checksum, manifest.dataset_checksum
        )));
    }
    manifest.out_dir = a.out.clone().unwrap_or_else(|| manifest.out_dir.join("replay"));
    let complete = execute(&manifest, &data)?;
    let diffs = compare_metrics(&original, &manifest.out_dir.join(METRICS_FILE))?;
    if diffs.is_empty() {
        println!("replay matches: every metric identical");
        Ok(complete)
    } else {
        for d in diffs.iter().take(20) {
            eprintln!("{d}");
        }
        Err(CliError::Failed(format!("replay differs in {} place(s)", diffs.len())))
    }
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let variants = a.variant.map_or_else(|| vec![Variant::Base, Variant::D, Variant::DT, Variant::DFT], |v| vec![v]);
    let mut ok = true;
    for variant in variants {
        let config = crate::ModelConfig { variant, combiner: a.combiner, latent: 4, ..Default::default() };
        let report = training::gradient_check(&config, SyntheticSize::default(), a.seed)?;
        let worst = report.max_active_error();
        let pass = worst < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{:<4} max relative error {worst:.3e} {}", variant.label(), if pass { "ok" } else { "FAIL" });
        for g in &report.groups {
            println!("     {:<24} {:.3e}{}", g.name, g.max_relative_error, if g.active { "" } else { " (frozen)" });
        }
    }
    Ok(ok)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Parses `args` and runs the command. Exit code 0 iff every requested run
/// completed, 2 for usage errors, 1 otherwise.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reproduce(a) => cmd_reproduce(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
