//! RMSE, the few/many-ratings cold-start subsets, and ablation grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{FeatureMatrices, RatingEvent, SplitBundle};
use crate::model::{self, ModelConfig, ModelParams, Problem, Variant};
use crate::modulation::CombinerMode;
use crate::training::{self, TrainConfig, TrainReport};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("RMSE of an empty prediction set")]
    Empty,
    #[error("{preds} predictions for {truths} truths")]
    Length { preds: usize, truths: usize },
    #[error("quantile {0} is not in (0, 0.5)")]
    Quantile(f64),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(EvalError::Length { preds: preds.len(), truths: truths.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let sse: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Nearest-rank empirical quantile: the value at 1-based rank `ceil(p n)`.
pub fn nearest_rank(sorted: &[usize], p: f64) -> usize {
    assert!(!sorted.is_empty(), "quantile of an empty distribution");
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Lower/upper count thresholds of one axis. When they coincide the
/// distribution is degenerate and comparisons become strict, which leaves
/// both subsets empty for an all-equal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisThresholds {
    pub low: usize,
    pub high: usize,
    pub strict: bool,
}

impl AxisThresholds {
    pub fn of(counts: &[usize], q: f64) -> Self {
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let low = nearest_rank(&sorted, q);
        let high = nearest_rank(&sorted, 1.0 - q);
        Self { low, high, strict: low == high }
    }

    fn is_low(&self, c: usize) -> bool {
        if self.strict {
            c < self.low
        } else {
            c <= self.low
        }
    }

    fn is_high(&self, c: usize) -> bool {
        if self.strict {
            c > self.high
        } else {
            c >= self.high
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSubsets {
    pub few: Vec<usize>,
    pub many: Vec<usize>,
    pub users: AxisThresholds,
    pub items: AxisThresholds,
}

/// Splits test events by the training counts of their user and item.
///
/// `few`: both counts in the bottom `q` quantile of their (per-user,
/// per-item) count distribution; `many`: both in the top `q` quantile.
/// Returns event indices.
pub fn quantile_subsets(
    test: &[RatingEvent],
    user_counts: &[usize],
    item_counts: &[usize],
    q: f64,
) -> Result<QuantileSubsets> {
    if !(q > 0.0 && q < 0.5) {
        return Err(EvalError::Quantile(q));
    }
    let users = AxisThresholds::of(user_counts, q);
    let items = AxisThresholds::of(item_counts, q);
    let mut few = Vec::new();
    let mut many = Vec::new();
    for (k, e) in test.iter().enumerate() {
        let (cu, ci) = (user_counts[e.user_idx], item_counts[e.item_idx]);
        if users.is_low(cu) && items.is_low(ci) {
            few.push(k);
        }
        if users.is_high(cu) && items.is_high(ci) {
            many.push(k);
        }
    }
    Ok(QuantileSubsets { few, many, users, items })
}

pub const DEFAULT_QUANTILE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub combiner: CombinerMode,
    pub quantile: f64,
    pub test_events: usize,
    pub overall_rmse: f64,
    pub few_ratings_rmse: Option<f64>,
    pub many_ratings_rmse: Option<f64>,
    pub few_count: usize,
    pub many_count: usize,
    pub few_fraction: f64,
    pub many_fraction: f64,
}

fn subset_rmse(preds: &[f64], truths: &[f64], idx: &[usize]) -> Option<f64> {
    let p: Vec<f64> = idx.iter().map(|&k| preds[k]).collect();
    let t: Vec<f64> = idx.iter().map(|&k| truths[k]).collect();
    rmse(&p, &t).ok()
}

/// Overall and few/many-ratings RMSE of clipped predictions on `test`.
pub fn evaluate(
    problem: &Problem,
    params: &ModelParams,
    config: &ModelConfig,
    test: &[RatingEvent],
    user_counts: &[usize],
    item_counts: &[usize],
    quantile: f64,
) -> std::result::Result<EvalReport, Box<dyn std::error::Error + Send + Sync>> {
    let preds = model::predict_events(problem, params, config, test)?;
    let truths: Vec<f64> = test.iter().map(|e| e.rating).collect();
    let overall_rmse = rmse(&preds, &truths)?;
    let subsets = quantile_subsets(test, user_counts, item_counts, quantile)?;
    let n = test.len() as f64;
    Ok(EvalReport {
        variant: config.variant,
        combiner: config.effective_combiner(),
        quantile,
        test_events: test.len(),
        overall_rmse,
        few_ratings_rmse: subset_rmse(&preds, &truths, &subsets.few),
        many_ratings_rmse: subset_rmse(&preds, &truths, &subsets.many),
        few_count: subsets.few.len(),
        many_count: subsets.many.len(),
        few_fraction: subsets.few.len() as f64 / n,
        many_fraction: subsets.many.len() as f64 / n,
    })
}

/// One grid cell: a variant and the combiner used when features are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub combiner: CombinerMode,
}

impl Cell {
    pub fn label(&self) -> String {
        if self.variant.features() {
            format!("{}/{:?}", self.variant.label(), self.combiner)
        } else {
            self.variant.label().to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train: TrainReport,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Sample mean and (n-1) standard deviation; `None` for no values.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub runs: Vec<SeedRun>,
    /// `(seed, message)` of every failed run.
    pub failures: Vec<(u64, String)>,
    pub overall: Option<MeanStd>,
    pub few: Option<MeanStd>,
    pub many: Option<MeanStd>,
    pub alpha_static: Option<MeanStd>,
}

impl CellResult {
    fn summarize(cell: Cell, runs: Vec<SeedRun>, failures: Vec<(u64, String)>) -> Self {
        let collect = |f: &dyn Fn(&SeedRun) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(f).collect() };
        let overall = MeanStd::of(&collect(&|r| Some(r.eval.overall_rmse)));
        let few = MeanStd::of(&collect(&|r| r.eval.few_ratings_rmse));
        let many = MeanStd::of(&collect(&|r| r.eval.many_ratings_rmse));
        let alpha_static = if cell.variant.features() && cell.combiner == CombinerMode::Static {
            MeanStd::of(&collect(&|r| Some(r.train.combiner.alpha_static)))
        } else {
            None
        };
        Self { cell, runs, failures, overall, few, many, alpha_static }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<CellResult>,
    pub seeds: Vec<u64>,
}

impl GridResult {
    pub fn cell(&self, variant: Variant, combiner: CombinerMode) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.cell.variant == variant && (!variant.features() || c.cell.combiner == combiner))
    }

    pub fn complete(&self) -> bool {
        self.cells.iter().all(|c| c.failures.is_empty())
    }
}

/// Trains and evaluates every configuration for every seed; each config
/// is one cell, labelled by its variant and combiner.
///
/// `split_for(seed)` supplies the split of each run (fixed files with a
/// seeded holdout, or a fresh random split). A failing run is recorded in
/// its cell and the grid continues. `on_run` sees each finished run.
pub fn run_ablation_grid(
    split_for: &dyn Fn(u64) -> std::result::Result<SplitBundle, String>,
    features: &FeatureMatrices,
    configs: &[TrainConfig],
    seeds: &[u64],
    quantile: f64,
    on_run: &mut dyn FnMut(&Cell, &std::result::Result<SeedRun, String>),
) -> GridResult {
    let mut results = Vec::with_capacity(configs.len());
    for base in configs {
        let cell = Cell { variant: base.model.variant, combiner: base.model.combiner };
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for &seed in seeds {
            let config = TrainConfig { seed, ..base.clone() };
            let outcome = run_cell(split_for, features, &config, quantile);
            on_run(&cell, &outcome);
            match outcome {
                Ok(run) => runs.push(run),
                Err(msg) => failures.push((seed, msg)),
            }
        }
        results.push(CellResult::summarize(cell, runs, failures));
    }
    GridResult { cells: results, seeds: seeds.to_vec() }
}

/// Train + evaluate one configuration.
pub fn run_cell(
    split_for: &dyn Fn(u64) -> std::result::Result<SplitBundle, String>,
    features: &FeatureMatrices,
    config: &TrainConfig,
    quantile: f64,
) -> std::result::Result<SeedRun, String> {
    let split = split_for(config.seed)?;
    let problem = Problem::from_split(&split, features).map_err(|e| e.to_string())?;
    let params = ModelParams::init(&config.model, &problem, config.seed);
    let (train, params) = training::train_problem(&problem, params, &split.holdout.events, &split.test.events, config)
        .map_err(|e| e.to_string())?;
    let eval = evaluate(
        &problem,
        &params,
        &config.model,
        &split.test.events,
        &split.user_train_counts,
        &split.item_train_counts,
        quantile,
    )
    .map_err(|e| e.to_string())?;
    Ok(SeedRun { seed: config.seed, train, eval })
}
