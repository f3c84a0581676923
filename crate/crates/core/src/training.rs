//! End-to-end training: masked L2 objective, optimizer loop, early stopping
//! on holdout RMSE, and a finite-difference gradient checker.

use std::time::Instant;

use ndarray::{Array2, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{AutoencoderParams, DropoutConfig};
use crate::dataio::{FeatureMatrices, RatingEvent, SplitBundle};
use crate::eval;
use crate::masked::DenseMatrixWithMask;
use crate::model::{self, stream_rng, streams, ModelConfig, ModelError, ModelParams, Problem};
use crate::optim::{Optimizer, OptimizerKind};
use crate::timefeat::TimeChannels;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    /// One step per epoch over every autoencoder row.
    Full,
    /// Shuffled row batches of the given size.
    Rows(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub batch: Batching,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Learning-rate multiplier of the FiLM and combiner scalars.
    #[serde(default = "unit_scale")]
    pub scalar_lr_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 300,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 5e-5,
            batch: Batching::Full,
            seed: 0,
            early_stop_patience: 15,
            scalar_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    /// Effective learning-rate multiplier of a tensor; 0 when frozen.
    pub fn lr_scale(&self, name: &str) -> f64 {
        if !self.model.is_trainable(name) {
            0.0
        } else if name.starts_with("film.") || name.starts_with("combiner.") {
            self.scalar_lr_scale
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.scalar_lr_scale >= 0.0 && self.scalar_lr_scale.is_finite()) {
            return Err(TrainError::Config(format!("scalar lr scale {} must be >= 0", self.scalar_lr_scale)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch == Batching::Rows(0) {
            return Err(TrainError::Config("row batch size must be positive".into()));
        }
        if self.model.latent == 0 {
            return Err(TrainError::Config("latent dimension must be positive".into()));
        }
        self.model
            .train_dropout()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_rmse: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_holdout_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
    pub wall_seconds: f64,
    /// Learned modulation scalars of the kept parameters.
    pub film: crate::modulation::FilmParams,
    pub combiner: crate::modulation::CombinerParams,
}

impl TrainReport {
    /// The metric sequence without timings, for reproducibility checks.
    pub fn metrics(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.holdout_rmse))
            .collect()
    }
}

/// `sum_{mask} (R_hat - R)^2 / |mask| + lambda (|W_enc|^2 + |W_dec|^2)`.
pub fn masked_l2_loss(
    r_hat: &Array2<f64>,
    r: &DenseMatrixWithMask,
    lambda: f64,
    params: &AutoencoderParams,
) -> Result<f64> {
    if r_hat.dim() != r.dim() {
        return Err(TrainError::Config(format!(
            "prediction shape {:?} does not match ratings {:?}",
            r_hat.dim(),
            r.dim()
        )));
    }
    let (data, _) = model::masked_squared_error(r_hat, r.values.view(), r.mask.view())?;
    Ok(data + model::weight_penalty(params, lambda))
}

fn rmse_on(problem: &Problem, params: &ModelParams, config: &ModelConfig, events: &[RatingEvent]) -> Result<Option<f64>> {
    if events.is_empty() {
        return Ok(None);
    }
    let preds = model::predict_events(problem, params, config, events)?;
    let truths: Vec<f64> = events.iter().map(|e| e.rating).collect();
    Ok(Some(eval::rmse(&preds, &truths).expect("non-empty, equal lengths")))
}

/// Trains on `split.train`, early-stops on `split.holdout` and reports the
/// test RMSE of the best-holdout parameters.
///
/// Fully determined by the config (seed included): the same config gives
/// the same metric sequence.
pub fn train(split: &SplitBundle, features: &FeatureMatrices, config: &TrainConfig) -> Result<(TrainReport, ModelParams)> {
    config.validate()?;
    let problem = Problem::from_split(split, features)?;
    let params = ModelParams::init(&config.model, &problem, config.seed);
    train_problem(&problem, params, &split.holdout.events, &split.test.events, config)
}

/// Training loop on a prepared problem, starting from `params`.
pub fn train_problem(
    problem: &Problem,
    mut params: ModelParams,
    holdout: &[RatingEvent],
    test: &[RatingEvent],
    config: &TrainConfig,
) -> Result<(TrainReport, ModelParams)> {
    config.validate()?;
    let start = Instant::now();
    let model_cfg = &config.model;
    let dropout = model_cfg.train_dropout();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut dropout_rng = stream_rng(config.seed, streams::DROPOUT);
    let mut shuffle_rng = stream_rng(config.seed, streams::SHUFFLE);
    let rows = problem.input_rows(model_cfg.orientation);

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        let batches: Vec<Option<Vec<usize>>> = match config.batch {
            Batching::Full => vec![None],
            Batching::Rows(size) => {
                let mut order: Vec<usize> = (0..rows).collect();
                order.shuffle(&mut shuffle_rng);
                order.chunks(size).map(|c| Some(c.to_vec())).collect()
            }
        };
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let outcome = model::loss_and_grad(
                problem,
                &params,
                model_cfg,
                batch.as_deref(),
                config.weight_decay,
                &dropout,
                &mut dropout_rng,
            );
            let (loss, grads) = match outcome {
                Ok(v) => v,
                // a row batch without any observed rating carries no signal
                Err(ModelError::EmptyMask) if batch.is_some() => continue,
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss });
            }
            optimizer.step(&mut params, &grads, |name| config.lr_scale(name));
            loss_sum += loss;
            loss_batches += 1;
        }
        if !params.all_finite() {
            return Err(TrainError::Diverged { epoch, batch: batches.len(), loss: f64::NAN });
        }
        let holdout_rmse = rmse_on(problem, &params, model_cfg, holdout)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_batches.max(1) as f64,
            holdout_rmse,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });

        if let Some(h) = holdout_rmse {
            let improved = best.as_ref().is_none_or(|(_, b, _)| h < *b);
            if improved {
                best = Some((epoch, h, params.clone()));
            } else if let Some((best_epoch, _, _)) = &best {
                if epoch - best_epoch >= config.early_stop_patience {
                    break;
                }
            }
        }
    }

    let (best_epoch, best_holdout_rmse) = match best {
        Some((epoch, rmse, kept)) => {
            params = kept;
            (epoch, Some(rmse))
        }
        None => (records.len(), None),
    };
    let test_rmse = rmse_on(problem, &params, model_cfg, test)?;
    let report = TrainReport {
        epochs: records,
        best_epoch,
        best_holdout_rmse,
        test_rmse,
        wall_seconds: start.elapsed().as_secs_f64(),
        film: params.film,
        combiner: params.combiner,
    };
    Ok((report, params))
}

/// Size of the synthetic gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSize {
    pub users: usize,
    pub items: usize,
    pub latent: usize,
    pub user_features: usize,
    pub item_features: usize,
}

impl Default for SyntheticSize {
    fn default() -> Self {
        Self { users: 6, items: 8, latent: 4, user_features: 3, item_features: 3 }
    }
}

/// A random problem with about half the entries observed. The last item and
/// the last user have no ratings, so the cold-start branch is exercised.
pub fn synthetic_problem(size: SyntheticSize, seed: u64) -> Problem {
    let mut rng = stream_rng(seed, 17);
    let mut events = Vec::new();
    for u in 0..size.users.saturating_sub(1) {
        for i in 0..size.items.saturating_sub(1) {
            if rng.random_bool(0.5) || (u + i) % 5 == 0 {
                events.push(RatingEvent {
                    user_idx: u,
                    item_idx: i,
                    rating: rng.random_range(1..=5) as f64,
                    timestamp: rng.random_range(1_000..2_000),
                });
            }
        }
    }
    let mut features = FeatureMatrices::empty(size.users, size.items);
    features.user = Array2::from_shape_simple_fn((size.users, size.user_features), || rng.random_range(0.0..1.0));
    features.item = Array2::from_shape_simple_fn((size.items, size.item_features), || rng.random_range(0.0..1.0));

    let mut user_counts = vec![0.0; size.users];
    let mut item_counts = vec![0.0; size.items];
    for e in &events {
        user_counts[e.user_idx] += 1.0;
        item_counts[e.item_idx] += 1.0;
    }
    let channels = TimeChannels {
        values: Array2::from_shape_simple_fn((events.len(), 3), || rng.random_range(0.0..1.0)),
    };
    Problem::new(size.users, size.items, &events, channels, &features, user_counts, item_counts)
        .expect("consistent synthetic shapes")
}

/// Moves every parameter away from its initial value so that no gradient is
/// trivially zero (identity FiLM, zero biases).
pub fn perturbed_params(config: &ModelConfig, problem: &Problem, seed: u64) -> ModelParams {
    let mut params = ModelParams::init(config, problem, seed);
    let mut rng = stream_rng(seed, 23);
    for (name, mut t) in params.tensors_mut() {
        let spread = if name.starts_with("combiner.w") { 0.05 } else { 0.5 };
        t.mapv_inplace(|v| v + rng.random_range(-spread..spread));
    }
    params
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub active: bool,
    pub entries: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_active_error(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.active)
            .map(|g| g.max_relative_error)
            .fold(0.0, f64::max)
    }
}

pub const FD_EPSILON: f64 = 1e-5;
/// Floor on the denominator of the relative error: entries with smaller
/// gradients are judged on absolute error. Central differences at
/// `FD_EPSILON` on a loss of order 10 carry roundoff near 1e-10, so a floor
/// much below this would grade noise.
pub const FD_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn tensor_entry<'a>(t: &'a mut ArrayViewMutD<'_, f64>, k: usize) -> &'a mut f64 {
    t.iter_mut().nth(k).expect("entry in range")
}

/// Compares the analytic gradient of the full-batch loss (dropout off) with
/// central finite differences, tensor by tensor.
pub fn gradient_check_at(
    problem: &Problem,
    params: &ModelParams,
    config: &ModelConfig,
    lambda: f64,
) -> Result<GradCheckReport> {
    let off = DropoutConfig::off();
    let mut rng = stream_rng(0, streams::DROPOUT);
    let (_, grads) = model::loss_and_grad(problem, params, config, None, lambda, &off, &mut rng)?;
    let loss_at = |p: &ModelParams| -> Result<f64> {
        let mut rng = stream_rng(0, streams::DROPOUT);
        Ok(model::loss_and_grad(problem, p, config, None, lambda, &off, &mut rng)?.0)
    };

    let mut groups = Vec::new();
    let analytic = grads.tensors();
    for (idx, (name, g)) in analytic.iter().enumerate() {
        let active = config.is_trainable(name);
        let mut worst: f64 = 0.0;
        if active {
            for (k, &a) in g.iter().enumerate() {
                let mut plus = params.clone();
                *tensor_entry(&mut plus.tensors_mut()[idx].1, k) += FD_EPSILON;
                let mut minus = params.clone();
                *tensor_entry(&mut minus.tensors_mut()[idx].1, k) -= FD_EPSILON;
                let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * FD_EPSILON);
                worst = worst.max(relative_error(a, numeric));
            }
        }
        groups.push(GroupCheck {
            name: name.clone(),
            active,
            entries: g.len(),
            max_relative_error: worst,
        });
    }
    Ok(GradCheckReport { groups })
}

/// Gradient check on a synthetic instance of the given size with perturbed
/// parameters and dropout off.
pub fn gradient_check(config: &ModelConfig, size: SyntheticSize, seed: u64) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.latent = size.latent;
    let problem = synthetic_problem(size, seed);
    let params = perturbed_params(&config, &problem, seed);
    gradient_check_at(&problem, &params, &config, 1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::CombinerMode;
    use crate::Variant;
    use ndarray::array;

    #[test]
    fn loss_examples() {
        let p = AutoencoderParams::zeros(3, 2);
        let r = DenseMatrixWithMask::new(array![[3.0, 0.0, 1.0]], array![[true, false, true]]);
        assert_eq!(masked_l2_loss(&array![[3.0, 9.0, 1.0]], &r, 0.0, &p).unwrap(), 0.0);
        let single = DenseMatrixWithMask::new(array![[3.0, 0.0]], array![[true, false]]);
        assert_eq!(masked_l2_loss(&array![[4.0, -7.0]], &single, 0.0, &p).unwrap(), 1.0);
        let empty = DenseMatrixWithMask::zeros(1, 3);
        assert!(masked_l2_loss(&array![[1.0, 1.0, 1.0]], &empty, 0.0, &p).is_err());
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let r = DenseMatrixWithMask::new(
            array![[5.0, 0.0, 2.0], [0.0, 1.0, 0.0], [4.0, 0.0, 0.0]],
            array![[true, false, true], [false, true, false], [true, false, false]],
        );
        let pred = array![[4.5, 3.0, 2.5], [1.0, 1.75, 2.0], [3.0, 0.5, 0.0]];
        let mut p = AutoencoderParams::zeros(3, 2);
        p.w_enc = array![[0.1, -0.2], [0.3, 0.0], [0.5, 0.25]];
        p.w_dec = array![[1.0, -1.0, 0.5], [0.0, 0.2, 0.1]];
        let lambda = 0.01;
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if r.mask[[i, j]] {
                    sum += (pred[[i, j]] - r.values[[i, j]]).powi(2);
                    n += 1.0;
                }
            }
        }
        let mut reg = 0.0;
        for v in p.w_enc.iter().chain(p.w_dec.iter()) {
            reg += v * v;
        }
        let expected = sum / n + lambda * reg;
        assert!((masked_l2_loss(&pred, &r, lambda, &p).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        c.epochs = 3;
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        c.learning_rate = 0.0;
        assert!(c.validate().is_ok());
        c.model.dropout_input = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn base_variant_reports_modulation_inactive() {
        let cfg = ModelConfig { variant: Variant::Base, ..ModelConfig::default() };
        let report = gradient_check(&cfg, SyntheticSize::default(), 3).unwrap();
        for g in &report.groups {
            assert_eq!(g.active, g.name.starts_with("ae."), "{}", g.name);
        }
        assert!(report.max_active_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn static_mode_gradients() {
        let cfg = ModelConfig {
            variant: Variant::DFT,
            combiner: CombinerMode::Static,
            ..ModelConfig::default()
        };
        let report = gradient_check(&cfg, SyntheticSize::default(), 5).unwrap();
        let alpha = report.groups.iter().find(|g| g.name == "combiner.alpha_static").unwrap();
        assert!(alpha.active);
        assert!(report.max_active_error() < 1e-4, "{report:?}");
    }
}
