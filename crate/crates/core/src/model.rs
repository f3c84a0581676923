//! The assembled model: configuration, parameters, and the end-to-end
//! forward/backward chain from raw training data to parameter gradients.

use std::borrow::Cow;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::autoencoder::Orientation;
use crate::autoencoder::{self, AutoencoderCache, AutoencoderError, AutoencoderParams, DropoutConfig};
use crate::dataio::{FeatureMatrices, RatingEvent, SplitBundle};
use crate::masked::DenseMatrixWithMask;
use crate::modulation::{
    self, BilinearParams, ColdRule, CombinerMode, CombinerParams, FilmParams, ModulationError,
};
use crate::timefeat::{self, TimeChannels, TimeError, TimeNNCache, TimeNNParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Time(#[from] TimeError),
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error(transparent)]
    Autoencoder(#[from] AutoencoderError),
    #[error("feature matrices are {got:?} rows, dataset is {expected:?}")]
    FeatureRows {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("the loss mask is empty")]
    EmptyMask,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Ablation variants: D = dropout, T = time module, F = feature module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    D,
    DT,
    DFT,
}

impl Variant {
    pub fn dropout(self) -> bool {
        self != Variant::Base
    }

    pub fn time(self) -> bool {
        matches!(self, Variant::DT | Variant::DFT)
    }

    pub fn features(self) -> bool {
        self == Variant::DFT
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::D => "D",
            Variant::DT => "DT",
            Variant::DFT => "DFT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub combiner: CombinerMode,
    pub cold_rule: ColdRule,
    pub orientation: Orientation,
    pub latent: usize,
    pub time_hidden: Vec<usize>,
    pub dropout_input: f64,
    pub dropout_embedding: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DFT,
            combiner: CombinerMode::Adaptive,
            cold_rule: ColdRule::EitherZero,
            orientation: Orientation::AsWritten,
            latent: autoencoder::DEFAULT_LATENT,
            time_hidden: timefeat::DEFAULT_HIDDEN.to_vec(),
            dropout_input: 0.3,
            dropout_embedding: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn uses_time(&self) -> bool {
        self.variant.time()
    }

    /// The combiner actually in effect: anything but DFT runs without features.
    pub fn effective_combiner(&self) -> CombinerMode {
        if self.variant.features() {
            self.combiner
        } else {
            CombinerMode::Nothing
        }
    }

    pub fn uses_features(&self) -> bool {
        self.effective_combiner() != CombinerMode::Nothing
    }

    pub fn modulates(&self) -> bool {
        self.uses_time() || self.uses_features()
    }

    /// Dropout for training steps; inference always runs with dropout off.
    pub fn train_dropout(&self) -> DropoutConfig {
        DropoutConfig {
            input_rate: self.dropout_input,
            embedding_rate: self.dropout_embedding,
            enabled: self.variant.dropout(),
        }
    }

    /// Whether the named tensor receives gradient updates under this config.
    pub fn is_trainable(&self, name: &str) -> bool {
        let group = name.split('.').next().unwrap_or_default();
        match group {
            "ae" => true,
            "timenn" | "film" => self.uses_time(),
            "bilinear" => self.uses_features(),
            "combiner" => match self.effective_combiner() {
                CombinerMode::Adaptive => name != "combiner.alpha_static",
                CombinerMode::Static => name == "combiner.alpha_static",
                CombinerMode::Nothing => false,
            },
            _ => false,
        }
    }
}

/// Whether the named tensor is subject to L2 weight decay.
pub fn is_decayed(name: &str) -> bool {
    name == "ae.w_enc" || name == "ae.w_dec"
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub time: TimeNNParams,
    pub film: FilmParams,
    pub bilinear: BilinearParams,
    pub combiner: CombinerParams,
    pub autoencoder: AutoencoderParams,
}

/// Independent random streams so that enabling a module never shifts the
/// initialization of another.
pub mod streams {
    pub const AUTOENCODER: u64 = 0;
    pub const TIMENN: u64 = 1;
    pub const BILINEAR: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ModelParams {
    /// Fresh parameters for `problem`; FiLM starts at the identity.
    pub fn init(config: &ModelConfig, problem: &Problem, seed: u64) -> Self {
        let input_dim = problem.input_dim(config.orientation);
        Self {
            autoencoder: AutoencoderParams::init(
                input_dim,
                config.latent,
                &mut stream_rng(seed, streams::AUTOENCODER),
            ),
            time: TimeNNParams::init(&config.time_hidden, &mut stream_rng(seed, streams::TIMENN)),
            film: FilmParams::identity(),
            bilinear: BilinearParams::init(
                problem.user_features.ncols(),
                problem.item_features.ncols(),
                &mut stream_rng(seed, streams::BILINEAR),
            ),
            combiner: CombinerParams::init(config.combiner),
        }
    }

    /// All-zero parameters with the shapes implied by the dimensions.
    pub fn zeros(config: &ModelConfig, input_dim: usize, d_u: usize, d_i: usize) -> Self {
        Self {
            time: TimeNNParams::zeros(&config.time_hidden),
            film: FilmParams::zeros(),
            bilinear: BilinearParams::zeros(d_u, d_i),
            combiner: CombinerParams::zeros(config.combiner),
            autoencoder: AutoencoderParams::zeros(input_dim, config.latent),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor with its stable name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        fn scalar(x: &f64) -> ArrayViewD<'_, f64> {
            ArrayViewD::from_shape(IxDyn(&[]), std::slice::from_ref(x)).expect("0-d view")
        }
        let mut out = Vec::new();
        for (k, layer) in self.time.layers.iter().enumerate() {
            out.push((format!("timenn.w{}", k + 1), layer.weight.view().into_dyn()));
            out.push((format!("timenn.b{}", k + 1), layer.bias.view().into_dyn()));
        }
        out.push(("film.alpha".into(), scalar(&self.film.alpha)));
        out.push(("film.beta".into(), scalar(&self.film.beta)));
        out.push(("film.gamma".into(), scalar(&self.film.gamma)));
        out.push(("bilinear.theta".into(), self.bilinear.theta.view().into_dyn()));
        out.push(("combiner.w1".into(), scalar(&self.combiner.w1)));
        out.push(("combiner.w2".into(), scalar(&self.combiner.w2)));
        out.push(("combiner.b".into(), scalar(&self.combiner.b)));
        out.push(("combiner.alpha_static".into(), scalar(&self.combiner.alpha_static)));
        out.push(("ae.w_enc".into(), self.autoencoder.w_enc.view().into_dyn()));
        out.push(("ae.b_enc".into(), self.autoencoder.b_enc.view().into_dyn()));
        out.push(("ae.w_dec".into(), self.autoencoder.w_dec.view().into_dyn()));
        out.push(("ae.b_dec".into(), self.autoencoder.b_dec.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        fn scalar(x: &mut f64) -> ArrayViewMutD<'_, f64> {
            ArrayViewMutD::from_shape(IxDyn(&[]), std::slice::from_mut(x)).expect("0-d view")
        }
        let mut out = Vec::new();
        for (k, layer) in self.time.layers.iter_mut().enumerate() {
            out.push((format!("timenn.w{}", k + 1), layer.weight.view_mut().into_dyn()));
            out.push((format!("timenn.b{}", k + 1), layer.bias.view_mut().into_dyn()));
        }
        out.push(("film.alpha".into(), scalar(&mut self.film.alpha)));
        out.push(("film.beta".into(), scalar(&mut self.film.beta)));
        out.push(("film.gamma".into(), scalar(&mut self.film.gamma)));
        out.push(("bilinear.theta".into(), self.bilinear.theta.view_mut().into_dyn()));
        out.push(("combiner.w1".into(), scalar(&mut self.combiner.w1)));
        out.push(("combiner.w2".into(), scalar(&mut self.combiner.w2)));
        out.push(("combiner.b".into(), scalar(&mut self.combiner.b)));
        out.push(("combiner.alpha_static".into(), scalar(&mut self.combiner.alpha_static)));
        out.push(("ae.w_enc".into(), self.autoencoder.w_enc.view_mut().into_dyn()));
        out.push(("ae.b_enc".into(), self.autoencoder.b_enc.view_mut().into_dyn()));
        out.push(("ae.w_dec".into(), self.autoencoder.w_dec.view_mut().into_dyn()));
        out.push(("ae.b_dec".into(), self.autoencoder.b_dec.view_mut().into_dyn()));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn orient(m: &Array2<f64>, orientation: Orientation) -> Array2<f64> {
    match orientation {
        Orientation::AsWritten => m.clone(),
        Orientation::Transposed => m.t().as_standard_layout().into_owned(),
    }
}

fn orient_mask(m: &Array2<bool>, orientation: Orientation) -> Array2<bool> {
    match orientation {
        Orientation::AsWritten => m.clone(),
        Orientation::Transposed => m.t().as_standard_layout().into_owned(),
    }
}

/// Everything that stays fixed while training on one split: the training
/// rating matrix, the time channels of its events, the side features and
/// the training counts.
#[derive(Debug, Clone)]
pub struct Problem {
    pub ratings: DenseMatrixWithMask,
    /// `(user, item)` of each training event, aligned with `channels`.
    pub positions: Vec<(usize, usize)>,
    pub channels: TimeChannels,
    pub user_features: Array2<f64>,
    pub item_features: Array2<f64>,
    pub user_counts: Vec<f64>,
    pub item_counts: Vec<f64>,
    /// Event indices of each user and of each item.
    user_events: Vec<Vec<usize>>,
    item_events: Vec<Vec<usize>>,
    /// Ratings and mask in both autoencoder layouts, indexed by orientation.
    oriented: [(Array2<f64>, Array2<bool>); 2],
}

impl Problem {
    pub fn new(
        num_users: usize,
        num_items: usize,
        train_events: &[RatingEvent],
        channels: TimeChannels,
        features: &FeatureMatrices,
        user_counts: Vec<f64>,
        item_counts: Vec<f64>,
    ) -> Result<Self> {
        if features.user.nrows() != num_users || features.item.nrows() != num_items {
            return Err(ModelError::FeatureRows {
                got: (features.user.nrows(), features.item.nrows()),
                expected: (num_users, num_items),
            });
        }
        let ratings = DenseMatrixWithMask::from_ratings(num_users, num_items, train_events);
        let oriented = [Orientation::AsWritten, Orientation::Transposed]
            .map(|o| (orient(&ratings.values, o), orient_mask(&ratings.mask, o)));
        let mut user_events = vec![Vec::new(); num_users];
        let mut item_events = vec![Vec::new(); num_items];
        for (k, e) in train_events.iter().enumerate() {
            user_events[e.user_idx].push(k);
            item_events[e.item_idx].push(k);
        }
        Ok(Self {
            user_events,
            item_events,
            positions: train_events.iter().map(|e| (e.user_idx, e.item_idx)).collect(),
            ratings,
            channels,
            user_features: features.user.clone(),
            item_features: features.item.clone(),
            user_counts,
            item_counts,
            oriented,
        })
    }

    /// The training problem of a split: input matrix and counts come from
    /// `split.train` only.
    pub fn from_split(split: &SplitBundle, features: &FeatureMatrices) -> Result<Self> {
        let train = &split.train;
        let channels = timefeat::derive_time_channels(train, &train.events)?;
        Self::new(
            train.num_users,
            train.num_items,
            &train.events,
            channels,
            features,
            split.user_train_counts.iter().map(|&c| c as f64).collect(),
            split.item_train_counts.iter().map(|&c| c as f64).collect(),
        )
    }

    pub fn num_users(&self) -> usize {
        self.ratings.values.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.ratings.values.ncols()
    }

    pub fn input_dim(&self, orientation: Orientation) -> usize {
        match orientation {
            Orientation::AsWritten => self.num_items(),
            Orientation::Transposed => self.num_users(),
        }
    }

    pub fn input_rows(&self, orientation: Orientation) -> usize {
        match orientation {
            Orientation::AsWritten => self.num_users(),
            Orientation::Transposed => self.num_items(),
        }
    }

    /// Training ratings and mask laid out as autoencoder rows.
    pub fn oriented_ratings(&self, orientation: Orientation) -> (&Array2<f64>, &Array2<bool>) {
        let (v, m) = &self.oriented[orientation as usize];
        (v, m)
    }

    /// The slice of the problem that the given autoencoder rows touch,
    /// kept in user x item layout. `None` borrows everything.
    fn frame(&self, orientation: Orientation, rows: Option<&[usize]>) -> Frame<'_> {
        let Some(rows) = rows else {
            return Frame {
                ratings: Cow::Borrowed(&self.ratings),
                positions: Cow::Borrowed(&self.positions),
                channels: Cow::Borrowed(&self.channels),
                user_features: Cow::Borrowed(&self.user_features),
                item_features: Cow::Borrowed(&self.item_features),
                user_counts: Cow::Borrowed(&self.user_counts),
                item_counts: Cow::Borrowed(&self.item_counts),
            };
        };
        let by_row = match orientation {
            Orientation::AsWritten => &self.user_events,
            Orientation::Transposed => &self.item_events,
        };
        let mut positions = Vec::new();
        let mut events = Vec::new();
        for (local, &r) in rows.iter().enumerate() {
            for &k in &by_row[r] {
                let (u, i) = self.positions[k];
                positions.push(match orientation {
                    Orientation::AsWritten => (local, i),
                    Orientation::Transposed => (u, local),
                });
                events.push(k);
            }
        }
        let channels = TimeChannels { values: self.channels.values.select(Axis(0), &events) };
        let pick = |c: &[f64]| -> Vec<f64> { rows.iter().map(|&r| c[r]).collect() };
        match orientation {
            Orientation::AsWritten => Frame {
                ratings: Cow::Owned(DenseMatrixWithMask {
                    values: self.ratings.values.select(Axis(0), rows),
                    mask: self.ratings.mask.select(Axis(0), rows),
                }),
                positions: Cow::Owned(positions),
                channels: Cow::Owned(channels),
                user_features: Cow::Owned(self.user_features.select(Axis(0), rows)),
                item_features: Cow::Borrowed(&self.item_features),
                user_counts: Cow::Owned(pick(&self.user_counts)),
                item_counts: Cow::Borrowed(&self.item_counts),
            },
            Orientation::Transposed => Frame {
                ratings: Cow::Owned(DenseMatrixWithMask {
                    values: self.ratings.values.select(Axis(1), rows),
                    mask: self.ratings.mask.select(Axis(1), rows),
                }),
                positions: Cow::Owned(positions),
                channels: Cow::Owned(channels),
                user_features: Cow::Borrowed(&self.user_features),
                item_features: Cow::Owned(self.item_features.select(Axis(0), rows)),
                user_counts: Cow::Borrowed(&self.user_counts),
                item_counts: Cow::Owned(pick(&self.item_counts)),
            },
        }
    }
}

/// A block of users x items with everything the modulation stack reads.
struct Frame<'a> {
    ratings: Cow<'a, DenseMatrixWithMask>,
    /// Frame-local `(user, item)` of each event, aligned with `channels`.
    positions: Cow<'a, [(usize, usize)]>,
    channels: Cow<'a, TimeChannels>,
    user_features: Cow<'a, Array2<f64>>,
    item_features: Cow<'a, Array2<f64>>,
    user_counts: Cow<'a, [f64]>,
    item_counts: Cow<'a, [f64]>,
}

/// Intermediates of the modulation stack (only kept when it is active).
#[derive(Debug, Clone)]
pub struct ModulationCache {
    time: Option<(TimeNNCache, DenseMatrixWithMask)>,
    r_t: DenseMatrixWithMask,
    x_prime: Option<Array2<f64>>,
    a: Option<Array2<f64>>,
}

/// `R'` in autoencoder orientation.
pub struct ModulatedInput<'a> {
    pub input: Cow<'a, Array2<f64>>,
}

impl ModulatedInput<'_> {
    /// `R'` in user x item layout.
    pub fn r_prime(&self, orientation: Orientation) -> Array2<f64> {
        orient(&self.input, orientation)
    }
}

/// Runs TimeNN, FiLM, the bilinear encoder and the combiner as configured.
/// Without time and features `R' = R` and nothing is copied.
pub fn modulate<'a>(
    problem: &'a Problem,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ModulatedInput<'a>> {
    if !config.modulates() {
        let (input, _) = problem.oriented_ratings(config.orientation);
        return Ok(ModulatedInput { input: Cow::Borrowed(input) });
    }
    let frame = problem.frame(config.orientation, None);
    let (r_prime, _) = modulate_frame(&frame, params, config)?;
    Ok(ModulatedInput { input: Cow::Owned(orient(&r_prime, config.orientation)) })
}

/// `R'` of one frame, in the frame's user x item layout.
fn modulate_frame(frame: &Frame, params: &ModelParams, config: &ModelConfig) -> Result<(Array2<f64>, ModulationCache)> {
    let (m, n) = frame.ratings.dim();
    let time = if config.uses_time() {
        let (t_events, tcache) = timefeat::timenn_forward(&frame.channels, &params.time);
        let mut t_matrix = DenseMatrixWithMask::zeros(m, n);
        t_matrix.mask.assign(&frame.ratings.mask);
        for (&(u, i), &t) in frame.positions.iter().zip(t_events.iter()) {
            t_matrix.values[[u, i]] = t;
        }
        Some((tcache, t_matrix))
    } else {
        None
    };
    let r_t = match &time {
        Some((_, t_matrix)) => modulation::film_modulate(&frame.ratings, t_matrix, &params.film)?,
        None => frame.ratings.clone().into_owned(),
    };
    let mode = config.effective_combiner();
    let mut combiner = params.combiner;
    combiner.mode = mode;
    let x_prime = if mode != CombinerMode::Nothing {
        Some(modulation::bilinear_features(
            &frame.user_features,
            &frame.item_features,
            &params.bilinear,
        )?)
    } else {
        None
    };
    let (r_prime, a) = modulation::combine(
        &r_t,
        x_prime.as_ref(),
        &frame.user_counts,
        &frame.item_counts,
        &combiner,
        config.cold_rule,
    )?;
    Ok((r_prime, ModulationCache { time, r_t, x_prime, a }))
}

/// Full dropout-free reconstruction `R_hat` in user x item layout (unclipped).
pub fn reconstruct(problem: &Problem, params: &ModelParams, config: &ModelConfig) -> Result<Array2<f64>> {
    let input = modulate(problem, params, config)?;
    let out = autoencoder::reconstruct(input.input.view(), &params.autoencoder)?;
    Ok(match config.orientation {
        Orientation::AsWritten => out,
        Orientation::Transposed => out.t().as_standard_layout().into_owned(),
    })
}

/// Clipped predictions for the given events.
pub fn predict_events(
    problem: &Problem,
    params: &ModelParams,
    config: &ModelConfig,
    events: &[RatingEvent],
) -> Result<Vec<f64>> {
    let full = reconstruct(problem, params, config)?;
    Ok(events
        .iter()
        .map(|e| autoencoder::clip_rating(full[[e.user_idx, e.item_idx]]))
        .collect())
}

/// `sum_{mask} (pred - target)^2 / |mask|` and its gradient w.r.t. `pred`.
pub fn masked_squared_error(
    pred: &Array2<f64>,
    target: ArrayView2<f64>,
    mask: ArrayView2<bool>,
) -> Result<(f64, Array2<f64>)> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut grad = Array2::zeros(pred.dim());
    let mut sum = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .and(mask)
        .for_each(|g, &p, &t, &m| {
            if m {
                let d = p - t;
                sum += d * d;
                *g = 2.0 * d * inv;
            }
        });
    Ok((sum * inv, grad))
}

/// `lambda * (|W_enc|^2 + |W_dec|^2)`.
pub fn weight_penalty(params: &AutoencoderParams, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let sq = |w: &Array2<f64>| w.iter().map(|v| v * v).sum::<f64>();
    lambda * (sq(&params.w_enc) + sq(&params.w_dec))
}

/// Loss of one batch of autoencoder rows and the gradient of every tensor.
///
/// `rows` selects autoencoder input rows (users or items depending on the
/// orientation); `None` means all rows. Inactive tensors get zero gradient.
pub fn loss_and_grad<R: Rng>(
    problem: &Problem,
    params: &ModelParams,
    config: &ModelConfig,
    rows: Option<&[usize]>,
    lambda: f64,
    dropout: &DropoutConfig,
    rng: &mut R,
) -> Result<(f64, ModelParams)> {
    let orientation = config.orientation;
    let (target, mask) = problem.oriented_ratings(orientation);
    let (batch_target, batch_mask): (Cow<Array2<f64>>, Cow<Array2<bool>>) = match rows {
        Some(r) => (Cow::Owned(target.select(Axis(0), r)), Cow::Owned(mask.select(Axis(0), r))),
        None => (Cow::Borrowed(target), Cow::Borrowed(mask)),
    };
    let mut modulated = None;
    let batch_input: Cow<Array2<f64>> = if config.modulates() {
        let frame = problem.frame(orientation, rows);
        let (r_prime, cache) = modulate_frame(&frame, params, config)?;
        modulated = Some((frame, cache));
        Cow::Owned(orient(&r_prime, orientation))
    } else {
        batch_target.clone()
    };

    let (pred, ae_cache) = autoencoder::forward(batch_input.view(), &params.autoencoder, dropout, rng)?;
    let (data_loss, d_pred) = masked_squared_error(&pred, batch_target.view(), batch_mask.view())?;
    let loss = data_loss + weight_penalty(&params.autoencoder, lambda);

    let mut grads = params.zeros_like();
    let d_input = backprop_autoencoder(&ae_cache, params, &d_pred, lambda, modulated.is_some(), &mut grads);

    if let (Some((frame, cache)), Some(d_input)) = (&modulated, d_input) {
        let d_r_prime = match orientation {
            Orientation::AsWritten => d_input,
            Orientation::Transposed => d_input.t().as_standard_layout().into_owned(),
        };
        debug_assert_eq!(d_r_prime.dim(), frame.ratings.dim());
        modulation_backward(frame, params, config, cache, &d_r_prime, &mut grads)?;
    }
    Ok((loss, grads))
}

fn backprop_autoencoder(
    cache: &AutoencoderCache,
    params: &ModelParams,
    d_pred: &Array2<f64>,
    lambda: f64,
    want_input: bool,
    grads: &mut ModelParams,
) -> Option<Array2<f64>> {
    let (mut g, d_input) = autoencoder::autoencoder_backward(cache, &params.autoencoder, d_pred, want_input);
    if lambda != 0.0 {
        g.w_enc.scaled_add(2.0 * lambda, &params.autoencoder.w_enc);
        g.w_dec.scaled_add(2.0 * lambda, &params.autoencoder.w_dec);
    }
    grads.autoencoder = g;
    d_input
}

/// Chains `dL/dR'` back through the combiner, bilinear encoder, FiLM and
/// TimeNN, writing into `grads`.
fn modulation_backward(
    frame: &Frame,
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ModulationCache,
    d_r_prime: &Array2<f64>,
    grads: &mut ModelParams,
) -> Result<()> {
    let d_r_t = match (&cache.x_prime, &cache.a) {
        (Some(x_prime), Some(a)) => {
            let mut combiner = params.combiner;
            combiner.mode = config.effective_combiner();
            let (g, d_r_t, d_x) = modulation::combine_backward(
                &cache.r_t,
                x_prime,
                a,
                &frame.user_counts,
                &frame.item_counts,
                &combiner,
                d_r_prime,
            );
            grads.combiner = CombinerParams { mode: params.combiner.mode, ..g };
            grads.bilinear = modulation::bilinear_backward(&frame.user_features, &frame.item_features, &d_x);
            Cow::Owned(d_r_t)
        }
        _ => Cow::Borrowed(d_r_prime),
    };
    if let Some((tcache, t_matrix)) = &cache.time {
        let (g_film, d_t) = modulation::film_backward(&frame.ratings, t_matrix, &params.film, &d_r_t);
        grads.film = g_film;
        let upstream: Array1<f64> = frame.positions.iter().map(|&(u, i)| d_t[[u, i]]).collect();
        grads.time = timefeat::timenn_backward(tcache, &params.time, &upstream)?;
    }
    Ok(())
}
