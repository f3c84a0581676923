//! Building the autoencoder input `R'` from ratings, time and side features.
//!
//! * FiLM: `R_t = alpha R + beta T' + gamma R*T'` on observed entries.
//! * Bilinear encoder: `X'[u][i] = X_u[u]^T Theta X_i[i]`.
//! * Combiner: `R' = A*R_t + (1 - A)*X'` with `A` a sigmoid of the user and
//!   item training counts (Adaptive), a single trainable scalar (Static), or
//!   no feature term at all (Nothing).

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masked::DenseMatrixWithMask;

/// Entries whose feature weight `1 - A` stays below this are treated as
/// rating-only when deriving the support of `R'` (sparse layouts only).
pub const MASK_THRESHOLD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ModulationError {
    #[error("shape mismatch in {what}: {left:?} vs {right:?}")]
    Shape {
        what: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{axis} counts have length {got}, expected {expected}")]
    CountLength {
        axis: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("negative {axis} count {value}")]
    NegativeCount { axis: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, ModulationError>;

fn same_shape(what: &'static str, left: (usize, usize), right: (usize, usize)) -> Result<()> {
    if left != right {
        return Err(ModulationError::Shape { what, left, right });
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilmParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl FilmParams {
    /// `R_t = R`.
    pub fn identity() -> Self {
        Self { alpha: 1.0, beta: 0.0, gamma: 0.0 }
    }

    pub fn zeros() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearParams {
    /// `d_u x d_i`
    pub theta: Array2<f64>,
}

impl BilinearParams {
    pub fn zeros(d_u: usize, d_i: usize) -> Self {
        Self { theta: Array2::zeros((d_u, d_i)) }
    }

    /// Uniform in `±1/sqrt(d_u)`.
    pub fn init<R: Rng>(d_u: usize, d_i: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_u.max(1) as f64).sqrt();
        Self {
            theta: Array2::from_shape_simple_fn((d_u, d_i), || rng.random_range(-bound..bound)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinerMode {
    Nothing,
    Static,
    Adaptive,
}

/// When the adaptive weight collapses to 0 (features only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColdRule {
    /// A = 0 as soon as the user or the item has no training rating.
    EitherZero,
    /// A = 0 only when neither has a training rating.
    BothZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinerParams {
    /// weight on the item count
    pub w1: f64,
    /// weight on the user count
    pub w2: f64,
    pub b: f64,
    pub alpha_static: f64,
    pub mode: CombinerMode,
}

impl CombinerParams {
    pub fn init(mode: CombinerMode) -> Self {
        Self { w1: 0.01, w2: 0.01, b: 0.0, alpha_static: 0.5, mode }
    }

    pub fn zeros(mode: CombinerMode) -> Self {
        Self { w1: 0.0, w2: 0.0, b: 0.0, alpha_static: 0.0, mode }
    }
}

/// `R_t = alpha R + beta T' + gamma R*T'` on the mask, 0 elsewhere.
pub fn film_modulate(
    r: &DenseMatrixWithMask,
    t_prime: &DenseMatrixWithMask,
    p: &FilmParams,
) -> Result<DenseMatrixWithMask> {
    same_shape("film_modulate", r.dim(), t_prime.dim())?;
    let mut values = Array2::zeros(r.dim());
    Zip::from(&mut values)
        .and(&r.values)
        .and(&t_prime.values)
        .and(&r.mask)
        .for_each(|out, &rv, &tv, &m| {
            if m {
                *out = p.alpha * rv + p.beta * tv + p.gamma * rv * tv;
            }
        });
    Ok(DenseMatrixWithMask { values, mask: r.mask.clone() })
}

/// Gradients of the FiLM scalars and of `T'` given `dL/dR_t`.
pub fn film_backward(
    r: &DenseMatrixWithMask,
    t_prime: &DenseMatrixWithMask,
    p: &FilmParams,
    upstream: &Array2<f64>,
) -> (FilmParams, Array2<f64>) {
    let mut grad = FilmParams::zeros();
    let mut d_t = Array2::zeros(r.dim());
    Zip::from(&mut d_t)
        .and(&r.values)
        .and(&t_prime.values)
        .and(&r.mask)
        .and(upstream)
        .for_each(|dt, &rv, &tv, &m, &g| {
            if m {
                grad.alpha += g * rv;
                grad.beta += g * tv;
                grad.gamma += g * rv * tv;
                *dt = g * (p.beta + p.gamma * rv);
            }
        });
    (grad, d_t)
}

/// `X' = X_u Theta X_i^T`, an `M x N` content-based rating estimate.
pub fn bilinear_features(
    x_user: &Array2<f64>,
    x_item: &Array2<f64>,
    p: &BilinearParams,
) -> Result<Array2<f64>> {
    if x_user.ncols() != p.theta.nrows() || x_item.ncols() != p.theta.ncols() {
        return Err(ModulationError::Shape {
            what: "bilinear_features",
            left: (x_user.ncols(), x_item.ncols()),
            right: p.theta.dim(),
        });
    }
    Ok(x_user.dot(&p.theta).dot(&x_item.t()))
}

/// `dL/dTheta = X_u^T (dL/dX') X_i`.
pub fn bilinear_backward(x_user: &Array2<f64>, x_item: &Array2<f64>, upstream: &Array2<f64>) -> BilinearParams {
    BilinearParams {
        theta: x_user.t().dot(&upstream.dot(x_item)),
    }
}

fn check_counts(user_counts: &[f64], item_counts: &[f64], shape: (usize, usize)) -> Result<()> {
    if user_counts.len() != shape.0 {
        return Err(ModulationError::CountLength { axis: "user", got: user_counts.len(), expected: shape.0 });
    }
    if item_counts.len() != shape.1 {
        return Err(ModulationError::CountLength { axis: "item", got: item_counts.len(), expected: shape.1 });
    }
    for (axis, counts) in [("user", user_counts), ("item", item_counts)] {
        if let Some(&value) = counts.iter().find(|&&c| c < 0.0 || !c.is_finite()) {
            return Err(ModulationError::NegativeCount { axis, value });
        }
    }
    Ok(())
}

fn is_cold(user_count: f64, item_count: f64, rule: ColdRule) -> bool {
    match rule {
        ColdRule::EitherZero => user_count == 0.0 || item_count == 0.0,
        ColdRule::BothZero => user_count == 0.0 && item_count == 0.0,
    }
}

/// The adaptive weight matrix `A[u][i] = sigmoid(w1 |O_i| + w2 |O_u| + b)`,
/// forced to 0 on cold entries.
pub fn adaptive_weights(
    user_counts: &[f64],
    item_counts: &[f64],
    p: &CombinerParams,
    rule: ColdRule,
) -> Array2<f64> {
    Array2::from_shape_fn((user_counts.len(), item_counts.len()), |(u, i)| {
        let (cu, ci) = (user_counts[u], item_counts[i]);
        if is_cold(cu, ci, rule) {
            0.0
        } else {
            sigmoid(p.w1 * ci + p.w2 * cu + p.b)
        }
    })
}

/// Mixes the time-modulated ratings with the feature estimate.
///
/// Returns the dense `R'` together with the mixing matrix (`None` in
/// Nothing mode, where `x_prime` is ignored). Counts are training counts.
pub fn combine(
    r_t: &DenseMatrixWithMask,
    x_prime: Option<&Array2<f64>>,
    user_counts: &[f64],
    item_counts: &[f64],
    p: &CombinerParams,
    rule: ColdRule,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    check_counts(user_counts, item_counts, r_t.dim())?;
    if p.mode == CombinerMode::Nothing {
        return Ok((r_t.values.clone(), None));
    }
    let x_prime = x_prime.ok_or(ModulationError::Shape {
        what: "combine (missing X')",
        left: r_t.dim(),
        right: (0, 0),
    })?;
    same_shape("combine", r_t.dim(), x_prime.dim())?;
    let a = match p.mode {
        CombinerMode::Adaptive => adaptive_weights(user_counts, item_counts, p, rule),
        _ => Array2::from_elem(r_t.dim(), p.alpha_static),
    };
    let mut out = Array2::zeros(r_t.dim());
    Zip::from(&mut out)
        .and(&a)
        .and(&r_t.values)
        .and(x_prime)
        .for_each(|o, &w, &rt, &x| *o = w * rt + (1.0 - w) * x);
    Ok((out, Some(a)))
}

/// Where `R'` carries information: observed ratings plus, outside Nothing
/// mode, entries whose feature weight exceeds [`MASK_THRESHOLD`].
pub fn feature_support(rating_mask: &Array2<bool>, a: Option<&Array2<f64>>) -> Array2<bool> {
    match a {
        None => rating_mask.clone(),
        Some(a) => Zip::from(rating_mask)
            .and(a)
            .map_collect(|&m, &w| m || (1.0 - w) > MASK_THRESHOLD),
    }
}

/// Gradients of the combiner scalars plus `dL/dR_t` and `dL/dX'`.
pub fn combine_backward(
    r_t: &DenseMatrixWithMask,
    x_prime: &Array2<f64>,
    a: &Array2<f64>,
    user_counts: &[f64],
    item_counts: &[f64],
    p: &CombinerParams,
    upstream: &Array2<f64>,
) -> (CombinerParams, Array2<f64>, Array2<f64>) {
    let mut grad = CombinerParams::zeros(p.mode);
    let mut d_rt = Array2::zeros(r_t.dim());
    let mut d_x = Array2::zeros(r_t.dim());
    for ((u, i), &g) in upstream.indexed_iter() {
        let w = a[[u, i]];
        let rt = r_t.values[[u, i]];
        let x = x_prime[[u, i]];
        d_rt[[u, i]] = w * g;
        d_x[[u, i]] = (1.0 - w) * g;
        let d_a = g * (rt - x);
        match p.mode {
            CombinerMode::Adaptive => {
                // cold entries are the constant 0, every other A is a sigmoid
                if w > 0.0 {
                    let dz = d_a * w * (1.0 - w);
                    grad.w1 += dz * item_counts[i];
                    grad.w2 += dz * user_counts[u];
                    grad.b += dz;
                }
            }
            CombinerMode::Static => grad.alpha_static += d_a,
            CombinerMode::Nothing => {}
        }
    }
    (grad, d_rt, d_x)
}
