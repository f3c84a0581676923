//! Autorec-style autoencoder with input and embedding dropout.
//!
//! `H = sigmoid(R' W_enc + b_enc)`, `R_hat = H W_dec + b_dec`, applied to
//! the rows of the input matrix. With [`Orientation::AsWritten`] the rows are
//! users (`W_enc` is `N x d`); [`Orientation::Transposed`] feeds item rows.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modulation::sigmoid;

pub const DEFAULT_LATENT: usize = 500;

#[derive(Debug, Error, PartialEq)]
pub enum AutoencoderError {
    #[error("shape mismatch in {what}: got {got:?}, expected {expected:?}")]
    Shape {
        what: &'static str,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("dropout rate {0} is not in [0, 1)")]
    Rate(f64),
}

pub type Result<T> = std::result::Result<T, AutoencoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// One input row per user, of length N.
    #[default]
    AsWritten,
    /// One input row per item, of length M.
    Transposed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl AutoencoderParams {
    pub fn zeros(input_dim: usize, latent: usize) -> Self {
        Self {
            w_enc: Array2::zeros((input_dim, latent)),
            b_enc: Array1::zeros(latent),
            w_dec: Array2::zeros((latent, input_dim)),
            b_dec: Array1::zeros(input_dim),
        }
    }

    /// `W_enc` uniform in `±1/sqrt(input_dim)`, `W_dec` in `±1/sqrt(latent)`,
    /// zero biases.
    pub fn init<R: Rng>(input_dim: usize, latent: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, latent);
        let be = 1.0 / (input_dim as f64).sqrt();
        let bd = 1.0 / (latent as f64).sqrt();
        p.w_enc.mapv_inplace(|_| rng.random_range(-be..be));
        p.w_dec.mapv_inplace(|_| rng.random_range(-bd..bd));
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn latent(&self) -> usize {
        self.w_enc.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub input_rate: f64,
    pub embedding_rate: f64,
    pub enabled: bool,
}

impl DropoutConfig {
    pub fn off() -> Self {
        Self { input_rate: 0.0, embedding_rate: 0.0, enabled: false }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.input_rate, self.embedding_rate] {
            if !(0.0..1.0).contains(&r) {
                return Err(AutoencoderError::Rate(r));
            }
        }
        Ok(())
    }

    fn active_rate(&self, rate: f64) -> Option<f64> {
        (self.enabled && rate > 0.0).then_some(rate)
    }
}

/// Inverted dropout in place; returns the per-entry scale (0 or 1/(1-rate)).
fn drop_inplace<R: Rng>(x: &mut Array2<f64>, rate: f64, rng: &mut R) -> Array2<f64> {
    let keep_scale = 1.0 / (1.0 - rate);
    let scale = Array2::from_shape_simple_fn(x.dim(), || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep_scale
        }
    });
    *x *= &scale;
    scale
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    input: Array2<f64>,
    input_scale: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    hidden: Array2<f64>,
    embedding_scale: Option<Array2<f64>>,
    hidden_dropped: Array2<f64>,
}

/// Forward intermediates, including the dropout masks that were drawn.
#[derive(Debug, Clone)]
pub struct AutoencoderCache {
    pub encode: EncodeCache,
    pub decode: DecodeCache,
}

pub fn encode<R: Rng>(
    input: ArrayView2<f64>,
    params: &AutoencoderParams,
    dropout: &DropoutConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, EncodeCache)> {
    if input.ncols() != params.input_dim() {
        return Err(AutoencoderError::Shape {
            what: "encode",
            got: input.dim(),
            expected: (input.nrows(), params.input_dim()),
        });
    }
    let mut x = input.to_owned();
    let input_scale = dropout
        .active_rate(dropout.input_rate)
        .map(|rate| drop_inplace(&mut x, rate, rng));
    let mut h = x.dot(&params.w_enc) + &params.b_enc;
    h.mapv_inplace(sigmoid);
    Ok((h, EncodeCache { input: x, input_scale }))
}

pub fn decode<R: Rng>(
    hidden: Array2<f64>,
    params: &AutoencoderParams,
    dropout: &DropoutConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, DecodeCache)> {
    if hidden.ncols() != params.latent() {
        return Err(AutoencoderError::Shape {
            what: "decode",
            got: hidden.dim(),
            expected: (hidden.nrows(), params.latent()),
        });
    }
    let mut hd = hidden.clone();
    let embedding_scale = dropout
        .active_rate(dropout.embedding_rate)
        .map(|rate| drop_inplace(&mut hd, rate, rng));
    let out = hd.dot(&params.w_dec) + &params.b_dec;
    Ok((
        out,
        DecodeCache { hidden, embedding_scale, hidden_dropped: hd },
    ))
}

/// Encode then decode. Input dropout masks are drawn before embedding masks.
pub fn forward<R: Rng>(
    input: ArrayView2<f64>,
    params: &AutoencoderParams,
    dropout: &DropoutConfig,
    rng: &mut R,
) -> Result<(Array2<f64>, AutoencoderCache)> {
    let (h, encode_cache) = encode(input, params, dropout, rng)?;
    let (out, decode_cache) = decode(h, params, dropout, rng)?;
    Ok((out, AutoencoderCache { encode: encode_cache, decode: decode_cache }))
}

/// Parameter gradients for `dL/dR_hat = upstream`, reusing the cached
/// dropout masks. The input gradient is only formed when requested.
pub fn autoencoder_backward(
    cache: &AutoencoderCache,
    params: &AutoencoderParams,
    upstream: &Array2<f64>,
    want_input_grad: bool,
) -> (AutoencoderParams, Option<Array2<f64>>) {
    let dec = &cache.decode;
    let w_dec = dec.hidden_dropped.t().dot(upstream);
    let b_dec = upstream.sum_axis(Axis(0));

    let mut dz = upstream.dot(&params.w_dec.t());
    if let Some(scale) = &dec.embedding_scale {
        dz *= scale;
    }
    Zip::from(&mut dz)
        .and(&dec.hidden)
        .for_each(|g, &h| *g *= h * (1.0 - h));

    let w_enc = cache.encode.input.t().dot(&dz);
    let b_enc = dz.sum_axis(Axis(0));

    let d_input = want_input_grad.then(|| {
        let mut dx = dz.dot(&params.w_enc.t());
        if let Some(scale) = &cache.encode.input_scale {
            dx *= scale;
        }
        dx
    });
    (AutoencoderParams { w_enc, b_enc, w_dec, b_dec }, d_input)
}

/// Dropout-free reconstruction without clipping.
pub fn reconstruct(input: ArrayView2<f64>, params: &AutoencoderParams) -> Result<Array2<f64>> {
    // never consulted with dropout disabled
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward(input, params, &DropoutConfig::off(), &mut rng).map(|(out, _)| out)
}

/// Reconstruction clipped to the rating scale `[1, 5]`.
pub fn predict(input: ArrayView2<f64>, params: &AutoencoderParams) -> Result<Array2<f64>> {
    let mut out = reconstruct(input, params)?;
    out.mapv_inplace(clip_rating);
    Ok(out)
}

pub fn clip_rating(x: f64) -> f64 {
    x.clamp(1.0, 5.0)
}
