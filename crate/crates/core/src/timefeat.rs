//! Time channels and the TimeNN perceptron.
//!
//! Each observed rating gets three channels in `[0, 1]`: time since the
//! first rating on the platform, since the user's first rating and since the
//! item's first rating, all divided by the training time span. A small MLP
//! shared across all ratings maps the channels to one modulation value `T'`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::dataio::{RatingDataset, RatingEvent};

pub const CHANNELS: usize = 3;

/// Hidden widths of the default TimeNN: 3 -> 3 -> 32 -> 1.
pub const DEFAULT_HIDDEN: [usize; 2] = [3, 32];

#[derive(Debug, Error, PartialEq)]
pub enum TimeError {
    #[error("time channels need at least one training event")]
    EmptyTrain,
    #[error("{channels} channel rows for {upstream} upstream gradients")]
    LengthMismatch { channels: usize, upstream: usize },
}

/// One row per event: `[global, user_rel, item_rel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeChannels {
    pub values: Array2<f64>,
}

impl TimeChannels {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Computes the channels of `query` from the time statistics of `train`.
///
/// Values outside the training range are clamped to `[0, 1]`. A user or
/// item without training events counts the query event as its first rating.
pub fn derive_time_channels(
    train: &RatingDataset,
    query: &[RatingEvent],
) -> Result<TimeChannels, TimeError> {
    let t_min = train.events.iter().map(|e| e.timestamp).min().ok_or(TimeError::EmptyTrain)?;
    let t_max = train.events.iter().map(|e| e.timestamp).max().ok_or(TimeError::EmptyTrain)?;

    let mut first_user = vec![i64::MAX; train.num_users];
    let mut first_item = vec![i64::MAX; train.num_items];
    for e in &train.events {
        first_user[e.user_idx] = first_user[e.user_idx].min(e.timestamp);
        first_item[e.item_idx] = first_item[e.item_idx].min(e.timestamp);
    }

    let span = (t_max - t_min) as f64;
    let scale = |dt: i64| -> f64 {
        if span > 0.0 {
            (dt as f64 / span).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };

    let mut values = Array2::zeros((query.len(), CHANNELS));
    for (row, e) in query.iter().enumerate() {
        let fu = first_user.get(e.user_idx).copied().unwrap_or(i64::MAX);
        let fi = first_item.get(e.item_idx).copied().unwrap_or(i64::MAX);
        let fu = if fu == i64::MAX { e.timestamp } else { fu };
        let fi = if fi == i64::MAX { e.timestamp } else { fi };
        values[[row, 0]] = scale(e.timestamp - t_min);
        values[[row, 1]] = scale(e.timestamp - fu);
        values[[row, 2]] = scale(e.timestamp - fi);
    }
    Ok(TimeChannels { values })
}

/// A fully-connected layer `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeNNParams {
    pub layers: Vec<DenseLayer>,
}

impl TimeNNParams {
    fn widths(hidden: &[usize]) -> Vec<usize> {
        let mut w = vec![CHANNELS];
        w.extend_from_slice(hidden);
        w.push(1);
        w
    }

    pub fn zeros(hidden: &[usize]) -> Self {
        let w = Self::widths(hidden);
        let layers = w
            .windows(2)
            .map(|p| DenseLayer {
                weight: Array2::zeros((p[0], p[1])),
                bias: Array1::zeros(p[1]),
            })
            .collect();
        Self { layers }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng>(hidden: &[usize], rng: &mut R) -> Self {
        let mut p = Self::zeros(hidden);
        for layer in &mut p.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        p
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.ncols())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Layer inputs saved by the forward pass (post-ReLU activations).
#[derive(Debug, Clone)]
pub struct TimeNNCache {
    inputs: Vec<Array2<f64>>,
}

/// Evaluates the network on every channel row; one output per event.
pub fn timenn_forward(channels: &TimeChannels, params: &TimeNNParams) -> (Array1<f64>, TimeNNCache) {
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut x = channels.values.clone();
    let last = params.layers.len() - 1;
    for (k, layer) in params.layers.iter().enumerate() {
        let mut z = x.dot(&layer.weight) + &layer.bias;
        if k < last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        inputs.push(x);
        x = z;
    }
    (x.column(0).to_owned(), TimeNNCache { inputs })
}

/// Reverse pass of [`timenn_forward`]. ReLU has subgradient 0 at 0.
pub fn timenn_backward(
    cache: &TimeNNCache,
    params: &TimeNNParams,
    upstream: &Array1<f64>,
) -> Result<TimeNNParams, TimeError> {
    let n = cache.inputs[0].nrows();
    if upstream.len() != n {
        return Err(TimeError::LengthMismatch { channels: n, upstream: upstream.len() });
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut delta = upstream.view().insert_axis(Axis(1)).to_owned();
    for (k, layer) in params.layers.iter().enumerate().rev() {
        let input = &cache.inputs[k];
        grads.push(DenseLayer {
            weight: input.t().dot(&delta),
            bias: delta.sum_axis(Axis(0)),
        });
        if k > 0 {
            let mut back = delta.dot(&layer.weight.t());
            // input is relu(z) of the previous layer
            ndarray::Zip::from(&mut back).and(input).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = back;
        }
    }
    grads.reverse();
    Ok(TimeNNParams { layers: grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn ev(u: usize, i: usize, t: i64) -> RatingEvent {
        RatingEvent { user_idx: u, item_idx: i, rating: 3.0, timestamp: t }
    }

    fn dataset(events: Vec<RatingEvent>, m: usize, n: usize) -> RatingDataset {
        RatingDataset {
            events,
            num_users: m,
            num_items: n,
            user_id_map: BTreeMap::new(),
            item_id_map: BTreeMap::new(),
        }
    }

    #[test]
    fn max_time_maps_to_one() {
        let train = dataset(vec![ev(0, 0, 100), ev(0, 0, 200), ev(0, 0, 300)], 1, 1);
        let c = derive_time_channels(&train, &[ev(0, 0, 300), ev(0, 0, 100)]).unwrap();
        assert_eq!(c.values.row(0).to_vec(), vec![1.0, 1.0, 1.0]);
        assert_eq!(c.values.row(1).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_channels() {
        // range [100, 300]; user 1 first rates at 200
        let train = dataset(vec![ev(0, 0, 100), ev(1, 1, 200), ev(0, 1, 300)], 2, 2);
        let c = derive_time_channels(&train, &[ev(1, 0, 250)]).unwrap();
        assert!((c.values[[0, 0]] - 0.75).abs() < 1e-12);
        assert!((c.values[[0, 1]] - 0.25).abs() < 1e-12);
        assert!((c.values[[0, 2]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_queries_clamp_and_degenerate_span_is_zero() {
        let train = dataset(vec![ev(0, 0, 100), ev(0, 0, 300)], 1, 1);
        let c = derive_time_channels(&train, &[ev(0, 0, 900), ev(0, 0, 10)]).unwrap();
        assert_eq!(c.values.row(0).to_vec(), vec![1.0, 1.0, 1.0]);
        assert_eq!(c.values.row(1).to_vec(), vec![0.0, 0.0, 0.0]);

        let flat = dataset(vec![ev(0, 0, 5), ev(0, 0, 5)], 1, 1);
        let c = derive_time_channels(&flat, &[ev(0, 0, 5), ev(0, 0, 7)]).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));

        assert_eq!(
            derive_time_channels(&dataset(vec![], 1, 1), &[]).unwrap_err(),
            TimeError::EmptyTrain
        );
    }

    #[test]
    fn default_parameter_count() {
        let p = TimeNNParams::zeros(&DEFAULT_HIDDEN);
        // (3*3 + 3) + (3*32 + 32) + (32 + 1)
        assert_eq!(p.param_count(), 173);
        assert_eq!(p.hidden(), vec![3, 32]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = TimeNNParams::zeros(&DEFAULT_HIDDEN);
        let c = TimeChannels { values: array![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5]] };
        let (out, _) = timenn_forward(&c, &p);
        assert_eq!(out.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = TimeNNParams::init(&DEFAULT_HIDDEN, &mut rng);
        p.layers[0].weight = Array2::eye(3);
        p.layers[0].bias.fill(0.0);
        p.layers[1].weight.fill(0.0);
        p.layers[1].bias.fill(0.0);
        p.layers[2].bias[0] = 5.0;
        let c = TimeChannels { values: array![[0.1, 0.2, 0.3], [0.9, 0.4, 0.5]] };
        let (out, _) = timenn_forward(&c, &p);
        assert_eq!(out.to_vec(), vec![5.0, 5.0]);
    }

    #[test]
    fn zero_upstream_and_dead_output_give_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = TimeNNParams::init(&DEFAULT_HIDDEN, &mut rng);
        let c = TimeChannels { values: array![[0.1, 0.2, 0.3], [0.9, 0.4, 0.5]] };
        let (_, cache) = timenn_forward(&c, &p);
        let g = timenn_backward(&cache, &p, &Array1::zeros(2)).unwrap();
        assert!(g.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0)));

        p.layers[2].weight.fill(0.0);
        let (_, cache) = timenn_forward(&c, &p);
        let g = timenn_backward(&cache, &p, &array![1.0, -2.0]).unwrap();
        for l in &g.layers[..2] {
            assert!(l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0));
        }
        assert_eq!(g.layers[2].bias[0], -1.0);
    }

    #[test]
    fn upstream_length_is_checked() {
        let p = TimeNNParams::zeros(&DEFAULT_HIDDEN);
        let c = TimeChannels { values: Array2::zeros((4, 3)) };
        let (_, cache) = timenn_forward(&c, &p);
        assert!(timenn_backward(&cache, &p, &Array1::zeros(3)).is_err());
    }
}
