use ndarray::{Array2, Zip};

use crate::dataio::RatingEvent;

/// A dense `M x N` value matrix paired with its observation mask.
///
/// Off-mask entries hold the fill value `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrixWithMask {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl DenseMatrixWithMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            values: Array2::zeros((rows, cols)),
            mask: Array2::from_elem((rows, cols), false),
        }
    }

    /// Builds the matrix from `values` and `mask`, zeroing every off-mask value.
    ///
    /// Panics if the shapes differ.
    pub fn new(mut values: Array2<f64>, mask: Array2<bool>) -> Self {
        assert_eq!(values.dim(), mask.dim(), "values/mask shape mismatch");
        Zip::from(&mut values).and(&mask).for_each(|v, &m| {
            if !m {
                *v = 0.0;
            }
        });
        Self { values, mask }
    }

    /// Scatters rating events into an `rows x cols` matrix.
    pub fn from_ratings(rows: usize, cols: usize, events: &[RatingEvent]) -> Self {
        let mut out = Self::zeros(rows, cols);
        for e in events {
            out.values[[e.user_idx, e.item_idx]] = e.rating;
            out.mask[[e.user_idx, e.item_idx]] = true;
        }
        out
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn transposed(&self) -> Self {
        Self {
            values: self.values.t().to_owned(),
            mask: self.mask.t().to_owned(),
        }
    }

    /// Returns `true` when every off-mask value is exactly zero.
    pub fn is_zero_filled(&self) -> bool {
        Zip::from(&self.values)
            .and(&self.mask)
            .fold(true, |ok, &v, &m| ok && (m || v == 0.0))
    }
}
