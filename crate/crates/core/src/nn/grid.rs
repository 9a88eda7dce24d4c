use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token-lattice extents `h_t × w_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Extents of the relative-offset table, `(2h−1, 2w−1)`.
    pub fn rel_extent(&self) -> (usize, usize) {
        (2 * self.height - 1, 2 * self.width - 1)
    }
}

/// A batch of token maps stored `[batch, h_t, w_t, d]`. Row-major storage
/// makes the `[batch, N, d]` view a pure reinterpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    data: Tensor,
}

impl TokenGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 || data.shape()[1] == 0 || data.shape()[2] == 0 {
            return Err(Error::Geometry(format!(
                "token grid must be [batch, h, w, d], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    /// From a `[batch, N, d]` token sequence laid out row-major on `grid`.
    pub fn from_tokens(tokens: Tensor, grid: GridShape) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 3 || s[1] != grid.tokens() {
            return Err(Error::Geometry(format!(
                "{:?} cannot be laid out on a {}x{} grid",
                s, grid.height, grid.width
            )));
        }
        let (b, d) = (s[0], s[2]);
        Self::new(tokens.reshape(vec![b, grid.height, grid.width, d])?)
    }

    pub fn randn<R: Rng + ?Sized>(
        batch: usize,
        grid: GridShape,
        dim: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        Self {
            data: Tensor::randn(vec![batch, grid.height, grid.width, dim], std, rng),
        }
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> GridShape {
        GridShape::new(self.data.shape()[1], self.data.shape()[2])
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// `[batch, N, d]` view.
    pub fn tokens(&self) -> Tensor {
        let (b, n, d) = (self.batch(), self.grid().tokens(), self.dim());
        self.data
            .clone()
            .reshape(vec![b, n, d])
            .expect("same element count")
    }

    /// Channel vector of token `(row, col)` in sample `b`.
    pub fn token(&self, b: usize, row: usize, col: usize) -> &[f32] {
        let d = self.dim();
        let o = self.data.offset(&[b, row, col, 0]);
        &self.data.data()[o..o + d]
    }
}
