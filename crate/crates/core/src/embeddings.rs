//! Token content embeddings and the clipped relative-position table.

use crate::error::{Error, Result};
use crate::numkernel::{glorot_init, Matrix, SeededRng};

/// `vocab_size × d` lookup table of content vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentEmbeddingTable {
    pub table: Matrix,
}

impl ContentEmbeddingTable {
    pub fn new(table: Matrix) -> Result<Self> {
        if table.rows() == 0 || table.cols() == 0 {
            return Err(Error::InvalidArgument("content embedding table must be non-empty".into()));
        }
        Ok(ContentEmbeddingTable { table })
    }

    pub fn init(vocab_size: usize, dim: usize, rng: &mut SeededRng) -> Self {
        ContentEmbeddingTable { table: glorot_init(vocab_size, dim, rng) }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

/// One learned vector per clipped distance `0..=k_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativePositionTable {
    pub table: Matrix,
}

impl RelativePositionTable {
    pub fn new(table: Matrix) -> Result<Self> {
        if table.rows() < 2 || table.cols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "relative position table needs k_max >= 1 and d > 0, got {}x{}",
                table.rows(),
                table.cols()
            )));
        }
        Ok(RelativePositionTable { table })
    }

    pub fn init(k_max: usize, dim: usize, rng: &mut SeededRng) -> Self {
        RelativePositionTable { table: glorot_init(k_max + 1, dim, rng) }
    }

    pub fn k_max(&self) -> usize {
        self.table.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Vector for the pair `(i, j)`.
    pub fn row_for(&self, i: usize, j: usize) -> &[f64] {
        self.table.row(clip_distance(i, j, self.k_max()))
    }
}

/// `min(|i − j|, k_max)`.
#[inline]
pub fn clip_distance(i: usize, j: usize, k_max: usize) -> usize {
    i.abs_diff(j).min(k_max)
}

/// Stacks the embedding rows of `ids` into an `n × d` matrix.
pub fn embed_sequence(ids: &[usize], table: &ContentEmbeddingTable) -> Result<Matrix> {
    let d = table.dim();
    let mut out = Matrix::zeros(ids.len(), d);
    for (k, &id) in ids.iter().enumerate() {
        if id >= table.vocab_size() {
            return Err(Error::TokenOutOfRange { id, vocab_size: table.vocab_size() });
        }
        out.row_mut(k).copy_from_slice(table.table.row(id));
    }
    Ok(out)
}
