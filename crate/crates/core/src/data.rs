use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    File(String),
    Synthetic { seed: u64, recipe: String },
    InMemory,
}

/// Samples `X_i` (s x d) with targets `Y_i` (r x c), `r` either 1 or `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub r: usize,
    pub c: usize,
    pub xs: Vec<Mat>,
    pub ys: Vec<Mat>,
    pub provenance: Provenance,
}

impl EmbeddingBatch {
    pub fn new(xs: Vec<Mat>, ys: Vec<Mat>) -> Result<Self> {
        let first_x = xs.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let first_y = ys.first().ok_or_else(|| Error::InvalidArgument("empty targets".into()))?;
        let batch = EmbeddingBatch {
            n: xs.len(),
            s: first_x.nrows(),
            d: first_x.ncols(),
            r: first_y.nrows(),
            c: first_y.ncols(),
            xs,
            ys,
            provenance: Provenance::InMemory,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.xs.len() != self.n || self.ys.len() != self.n {
            return Err(shape(format!("n = {} but {} inputs / {} targets", self.n, self.xs.len(), self.ys.len())));
        }
        if self.r != 1 && self.r != self.s {
            return Err(shape(format!("target rows must be 1 or s = {}, got {}", self.s, self.r)));
        }
        for (i, (x, y)) in self.xs.iter().zip(&self.ys).enumerate() {
            if x.shape() != (self.s, self.d) || y.shape() != (self.r, self.c) {
                return Err(shape(format!("sample {i} has shapes {:?} / {:?}", x.shape(), y.shape())));
            }
            if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!("sample {i} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Same inputs, new targets.
    pub fn with_targets(&self, ys: Vec<Mat>) -> Result<Self> {
        let mut out = self.clone();
        out.r = ys.first().map(|y| y.nrows()).unwrap_or(self.r);
        out.c = ys.first().map(|y| y.ncols()).unwrap_or(self.c);
        out.ys = ys;
        out.validate()?;
        Ok(out)
    }

    /// Class index per sample for one-hot (or score) targets: argmax of the pooled row.
    pub fn labels(&self) -> Vec<usize> {
        self.ys.iter().map(|y| argmax(&pool_rows(y))).collect()
    }
}

pub(crate) fn pool_rows(m: &Mat) -> Vec<f64> {
    let rows = m.nrows() as f64;
    (0..m.ncols()).map(|j| m.column(j).sum() / rows).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
