//! Unit-mass spatial grids: model attention and annotated ground truth.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Allowed deviation of a map's total mass from one.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Non-negative `rows x cols` grid summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidTensor(format!(
                "{rows}x{cols} map needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let map = Self { rows, cols, data };
        map.check(MASS_TOLERANCE)?;
        Ok(map)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [r, c] => Self::new(*r, *c, t.data().to_vec()),
            [1, r, c] => Self::new(*r, *c, t.data().to_vec()),
            other => Err(Error::Rank {
                expected: 2,
                actual: other.len(),
            }),
        }
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            data: vec![1.0 / n as f64; n],
        }
    }

    pub fn delta(rows: usize, cols: usize, row: usize, col: usize) -> Self {
        let mut data = vec![0.0; rows * cols];
        data[row * cols + col] = 1.0;
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("valid map")
    }

    /// Fails unless all cells are finite and non-negative and the mass is one.
    pub fn check(&self, tolerance: f64) -> Result<()> {
        if let Some((i, v)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::Contract(format!("map cell {i} is {v}")));
        }
        let total: f64 = self.data.iter().sum();
        if (total - 1.0).abs() > tolerance {
            return Err(Error::Contract(format!("map mass is {total}")));
        }
        Ok(())
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self.data.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        );
        (i / self.cols, i % self.cols)
    }

    pub fn l1_distance(&self, other: &AttentionMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Annotator masks aggregated into a unit-mass map.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthHeatmap {
    pub map: AttentionMap,
    pub annotators: usize,
}
