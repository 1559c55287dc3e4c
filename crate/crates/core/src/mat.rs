//! Row-major `f32` frame matrices used for feature streams.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Mat {
        Mat::from_fn(self.rows, len, |r, c| self.at(r, start + c))
    }

    pub fn to_rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Linear resampling along the time axis to `rows` frames, keeping the
    /// first and last frame fixed.
    pub fn resample_rows(&self, rows: usize) -> Mat {
        if rows == self.rows || self.rows == 0 {
            return self.clone();
        }
        if self.rows == 1 || rows == 1 {
            return Mat::from_fn(rows, self.cols, |_, c| self.at(0, c));
        }
        let scale = (self.rows - 1) as f64 / (rows - 1) as f64;
        Mat::from_fn(rows, self.cols, |r, c| {
            let pos = r as f64 * scale;
            let i = (pos.floor() as usize).min(self.rows - 2);
            let t = pos - i as f64;
            ((1.0 - t) * self.at(i, c) as f64 + t * self.at(i + 1, c) as f64) as f32
        })
    }
}
