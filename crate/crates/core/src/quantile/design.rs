use serde::{Deserialize, Serialize};

use crate::error::{CfcError, Result};

/// Dense row-major basis matrix: one row Φ(X_i) per observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(CfcError::domain("basis dimension must be at least 1"));
        }
        if data.len() != rows * cols {
            return Err(CfcError::domain(format!(
                "basis data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Design { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| CfcError::domain("basis needs at least one row"))?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(CfcError::domain("ragged basis rows"));
            }
            data.extend_from_slice(row);
        }
        Design::new(rows.len(), cols, data)
    }

    /// An empty design with `cols` columns, to be filled with [`Design::push_row`].
    pub fn empty(cols: usize) -> Self {
        Design {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    /// The n×1 all-ones basis.
    pub fn intercept(rows: usize) -> Self {
        Design {
            rows,
            cols: 1,
            data: vec![1.0; rows],
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(CfcError::domain(format!(
                "row has {} entries, basis dimension is {}",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with one extra row appended.
    pub fn with_row(&self, row: &[f64]) -> Result<Self> {
        let mut out = Design {
            rows: self.rows,
            cols: self.cols,
            data: Vec::with_capacity(self.data.len() + self.cols),
        };
        out.data.extend_from_slice(&self.data);
        out.push_row(row)?;
        Ok(out)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
