use crate::error::{Error, Result};

/// Dense row-major matrix, used for logits and class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Index of the largest entry in row `r`; ties go to the lower index.
    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

/// A set of labelled examples: `n` rows of `dim` features plus a class index per row.
///
/// Whole datasets are represented as one `Batch`; minibatches are produced with
/// [`Batch::gather`] and [`Batch::chunks`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("batch input dimension must be >= 1"));
        }
        if labels.is_empty() {
            return Err(Error::shape("batch must hold at least one example"));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::shape(format!(
                "{} labels with dim {dim} need {} inputs, got {}",
                labels.len(),
                labels.len() * dim,
                inputs.len()
            )));
        }
        if let Some(pos) = inputs.iter().position(|v| v.is_nan()) {
            return Err(Error::domain(format!(
                "NaN input at row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            inputs,
            dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Rows selected by `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            dim: self.dim,
            labels,
        }
    }

    /// Consecutive minibatches of at most `size` rows.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            Batch {
                inputs: self.inputs[start * self.dim..end * self.dim].to_vec(),
                dim: self.dim,
                labels: self.labels[start..end].to_vec(),
            }
        })
    }
}
