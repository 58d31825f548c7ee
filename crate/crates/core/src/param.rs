//! Flat parameter vectors.
//!
//! Every trainable weight of a model lives in one contiguous `ParamVector`; this is the
//! unit that weight averaging, landscape probes and snapshot ensembles operate on.
//!
//! Live instances are counted per thread so the trainer can report how many
//! parameter-sized buffers it keeps resident (see [`live_buffers`]).

use std::cell::Cell;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
}

/// Number of `ParamVector`s currently alive on this thread.
pub fn live_buffers() -> usize {
    LIVE.with(|c| c.get())
}

fn track_alloc() {
    LIVE.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        track_alloc();
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self::from_vec(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        std::mem::take(&mut self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(format!(
                "parameter vectors differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector::from_vec(self.values.iter().map(|v| v * factor).collect())
    }

    /// `self + factor * other`
    pub fn add_scaled(&self, factor: f64, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector::from_vec(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + factor * b)
                .collect(),
        )
    }

    /// In-place `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        self.add_scaled(-1.0, other)
    }

    /// `(1 - t) * self + t * other`.
    pub fn lerp(&self, other: &ParamVector, t: f64) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector::from_vec(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Coordinate-wise arithmetic mean of a non-empty list, summed in list order.
    pub fn mean_of(vectors: &[&ParamVector]) -> Result<ParamVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::domain("mean of an empty set of parameter vectors"))?;
        let mut acc = vec![0.0; first.len()];
        for v in vectors {
            first.check_same_layout(v)?;
            for (a, x) in acc.iter_mut().zip(v.iter()) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(ParamVector::from_vec(acc))
    }
}

impl Clone for ParamVector {
    fn clone(&self) -> Self {
        ParamVector::from_vec(self.values.clone())
    }
}

impl Drop for ParamVector {
    fn drop(&mut self) {
        LIVE.with(|c| c.set(c.get().saturating_sub(1)));
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, idx: usize) -> &f64 {
        &self.values[idx]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, idx: usize) -> &mut f64 {
        &mut self.values[idx]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector::from_vec(values)
    }
}
