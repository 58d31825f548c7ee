//! Synthetic classification datasets and a CSV loader.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::report::csv_error;

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// `classes` isotropic Gaussian clusters with centers on a circle of radius 3.
    Blobs { classes: usize },
    /// Two interleaved spirals (1.5 turns each).
    Spirals,
    /// Four clusters at `(+-1, +-1)`, labelled by the sign of `x * y`.
    Xor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        generator: Generator,
        n_train: usize,
        n_test: usize,
        noise: f64,
        seed: u64,
    },
    Csv {
        train_path: PathBuf,
        test_path: PathBuf,
        label_column: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes().max(self.test.num_classes())
    }
}

pub fn make_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic {
            generator,
            n_train,
            n_test,
            noise,
            seed,
        } => {
            if *n_train == 0 || *n_test == 0 {
                return Err(Error::config("data.n_train", "train and test sizes must be >= 1"));
            }
            if !(*noise >= 0.0 && noise.is_finite()) {
                return Err(Error::config("data.noise", format!("must be finite and >= 0, got {noise}")));
            }
            // Independent streams so the test split does not depend on n_train.
            let train = generate(generator, *n_train, *noise, *seed)?;
            let test = generate(generator, *n_test, *noise, seed.wrapping_add(0x7e57_0000_0000_0001))?;
            Ok(Dataset { train, test })
        }
        DataSource::Csv {
            train_path,
            test_path,
            label_column,
        } => Ok(Dataset {
            train: load_csv(train_path, label_column)?,
            test: load_csv(test_path, label_column)?,
        }),
    }
}

pub fn generate(generator: &Generator, n: usize, noise: f64, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise).map_err(|e| Error::config("data.noise", e.to_string()))?;
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    match *generator {
        Generator::Blobs { classes } => {
            if classes < 2 {
                return Err(Error::config("data.classes", "blobs need at least 2 classes"));
            }
            for i in 0..n {
                let y = i % classes;
                let angle = 2.0 * PI * y as f64 / classes as f64;
                inputs.push(3.0 * angle.cos() + jitter.sample(&mut rng));
                inputs.push(3.0 * angle.sin() + jitter.sample(&mut rng));
                labels.push(y);
            }
        }
        Generator::Spirals => {
            for i in 0..n {
                let y = i % 2;
                let t: f64 = rng.random_range(0.0..1.0);
                let r = 0.1 + 0.9 * t;
                let angle = 3.0 * PI * t + PI * y as f64;
                inputs.push(r * angle.cos() + jitter.sample(&mut rng));
                inputs.push(r * angle.sin() + jitter.sample(&mut rng));
                labels.push(y);
            }
        }
        Generator::Xor => {
            for i in 0..n {
                let quadrant = i % 4;
                let sx = if quadrant & 1 == 0 { 1.0 } else { -1.0 };
                let sy = if quadrant & 2 == 0 { 1.0 } else { -1.0 };
                inputs.push(sx + jitter.sample(&mut rng));
                inputs.push(sy + jitter.sample(&mut rng));
                labels.push(usize::from(sx * sy < 0.0));
            }
        }
    }
    Batch::new(inputs, 2, labels)
}

/// Reads numeric feature columns plus an integer label column from a CSV with a header row.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Batch> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Csv(format!("{}: no column named `{label_column}`", path.display())))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Csv(format!("{}: no feature columns", path.display())));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        // Header is line 1.
        let line = row_idx + 2;
        let record = record.map_err(|e| Error::Csv(format!("{}: row {line}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::Csv(format!(
                "{}: row {line} has {} fields, header has {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_idx {
                let label = field.parse::<usize>().map_err(|_| {
                    Error::Csv(format!("{}: row {line}: label `{field}` is not a class index", path.display()))
                })?;
                labels.push(label);
            } else {
                let value = field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::Csv(format!(
                            "{}: row {line}, column `{}`: `{field}` is not a finite number",
                            path.display(),
                            &headers[col]
                        ))
                    })?;
                inputs.push(value);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Csv(format!("{}: no data rows", path.display())));
    }
    Batch::new(inputs, dim, labels)
}
