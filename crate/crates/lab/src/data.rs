//! Data sources: the synthetic toy task and IDX / CIFAR-10 binary loaders.

use std::fs;
use std::path::Path;

use pclab_core::numkit::gaussian_matrix;
use pclab_core::{Batch, Matrix, RngStream};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

/// Gaussian inputs with alternating `±1` labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub samples: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl ToyTaskSpec {
    pub fn new(samples: usize, input_dim: usize, seed: u64) -> Self {
        Self {
            samples,
            input_dim,
            seed,
        }
    }
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self::new(20, 40, 0)
    }
}

/// `x_μi ~ N(0, 1)`; `y_μ = +1` for even `μ`, `−1` for odd.
pub fn toy_dataset(spec: &ToyTaskSpec) -> Result<Batch> {
    if spec.samples == 0 || spec.input_dim == 0 {
        return Err(LabError::Config(format!(
            "toy task needs P >= 1 and D >= 1, got P = {}, D = {}",
            spec.samples, spec.input_dim
        )));
    }
    let mut rng = RngStream::new(spec.seed);
    let x = gaussian_matrix(&mut rng, spec.samples, spec.input_dim, 1.0)?;
    let y = Matrix::from_fn(spec.samples, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
    Ok(Batch::new(x, y)?)
}

/// A labelled image dataset with pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let d = self.x.cols();
        self.x = Matrix::from_fn(n, d, |i, j| self.x.get(i, j));
        self.labels.truncate(n);
    }

    /// One-hot targets in `{0, 1}`, or `{−1, +1}` when `centred`.
    pub fn to_batch(&self, centred: bool) -> Result<Batch> {
        let (lo, hi) = if centred { (-1.0, 1.0) } else { (0.0, 1.0) };
        let y = Matrix::from_fn(self.len(), self.classes, |i, k| {
            if self.labels[i] as usize == k {
                hi
            } else {
                lo
            }
        });
        Ok(Batch::new(self.x.clone(), y)?)
    }
}

/// A decoded unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(LabError::Data(format!("IDX header needs 4 bytes, file has {}", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(LabError::Data(format!(
            "bad IDX magic {:02x}{:02x}{:02x}{:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    if bytes[2] != 0x08 {
        return Err(LabError::Data(format!(
            "IDX element type 0x{:02x} unsupported (only unsigned bytes)",
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(LabError::Data("IDX file declares zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(LabError::Data(format!(
            "IDX header truncated: {} dims need {header} bytes, file has {}",
            ndims,
            bytes.len()
        )));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| LabError::Data("IDX dimensions overflow".into()))?;
    let body = &bytes[header..];
    if body.len() != count {
        return Err(LabError::Data(format!(
            "IDX body has {} bytes, dims {:?} need {count}",
            body.len(),
            dims
        )));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    parse_idx(&bytes).map_err(|e| e.context(path))
}

/// Pairs an IDX image file (`n × …`) with an IDX label file (`n`).
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(LabError::Data(format!("label file has dims {:?}, expected one", lab.dims)));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(LabError::Data(format!("{n} images but {} labels", lab.dims[0])));
    }
    let d: usize = img.dims[1..].iter().product();
    let x = Matrix::from_fn(n, d, |i, j| img.data[i * d + j] as f64 / 255.0);
    let classes = lab.data.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    Ok(Dataset {
        x,
        labels: lab.data,
        classes,
    })
}

const CIFAR_RECORD: usize = 3073;

pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(LabError::Data("CIFAR file is empty".into()));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(LabError::Data(format!(
            "CIFAR file size {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let d = CIFAR_RECORD - 1;
    let labels: Vec<u8> = (0..n).map(|i| bytes[i * CIFAR_RECORD]).collect();
    if let Some(&bad) = labels.iter().find(|&&c| c > 9) {
        return Err(LabError::Data(format!("CIFAR label {bad} out of range 0..=9")));
    }
    let x = Matrix::from_fn(n, d, |i, j| bytes[i * CIFAR_RECORD + 1 + j] as f64 / 255.0);
    Ok(Dataset {
        x,
        labels,
        classes: 10,
    })
}

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    parse_cifar_binary(&bytes).map_err(|e| e.context(path))
}
