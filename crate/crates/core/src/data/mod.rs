//! Datasets, partitions across clients, synthetic blobs and file loaders.

mod io;
mod synth;

pub use io::{load_csv, load_idx, parse_csv, read_idx, write_csv, write_idx, IdxFormat};
pub use synth::{synth_blobs, BlobFrame, SynthShape};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collector::fisher_yates;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Labeled samples. `features` has the sample index as its leading dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rank() < 2 || features.outer() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for features {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Label {
                label: bad,
                classes: n_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Features and labels of the given samples, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.batch(indices)?;
        Ok(Dataset {
            features,
            labels,
            n_classes: self.n_classes,
        })
    }

    /// Reinterprets every sample with a new shape of the same size.
    pub fn reshape_samples(self, shape: &[usize]) -> Result<Dataset> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Dataset {
            features: self.features.reshape(full)?,
            ..self
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// Client `k` holds exactly the samples of class `k`.
    PositiveLabels,
}

/// Sample indices per client. Every shard is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Splits sample indices across `n` clients.
pub fn partition<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    mode: PartitionMode,
    n: usize,
    rng: &mut R,
) -> Result<PartitionPlan> {
    let m = labels.len();
    if n == 0 || n > m {
        return Err(Error::Partition(format!(
            "cannot split {m} samples across {n} clients"
        )));
    }
    let assignments = match mode {
        PartitionMode::Iid => {
            let perm = fisher_yates(m, rng);
            (0..n)
                .map(|k| {
                    let mut shard = perm[k * m / n..(k + 1) * m / n].to_vec();
                    shard.sort_unstable();
                    shard
                })
                .collect()
        }
        PartitionMode::PositiveLabels => {
            if n != n_classes {
                return Err(Error::Partition(format!(
                    "positive labels need one client per class: {n} clients, {n_classes} classes"
                )));
            }
            let mut shards = vec![Vec::new(); n];
            for (i, &l) in labels.iter().enumerate() {
                shards[l].push(i);
            }
            if let Some(k) = shards.iter().position(Vec::is_empty) {
                return Err(Error::Partition(format!("class {k} has no samples")));
            }
            shards
        }
    };
    Ok(PartitionPlan { mode, assignments })
}

/// Per-feature affine scaling to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of `data`; constant features get a unit scale.
    pub fn fit(data: &Dataset) -> Self {
        let d = data.features.row_len();
        let m = data.len() as f64;
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for i in 0..data.len() {
            for (j, &v) in data.features.row(i).iter().enumerate() {
                mean[j] += v as f64;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..data.len() {
            for (j, &v) in data.features.row(i).iter().enumerate() {
                sq[j] += (v as f64 - mean[j]).powi(2);
            }
        }
        let std = sq
            .into_iter()
            .map(|s| {
                let sd = (s / m).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        let d = data.features.row_len();
        if d != self.mean.len() {
            return Err(Error::Data(format!(
                "normalization fitted on {} features, data has {d}",
                self.mean.len()
            )));
        }
        for (i, v) in data.features.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = ((*v as f64 - self.mean[j]) / self.std[j]) as Scalar;
        }
        Ok(())
    }
}

/// Mirrors each image sample left to right with probability one half.
/// Samples must be `[C, H, W]`.
pub fn random_hflip<R: Rng + ?Sized>(x: &mut Tensor, rng: &mut R) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::Data(format!(
            "horizontal flip needs images, got {:?}",
            x.shape()
        )));
    }
    let w = x.shape()[3];
    let row_len = x.row_len();
    for s in 0..x.outer() {
        if rng.random_bool(0.5) {
            let sample = &mut x.data_mut()[s * row_len..(s + 1) * row_len];
            for line in sample.chunks_exact_mut(w) {
                line.reverse();
            }
        }
    }
    Ok(())
}
