//! Confusion matrices, macro-averaged metrics and evaluation of trained
//! model portions.

use serde::{Deserialize, Serialize};

use super::{chunk_ranges, BnMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Mode, ModelGraph};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

/// Macro averages over classes. A class that is never predicted has
/// precision 0; a class that never occurs has recall 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub loss: f64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        Self { counts }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Recall of every class.
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect()
    }

    pub fn metrics(&self, loss: f64) -> Metrics {
        let v = self.classes();
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        let mut correct = 0;
        for c in 0..v {
            let tp = self.counts[c][c];
            correct += tp;
            let predicted: u64 = (0..v).map(|t| self.counts[t][c]).sum();
            let actual: u64 = self.counts[c].iter().sum();
            let p = if predicted == 0 {
                0.0
            } else {
                tp as f64 / predicted as f64
            };
            let r = if actual == 0 {
                0.0
            } else {
                tp as f64 / actual as f64
            };
            let f = if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            };
            p_sum += p;
            r_sum += r;
            f_sum += f;
        }
        let total = self.total();
        Metrics {
            precision: p_sum / v as f64,
            recall: r_sum / v as f64,
            f1: f_sum / v as f64,
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            loss,
        }
    }
}

/// The models one client evaluates with: its client portion and, for split
/// protocols, the shared server portion.
#[derive(Debug, Clone, Copy)]
pub struct Portions<'a> {
    pub client: &'a ModelGraph,
    pub server: Option<&'a ModelGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub metrics: Metrics,
    pub confusion: Confusion,
    pub per_class_accuracy: Vec<f64>,
}

/// Runs every client's test shard through that client's models and pools
/// the predictions in one confusion matrix. Accuracy is therefore the mean
/// of per-client accuracies weighted by shard size.
///
/// Client-side batch norm follows `bn_mode`; server-side batch norm always
/// uses running statistics.
pub fn evaluate(
    models: &[Portions<'_>],
    test: &Dataset,
    shards: &[Vec<usize>],
    bn_mode: BnMode,
    batch_size: usize,
) -> Result<EvalOutcome> {
    if models.len() != shards.len() {
        return Err(Error::Protocol(format!(
            "{} model sets for {} test shards",
            models.len(),
            shards.len()
        )));
    }
    let mut confusion = Confusion::new(test.n_classes);
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for (m, shard) in models.iter().zip(shards) {
        for r in chunk_ranges(shard.len(), batch_size) {
            if r.is_empty() {
                continue;
            }
            let (x, y) = test.batch(&shard[r])?;
            let mut out = m.client.infer(&x, bn_mode.mode())?;
            if let Some(s) = m.server {
                out = s.infer(&out, Mode::EvalRmsd)?;
            }
            let (loss, _) = cross_entropy(&out, &y)?;
            loss_sum += loss * y.len() as f64;
            count += y.len();
            for (i, &truth) in y.iter().enumerate() {
                let row = out.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                confusion.add(truth, best);
            }
        }
    }
    if count == 0 {
        return Err(Error::Protocol("empty test set".into()));
    }
    let metrics = confusion.metrics(loss_sum / count as f64);
    Ok(EvalOutcome {
        metrics,
        per_class_accuracy: confusion.per_class_accuracy(),
        confusion,
    })
}
