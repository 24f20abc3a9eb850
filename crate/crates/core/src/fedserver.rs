//! Client-side model aggregation and the weight-divergence diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelGraph, ParamKind};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Batch norm scale, shift and running statistics stay with each client.
    ExcludeBatchNorm,
    /// Every tensor is averaged.
    IncludeBatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    BySampleCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    pub mode: AggregationMode,
    pub weighting: Weighting,
}

impl AggregationPolicy {
    pub fn new(mode: AggregationMode, weighting: Weighting) -> Self {
        Self { mode, weighting }
    }

    /// Whether tensors of this kind are averaged and broadcast.
    pub fn shares(&self, kind: ParamKind) -> bool {
        self.mode == AggregationMode::IncludeBatchNorm || !kind.is_batch_norm()
    }
}

fn weights(n: usize, sample_counts: &[usize], weighting: Weighting) -> Result<Vec<f64>> {
    match weighting {
        Weighting::Uniform => Ok(vec![1.0; n]),
        Weighting::BySampleCount => {
            if sample_counts.len() != n {
                return Err(Error::Aggregation(format!(
                    "{} sample counts for {n} models",
                    sample_counts.len()
                )));
            }
            let total: usize = sample_counts.iter().sum();
            if total == 0 {
                return Err(Error::Aggregation("all sample counts are zero".into()));
            }
            Ok(sample_counts
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect())
        }
    }
}

/// Averages the shared tensors of structurally identical client models.
/// Uniform weighting divides the sum by the number of clients; sample-count
/// weighting uses `n_k / sum(n)`. Tensors the policy does not share are
/// copied from the first model and carry no meaning.
pub fn aggregate(
    models: &[&ModelGraph],
    sample_counts: &[usize],
    policy: AggregationPolicy,
) -> Result<ModelGraph> {
    let first = *models
        .first()
        .ok_or_else(|| Error::Aggregation("no client models to aggregate".into()))?;
    if let Some(i) = models.iter().position(|m| !m.same_structure(first)) {
        return Err(Error::Aggregation(format!(
            "client model {i} has a different architecture"
        )));
    }
    let w = weights(models.len(), sample_counts, policy.weighting)?;
    let uniform = policy.weighting == Weighting::Uniform;
    let k = models.len() as f64;
    let sources: Vec<Vec<&[Scalar]>> = models
        .iter()
        .map(|m| m.named_params().map(|(_, _, t)| t.data()).collect())
        .collect();
    let mut global = first.clone();
    for (ti, (_, kind, t)) in global.named_params_mut().enumerate() {
        if !policy.shares(kind) {
            continue;
        }
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            let acc: f64 = sources
                .iter()
                .zip(&w)
                .map(|(src, &wk)| wk * src[ti][j] as f64)
                .sum();
            *v = if uniform { acc / k } else { acc } as Scalar;
        }
    }
    Ok(global)
}

/// Writes the shared tensors of `global` into every client model.
pub fn broadcast(
    global: &ModelGraph,
    clients: &mut [ModelGraph],
    policy: AggregationPolicy,
) -> Result<()> {
    for (i, c) in clients.iter_mut().enumerate() {
        if !c.same_structure(global) {
            return Err(Error::Aggregation(format!(
                "client model {i} has a different architecture"
            )));
        }
        apply_shared(global, c, policy);
    }
    Ok(())
}

pub(crate) fn apply_shared(
    global: &ModelGraph,
    client: &mut ModelGraph,
    policy: AggregationPolicy,
) {
    for ((_, kind, dst), (_, _, src)) in client.named_params_mut().zip(global.named_params()) {
        if policy.shares(kind) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

/// `||a - b|| / ||b||` over the flattened non-batch-norm parameters.
pub fn weight_divergence(a: &ModelGraph, b: &ModelGraph) -> Result<f64> {
    if !a.same_structure(b) {
        return Err(Error::Aggregation(
            "divergence needs identical architectures".into(),
        ));
    }
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for ((_, kind, ta), (_, _, tb)) in a.named_params().zip(b.named_params()) {
        if kind.is_batch_norm() {
            continue;
        }
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let (x, y) = (x as f64, y as f64);
            diff += (x - y) * (x - y);
            norm += y * y;
        }
    }
    if norm == 0.0 {
        return Err(Error::Aggregation("reference model has zero norm".into()));
    }
    Ok((diff / norm).sqrt())
}
