//! Analytical communication and time cost per training round.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Protocol;

/// Parameters of the per-round cost formulas. Sizes are in bytes, times in
/// seconds and the rate in bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// N
    pub n_clients: usize,
    /// |W|: full-model size.
    pub model_bytes: f64,
    /// Fraction of the full model held by a client.
    pub beta: f64,
    /// q: smashed-data size per sample.
    pub smashed_bytes: f64,
    /// X: total number of training samples.
    pub dataset_size: f64,
    /// R
    pub rate: f64,
    /// T: one epoch of full-model compute.
    pub epoch_time: f64,
    /// Full-model aggregation time.
    pub fedavg_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostPrediction {
    pub comms_per_client: f64,
    pub total_comms: f64,
    pub training_time: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_bytes", self.model_bytes),
            ("smashed_bytes", self.smashed_bytes),
            ("dataset_size", self.dataset_size),
            ("rate", self.rate),
            ("epoch_time", self.epoch_time),
            ("fedavg_time", self.fedavg_time),
        ];
        if self.n_clients == 0 {
            return Err(Error::Cost("n_clients must be positive".into()));
        }
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Cost(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Cost(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Per-round cost of one protocol.
///
/// FL moves the whole model up and down; the split protocols move two
/// smashed-data streams (activations up, gradients down) plus the client
/// portion up and down, and aggregate only the client portion.
pub fn predict_cost(cm: &CostModel, protocol: Protocol) -> Result<CostPrediction> {
    cm.validate()?;
    let n = cm.n_clients as f64;
    let w = cm.model_bytes;
    Ok(match protocol {
        Protocol::Fl => CostPrediction {
            comms_per_client: 2.0 * w,
            total_comms: 2.0 * n * w,
            training_time: cm.epoch_time + 2.0 * w / cm.rate + cm.fedavg_time,
        },
        Protocol::Sflv2 | Protocol::Sfpl => {
            let xq = cm.dataset_size * cm.smashed_bytes;
            let bw = cm.beta * w;
            CostPrediction {
                comms_per_client: 2.0 * xq / n + 2.0 * bw,
                total_comms: 2.0 * xq + 2.0 * n * bw,
                training_time: cm.epoch_time
                    + 2.0 * xq / (n * cm.rate)
                    + 2.0 * bw / cm.rate
                    + cm.fedavg_time / 2.0,
            }
        }
        Protocol::Centralized => {
            return Err(Error::Cost(
                "centralized training has no communication cost".into(),
            ));
        }
    })
}

pub const COST_CSV_HEADER: &str = "n_clients,protocol,comms_per_client,total_comms,training_time";

/// Cost table rows for every protocol at every client count.
pub fn cost_sweep(
    base: &CostModel,
    clients: &[usize],
    protocols: &[Protocol],
) -> Result<Vec<(usize, Protocol, CostPrediction)>> {
    let mut rows = Vec::new();
    for &n in clients {
        let cm = CostModel {
            n_clients: n,
            ..*base
        };
        for &p in protocols {
            rows.push((n, p, predict_cost(&cm, p)?));
        }
    }
    Ok(rows)
}

pub fn cost_csv(rows: &[(usize, Protocol, CostPrediction)]) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    for (n, p, c) in rows {
        out.push_str(&format!(
            "{n},{},{},{},{}\n",
            p.name(),
            c.comms_per_client,
            c.total_comms,
            c.training_time
        ));
    }
    out
}
