//! Run reports: a JSON document with everything needed to interpret a run,
//! and a per-epoch CSV that is byte-identical across execution modes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::forgetting::ForgettingSummary;
use super::metrics::Metrics;
use crate::data::Normalization;
use crate::transport::{CostModel, CostPrediction, Traffic};

pub const REPORT_VERSION: u32 = 1;

pub const CSV_HEADER: &str =
    "epoch,protocol,scenario,bn_mode,precision,recall,f1,accuracy,loss,divergence,\
bytes_up,bytes_down,train_loss,overhead_up,overhead_down";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// Text description of the whole model.
    pub description: String,
    /// Layers `0..cut` are held by clients; `None` for unsplit protocols.
    pub cut_index: Option<usize>,
    pub client_params: usize,
    pub server_params: usize,
    pub client_trainable: usize,
    pub server_trainable: usize,
    /// Client share of trainable parameters.
    pub beta_trainable: f64,
    /// Client share of all stored values, running statistics included.
    pub beta_stored: f64,
    /// Activation values per sample at the cut.
    pub smashed_values_per_sample: usize,
    pub client_flops_per_sample: u64,
    pub server_flops_per_sample: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub metrics: Metrics,
    pub per_class_accuracy: Vec<f64>,
    pub visit_order: Vec<u32>,
    pub last_visited: Option<u32>,
    /// L2 distance of the non-BN client weights to a paired IID run.
    pub divergence: f64,
    pub traffic: Vec<Traffic>,
    /// Value bytes, client to server.
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub overhead_up: u64,
    pub overhead_down: u64,
}

impl EpochRecord {
    /// Fills the byte totals from the per-client traffic.
    pub fn total_traffic(&mut self) {
        self.bytes_up = self.traffic.iter().map(|t| t.up.value).sum();
        self.bytes_down = self.traffic.iter().map(|t| t.down.value).sum();
        self.overhead_up = self.traffic.iter().map(|t| t.up.overhead).sum();
        self.overhead_down = self.traffic.iter().map(|t| t.down.overhead).sum();
    }
}

/// Measured bytes set against the analytical prediction for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCheck {
    pub model: CostModel,
    pub predicted: CostPrediction,
    /// Value bytes per client over the first epoch.
    pub measured_per_client: Vec<u64>,
    pub measured_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub protocol: String,
    /// Train and test partition, e.g. `noniid/iid`.
    pub scenario: String,
    pub bn_mode: String,
    pub seed: u64,
    /// Canonical `key = value` echo of the configuration.
    pub config: String,
    /// Derived seed of every named stream used by the run.
    pub seed_streams: Vec<(String, u64)>,
    pub model: ModelSummary,
    pub normalization: Option<Normalization>,
    pub train_shard_sizes: Vec<usize>,
    pub test_shard_sizes: Vec<usize>,
    pub test_aggregation: String,
    pub cost: Option<CostCheck>,
    pub epochs: Vec<EpochRecord>,
    pub forgetting: Option<ForgettingSummary>,
    pub final_metrics: Option<Metrics>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// Per-epoch CSV, header included. Floats use shortest round-trip
    /// formatting, so equal runs give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let m = &e.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                self.protocol,
                self.scenario,
                self.bn_mode,
                m.precision,
                m.recall,
                m.f1,
                m.accuracy,
                m.loss,
                e.divergence,
                e.bytes_up,
                e.bytes_down,
                e.train_loss,
                e.overhead_up,
                e.overhead_down
            );
        }
        s
    }

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> crate::Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// The same report with timing removed, for comparisons across runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize) -> EpochRecord {
        let mut r = EpochRecord {
            epoch,
            lr: 0.1,
            train_loss: 1.5,
            metrics: Metrics {
                precision: 0.5,
                recall: 0.25,
                f1: 1.0 / 3.0,
                accuracy: 0.25,
                loss: 2.0,
            },
            per_class_accuracy: vec![0.5, 0.0],
            visit_order: vec![1, 0],
            last_visited: Some(0),
            divergence: 0.0,
            traffic: vec![Traffic::default(); 2],
            bytes_up: 0,
            bytes_down: 0,
            overhead_up: 0,
            overhead_down: 0,
        };
        r.traffic[0].up.value = 10;
        r.traffic[1].up.value = 5;
        r.traffic[1].down.overhead = 7;
        r.total_traffic();
        r
    }

    #[test]
    fn csv_rows_follow_header() {
        let report = RunReport {
            format_version: REPORT_VERSION,
            protocol: "sfpl".into(),
            scenario: "noniid/iid".into(),
            bn_mode: "rmsd".into(),
            seed: 1,
            config: String::new(),
            seed_streams: vec![],
            model: ModelSummary {
                description: String::new(),
                cut_index: Some(3),
                client_params: 1,
                server_params: 1,
                client_trainable: 1,
                server_trainable: 1,
                beta_trainable: 0.5,
                beta_stored: 0.5,
                smashed_values_per_sample: 4,
                client_flops_per_sample: 0,
                server_flops_per_sample: 0,
            },
            normalization: None,
            train_shard_sizes: vec![],
            test_shard_sizes: vec![],
            test_aggregation: String::new(),
            cost: None,
            epochs: vec![record(0), record(1)],
            forgetting: None,
            final_metrics: None,
            wall_clock_seconds: 3.0,
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert_eq!(
            lines[2],
            "1,sfpl,noniid/iid,rmsd,0.5,0.25,0.3333333333333333,0.25,2,0,15,0,1.5,0,7"
        );
        let back = RunReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.without_timing().wall_clock_seconds, 0.0);
    }
}
