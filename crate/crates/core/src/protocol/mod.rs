//! Training protocols: split learning with a shuffling collector (SFPL),
//! sequential split learning (SFLv2), federated averaging (FL) and a
//! centralized reference, plus their evaluation and reporting.

mod client;
mod forgetting;
mod metrics;
mod report;
mod server;

pub use client::ClientActor;
pub use forgetting::{
    gaussian_smooth, last_visited_max_fraction, ForgettingSummary, ForgettingTrace,
};
pub use metrics::{evaluate, Confusion, EvalOutcome, Metrics, Portions};
pub use report::CostCheck;
pub use report::{EpochRecord, ModelSummary, RunReport, CSV_HEADER, REPORT_VERSION};
pub use server::{run_centralized, run_server, EpochOutcome, ServerOutput, ServerSetup};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::collector::fisher_yates;
use crate::error::{Error, Result};
use crate::fedserver::AggregationPolicy;
use crate::nn::{Mode, OptimizerConfig};
use crate::rng::{stream, SeedStreams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Sfpl,
    Sflv2,
    Fl,
    Centralized,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Sfpl => "sfpl",
            Protocol::Sflv2 => "sflv2",
            Protocol::Fl => "fl",
            Protocol::Centralized => "centralized",
        }
    }

    pub fn is_split(self) -> bool {
        matches!(self, Protocol::Sfpl | Protocol::Sflv2)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "sfpl" => Protocol::Sfpl,
            "sflv2" => Protocol::Sflv2,
            "fl" => Protocol::Fl,
            "centralized" => Protocol::Centralized,
            _ => return Err(Error::Config(format!("unknown protocol `{s}`"))),
        })
    }
}

/// Which statistics client-side batch norm uses at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Running statistics.
    Rmsd,
    /// Statistics of the batch under test.
    Cmsd,
}

impl BnMode {
    pub fn name(self) -> &'static str {
        match self {
            BnMode::Rmsd => "rmsd",
            BnMode::Cmsd => "cmsd",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            BnMode::Rmsd => Mode::EvalRmsd,
            BnMode::Cmsd => Mode::EvalCmsd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitOrder {
    RandomPerEpoch,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    /// Random horizontal flips of image samples.
    Hflip,
}

/// Everything the protocol procedures need besides data and models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub epochs: usize,
    pub batch_size: usize,
    /// Server mini-batch over a pooled stack; `None` trains on the whole pool.
    pub server_batch_size: Option<usize>,
    pub eval_batch_size: usize,
    /// Batches per active client per collector barrier.
    pub alpha: f64,
    pub bn_mode: BnMode,
    pub aggregation: AggregationPolicy,
    pub optimizer: OptimizerConfig,
    pub visit_order: VisitOrder,
    pub augment: Augment,
    /// Upper bound on waiting for any client message.
    pub timeout_ms: Option<u64>,
    /// Keep collector events for the run log.
    pub collector_log: bool,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be positive".to_string());
        }
        if self.batch_size < 2 {
            errs.push("batch_size must be at least 2".to_string());
        }
        if self.eval_batch_size < 2 {
            errs.push("eval_batch_size must be at least 2".to_string());
        }
        if self.server_batch_size == Some(1) {
            errs.push("server_batch_size must be at least 2".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            errs.push(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if let Err(e) = self.optimizer.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Client visiting order of one epoch.
pub fn visit_order(policy: VisitOrder, n: usize, seeds: &SeedStreams, epoch: usize) -> Vec<u32> {
    match policy {
        VisitOrder::Fixed => (0..n as u32).collect(),
        VisitOrder::RandomPerEpoch => {
            fisher_yates(n, &mut seeds.rng(stream::VISIT_ORDER, &[epoch as u64]))
                .into_iter()
                .map(|i| i as u32)
                .collect()
        }
    }
}

/// Splits `len` positions into consecutive chunks of `size`; a trailing
/// chunk of one is folded into the one before it.
pub fn chunk_ranges(len: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..len)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(len))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Mini-batches of one client's shard for one epoch: the shard in an order
/// drawn from the batch-order stream, cut into `batch_size` pieces.
pub fn epoch_batches(
    shard: &[usize],
    batch_size: usize,
    seeds: &SeedStreams,
    client: u32,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let perm = fisher_yates(
        shard.len(),
        &mut seeds.rng(stream::BATCH_ORDER, &[client as u64, epoch as u64]),
    );
    let ordered: Vec<usize> = perm.into_iter().map(|i| shard[i]).collect();
    chunk_ranges(ordered.len(), batch_size)
        .into_iter()
        .map(|r| ordered[r].to_vec())
        .collect()
}
