//! Global collector: buffers smashed batches per client until a barrier,
//! pools and shuffles them sample by sample for one server pass, then
//! de-shuffles the pooled gradient and routes each row back to its owner.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde_json::json;

use crate::error::{Error, Result};
use crate::split::{GradientBatch, SmashedBatch};
use crate::tensor::Tensor;

/// Uniform random permutation of `0..n` by Fisher–Yates.
pub fn fisher_yates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

pub fn invert(permutation: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; permutation.len()];
    for (i, &p) in permutation.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Where a pooled sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOrigin {
    pub client_id: u32,
    pub epoch: u32,
    pub batch_seq: u32,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Segment {
    client_id: u32,
    epoch: u32,
    batch_seq: u32,
    start: usize,
    len: usize,
}

/// The shuffle applied at one barrier release. Pooled row `i` holds
/// concatenated sample `permutation[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationRecord {
    pub permutation: Vec<usize>,
    /// Origin of each concatenated (pre-shuffle) sample.
    pub segment_map: Vec<SampleOrigin>,
    pub seed: u64,
    segments: Vec<Segment>,
}

impl PermutationRecord {
    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    /// Origin of pooled row `i`.
    pub fn origin_of_pooled(&self, i: usize) -> SampleOrigin {
        self.segment_map[self.permutation[i]]
    }
}

/// Keyed buffer of smashed batches with an `ceil(alpha * active)` barrier.
#[derive(Debug)]
pub struct ActivationStack {
    n_clients: usize,
    alpha: f64,
    active: usize,
    entries: BTreeMap<u32, VecDeque<SmashedBatch>>,
    count: usize,
    seen: BTreeSet<(u32, u32, u32)>,
    log: Option<Vec<String>>,
}

impl ActivationStack {
    pub fn new(n_clients: usize, alpha: f64) -> Result<Self> {
        if n_clients == 0 {
            return Err(Error::Collector("need at least one client".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Collector(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            n_clients,
            alpha,
            active: n_clients,
            entries: BTreeMap::new(),
            count: 0,
            seen: BTreeSet::new(),
            log: None,
        })
    }

    /// Records push, barrier, shuffle and routing events as JSON lines.
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn take_log(&mut self) -> Vec<String> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn event(&mut self, value: serde_json::Value) {
        if let Some(log) = &mut self.log {
            log.push(value.to_string());
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    /// Clients still contributing this epoch. Lowers the barrier once some
    /// shards are exhausted.
    pub fn set_active(&mut self, active: usize) {
        self.active = active.clamp(1, self.n_clients);
    }

    pub fn threshold(&self) -> usize {
        ((self.alpha * self.active as f64).ceil() as usize).max(1)
    }

    pub fn per_client_cap(&self) -> usize {
        self.alpha.ceil() as usize
    }

    pub fn barrier_met(&self) -> bool {
        self.count >= self.threshold()
    }

    /// Buffers a batch; returns whether the barrier is now met.
    pub fn push(&mut self, sb: SmashedBatch) -> Result<bool> {
        if sb.client_id as usize >= self.n_clients {
            return Err(Error::Collector(format!(
                "client {} out of range for {} clients",
                sb.client_id, self.n_clients
            )));
        }
        let key = (sb.client_id, sb.epoch, sb.batch_seq);
        if self.seen.contains(&key) {
            return Err(Error::Collector(format!(
                "duplicate batch {}/{} from client {}",
                sb.epoch, sb.batch_seq, sb.client_id
            )));
        }
        let cap = self.per_client_cap();
        let queued = self.entries.get(&sb.client_id).map_or(0, VecDeque::len);
        if queued >= cap {
            return Err(Error::Collector(format!(
                "client {} already has {queued} batches buffered (limit {cap})",
                sb.client_id
            )));
        }
        if let Some(first) = self.entries.values().flatten().next() {
            if first.activations.shape()[1..] != sb.activations.shape()[1..] {
                return Err(Error::Shape(format!(
                    "activations {:?} cannot be pooled with {:?}",
                    sb.activations.shape(),
                    first.activations.shape()
                )));
            }
        }
        self.seen.insert(key);
        self.event(json!({
            "event": "push",
            "client": sb.client_id,
            "epoch": sb.epoch,
            "batch": sb.batch_seq,
            "samples": sb.len(),
        }));
        self.entries.entry(sb.client_id).or_default().push_back(sb);
        self.count += 1;
        let met = self.barrier_met();
        if met {
            let (count, threshold) = (self.count, self.threshold());
            self.event(json!({"event": "barrier", "count": count, "threshold": threshold}));
        }
        Ok(met)
    }

    /// Drains the stack into one pooled batch permuted with a Fisher–Yates
    /// draw seeded by `seed`. A pool holding a single client's samples is
    /// left in its original order.
    pub fn shuffle(&mut self, seed: u64) -> Result<(Tensor, Vec<usize>, PermutationRecord)> {
        if !self.barrier_met() {
            return Err(Error::Collector(format!(
                "barrier not met: {} of {} batches",
                self.count,
                self.threshold()
            )));
        }
        let batches: Vec<SmashedBatch> = std::mem::take(&mut self.entries)
            .into_values()
            .flatten()
            .collect();
        self.count = 0;

        let mut segments = Vec::with_capacity(batches.len());
        let mut segment_map = Vec::new();
        let mut labels = Vec::new();
        for sb in &batches {
            segments.push(Segment {
                client_id: sb.client_id,
                epoch: sb.epoch,
                batch_seq: sb.batch_seq,
                start: segment_map.len(),
                len: sb.len(),
            });
            for offset in 0..sb.len() {
                segment_map.push(SampleOrigin {
                    client_id: sb.client_id,
                    epoch: sb.epoch,
                    batch_seq: sb.batch_seq,
                    offset,
                });
            }
            labels.extend_from_slice(&sb.labels);
        }
        let n = segment_map.len();
        let single_owner = batches.iter().all(|b| b.client_id == batches[0].client_id);
        let permutation = if single_owner {
            (0..n).collect()
        } else {
            fisher_yates(n, &mut SplitMix64::seed_from_u64(seed))
        };
        let parts: Vec<&Tensor> = batches.iter().map(|b| &b.activations).collect();
        let pooled = Tensor::concat_rows(&parts)?.select_rows(&permutation)?;
        let pooled_labels = permutation.iter().map(|&p| labels[p]).collect();
        self.event(
            json!({"event": "shuffle", "seed": seed, "samples": n, "identity": single_owner}),
        );
        Ok((
            pooled,
            pooled_labels,
            PermutationRecord {
                permutation,
                segment_map,
                seed,
                segments,
            },
        ))
    }

    /// [`deshuffle_route`] with routing events logged.
    pub fn route(
        &mut self,
        record: &PermutationRecord,
        pooled_grad: &Tensor,
    ) -> Result<Vec<GradientBatch>> {
        let out = deshuffle_route(record, pooled_grad)?;
        if self.log.is_some() {
            for gb in &out {
                let rows: Vec<usize> = (0..record.len())
                    .filter(|&i| {
                        let o = record.origin_of_pooled(i);
                        o.client_id == gb.client_id && o.batch_seq == gb.batch_seq
                    })
                    .collect();
                self.event(json!({
                    "event": "route",
                    "client": gb.client_id,
                    "epoch": gb.epoch,
                    "batch": gb.batch_seq,
                    "pooled_rows": rows,
                }));
            }
        }
        Ok(out)
    }
}

/// Undoes the shuffle on a pooled gradient and splits it into one
/// [`GradientBatch`] per contributed batch, rows in original order.
pub fn deshuffle_route(
    record: &PermutationRecord,
    pooled_grad: &Tensor,
) -> Result<Vec<GradientBatch>> {
    if pooled_grad.rank() < 2 || pooled_grad.outer() != record.len() {
        return Err(Error::Collector(format!(
            "pooled gradient {:?} for {} pooled samples",
            pooled_grad.shape(),
            record.len()
        )));
    }
    let restored = pooled_grad.select_rows(&invert(&record.permutation))?;
    record
        .segments
        .iter()
        .map(|s| {
            let rows: Vec<usize> = (s.start..s.start + s.len).collect();
            Ok(GradientBatch {
                client_id: s.client_id,
                epoch: s.epoch,
                batch_seq: s.batch_seq,
                grad: restored.select_rows(&rows)?,
            })
        })
        .collect()
}
