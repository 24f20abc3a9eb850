//! Server-side round procedures. The server drives every exchange over a
//! [`CountingLink`], so byte counts cover exactly what crosses the wire.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::metrics::{evaluate, EvalOutcome, Portions};
use super::{chunk_ranges, epoch_batches, visit_order, Augment, Protocol, ProtocolConfig};
use crate::collector::ActivationStack;
use crate::data::{random_hflip, Dataset};
use crate::error::{Error, Result};
use crate::fedserver::{aggregate, apply_shared, AggregationMode, AggregationPolicy};
use crate::nn::{ModelGraph, OptimizerState};
use crate::rng::{stream, SeedStreams};
use crate::split::{GradientBatch, ServerPortion};
use crate::tensor::Tensor;
use crate::transport::{Control, ControlKind, CountingLink, Link, Traffic, WireMessage};

/// Inputs shared by every protocol run.
pub struct ServerSetup<'a> {
    pub config: &'a ProtocolConfig,
    pub seeds: SeedStreams,
    /// Client portion for split protocols, whole model otherwise.
    pub initial_client: ModelGraph,
    /// Server portion for split protocols.
    pub initial_server: Option<ModelGraph>,
    /// Training samples per client, used for sample-count weighting.
    pub shard_sizes: Vec<usize>,
    pub test: &'a Dataset,
    pub test_shards: &'a [Vec<usize>],
    /// Evaluate every test shard with the average of all client models,
    /// batch norm included, instead of each client's own model. Used for
    /// IID test sets, where no client's local statistics apply.
    pub test_on_average: bool,
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: EvalOutcome,
    pub visit_order: Vec<u32>,
    pub traffic: Vec<Traffic>,
}

#[derive(Debug, Clone)]
pub struct ServerOutput {
    pub epochs: Vec<EpochOutcome>,
    /// Aggregated client-side model after every epoch.
    pub globals: Vec<ModelGraph>,
    /// Each client's model as of the last evaluation.
    pub clients: Vec<ModelGraph>,
    pub server: Option<ModelGraph>,
    pub collector_log: Vec<String>,
}

fn control(kind: ControlKind, client: u32, epoch: usize) -> WireMessage {
    WireMessage::Control(Control::new(kind, client, epoch as u32))
}

/// Receives exactly `count` messages from each listed client.
fn recv_expected<L: Link>(
    link: &mut CountingLink<L>,
    expected: &BTreeMap<u32, usize>,
) -> Result<BTreeMap<u32, Vec<WireMessage>>> {
    let mut got: BTreeMap<u32, Vec<WireMessage>> = BTreeMap::new();
    let mut remaining: usize = expected.values().sum();
    while remaining > 0 {
        let (from, msg) = link.recv()?;
        if let WireMessage::Control(c) = &msg {
            if c.kind == ControlKind::Failed {
                return Err(Error::Protocol(format!(
                    "client {from} failed: {}",
                    c.detail
                )));
            }
        }
        let want = expected.get(&from).copied().unwrap_or(0);
        let slot = got.entry(from).or_default();
        if slot.len() >= want {
            return Err(Error::Protocol(format!(
                "unexpected {} message from client {from}",
                msg.name()
            )));
        }
        slot.push(msg);
        remaining -= 1;
    }
    Ok(got)
}

fn recv_one<L: Link>(link: &mut CountingLink<L>, from: u32) -> Result<WireMessage> {
    let mut got = recv_expected(link, &BTreeMap::from([(from, 1)]))?;
    Ok(got
        .remove(&from)
        .and_then(|mut v| v.pop())
        .expect("one message received"))
}

#[derive(Default)]
struct LossAcc {
    sum: f64,
    count: usize,
}

impl LossAcc {
    fn add(&mut self, mean: f64, n: usize) {
        self.sum += mean * n as f64;
        self.count += n;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Trains the server portion on one stack of activations, in server
/// mini-batches when configured, and returns the activation gradient.
fn server_pass(
    server: &mut ServerPortion,
    x: &Tensor,
    labels: &[usize],
    batch: Option<usize>,
    acc: &mut LossAcc,
) -> Result<Tensor> {
    let n = labels.len();
    match batch {
        Some(b) if b < n => {
            let mut parts = Vec::new();
            for r in chunk_ranges(n, b) {
                let rows: Vec<usize> = r.collect();
                let (loss, dx) = server.train_step(
                    &x.select_rows(&rows)?,
                    &labels[rows[0]..rows[0] + rows.len()],
                )?;
                acc.add(loss, rows.len());
                parts.push(dx);
            }
            Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
        }
        _ => {
            let (loss, dx) = server.train_step(x, labels)?;
            acc.add(loss, n);
            Ok(dx)
        }
    }
}

fn send_gradient<L: Link>(link: &mut CountingLink<L>, gb: GradientBatch) -> Result<()> {
    let to = gb.client_id;
    link.send(to, &WireMessage::Gradient(gb))
}

/// Runs a federated or split protocol over `link` and returns the per-epoch
/// outcomes together with the link.
pub fn run_server<L: Link>(setup: ServerSetup<'_>, link: L) -> Result<(ServerOutput, L)> {
    let cfg = setup.config;
    let n = link.n_clients();
    if n == 0 || setup.shard_sizes.len() != n || setup.test_shards.len() != n {
        return Err(Error::Protocol(format!(
            "{n} clients, {} training shards, {} test shards",
            setup.shard_sizes.len(),
            setup.test_shards.len()
        )));
    }
    if cfg.protocol == Protocol::Centralized {
        return Err(Error::Protocol(
            "centralized training has no clients to serve".into(),
        ));
    }
    if cfg.protocol.is_split() != setup.initial_server.is_some() {
        return Err(Error::Protocol(
            "split protocols need a server portion, FL must not have one".into(),
        ));
    }
    let mut link = CountingLink::new(link);
    let mut global = setup.initial_client.clone();
    let mut server = setup
        .initial_server
        .clone()
        .map(|m| ServerPortion::new(m, cfg.optimizer.clone()));
    let mut clients = vec![global.clone(); n];
    let mut stack = ActivationStack::new(n, cfg.alpha)?;
    if cfg.collector_log {
        stack = stack.with_log();
    }
    let mut out = ServerOutput {
        epochs: Vec::with_capacity(cfg.epochs),
        globals: Vec::with_capacity(cfg.epochs),
        clients: Vec::new(),
        server: None,
        collector_log: Vec::new(),
    };
    let all: Vec<u32> = (0..n as u32).collect();

    for epoch in 0..cfg.epochs {
        let order = visit_order(cfg.visit_order, n, &setup.seeds, epoch);
        let down = WireMessage::ModelDown(global.to_checkpoint()?);
        for &k in &all {
            link.send(k, &down)?;
            link.send(k, &control(ControlKind::EpochStart, k, epoch))?;
        }
        if let Some(s) = &mut server {
            s.set_epoch(epoch);
        }
        let mut acc = LossAcc::default();

        match cfg.protocol {
            Protocol::Fl => {
                for &k in &order {
                    link.send(k, &control(ControlKind::TrainLocal, k, epoch))?;
                }
                let expected = all.iter().map(|&k| (k, 2)).collect();
                for (k, msgs) in recv_expected(&mut link, &expected)? {
                    for msg in msgs {
                        match msg {
                            WireMessage::Control(c) if c.kind == ControlKind::LocalLoss => {
                                let mean: f64 = c.detail.parse().map_err(|_| {
                                    Error::Protocol(format!("bad loss report `{}`", c.detail))
                                })?;
                                acc.add(mean, setup.shard_sizes[k as usize]);
                            }
                            WireMessage::ModelUp(bytes) => {
                                clients[k as usize].load_checkpoint(&bytes)?
                            }
                            other => {
                                return Err(Error::Protocol(format!(
                                    "unexpected {} from client {k}",
                                    other.name()
                                )));
                            }
                        }
                    }
                }
            }
            Protocol::Sflv2 => {
                let s = server.as_mut().expect("split protocol");
                for &k in &order {
                    loop {
                        link.send(k, &control(ControlKind::Pull, k, epoch))?;
                        match recv_one(&mut link, k)? {
                            WireMessage::Smashed(sb) => {
                                let dx = server_pass(
                                    s,
                                    &sb.activations,
                                    &sb.labels,
                                    cfg.server_batch_size,
                                    &mut acc,
                                )?;
                                send_gradient(
                                    &mut link,
                                    GradientBatch {
                                        client_id: sb.client_id,
                                        epoch: sb.epoch,
                                        batch_seq: sb.batch_seq,
                                        grad: dx,
                                    },
                                )?;
                            }
                            WireMessage::Control(c) if c.kind == ControlKind::Exhausted => break,
                            other => {
                                return Err(Error::Protocol(format!(
                                    "unexpected {} from client {k}",
                                    other.name()
                                )));
                            }
                        }
                    }
                }
            }
            Protocol::Sfpl => {
                let s = server.as_mut().expect("split protocol");
                let mut queue: VecDeque<u32> = order.iter().copied().collect();
                let mut barrier = 0u64;
                while !queue.is_empty() {
                    stack.set_active(queue.len());
                    let mut members = BTreeSet::new();
                    loop {
                        let need = stack.threshold().saturating_sub(stack.count());
                        if need == 0 || queue.is_empty() {
                            break;
                        }
                        let mut picks = Vec::new();
                        for _ in 0..queue.len() {
                            if picks.len() == need {
                                break;
                            }
                            let k = queue.pop_front().expect("non-empty");
                            queue.push_back(k);
                            if !members.contains(&k) {
                                picks.push(k);
                            }
                        }
                        if picks.is_empty() {
                            break;
                        }
                        for &k in &picks {
                            link.send(k, &control(ControlKind::Pull, k, epoch))?;
                        }
                        let expected = picks.iter().map(|&k| (k, 1)).collect();
                        for (k, mut msgs) in recv_expected(&mut link, &expected)? {
                            match msgs.pop().expect("one reply") {
                                WireMessage::Smashed(sb) => {
                                    members.insert(k);
                                    stack.push(sb)?;
                                }
                                WireMessage::Control(c) if c.kind == ControlKind::Exhausted => {
                                    queue.retain(|&q| q != k);
                                }
                                other => {
                                    return Err(Error::Protocol(format!(
                                        "unexpected {} from client {k}",
                                        other.name()
                                    )));
                                }
                            }
                        }
                        stack.set_active(queue.len());
                    }
                    if stack.count() == 0 {
                        continue;
                    }
                    let seed = setup.seeds.seed(stream::SHUFFLE, &[epoch as u64, barrier]);
                    barrier += 1;
                    let (x, y, record) = stack.shuffle(seed)?;
                    let dx = server_pass(s, &x, &y, cfg.server_batch_size, &mut acc)?;
                    for gb in stack.route(&record, &dx)? {
                        send_gradient(&mut link, gb)?;
                    }
                }
                out.collector_log.extend(stack.take_log());
            }
            Protocol::Centralized => unreachable!("rejected above"),
        }

        if cfg.protocol.is_split() {
            for &k in &all {
                link.send(k, &control(ControlKind::Upload, k, epoch))?;
            }
            let expected = all.iter().map(|&k| (k, 1)).collect();
            for (k, mut msgs) in recv_expected(&mut link, &expected)? {
                match msgs.pop().expect("one reply") {
                    WireMessage::ModelUp(bytes) => clients[k as usize].load_checkpoint(&bytes)?,
                    other => {
                        return Err(Error::Protocol(format!(
                            "expected a model from client {k}, got {}",
                            other.name()
                        )));
                    }
                }
            }
        }

        global = aggregate(
            &clients.iter().collect::<Vec<_>>(),
            &setup.shard_sizes,
            cfg.aggregation,
        )?;
        for c in &mut clients {
            apply_shared(&global, c, cfg.aggregation);
        }
        let average = if setup.test_on_average {
            let all_shared = AggregationPolicy::new(
                AggregationMode::IncludeBatchNorm,
                cfg.aggregation.weighting,
            );
            let refs: Vec<&ModelGraph> = clients.iter().collect();
            Some(aggregate(&refs, &setup.shard_sizes, all_shared)?)
        } else {
            None
        };
        let portions: Vec<Portions> = clients
            .iter()
            .map(|c| Portions {
                client: average.as_ref().unwrap_or(c),
                server: server.as_ref().map(ServerPortion::model),
            })
            .collect();
        let eval = evaluate(
            &portions,
            setup.test,
            setup.test_shards,
            cfg.bn_mode,
            cfg.eval_batch_size,
        )?;
        out.epochs.push(EpochOutcome {
            epoch,
            lr: cfg.optimizer.lr_at(epoch),
            train_loss: acc.mean(),
            eval,
            visit_order: order,
            traffic: link.counter_mut().take(),
        });
        out.globals.push(global.clone());
    }

    for &k in &all {
        link.send(k, &control(ControlKind::Shutdown, k, cfg.epochs))?;
    }
    out.clients = clients;
    out.server = server.map(ServerPortion::into_model);
    Ok((out, link.into_inner()))
}

/// Trains the whole model on all training data, visiting samples in the
/// order a lone client would.
pub fn run_centralized(
    config: &ProtocolConfig,
    seeds: SeedStreams,
    mut model: ModelGraph,
    train: &Dataset,
    test: &Dataset,
    test_shards: &[Vec<usize>],
) -> Result<ServerOutput> {
    let mut opt = OptimizerState::new(config.optimizer.clone());
    let all: Vec<usize> = (0..train.len()).collect();
    let mut out = ServerOutput {
        epochs: Vec::with_capacity(config.epochs),
        globals: Vec::with_capacity(config.epochs),
        clients: Vec::new(),
        server: None,
        collector_log: Vec::new(),
    };
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let mut acc = LossAcc::default();
        for (seq, batch) in epoch_batches(&all, config.batch_size, &seeds, 0, epoch)
            .iter()
            .enumerate()
        {
            let (mut x, y) = train.batch(batch)?;
            if config.augment == Augment::Hflip {
                random_hflip(
                    &mut x,
                    &mut seeds.rng(stream::AUGMENT, &[0, epoch as u64, seq as u64]),
                )?;
            }
            let (logits, cache) = model.forward(&x, crate::nn::Mode::Train)?;
            let (loss, dl) = crate::nn::cross_entropy(&logits, &y)?;
            let (grads, _) = model.backward(&cache, &dl)?;
            opt.step(&mut model, &grads)?;
            acc.add(loss, y.len());
        }
        let portions = vec![
            Portions {
                client: &model,
                server: None,
            };
            test_shards.len()
        ];
        let eval = evaluate(
            &portions,
            test,
            test_shards,
            config.bn_mode,
            config.eval_batch_size,
        )?;
        out.epochs.push(EpochOutcome {
            epoch,
            lr: config.optimizer.lr_at(epoch),
            train_loss: acc.mean(),
            eval,
            visit_order: vec![0],
            traffic: Vec::new(),
        });
        out.globals.push(model.clone());
    }
    out.clients = vec![model];
    Ok(out)
}
