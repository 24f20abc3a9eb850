//! End-to-end runs: data and model preparation from a [`RunConfig`], protocol
//! execution over the chosen transport, and report assembly.

use std::net::{SocketAddr, TcpListener};
use std::time::{Duration, Instant};

use crate::config::{DatasetSource, ModelSource, RunConfig};
use crate::data::{
    self, BlobFrame, Dataset, Normalization, PartitionMode, PartitionPlan, SynthShape,
};
use crate::error::{Error, Result};
use crate::fedserver::weight_divergence;
use crate::nn::{checkpoint, LayerSpec, ModelDescription, ModelGraph};
use crate::protocol::{
    run_centralized, run_server, ClientActor, CostCheck, EpochRecord, ForgettingTrace,
    ModelSummary, Protocol, RunReport, ServerOutput, ServerSetup, REPORT_VERSION,
};
use crate::rng::{stream, SeedStreams};
use crate::split::{split, stored_fraction, trainable_fraction, SplitSpec};
use crate::transport::link::{connect, local_listener, serve, SocketLink};
use crate::transport::{predict_cost, CostModel, LocalLink, ThreadedLink};

/// How clients are hosted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Execution {
    /// All clients answer synchronously on the server's thread.
    Local,
    /// One thread per client, connected by channels.
    Threaded,
    /// One thread per client, each connected over localhost TCP.
    Socket,
    /// Wait for remote clients on this address.
    Listen(String),
}

/// Everything derived from the configuration before training starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seeds: SeedStreams,
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Option<Normalization>,
    pub plan: PartitionPlan,
    pub test_plan: PartitionPlan,
    pub description: ModelDescription,
    /// Freshly initialized full model.
    pub model: ModelGraph,
    pub cut: SplitSpec,
}

fn load_data(cfg: &RunConfig, seeds: &SeedStreams) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSource::Synth {
            classes,
            per_class,
            test_per_class,
            dim,
            separation,
            image_side,
        } => {
            let shape = image_side.map_or(SynthShape::Flat, |side| SynthShape::Image { side });
            let frame = BlobFrame::new(
                *classes,
                *dim,
                *separation,
                shape,
                &mut seeds.rng(stream::DATA, &[0]),
            )?;
            let train = frame.sample(*per_class, &mut seeds.rng(stream::DATA, &[1]))?;
            let test = frame.sample(*test_per_class, &mut seeds.rng(stream::DATA, &[2]))?;
            Ok((train, test))
        }
        DatasetSource::Csv { train, test } => Ok((data::load_csv(train)?, data::load_csv(test)?)),
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            data::load_idx(train_images, train_labels)?,
            data::load_idx(test_images, test_labels)?,
        )),
    }
}

const fn batch_norm(channels: usize) -> LayerSpec {
    LayerSpec::BatchNorm {
        channels,
        eps: 1e-5,
        momentum: 0.1,
    }
}

/// Layer list of a built-in model for the given sample shape.
pub fn builtin_description(
    source: &ModelSource,
    sample_shape: &[usize],
    classes: usize,
) -> Result<ModelDescription> {
    let layers = match (source, sample_shape) {
        (ModelSource::TinyCnn { width, hidden }, &[c, h, w]) => {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "tiny-cnn needs images of at least 2x2, got {h}x{w}"
                )));
            }
            vec![
                LayerSpec::Conv2d {
                    in_channels: c,
                    out_channels: *width,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: false,
                },
                batch_norm(*width),
                LayerSpec::Relu,
                LayerSpec::AvgPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: width * (h / 2) * (w / 2),
                    outputs: *hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: *hidden,
                    outputs: classes,
                },
            ]
        }
        (ModelSource::TinyCnn { .. }, other) => {
            return Err(Error::Config(format!(
                "tiny-cnn needs [C, H, W] samples, got {other:?}"
            )));
        }
        (ModelSource::Mlp { hidden }, shape) => {
            let d: usize = shape.iter().product();
            let mut l = Vec::new();
            if shape.len() > 1 {
                l.push(LayerSpec::Flatten);
            }
            l.extend([
                LayerSpec::Dense {
                    inputs: d,
                    outputs: *hidden,
                },
                batch_norm(*hidden),
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: *hidden,
                    outputs: *hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: *hidden,
                    outputs: classes,
                },
            ]);
            l
        }
        (ModelSource::File(path), _) => {
            let text = std::fs::read_to_string(path)?;
            return text.parse();
        }
    };
    Ok(ModelDescription {
        input_shape: sample_shape.to_vec(),
        layers,
    })
}

fn test_plan(cfg: &RunConfig, seeds: &SeedStreams, test: &Dataset) -> Result<PartitionPlan> {
    data::partition(
        &test.labels,
        test.n_classes,
        cfg.test_partition,
        cfg.clients,
        &mut seeds.rng(stream::EVAL_PARTITION, &[]),
    )
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let seeds = SeedStreams::new(cfg.seed);
    let (mut train, mut test) = load_data(cfg, &seeds)?;
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::Data(format!(
            "train samples are {:?}, test samples {:?}",
            train.sample_shape(),
            test.sample_shape()
        )));
    }
    let classes = train.n_classes.max(test.n_classes);
    train.n_classes = classes;
    test.n_classes = classes;
    let normalization = if cfg.normalize {
        let n = Normalization::fit(&train);
        n.apply(&mut train)?;
        n.apply(&mut test)?;
        Some(n)
    } else {
        None
    };
    let plan = data::partition(
        &train.labels,
        classes,
        cfg.partition,
        cfg.clients,
        &mut seeds.rng(stream::PARTITION, &[]),
    )?;
    let test_plan = test_plan(cfg, &seeds, &test)?;
    let description = builtin_description(&cfg.model, train.sample_shape(), classes)?;
    if description.input_shape != train.sample_shape() {
        return Err(Error::Config(format!(
            "model expects {:?} samples, data has {:?}",
            description.input_shape,
            train.sample_shape()
        )));
    }
    let model = description.build(&mut seeds.rng(stream::INIT, &[]))?;
    if model.output_shape() != [classes] {
        return Err(Error::Config(format!(
            "model outputs {:?}, data has {classes} classes",
            model.output_shape()
        )));
    }
    let cut = cfg
        .cut
        .map_or_else(|| SplitSpec::default_for(&model.specs()), SplitSpec::new);
    cut.validate(model.layers().len())?;
    Ok(Prepared {
        seeds,
        train,
        test,
        normalization,
        plan,
        test_plan,
        description,
        model,
        cut,
    })
}

impl Prepared {
    /// Initial client-side and server-side models for the configured
    /// protocol; FL keeps the whole model on the clients.
    pub fn initial_models(&self, protocol: Protocol) -> Result<(ModelGraph, Option<ModelGraph>)> {
        if protocol.is_split() {
            let (c, s) = split(self.model.clone(), self.cut)?;
            Ok((c, Some(s)))
        } else {
            Ok((self.model.clone(), None))
        }
    }

    /// The actor serving client `id`.
    pub fn client(&self, cfg: &RunConfig, id: u32) -> Result<ClientActor> {
        let p = &cfg.protocol;
        let shard = self
            .plan
            .assignments
            .get(id as usize)
            .ok_or_else(|| Error::Protocol(format!("no client {id}")))?;
        let (model, _) = self.initial_models(p.protocol)?;
        Ok(ClientActor::new(
            id,
            p.protocol,
            model,
            p.optimizer.clone(),
            self.train.subset(shard)?,
            p.batch_size,
            self.seeds,
            p.augment,
            p.aggregation,
        ))
    }

    pub fn model_summary(&self, protocol: Protocol) -> Result<ModelSummary> {
        let (c, s) = split(self.model.clone(), self.cut)?;
        Ok(ModelSummary {
            description: self.description.to_string(),
            cut_index: protocol.is_split().then_some(self.cut.cut_index),
            client_params: c.param_count(),
            server_params: s.param_count(),
            client_trainable: c.trainable_param_count(),
            server_trainable: s.trainable_param_count(),
            beta_trainable: trainable_fraction(&c, &s),
            beta_stored: stored_fraction(&c, &s),
            smashed_values_per_sample: c.output_shape().iter().product(),
            client_flops_per_sample: c.flops_per_sample(),
            server_flops_per_sample: s.flops_per_sample(),
        })
    }

    /// Cost-model parameters of this experiment.
    pub fn cost_model(&self, cfg: &RunConfig) -> Result<CostModel> {
        let summary = self.model_summary(Protocol::Sfpl)?;
        Ok(CostModel {
            n_clients: cfg.clients,
            model_bytes: checkpoint::value_bytes(&self.model) as f64,
            beta: summary.beta_stored,
            smashed_bytes: (summary.smashed_values_per_sample * std::mem::size_of::<f32>()) as f64,
            dataset_size: self.train.len() as f64,
            rate: cfg.cost.rate,
            epoch_time: cfg.cost.epoch_time,
            fedavg_time: cfg.cost.fedavg_time,
        })
    }
}

fn timeout(cfg: &RunConfig) -> Option<Duration> {
    cfg.protocol.timeout_ms.map(Duration::from_millis)
}

fn serve_over_listener(
    cfg: &RunConfig,
    prep: &Prepared,
    listener: &TcpListener,
) -> Result<ServerOutput> {
    let link = SocketLink::accept(listener, cfg.clients, timeout(cfg))?;
    let result = run_server(setup(cfg, prep)?, link);
    match result {
        Ok((out, link)) => {
            link.close();
            Ok(out)
        }
        Err(e) => Err(e),
    }
}

fn setup<'a>(cfg: &'a RunConfig, prep: &'a Prepared) -> Result<ServerSetup<'a>> {
    let (client, server) = prep.initial_models(cfg.protocol.protocol)?;
    Ok(ServerSetup {
        config: &cfg.protocol,
        seeds: prep.seeds,
        initial_client: client,
        initial_server: server,
        shard_sizes: prep.plan.shard_sizes(),
        test: &prep.test,
        test_shards: &prep.test_plan.assignments,
        test_on_average: cfg.test_partition == PartitionMode::Iid,
    })
}

/// Trains the configured protocol and returns the raw per-epoch outcomes.
pub fn execute(cfg: &RunConfig, prep: &Prepared, exec: &Execution) -> Result<ServerOutput> {
    let p = &cfg.protocol;
    p.validate()?;
    if p.protocol == Protocol::Centralized {
        return run_centralized(
            p,
            prep.seeds,
            prep.model.clone(),
            &prep.train,
            &prep.test,
            &prep.test_plan.assignments,
        );
    }
    let n = cfg.clients as u32;
    match exec {
        Execution::Local => {
            let actors = (0..n)
                .map(|k| prep.client(cfg, k))
                .collect::<Result<Vec<_>>>()?;
            let (out, link) = run_server(setup(cfg, prep)?, LocalLink::new(actors))?;
            if let Some(a) = link.clients().iter().find(|a| a.has_pending()) {
                return Err(Error::Protocol(format!(
                    "client {} ended with an unanswered batch",
                    a.id()
                )));
            }
            Ok(out)
        }
        Execution::Threaded => {
            let actors = (0..n)
                .map(|k| prep.client(cfg, k))
                .collect::<Result<Vec<_>>>()?;
            let link = ThreadedLink::spawn(actors, timeout(cfg));
            let (out, link) = run_server(setup(cfg, prep)?, link)?;
            link.join();
            Ok(out)
        }
        Execution::Socket => {
            let (listener, addr) = local_listener()?;
            let mut handles = Vec::new();
            for k in 0..n {
                let mut actor = prep.client(cfg, k)?;
                handles.push(std::thread::spawn(move || -> Result<()> {
                    let (stream, id) = connect(addr, k)?;
                    serve(stream, id, &mut actor)
                }));
            }
            let out = serve_over_listener(cfg, prep, &listener);
            drop(listener);
            for h in handles {
                let r = h
                    .join()
                    .map_err(|_| Error::Transport("client thread panicked".into()))?;
                if out.is_ok() {
                    r?;
                }
            }
            out
        }
        Execution::Listen(addr) => {
            let listener = TcpListener::bind(addr.as_str())?;
            serve_over_listener(cfg, prep, &listener)
        }
    }
}

/// Connects to a listening server as a client of the given configuration
/// and serves until the run ends. Returns the assigned id.
pub fn run_remote_client(cfg: &RunConfig, addr: &str, wanted: u32) -> Result<u32> {
    let prep = prepare(cfg)?;
    let addr: SocketAddr = addr
        .parse()
        .map_err(|e| Error::Transport(format!("bad address `{addr}`: {e}")))?;
    let (stream, id) = connect(addr, wanted)?;
    let mut actor = prep.client(cfg, id)?;
    serve(stream, id, &mut actor)?;
    Ok(id)
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub output: ServerOutput,
}

/// Prepares, trains and reports one configured experiment.
pub fn run(cfg: &RunConfig, exec: &Execution) -> Result<RunOutcome> {
    let start = Instant::now();
    let prep = prepare(cfg)?;
    let output = execute(cfg, &prep, exec)?;
    let protocol = cfg.protocol.protocol;

    let divergence: Vec<f64> = if cfg.divergence
        && cfg.partition != PartitionMode::Iid
        && protocol != Protocol::Centralized
    {
        let twin = cfg.iid_twin();
        let twin_prep = prepare(&twin)?;
        let reference = execute(&twin, &twin_prep, &Execution::Local)?;
        output
            .globals
            .iter()
            .zip(&reference.globals)
            .map(|(a, b)| weight_divergence(a, b))
            .collect::<Result<_>>()?
    } else {
        vec![0.0; output.epochs.len()]
    };

    let epochs: Vec<EpochRecord> = output
        .epochs
        .iter()
        .zip(&divergence)
        .map(|(e, &d)| {
            let mut r = EpochRecord {
                epoch: e.epoch,
                lr: e.lr,
                train_loss: e.train_loss,
                metrics: e.eval.metrics,
                per_class_accuracy: e.eval.per_class_accuracy.clone(),
                visit_order: e.visit_order.clone(),
                last_visited: if protocol == Protocol::Centralized {
                    None
                } else {
                    e.visit_order.last().copied()
                },
                divergence: d,
                traffic: e.traffic.clone(),
                bytes_up: 0,
                bytes_down: 0,
                overhead_up: 0,
                overhead_down: 0,
            };
            r.total_traffic();
            r
        })
        .collect();

    let forgetting = (cfg.partition == PartitionMode::PositiveLabels
        && protocol != Protocol::Centralized)
        .then(|| {
            ForgettingTrace {
                per_class_accuracy: epochs
                    .iter()
                    .map(|e| e.per_class_accuracy.clone())
                    .collect(),
                last_visited_class: epochs
                    .iter()
                    .map(|e| e.last_visited.unwrap_or(0) as usize)
                    .collect(),
            }
            .summary(cfg.forgetting_sigma)
        });

    let cost = if protocol == Protocol::Centralized {
        None
    } else {
        let model = prep.cost_model(cfg)?;
        let measured_per_client: Vec<u64> = epochs
            .first()
            .map(|e| e.traffic.iter().map(|t| t.value()).collect())
            .unwrap_or_default();
        Some(CostCheck {
            model,
            predicted: predict_cost(&model, protocol)?,
            measured_total: measured_per_client.iter().sum(),
            measured_per_client,
        })
    };

    let report = RunReport {
        format_version: REPORT_VERSION,
        protocol: protocol.name().to_string(),
        scenario: cfg.scenario(),
        bn_mode: cfg.protocol.bn_mode.name().to_string(),
        seed: cfg.seed,
        config: cfg.to_string(),
        seed_streams: prep.seeds.manifest().into_iter().collect(),
        model: prep.model_summary(protocol)?,
        normalization: prep.normalization.clone(),
        train_shard_sizes: prep.plan.shard_sizes(),
        test_shard_sizes: prep.test_plan.shard_sizes(),
        test_aggregation: if cfg.test_partition == PartitionMode::Iid {
            "every test shard is evaluated with the sample-weighted average of the client portions; \
             predictions are pooled into one confusion matrix"
        } else {
            "each client evaluates its own test shard with its own portion; predictions are pooled into one \
             confusion matrix"
        }
        .to_string(),
        cost,
        final_metrics: epochs.last().map(|e| e.metrics),
        epochs,
        forgetting,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, output })
}
