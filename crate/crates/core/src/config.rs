//! Declarative run configuration in a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and has a
//! default; unknown and repeated keys are errors. All problems are reported
//! together, each with its line number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Display, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::PartitionMode;
use crate::error::{Error, Result};
use crate::fedserver::{AggregationMode, AggregationPolicy, Weighting};
use crate::nn::OptimizerConfig;
use crate::protocol::{Augment, BnMode, Protocol, ProtocolConfig, VisitOrder};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Gaussian blobs; `image_side` makes samples `[1, side, side]`.
    Synth {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        separation: f64,
        image_side: Option<usize>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    /// conv, batch norm, relu, pool, then a two-layer dense head.
    TinyCnn { width: usize, hidden: usize },
    /// dense, batch norm, relu, then a two-layer dense head.
    Mlp { hidden: usize },
    /// A model description file.
    File(PathBuf),
}

/// Cost-model parameters that cannot be measured from the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostOverrides {
    /// Link rate in bytes per second.
    pub rate: f64,
    /// Seconds per epoch of full-model compute.
    pub epoch_time: f64,
    /// Seconds per full-model aggregation.
    pub fedavg_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub protocol: ProtocolConfig,
    pub clients: usize,
    pub partition: PartitionMode,
    pub test_partition: PartitionMode,
    pub dataset: DatasetSource,
    pub normalize: bool,
    pub model: ModelSource,
    /// Layers held by clients; `None` picks the layer after the first
    /// batch norm and relu.
    pub cut: Option<usize>,
    pub cost: CostOverrides,
    pub out_dir: PathBuf,
    /// Also train a paired IID run and report weight divergence.
    pub divergence: bool,
    pub forgetting_sigma: f64,
}

/// Bundled default: ten-class 8x8 blobs split over ten clients by label,
/// trained with SFPL.
pub const DEFAULT_CONFIG: &str = "\
# ten single-class clients on 8x8 gaussian blobs
protocol = sfpl
seed = 1
epochs = 20
clients = 10
partition = positive_labels
test_partition = iid
dataset = synth
classes = 10
per_class = 200
test_per_class = 50
image_side = 8
separation = 10
model = tiny-cnn
width = 8
hidden = 32
batch_size = 4
lr = 0.02
momentum = 0.9
weight_decay = 0.0005
milestones = none
bn_mode = rmsd
out_dir = out
";

fn mode_name(m: PartitionMode) -> &'static str {
    match m {
        PartitionMode::Iid => "iid",
        PartitionMode::PositiveLabels => "positive_labels",
    }
}

fn parse_partition(s: &str) -> std::result::Result<PartitionMode, String> {
    match s {
        "iid" => Ok(PartitionMode::Iid),
        "positive_labels" | "noniid" => Ok(PartitionMode::PositiveLabels),
        _ => Err(format!("expected iid or positive_labels, got `{s}`")),
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{s}`")),
    }
}

fn scenario_part(m: PartitionMode) -> &'static str {
    match m {
        PartitionMode::Iid => "iid",
        PartitionMode::PositiveLabels => "noniid",
    }
}

struct Fields {
    entries: BTreeMap<String, (usize, String)>,
    used: BTreeSet<String>,
    errors: Vec<(usize, String)>,
}

impl Fields {
    fn parse(text: &str) -> Self {
        let mut f = Fields {
            entries: BTreeMap::new(),
            used: BTreeSet::new(),
            errors: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                f.errors
                    .push((line, format!("expected `key = value`, got `{body}`")));
                continue;
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some((first, _)) = f.entries.get(&k) {
                f.errors
                    .push((line, format!("`{k}` already set on line {first}")));
                continue;
            }
            f.entries.insert(k, (line, v));
        }
        f
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.0)
    }

    fn with<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> T {
        self.used.insert(key.to_string());
        match self.entries.get(key) {
            None => default,
            Some((line, v)) => match parse(v) {
                Ok(x) => x,
                Err(e) => {
                    self.errors.push((*line, format!("{key}: {e}")));
                    default
                }
            },
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: Display,
    {
        self.with(key, default, |s| {
            s.parse::<T>().map_err(|e| format!("{e} (`{s}`)"))
        })
    }

    /// `none` or a value.
    fn opt<T: FromStr>(&mut self, key: &str, default: Option<T>) -> Option<T>
    where
        T::Err: Display,
    {
        self.with(key, default, |s| {
            if s == "none" {
                Ok(None)
            } else {
                s.parse::<T>().map(Some).map_err(|e| format!("{e} (`{s}`)"))
            }
        })
    }

    fn path(&mut self, key: &str, needed: bool) -> PathBuf {
        self.used.insert(key.to_string());
        match self.entries.get(key) {
            Some((_, v)) => PathBuf::from(v),
            None => {
                if needed {
                    self.errors
                        .push((0, format!("{key}: required for this dataset")));
                }
                PathBuf::new()
            }
        }
    }

    fn check(&mut self, key: &str, ok: bool, msg: impl Into<String>) {
        if !ok {
            let line = self.line(key);
            self.errors.push((line, format!("{key}: {}", msg.into())));
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::parse(text);
        let defaults = OptimizerConfig::default();

        let seed = f.get("seed", 1u64);
        let protocol: Protocol = f.with("protocol", Protocol::Sfpl, |s| {
            s.parse().map_err(|e: Error| e.to_string())
        });
        let epochs = f.get("epochs", 20usize);
        let batch_size = f.get("batch_size", 4usize);
        let server_batch_size = f.opt("server_batch_size", None::<usize>);
        let eval_batch_size = f.get("eval_batch_size", 50usize);
        let alpha = f.get("alpha", 1.0f64);
        let bn_mode = f.with("bn_mode", BnMode::Rmsd, |s| match s {
            "rmsd" => Ok(BnMode::Rmsd),
            "cmsd" => Ok(BnMode::Cmsd),
            _ => Err(format!("expected rmsd or cmsd, got `{s}`")),
        });
        let default_mode = if protocol == Protocol::Sfpl {
            AggregationMode::ExcludeBatchNorm
        } else {
            AggregationMode::IncludeBatchNorm
        };
        let agg_mode = f.with("aggregation", default_mode, |s| match s {
            "auto" => Ok(default_mode),
            "exclude_bn" => Ok(AggregationMode::ExcludeBatchNorm),
            "include_bn" => Ok(AggregationMode::IncludeBatchNorm),
            _ => Err(format!(
                "expected auto, exclude_bn or include_bn, got `{s}`"
            )),
        });
        let weighting = f.with("weighting", Weighting::BySampleCount, |s| match s {
            "samples" => Ok(Weighting::BySampleCount),
            "uniform" => Ok(Weighting::Uniform),
            _ => Err(format!("expected samples or uniform, got `{s}`")),
        });
        let visit = f.with("visit_order", VisitOrder::RandomPerEpoch, |s| match s {
            "random" => Ok(VisitOrder::RandomPerEpoch),
            "fixed" => Ok(VisitOrder::Fixed),
            _ => Err(format!("expected random or fixed, got `{s}`")),
        });
        let augment = f.with("augment", Augment::None, |s| match s {
            "none" => Ok(Augment::None),
            "hflip" => Ok(Augment::Hflip),
            _ => Err(format!("expected none or hflip, got `{s}`")),
        });
        let optimizer = OptimizerConfig {
            lr: f.get("lr", defaults.lr),
            momentum: f.get("momentum", defaults.momentum),
            weight_decay: f.get("weight_decay", defaults.weight_decay),
            milestones: f.with("milestones", defaults.milestones.clone(), |s| {
                if s == "none" {
                    return Ok(Vec::new());
                }
                s.split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|e| format!("{e} (`{p}`)"))
                    })
                    .collect()
            }),
            gamma: f.get("lr_gamma", defaults.gamma),
        };
        let timeout_ms = f.opt("timeout_ms", None::<u64>);
        let collector_log = f.with("collector_log", false, parse_bool);

        let clients = f.get("clients", 10usize);
        let partition = f.with("partition", PartitionMode::PositiveLabels, parse_partition);
        let test_partition = f.with("test_partition", PartitionMode::Iid, parse_partition);

        let kind = f.get("dataset", "synth".to_string());
        // every dataset key counts as known, whichever source is chosen
        let classes = f.get("classes", 10usize);
        let per_class = f.get("per_class", 200usize);
        let test_per_class = f.get("test_per_class", 50usize);
        let image_side = f.opt("image_side", Some(8usize));
        let dim = f.get("dim", image_side.map_or(64, |s| s * s));
        let separation = f.get("separation", 10.0f64);
        let csv = kind == "csv";
        let idx = kind == "idx";
        let train_file = f.path("train_file", csv);
        let test_file = f.path("test_file", csv);
        let train_images = f.path("train_images", idx);
        let train_labels = f.path("train_labels", idx);
        let test_images = f.path("test_images", idx);
        let test_labels = f.path("test_labels", idx);
        let dataset = match kind.as_str() {
            "synth" => DatasetSource::Synth {
                classes,
                per_class,
                test_per_class,
                dim,
                separation,
                image_side,
            },
            "csv" => DatasetSource::Csv {
                train: train_file,
                test: test_file,
            },
            "idx" => DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            },
            other => {
                let line = f.line("dataset");
                f.errors.push((
                    line,
                    format!("dataset: expected synth, csv or idx, got `{other}`"),
                ));
                DatasetSource::Synth {
                    classes,
                    per_class,
                    test_per_class,
                    dim,
                    separation,
                    image_side,
                }
            }
        };
        let normalize = f.with("normalize", false, parse_bool);

        let model_kind = f.get("model", "tiny-cnn".to_string());
        let width = f.get("width", 8usize);
        let hidden = f.get("hidden", 32usize);
        let model_file = f.path("model_file", model_kind == "file");
        let model = match model_kind.as_str() {
            "tiny-cnn" => ModelSource::TinyCnn { width, hidden },
            "mlp" => ModelSource::Mlp { hidden },
            "file" => ModelSource::File(model_file),
            other => {
                let line = f.line("model");
                f.errors.push((
                    line,
                    format!("model: expected tiny-cnn, mlp or file, got `{other}`"),
                ));
                ModelSource::Mlp { hidden }
            }
        };
        let cut = f.opt("cut", None::<usize>);
        let cost = CostOverrides {
            rate: f.get("cost_rate", 1.0e6),
            epoch_time: f.get("cost_epoch_time", 1.0),
            fedavg_time: f.get("cost_fedavg_time", 0.1),
        };
        let out_dir = PathBuf::from(f.get("out_dir", "out".to_string()));
        let divergence = f.with("divergence", true, parse_bool);
        let forgetting_sigma = f.get("forgetting_sigma", 0.0f64);

        let unknown: Vec<(usize, String)> = f
            .entries
            .iter()
            .filter(|(k, _)| !f.used.contains(*k))
            .map(|(k, (line, _))| (*line, format!("unknown key `{k}`")))
            .collect();
        f.errors.extend(unknown);

        let protocol = ProtocolConfig {
            protocol,
            epochs,
            batch_size,
            server_batch_size,
            eval_batch_size,
            alpha,
            bn_mode,
            aggregation: AggregationPolicy::new(agg_mode, weighting),
            optimizer,
            visit_order: visit,
            augment,
            timeout_ms,
            collector_log,
        };

        f.check("epochs", epochs > 0, "must be positive");
        f.check("batch_size", batch_size >= 2, "must be at least 2");
        f.check(
            "eval_batch_size",
            eval_batch_size >= 2,
            "must be at least 2",
        );
        f.check(
            "server_batch_size",
            server_batch_size != Some(1),
            "must be at least 2",
        );
        f.check(
            "alpha",
            alpha > 0.0 && alpha <= 1.0,
            format!("must lie in (0, 1], got {alpha}"),
        );
        let opt = &protocol.optimizer;
        f.check("lr", opt.lr > 0.0 && opt.lr.is_finite(), "must be positive");
        f.check(
            "momentum",
            (0.0..1.0).contains(&opt.momentum),
            "must lie in [0, 1)",
        );
        f.check(
            "weight_decay",
            opt.weight_decay >= 0.0,
            "must not be negative",
        );
        f.check(
            "lr_gamma",
            opt.gamma > 0.0 && opt.gamma <= 1.0,
            "must lie in (0, 1]",
        );
        f.check(
            "milestones",
            opt.milestones.windows(2).all(|w| w[0] < w[1]),
            "must be strictly increasing",
        );
        f.check("clients", clients > 0, "must be positive");
        f.check(
            "forgetting_sigma",
            forgetting_sigma >= 0.0,
            "must not be negative",
        );
        f.check("timeout_ms", timeout_ms != Some(0), "must be positive");
        if let DatasetSource::Synth {
            classes,
            per_class,
            test_per_class,
            dim,
            separation,
            image_side,
        } = &dataset
        {
            f.check("classes", *classes >= 2, "must be at least 2");
            f.check("per_class", *per_class > 0, "must be positive");
            f.check("test_per_class", *test_per_class > 0, "must be positive");
            f.check("separation", *separation > 0.0, "must be positive");
            if let Some(s) = image_side {
                f.check(
                    "dim",
                    s * s == *dim,
                    format!("must equal image_side squared ({})", s * s),
                );
            }
            let pos = partition == PartitionMode::PositiveLabels
                || test_partition == PartitionMode::PositiveLabels;
            if pos {
                f.check(
                    "clients",
                    clients == *classes,
                    "positive labels need one client per class",
                );
            }
        }
        if matches!(model, ModelSource::TinyCnn { .. }) {
            if let DatasetSource::Synth {
                image_side: None, ..
            }
            | DatasetSource::Csv { .. } = dataset
            {
                f.check("model", false, "tiny-cnn needs image samples");
            }
        }
        f.check("cost_rate", cost.rate > 0.0, "must be positive");
        f.check("cost_epoch_time", cost.epoch_time > 0.0, "must be positive");
        f.check(
            "cost_fedavg_time",
            cost.fedavg_time > 0.0,
            "must be positive",
        );

        if !f.errors.is_empty() {
            f.errors.sort_by_key(|e| e.0);
            let msg = f
                .errors
                .iter()
                .map(|(line, m)| {
                    if *line == 0 {
                        m.clone()
                    } else {
                        format!("line {line}: {m}")
                    }
                })
                .collect::<Vec<_>>()
                .join("\n");
            return Err(Error::Config(msg));
        }
        Ok(RunConfig {
            seed,
            protocol,
            clients,
            partition,
            test_partition,
            dataset,
            normalize,
            model,
            cut,
            cost,
            out_dir,
            divergence,
            forgetting_sigma,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// e.g. `noniid/iid` for label-skewed training and IID testing.
    pub fn scenario(&self) -> String {
        format!(
            "{}/{}",
            scenario_part(self.partition),
            scenario_part(self.test_partition)
        )
    }

    /// The same experiment with IID training data.
    pub fn iid_twin(&self) -> Self {
        Self {
            partition: PartitionMode::Iid,
            ..self.clone()
        }
    }
}

fn opt_str<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".to_string(), ToString::to_string)
}

/// Canonical form: every key, in a fixed order, parsing back to an equal
/// configuration.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.protocol;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("protocol", p.protocol.to_string());
        kv("epochs", p.epochs.to_string());
        kv("batch_size", p.batch_size.to_string());
        kv("server_batch_size", opt_str(&p.server_batch_size));
        kv("eval_batch_size", p.eval_batch_size.to_string());
        kv("alpha", p.alpha.to_string());
        kv("bn_mode", p.bn_mode.name().to_string());
        kv(
            "aggregation",
            match p.aggregation.mode {
                AggregationMode::ExcludeBatchNorm => "exclude_bn",
                AggregationMode::IncludeBatchNorm => "include_bn",
            }
            .to_string(),
        );
        kv(
            "weighting",
            match p.aggregation.weighting {
                Weighting::BySampleCount => "samples",
                Weighting::Uniform => "uniform",
            }
            .to_string(),
        );
        kv(
            "visit_order",
            match p.visit_order {
                VisitOrder::RandomPerEpoch => "random",
                VisitOrder::Fixed => "fixed",
            }
            .to_string(),
        );
        kv(
            "augment",
            match p.augment {
                Augment::None => "none",
                Augment::Hflip => "hflip",
            }
            .to_string(),
        );
        kv("lr", p.optimizer.lr.to_string());
        kv("momentum", p.optimizer.momentum.to_string());
        kv("weight_decay", p.optimizer.weight_decay.to_string());
        kv(
            "milestones",
            if p.optimizer.milestones.is_empty() {
                "none".to_string()
            } else {
                p.optimizer
                    .milestones
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            },
        );
        kv("lr_gamma", p.optimizer.gamma.to_string());
        kv("timeout_ms", opt_str(&p.timeout_ms));
        kv("collector_log", p.collector_log.to_string());
        kv("clients", self.clients.to_string());
        kv("partition", mode_name(self.partition).to_string());
        kv("test_partition", mode_name(self.test_partition).to_string());
        match &self.dataset {
            DatasetSource::Synth {
                classes,
                per_class,
                test_per_class,
                dim,
                separation,
                image_side,
            } => {
                kv("dataset", "synth".into());
                kv("classes", classes.to_string());
                kv("per_class", per_class.to_string());
                kv("test_per_class", test_per_class.to_string());
                kv("dim", dim.to_string());
                kv("separation", separation.to_string());
                kv("image_side", opt_str(image_side));
            }
            DatasetSource::Csv { train, test } => {
                kv("dataset", "csv".into());
                kv("train_file", train.display().to_string());
                kv("test_file", test.display().to_string());
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                kv("dataset", "idx".into());
                kv("train_images", train_images.display().to_string());
                kv("train_labels", train_labels.display().to_string());
                kv("test_images", test_images.display().to_string());
                kv("test_labels", test_labels.display().to_string());
            }
        }
        kv("normalize", self.normalize.to_string());
        match &self.model {
            ModelSource::TinyCnn { width, hidden } => {
                kv("model", "tiny-cnn".into());
                kv("width", width.to_string());
                kv("hidden", hidden.to_string());
            }
            ModelSource::Mlp { hidden } => {
                kv("model", "mlp".into());
                kv("hidden", hidden.to_string());
            }
            ModelSource::File(p) => {
                kv("model", "file".into());
                kv("model_file", p.display().to_string());
            }
        }
        kv("cut", opt_str(&self.cut));
        kv("cost_rate", self.cost.rate.to_string());
        kv("cost_epoch_time", self.cost.epoch_time.to_string());
        kv("cost_fedavg_time", self.cost.fedavg_time.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("divergence", self.divergence.to_string());
        kv("forgetting_sigma", self.forgetting_sigma.to_string());
        f.write_str(&s)
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
