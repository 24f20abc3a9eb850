//! Plain-text layered model description.
//!
//! ```text
//! input 1 8 8
//! conv2d in=1 out=8 kernel=3 stride=1 padding=1
//! batchnorm channels=8 eps=1e-5 momentum=0.1
//! relu
//! avgpool window=2 stride=2
//! flatten
//! dense in=128 out=10
//! ```
//!
//! The first line gives the per-sample input shape; every following line is
//! one layer. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::layer::LayerSpec;
use super::model::ModelGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescription {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelDescription {
    pub fn of(model: &ModelGraph) -> Self {
        Self {
            input_shape: model.input_shape().to_vec(),
            layers: model.specs(),
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelGraph> {
        ModelGraph::new(self.input_shape.clone(), self.layers.clone(), rng)
    }
}

impl fmt::Display for ModelDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input")?;
        for d in &self.input_shape {
            write!(f, " {d}")?;
        }
        writeln!(f)?;
        for l in &self.layers {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

struct Args<'a> {
    line: usize,
    keyword: &'a str,
    values: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Description {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn take<T: FromStr>(&mut self, key: &str, default: Option<T>) -> Result<T> {
        match self.values.remove(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| self.err(format!("{}: cannot parse {key}={raw}", self.keyword))),
            None => default.ok_or_else(|| self.err(format!("{}: missing {key}=", self.keyword))),
        }
    }

    fn finish(self, spec: LayerSpec) -> Result<LayerSpec> {
        if let Some(k) = self.values.keys().next() {
            return Err(self.err(format!("{}: unknown parameter `{k}`", self.keyword)));
        }
        spec.validate().map_err(|e| self.err(e.to_string()))?;
        Ok(spec)
    }
}

fn parse_layer(line: usize, text: &str) -> Result<LayerSpec> {
    let mut words = text.split_whitespace();
    let keyword = words.next().unwrap_or_default();
    let mut args = Args {
        line,
        keyword,
        values: BTreeMap::new(),
    };
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| args.err(format!("expected key=value, got `{w}`")))?;
        if args.values.insert(k, v).is_some() {
            return Err(args.err(format!("duplicate parameter `{k}`")));
        }
    }
    let spec = match keyword.to_ascii_lowercase().as_str() {
        "dense" => LayerSpec::Dense {
            inputs: args.take("in", None)?,
            outputs: args.take("out", None)?,
        },
        "conv2d" => LayerSpec::Conv2d {
            in_channels: args.take("in", None)?,
            out_channels: args.take("out", None)?,
            kernel: args.take("kernel", None)?,
            stride: args.take("stride", Some(1))?,
            padding: args.take("padding", Some(0))?,
            bias: args.take("bias", Some(true))?,
        },
        "batchnorm" => LayerSpec::BatchNorm {
            channels: args.take("channels", None)?,
            eps: args.take("eps", Some(1e-5))?,
            momentum: args.take("momentum", Some(0.1))?,
        },
        "relu" => LayerSpec::Relu,
        "avgpool" => {
            let window = args.take("window", None)?;
            LayerSpec::AvgPool {
                window,
                stride: args.take("stride", Some(window))?,
            }
        }
        "flatten" => LayerSpec::Flatten,
        other => return Err(args.err(format!("unknown layer kind `{other}`"))),
    };
    args.finish(spec)
}

impl FromStr for ModelDescription {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input_shape = None;
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Description { line: i + 1, msg };
            match input_shape {
                None => {
                    let mut words = line.split_whitespace();
                    if words.next() != Some("input") {
                        return Err(err("description must start with `input <dims>`".into()));
                    }
                    let dims = words
                        .map(|w| w.parse::<usize>().ok().filter(|&d| d > 0))
                        .collect::<Option<Vec<_>>>()
                        .filter(|d| !d.is_empty())
                        .ok_or_else(|| err("input dims must be positive integers".into()))?;
                    input_shape = Some(dims);
                }
                Some(_) => layers.push(parse_layer(i + 1, line)?),
            }
        }
        let input_shape = input_shape.ok_or(Error::Description {
            line: 0,
            msg: "empty model description".into(),
        })?;
        if layers.is_empty() {
            return Err(Error::Description {
                line: 0,
                msg: "model description has no layers".into(),
            });
        }
        // shape chain check
        let mut shape = input_shape.clone();
        for (i, l) in layers.iter().enumerate() {
            shape = l.output_shape(&shape).map_err(|e| Error::Description {
                line: 0,
                msg: format!("layer {i}: {e}"),
            })?;
        }
        Ok(Self {
            input_shape,
            layers,
        })
    }
}
