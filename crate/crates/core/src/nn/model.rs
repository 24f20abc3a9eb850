use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::layer::{Layer, LayerSpec, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How batch norm layers obtain their statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Stored running statistics.
    EvalRmsd,
    /// Statistics of the batch under test; running statistics untouched.
    EvalCmsd,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::EvalRmsd => "rmsd",
            Mode::EvalCmsd => "cmsd",
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Input(Tensor),
    BatchNorm { x_hat: Tensor, inv_std: Vec<Scalar> },
    Shape(Vec<usize>),
}

/// Intermediates recorded by [`ModelGraph::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    specs: Vec<LayerSpec>,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Gradients of the trainable parameters, laid out like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Vec<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &ModelGraph) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                l.spec
                    .param_layout()
                    .into_iter()
                    .filter(|(k, _)| k.is_trainable())
                    .map(|(_, s)| Tensor::zeros(&s))
                    .collect()
            })
            .collect();
        Self { layers }
    }
}

/// An ordered stack of layers with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl ModelGraph {
    /// Builds a freshly initialized model.
    pub fn new<R: Rng + ?Sized>(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let params = spec.init_params(rng);
            layers.push(Layer::new(spec, params)?);
        }
        Self::from_layers(input_shape, layers)
    }

    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Layer("a model needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        for (i, l) in layers.iter().enumerate() {
            shape = l
                .spec
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
        }
        Ok(Self {
            input_shape,
            layers,
        })
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        self.layers.iter().fold(self.input_shape.clone(), |s, l| {
            l.spec.output_shape(&s).expect("validated at construction")
        })
    }

    /// Per-sample input shape of every layer.
    pub fn layer_input_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut s = self.input_shape.clone();
        for l in &self.layers {
            shapes.push(s.clone());
            s = l.spec.output_shape(&s).expect("validated at construction");
        }
        shapes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub(crate) fn into_parts(self) -> (Vec<usize>, Vec<Layer>) {
        (self.input_shape, self.layers)
    }

    /// Number of stored values, batch norm running statistics included.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(Tensor::numel)
            .sum()
    }

    /// Number of values the optimizer updates.
    pub fn trainable_param_count(&self) -> usize {
        self.named_params()
            .filter(|(_, k, _)| k.is_trainable())
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn flops_per_sample(&self) -> u64 {
        self.layers
            .iter()
            .zip(self.layer_input_shapes())
            .map(|(l, s)| l.spec.flops(&s).expect("validated at construction"))
            .sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.spec.is_batch_norm())
    }

    /// Same input shape and layer specifications.
    pub fn same_structure(&self, other: &ModelGraph) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.spec == b.spec)
    }

    /// Every parameter tensor with its checkpoint name (`<layer>.<kind>`).
    pub fn named_params(&self) -> impl Iterator<Item = (String, ParamKind, &Tensor)> + '_ {
        self.layers.iter().enumerate().flat_map(|(i, l)| {
            l.param_kinds()
                .into_iter()
                .zip(&l.params)
                .map(move |(k, t)| (format!("{i}.{}", k.name()), k, t))
        })
    }

    pub fn named_params_mut(
        &mut self,
    ) -> impl Iterator<Item = (String, ParamKind, &mut Tensor)> + '_ {
        self.layers.iter_mut().enumerate().flat_map(|(i, l)| {
            l.param_kinds()
                .into_iter()
                .zip(l.params.iter_mut())
                .map(move |(k, t)| (format!("{i}.{}", k.name()), k, t))
        })
    }

    fn check_input(&self, x: &Tensor, mode: Mode) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model expects [B, {}], got {:?}",
                self.input_shape
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", "),
                x.shape()
            )));
        }
        if x.outer() == 1 && mode != Mode::EvalRmsd && self.has_batch_norm() {
            return Err(Error::DegenerateBatch(mode.name()));
        }
        Ok(())
    }

    /// Runs the model on a batch. Train mode updates batch norm running statistics.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input, mode)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            let (y, cache, stats) = layer_forward(layer, &x, mode)?;
            if let (Some((mean, var)), LayerSpec::BatchNorm { momentum, .. }) = (stats, &layer.spec)
            {
                let m = *momentum;
                for (r, v) in layer.params[2].data_mut().iter_mut().zip(&mean) {
                    *r = ((1.0 - m) * *r as f64 + m * v) as Scalar;
                }
                for (r, v) in layer.params[3].data_mut().iter_mut().zip(&var) {
                    *r = ((1.0 - m) * *r as f64 + m * v) as Scalar;
                }
            }
            caches.push(cache);
            x = y;
        }
        x.ensure_finite("forward")?;
        Ok((
            x,
            ForwardCache {
                mode,
                specs: self.specs(),
                layers: caches,
            },
        ))
    }

    /// Forward pass in an evaluation mode without recording a cache.
    pub fn infer(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            return Err(Error::Cache("infer runs in an evaluation mode".into()));
        }
        self.check_input(input, mode)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer_forward(layer, &x, mode)?.0;
        }
        x.ensure_finite("forward")?;
        Ok(x)
    }

    /// Back-propagates `output_grad` through a train-mode cache. Returns the
    /// trainable-parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &Tensor,
    ) -> Result<(ParamGrads, Tensor)> {
        if cache.mode != Mode::Train {
            return Err(Error::Cache(format!(
                "cache was recorded in {} mode",
                cache.mode.name()
            )));
        }
        if cache.specs.len() != self.layers.len()
            || cache
                .specs
                .iter()
                .zip(&self.layers)
                .any(|(s, l)| *s != l.spec)
        {
            return Err(Error::Cache("cache belongs to a different model".into()));
        }
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut dy = output_grad.clone();
        for (i, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let (dx, g) = layer_backward(layer, c, &dy)?;
            grads[i] = g;
            dy = dx;
        }
        dy.ensure_finite("backward")?;
        for g in grads.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok((ParamGrads { layers: grads }, dy))
    }
}

type BnStats = Option<(Vec<f64>, Vec<f64>)>;

fn layer_forward(layer: &Layer, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache, BnStats)> {
    let p = &layer.params;
    Ok(match layer.spec {
        LayerSpec::Dense { .. } => (
            kernels::dense_forward(x, &p[0], &p[1])?,
            LayerCache::Input(x.clone()),
            None,
        ),
        LayerSpec::Conv2d {
            stride, padding, ..
        } => (
            kernels::conv2d_forward(x, &p[0], p.get(1), ConvGeometry { stride, padding })?,
            LayerCache::Input(x.clone()),
            None,
        ),
        LayerSpec::BatchNorm { eps, .. } => {
            let (gamma, beta) = (p[0].data(), p[1].data());
            match mode {
                Mode::Train | Mode::EvalCmsd => {
                    let (y, x_hat, inv_std, mean, var) =
                        kernels::batch_norm_forward(x, gamma, beta, eps)?;
                    let stats = (mode == Mode::Train).then_some((mean, var));
                    (y, LayerCache::BatchNorm { x_hat, inv_std }, stats)
                }
                Mode::EvalRmsd => {
                    let mean: Vec<f64> = p[2].data().iter().map(|&v| v as f64).collect();
                    let var: Vec<f64> = p[3].data().iter().map(|&v| v as f64).collect();
                    let (y, x_hat, inv_std) =
                        kernels::batch_norm_apply(x, gamma, beta, &mean, &var, eps)?;
                    (y, LayerCache::BatchNorm { x_hat, inv_std }, None)
                }
            }
        }
        LayerSpec::Relu => (kernels::relu_forward(x), LayerCache::Input(x.clone()), None),
        LayerSpec::AvgPool { window, stride } => (
            kernels::avg_pool_forward(x, window, stride)?,
            LayerCache::Shape(x.shape().to_vec()),
            None,
        ),
        LayerSpec::Flatten => {
            let n = x.outer();
            (
                x.clone().reshape(vec![n, x.row_len()])?,
                LayerCache::Shape(x.shape().to_vec()),
                None,
            )
        }
    })
}

fn layer_backward(layer: &Layer, cache: &LayerCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let p = &layer.params;
    let bad = || Error::Cache(format!("cache entry does not match layer `{}`", layer.spec));
    Ok(match (&layer.spec, cache) {
        (LayerSpec::Dense { .. }, LayerCache::Input(x)) => {
            let (dx, dw, db) = kernels::dense_backward(x, &p[0], dy);
            (dx, vec![dw, db])
        }
        (
            LayerSpec::Conv2d {
                stride,
                padding,
                bias,
                ..
            },
            LayerCache::Input(x),
        ) => {
            let g = ConvGeometry {
                stride: *stride,
                padding: *padding,
            };
            let (dx, dw, db) = kernels::conv2d_backward(x, &p[0], *bias, dy, g)?;
            (dx, std::iter::once(dw).chain(db).collect())
        }
        (LayerSpec::BatchNorm { .. }, LayerCache::BatchNorm { x_hat, inv_std }) => {
            let (dx, dgamma, dbeta) =
                kernels::batch_norm_backward(x_hat, inv_std, p[0].data(), dy)?;
            (dx, vec![dgamma, dbeta])
        }
        (LayerSpec::Relu, LayerCache::Input(x)) => (kernels::relu_backward(x, dy), Vec::new()),
        (LayerSpec::AvgPool { window, stride }, LayerCache::Shape(s)) => (
            kernels::avg_pool_backward(s, *window, *stride, dy)?,
            Vec::new(),
        ),
        (LayerSpec::Flatten, LayerCache::Shape(s)) => (dy.clone().reshape(s.clone())?, Vec::new()),
        _ => return Err(bad()),
    })
}
