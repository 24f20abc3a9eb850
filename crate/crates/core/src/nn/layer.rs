use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One layer of a [`ModelGraph`](super::ModelGraph).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    /// Normalizes each channel (feature for rank-2 inputs) over the batch and
    /// spatial positions.
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    AvgPool {
        window: usize,
        stride: usize,
    },
    Flatten,
}

/// Role of a parameter tensor inside its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    /// Updated by the optimizer (running statistics are not).
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(
            self,
            ParamKind::Gamma | ParamKind::Beta | ParamKind::RunningMean | ParamKind::RunningVar
        )
    }
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Layer(format!("{}: {msg}", self.keyword())));
        match *self {
            LayerSpec::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                bad("widths must be positive")
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                bad("channels, kernel and stride must be positive")
            }
            LayerSpec::BatchNorm { channels: 0, .. } => bad("channels must be positive"),
            LayerSpec::BatchNorm { eps, .. } if !(eps > 0.0 && eps.is_finite()) => {
                bad("eps must be > 0")
            }
            LayerSpec::BatchNorm { momentum, .. } if !(momentum > 0.0 && momentum <= 1.0) => {
                bad("momentum must lie in (0, 1]")
            }
            LayerSpec::AvgPool { window, stride } if window == 0 || stride == 0 => {
                bad("window and stride must be positive")
            }
            _ => Ok(()),
        }
    }

    pub fn keyword(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(self, LayerSpec::BatchNorm { .. })
    }

    /// Parameter tensors owned by the layer, in storage order.
    pub fn param_layout(&self) -> Vec<(ParamKind, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![
                (ParamKind::Weight, vec![outputs, inputs]),
                (ParamKind::Bias, vec![outputs]),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    ParamKind::Weight,
                    vec![out_channels, in_channels, kernel, kernel],
                )];
                if bias {
                    v.push((ParamKind::Bias, vec![out_channels]));
                }
                v
            }
            LayerSpec::BatchNorm { channels, .. } => vec![
                (ParamKind::Gamma, vec![channels]),
                (ParamKind::Beta, vec![channels]),
                (ParamKind::RunningMean, vec![channels]),
                (ParamKind::RunningVar, vec![channels]),
            ],
            LayerSpec::Relu | LayerSpec::AvgPool { .. } | LayerSpec::Flatten => Vec::new(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: &str| {
            Err(Error::Shape(format!(
                "{} expects {want}, got per-sample shape {input:?}",
                self.keyword()
            )))
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => match input {
                [n] if *n == inputs => Ok(vec![outputs]),
                _ => mismatch(&format!("[{inputs}]")),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => match input {
                [c, h, w]
                    if *c == in_channels
                        && h + 2 * padding >= kernel
                        && w + 2 * padding >= kernel =>
                {
                    Ok(vec![
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ])
                }
                _ => mismatch(&format!(
                    "[{in_channels}, H, W] with H, W + 2*padding >= {kernel}"
                )),
            },
            LayerSpec::BatchNorm { channels, .. } => match input {
                [c] | [c, _, _] if *c == channels => Ok(input.to_vec()),
                _ => mismatch(&format!("[{channels}] or [{channels}, H, W]")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::AvgPool { window, stride } => match input {
                [c, h, w] if *h >= window && *w >= window => Ok(vec![
                    *c,
                    (h - window) / stride + 1,
                    (w - window) / stride + 1,
                ]),
                _ => mismatch(&format!("[C, H, W] with H, W >= {window}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Floating-point operations per sample: one per multiply-accumulate for
    /// dense and convolution layers (bias excluded), two per element for batch
    /// norm, one per window element for pooling; activations and reshapes are free.
    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let out_elems: usize = out.iter().product();
        Ok(match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs * outputs) as u64,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => (out_elems * in_channels * kernel * kernel) as u64,
            LayerSpec::BatchNorm { .. } => 2 * out_elems as u64,
            LayerSpec::AvgPool { window, .. } => (out_elems * window * window) as u64,
            LayerSpec::Relu | LayerSpec::Flatten => 0,
        })
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 1,
        }
    }

    /// Fresh parameters: Kaiming-uniform (fan-in) weights, zero biases,
    /// unit gamma, zero beta, zero running mean and unit running variance.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        let bound = (6.0 / self.fan_in() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        self.param_layout()
            .into_iter()
            .map(|(kind, shape)| match kind {
                ParamKind::Weight => {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| dist.sample(rng) as Scalar).collect();
                    Tensor::new(shape, data).expect("layout shape")
                }
                ParamKind::Gamma | ParamKind::RunningVar => Tensor::full(&shape, 1.0),
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => Tensor::zeros(&shape),
            })
            .collect()
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense in={inputs} out={outputs}"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => write!(
                f,
                "conv2d in={in_channels} out={out_channels} kernel={kernel} stride={stride} padding={padding} bias={bias}"
            ),
            LayerSpec::BatchNorm {
                channels,
                eps,
                momentum,
            } => write!(f, "batchnorm channels={channels} eps={eps:e} momentum={momentum}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::AvgPool { window, stride } => {
                write!(f, "avgpool window={window} stride={stride}")
            }
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

/// A layer specification together with its parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) spec: LayerSpec,
    pub(crate) params: Vec<Tensor>,
}

impl Layer {
    pub fn new(spec: LayerSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(&params)
                .any(|((_, shape), p)| shape.as_slice() != p.shape())
        {
            return Err(Error::Layer(format!(
                "parameters do not match the layout of `{spec}`"
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        self.spec
            .param_layout()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_bad_batch_norm() {
        let bn = |eps, momentum| LayerSpec::BatchNorm {
            channels: 4,
            eps,
            momentum,
        };
        assert!(bn(1e-5, 0.1).validate().is_ok());
        assert!(bn(0.0, 0.1).validate().is_err());
        assert!(bn(1e-5, 0.0).validate().is_err());
        assert!(bn(1e-5, 1.0).validate().is_ok());
        assert!(bn(1e-5, 1.5).validate().is_err());
    }

    #[test]
    fn conv_output_shape() {
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        };
        assert_eq!(conv.output_shape(&[3, 32, 32]).unwrap(), vec![16, 32, 32]);
        assert!(conv.output_shape(&[1, 32, 32]).is_err());
        let strided = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: 3,
            stride: 2,
            padding: 0,
            bias: true,
        };
        assert_eq!(strided.output_shape(&[1, 7, 7]).unwrap(), vec![2, 3, 3]);
    }

    // First ResNet block on 32x32 RGB: 3x3 conv to 16 channels without bias,
    // then batch norm. 464 trainable parameters and 475,136 flops per sample.
    #[test]
    fn first_block_matches_reported_client_budget() {
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        };
        let bn = LayerSpec::BatchNorm {
            channels: 16,
            eps: 1e-5,
            momentum: 0.1,
        };
        let trainable: usize = [&conv, &bn]
            .iter()
            .flat_map(|l| l.param_layout())
            .filter(|(k, _)| k.is_trainable())
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(trainable, 464);
        let flops = conv.flops(&[3, 32, 32]).unwrap() + bn.flops(&[16, 32, 32]).unwrap();
        assert_eq!(flops, 475_136);
    }
}
