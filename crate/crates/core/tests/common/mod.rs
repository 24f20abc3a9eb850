//! Helpers shared by the integration test targets.
#![allow(dead_code)]
#![cfg_attr(feature = "f64", allow(clippy::unnecessary_cast))]

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;
use splitfed::nn::{cross_entropy, LayerSpec, Mode, ModelGraph};
use splitfed::{RunConfig, Scalar, Tensor, DEFAULT_CONFIG};

/// The bundled default configuration with some keys replaced.
pub fn desk(overrides: &[(&str, &str)]) -> RunConfig {
    let mut lines: Vec<String> = DEFAULT_CONFIG
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            !overrides.iter().any(|(k, _)| *k == key)
        })
        .map(str::to_string)
        .collect();
    lines.extend(overrides.iter().map(|(k, v)| format!("{k} = {v}")));
    RunConfig::parse(&lines.join("\n")).expect("valid test configuration")
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn randn(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as Scalar
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Finite-difference step and tolerance for the compiled scalar width. At
/// 64 bits a 1e-3 step leaves O(h^2) truncation near the tolerance.
pub fn fd_step() -> f64 {
    if std::mem::size_of::<Scalar>() == 4 {
        1e-3
    } else {
        1e-5
    }
}

pub fn fd_tolerance() -> f64 {
    if std::mem::size_of::<Scalar>() == 4 {
        1e-3
    } else {
        1e-6
    }
}

/// Relative error of two gradient vectors: `|a - n| / max(|a|, |n|)`, or
/// the absolute error when both are tiny.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let a = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / a.max(n).max(1e-3)
}

/// What a checked instance differentiates.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `sum(r * y)` for fixed random `r`.
    Projection,
    /// Mean cross-entropy of the outputs.
    CrossEntropy,
}

fn objective(model: &ModelGraph, x: &Tensor, r: &Tensor, labels: &[usize], obj: Objective) -> f64 {
    let mut m = model.clone();
    let (y, _) = m.forward(x, Mode::Train).unwrap();
    match obj {
        Objective::Projection => y
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum(),
        Objective::CrossEntropy => cross_entropy(&y, labels).unwrap().0,
    }
}

/// Largest relative error over the input gradient and every trainable
/// parameter gradient of one model on one batch.
pub fn check_model(model: &ModelGraph, x: &Tensor, obj: Objective, rng: &mut SplitMix64) -> f64 {
    let mut m = model.clone();
    let (y, cache) = m.forward(x, Mode::Train).unwrap();
    let r = randn(y.shape(), rng);
    let classes = *y.shape().last().unwrap();
    let labels: Vec<usize> = (0..y.outer())
        .map(|_| rng.random_range(0..classes))
        .collect();
    let dy = match obj {
        Objective::Projection => r.clone(),
        Objective::CrossEntropy => cross_entropy(&y, &labels).unwrap().1,
    };
    let (grads, dx) = model.backward(&cache, &dy).unwrap();

    let mut worst: f64 = 0.0;
    let mut xs = x.clone();
    let numeric: Vec<f64> = (0..xs.numel())
        .map(|i| {
            // the step actually taken is measured after rounding
            let orig = xs.data()[i];
            let hi = (orig as f64 + fd_step()) as Scalar;
            let lo = (orig as f64 - fd_step()) as Scalar;
            xs.data_mut()[i] = hi;
            let f_hi = objective(model, &xs, &r, &labels, obj);
            xs.data_mut()[i] = lo;
            let f_lo = objective(model, &xs, &r, &labels, obj);
            xs.data_mut()[i] = orig;
            (f_hi - f_lo) / (hi as f64 - lo as f64)
        })
        .collect();
    let analytic: Vec<f64> = dx.data().iter().map(|&v| v as f64).collect();
    worst = worst.max(rel_error(&analytic, &numeric));

    for (li, layer_grads) in grads.layers.iter().enumerate() {
        for (pi, g) in layer_grads.iter().enumerate() {
            let mut probe = model.clone();
            let numeric: Vec<f64> = (0..g.numel())
                .map(|i| {
                    let orig = model.layers()[li].params()[pi].data()[i];
                    let hi = (orig as f64 + fd_step()) as Scalar;
                    let lo = (orig as f64 - fd_step()) as Scalar;
                    probe.layers_mut()[li].params_mut()[pi].data_mut()[i] = hi;
                    let f_hi = objective(&probe, x, &r, &labels, obj);
                    probe.layers_mut()[li].params_mut()[pi].data_mut()[i] = lo;
                    let f_lo = objective(&probe, x, &r, &labels, obj);
                    probe.layers_mut()[li].params_mut()[pi].data_mut()[i] = orig;
                    (f_hi - f_lo) / (hi as f64 - lo as f64)
                })
                .collect();
            let analytic: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
            worst = worst.max(rel_error(&analytic, &numeric));
        }
    }
    worst
}

/// Inputs whose entries stay clear of the relu kink by more than the step.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if (*v as f64).abs() < 0.05 {
            *v = if *v >= 0.0 { 0.05 } else { -0.05 } as Scalar;
        }
    }
    t
}

pub struct OracleCase {
    pub kind: &'static str,
    pub worst: f64,
    pub tolerance: f64,
}

/// One instance of every layer kind and of the loss, plus a small composed
/// model, drawn from `seed`.
pub fn oracle_round(seed: u64) -> Vec<OracleCase> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    // two samples make rank-2 batch norm outputs exactly ±1, leaving only noise
    let batch = rng.random_range(3..6usize);
    let mut cases = Vec::new();
    let mut single = |kind: &'static str,
                      input: Vec<usize>,
                      spec: LayerSpec,
                      obj: Objective,
                      rng: &mut SplitMix64,
                      relu_safe: bool| {
        let model = ModelGraph::new(input.clone(), vec![spec], rng).unwrap();
        let mut shape = vec![batch];
        shape.extend(&input);
        let mut x = randn(&shape, rng);
        if relu_safe {
            x = away_from_zero(x);
        }
        let worst = check_model(&model, &x, obj, rng);
        cases.push(OracleCase {
            kind,
            worst,
            tolerance: fd_tolerance(),
        });
    };
    let d_in = rng.random_range(2..6usize);
    let d_out = rng.random_range(2..6usize);
    single(
        "dense",
        vec![d_in],
        LayerSpec::Dense {
            inputs: d_in,
            outputs: d_out,
        },
        Objective::Projection,
        &mut rng,
        false,
    );
    let c_in = rng.random_range(1..3usize);
    let c_out = rng.random_range(1..4usize);
    let side = rng.random_range(3..6usize);
    let stride = rng.random_range(1..3usize);
    let padding = rng.random_range(0..2usize);
    let bias = rng.random_bool(0.5);
    single(
        "conv2d",
        vec![c_in, side, side],
        LayerSpec::Conv2d {
            in_channels: c_in,
            out_channels: c_out,
            kernel: 3,
            stride,
            padding,
            bias,
        },
        Objective::Projection,
        &mut rng,
        false,
    );
    let bn_spec = |channels| LayerSpec::BatchNorm {
        channels,
        eps: 1e-5,
        momentum: 0.1,
    };
    single(
        "batchnorm",
        vec![d_in],
        bn_spec(d_in),
        Objective::Projection,
        &mut rng,
        false,
    );
    single(
        "batchnorm",
        vec![c_out, side, side],
        bn_spec(c_out),
        Objective::Projection,
        &mut rng,
        false,
    );
    single(
        "relu",
        vec![d_in, 3],
        LayerSpec::Relu,
        Objective::Projection,
        &mut rng,
        true,
    );
    single(
        "avgpool",
        vec![c_in, 4, 4],
        LayerSpec::AvgPool {
            window: 2,
            stride: 2,
        },
        Objective::Projection,
        &mut rng,
        false,
    );
    single(
        "flatten",
        vec![c_in, 2, 3],
        LayerSpec::Flatten,
        Objective::Projection,
        &mut rng,
        false,
    );
    single(
        "cross_entropy",
        vec![d_in],
        LayerSpec::Dense {
            inputs: d_in,
            outputs: d_out,
        },
        Objective::CrossEntropy,
        &mut rng,
        false,
    );
    let composed = ModelGraph::new(
        vec![1, 4, 4],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
            bn_spec(2),
            LayerSpec::Relu,
            LayerSpec::AvgPool {
                window: 2,
                stride: 2,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 8,
                outputs: 3,
            },
        ],
        &mut rng,
    )
    .unwrap();
    // redraw inputs that put a pre-relu value within reach of the kink
    let head = splitfed::split::split(composed.clone(), splitfed::split::SplitSpec::new(2))
        .unwrap()
        .0;
    let x = loop {
        let x = randn(&[batch, 1, 4, 4], &mut rng);
        let (pre, _) = head.clone().forward(&x, Mode::Train).unwrap();
        if pre.data().iter().all(|v| (*v as f64).abs() > 0.02) {
            break x;
        }
    };
    cases.push(OracleCase {
        kind: "composed",
        worst: check_model(&composed, &x, Objective::Projection, &mut rng),
        // six stacked layers accumulate more 32-bit rounding than one
        tolerance: 2.0 * fd_tolerance(),
    });
    cases
}
