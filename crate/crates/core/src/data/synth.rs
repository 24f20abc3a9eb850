//! Gaussian blobs: one isotropic unit-variance cluster per class.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthShape {
    /// `[dim]` vectors.
    Flat,
    /// `[1, side, side]` single-channel images; `dim = side * side`.
    Image { side: usize },
}

/// Class means for a blob task. Means are orthogonal, pairwise `separation`
/// apart, and (when the dimension allows) orthogonal to the all-ones vector,
/// so every class mean averages to zero over its features.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobFrame {
    means: Vec<Vec<f64>>,
    shape: SynthShape,
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-9 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn project_out(v: &mut [f64], u: &[f64]) {
    let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
}

impl BlobFrame {
    pub fn new<R: Rng + ?Sized>(
        classes: usize,
        dim: usize,
        separation: f64,
        shape: SynthShape,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Data("blobs need at least two classes".into()));
        }
        if dim < 1 {
            return Err(Error::Data("blob dimension must be at least 1".into()));
        }
        if let SynthShape::Image { side } = shape {
            if side * side != dim {
                return Err(Error::Data(format!(
                    "image side {side} does not give dimension {dim}"
                )));
            }
        }
        if !(separation >= 0.0 && separation.is_finite()) {
            return Err(Error::Data(format!("invalid separation {separation}")));
        }
        let mut basis: Vec<Vec<f64>> = Vec::new();
        if dim > classes {
            let mut ones = vec![1.0; dim];
            normalize(&mut ones);
            basis.push(ones);
        }
        let scale = separation / std::f64::consts::SQRT_2;
        let mut means = Vec::with_capacity(classes);
        for _ in 0..classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let mut w = v.clone();
            for u in &basis {
                project_out(&mut w, u);
            }
            // too few dimensions for another orthogonal direction
            if normalize(&mut w) {
                basis.push(w.clone());
                v = w;
            } else {
                normalize(&mut v);
            }
            means.push(v.into_iter().map(|x| x * scale).collect());
        }
        Ok(Self { means, shape })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `per_class` samples of every class, grouped by class.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Result<Dataset> {
        if per_class < 1 {
            return Err(Error::Data("need at least one sample per class".into()));
        }
        let (v, d) = (self.classes(), self.dim());
        let mut data = Vec::with_capacity(v * per_class * d);
        let mut labels = Vec::with_capacity(v * per_class);
        for (c, mean) in self.means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push((m + noise) as Scalar);
                }
                labels.push(c);
            }
        }
        let mut shape = vec![v * per_class];
        match self.shape {
            SynthShape::Flat => shape.push(d),
            SynthShape::Image { side } => shape.extend([1, side, side]),
        }
        Dataset::new(Tensor::new(shape, data)?, labels, v)
    }
}

/// One blob dataset drawn from a fresh frame.
pub fn synth_blobs<R: Rng + ?Sized>(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    shape: SynthShape,
    rng: &mut R,
) -> Result<Dataset> {
    BlobFrame::new(classes, dim, separation, shape, rng)?.sample(per_class, rng)
}
