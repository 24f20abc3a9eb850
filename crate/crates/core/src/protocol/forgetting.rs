//! Per-class accuracy over epochs, and how often the class of the client
//! visited last is the best-recognized class.

use serde::{Deserialize, Serialize};

/// Per-epoch per-class accuracies and the class of the last-visited client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingTrace {
    pub per_class_accuracy: Vec<Vec<f64>>,
    pub last_visited_class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSummary {
    /// Share of epochs whose per-class maximum is the last-visited class.
    pub last_visited_max_fraction: f64,
    /// Value of the fraction for a model with no preference, `1 / V`.
    pub null_fraction: f64,
    pub smoothing_sigma: f64,
    /// Per-class series (`[class][epoch]`), smoothed when sigma > 0.
    pub series: Vec<Vec<f64>>,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn last_visited_max_fraction(trace: &ForgettingTrace) -> f64 {
    let n = trace.per_class_accuracy.len();
    if n == 0 {
        return 0.0;
    }
    let hits = trace
        .per_class_accuracy
        .iter()
        .zip(&trace.last_visited_class)
        .filter(|(acc, &last)| argmax(acc) == last)
        .count();
    hits as f64 / n as f64
}

/// Gaussian filter with reflected edges; `sigma <= 0` returns the input.
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || series.len() < 2 {
        return series.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = series.len() as isize;
    let reflect = |mut i: isize| {
        let period = 2 * n;
        i = i.rem_euclid(period);
        if i >= n {
            period - 1 - i
        } else {
            i
        }
    };
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = reflect(t + k as isize - radius);
                acc += w * series[j as usize];
                wsum += w;
            }
            acc / wsum
        })
        .collect()
}

impl ForgettingTrace {
    pub fn summary(&self, sigma: f64) -> ForgettingSummary {
        let classes = self.per_class_accuracy.first().map_or(0, Vec::len);
        let series = (0..classes)
            .map(|c| {
                let raw: Vec<f64> = self.per_class_accuracy.iter().map(|a| a[c]).collect();
                gaussian_smooth(&raw, sigma)
            })
            .collect();
        ForgettingSummary {
            last_visited_max_fraction: last_visited_max_fraction(self),
            null_fraction: if classes == 0 {
                0.0
            } else {
                1.0 / classes as f64
            },
            smoothing_sigma: sigma,
            series,
        }
    }
}
