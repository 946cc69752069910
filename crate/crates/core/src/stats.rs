//! Small statistics toolkit: means, batch-means error bars, log-log slope
//! fits with bootstrap intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseStream, Purpose};

/// Sample mean and naive standard error (assumes independent samples).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean with a batch-means standard error over `batches` contiguous blocks.
/// Trailing samples that do not fill a block are dropped from the error
/// estimate but kept in the mean.
pub fn batch_means(xs: &[f64], batches: usize) -> Result<(f64, f64)> {
    if batches < 2 || xs.len() < batches {
        return Err(Error::InsufficientSamples(format!(
            "{} samples cannot form {batches} batches",
            xs.len()
        )));
    }
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let (_, se) = mean_and_se(&means);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Ok((mean, se))
}

/// Streaming batch-means accumulator for many series at once (one per
/// mode, say). Samples are pushed in time order.
#[derive(Clone, Debug)]
pub struct BatchAccumulator {
    width: usize,
    batch_size: usize,
    current: Vec<f64>,
    filled: usize,
    batch_sums: Vec<Vec<f64>>,
    total: Vec<f64>,
    count: usize,
}

impl BatchAccumulator {
    pub fn new(width: usize, batch_size: usize) -> Self {
        assert!(batch_size > 0);
        Self {
            width,
            batch_size,
            current: vec![0.0; width],
            filled: 0,
            batch_sums: Vec::new(),
            total: vec![0.0; width],
            count: 0,
        }
    }

    pub fn push(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.width);
        for ((c, t), v) in self.current.iter_mut().zip(self.total.iter_mut()).zip(values) {
            *c += v;
            *t += v;
        }
        self.count += 1;
        self.filled += 1;
        if self.filled == self.batch_size {
            let done = std::mem::replace(&mut self.current, vec![0.0; self.width]);
            self.batch_sums.push(done.into_iter().map(|s| s / self.batch_size as f64).collect());
            self.filled = 0;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn batches(&self) -> usize {
        self.batch_sums.len()
    }

    pub fn means(&self) -> Vec<f64> {
        self.total.iter().map(|t| t / self.count as f64).collect()
    }

    /// Per-series standard errors from the spread of completed batches.
    pub fn standard_errors(&self) -> Result<Vec<f64>> {
        let b = self.batch_sums.len();
        if b < 2 {
            return Err(Error::InsufficientSamples(format!("only {b} completed batches")));
        }
        Ok((0..self.width)
            .map(|j| {
                let col: Vec<f64> = self.batch_sums.iter().map(|r| r[j]).collect();
                mean_and_se(&col).1
            })
            .collect())
    }
}

/// Ordinary least squares `y = a + b x`; returns `(b, a)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SlopeFit {
    /// True when the whole 95% interval lies inside `[lo, hi]`.
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.ci_low >= lo && self.ci_high <= hi
    }
}

/// Log-log slope of `means` against `axis` with a parametric bootstrap 95%
/// interval (each point redrawn from `Normal(mean, se)`).
pub fn loglog_slope(axis: &[f64], means: &[f64], ses: &[f64], resamples: usize, seed: u64) -> Result<SlopeFit> {
    if axis.len() < 3 || axis.len() != means.len() || means.len() != ses.len() {
        return Err(Error::InsufficientSamples("a slope fit needs at least 3 matching points".into()));
    }
    if axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("scaling axis must be strictly increasing".into()));
    }
    if means.iter().any(|&m| m <= 0.0) {
        return Err(Error::InvalidParameter("log-log fit needs positive metrics".into()));
    }
    let lx: Vec<f64> = axis.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = means.iter().map(|v| v.ln()).collect();
    let (slope, intercept) = linear_fit(&lx, &ly);
    let stream = NoiseStream::new(seed, 0, 0, Purpose::Auxiliary);
    let mut slopes: Vec<f64> = (0..resamples as u64)
        .map(|r| {
            let g = stream.standard_pairs(r, means.len());
            let y: Vec<f64> = means
                .iter()
                .zip(ses)
                .zip(&g)
                .map(|((m, s), (z, _))| (m + s * z).max(m * 1e-3).ln())
                .collect();
            linear_fit(&lx, &y).0
        })
        .collect();
    slopes.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| slopes[((p * (slopes.len() - 1) as f64).round() as usize).min(slopes.len() - 1)];
    Ok(SlopeFit { slope, intercept, ci_low: q(0.025), ci_high: q(0.975) })
}
