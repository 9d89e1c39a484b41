//! Monte Carlo estimates and deterministic reductions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Sample mean with its standard error, the sample count and the seed that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
    pub seed: u64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64], seed: u64) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { estimate: mean, std_error: (var / n as f64).sqrt(), n, seed }
    }

    pub fn exact(value: f64, seed: u64) -> Self {
        Self { estimate: value, std_error: 0.0, n: 0, seed }
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_se(&self, other: &Estimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        (self.estimate - target).abs() <= sigmas * self.std_error
    }
}

/// Evaluates `k` path functionals for paths `0..n` in parallel; output is row-major by path
/// and identical for any thread count.
pub fn sample_paths<F>(n: usize, k: usize, f: F) -> Vec<f64>
where
    F: Fn(u64, &mut [f64]) + Sync,
{
    let mut out = vec![0.0; n * k];
    if k == 0 {
        return out;
    }
    out.par_chunks_mut(k).enumerate().for_each(|(i, row)| f(i as u64, row));
    out
}

/// Column `j` of a row-major sample table with `k` columns.
pub fn column(table: &[f64], k: usize, j: usize) -> Vec<f64> {
    table.iter().skip(j).step_by(k).copied().collect()
}

/// Estimates of every column of a row-major sample table.
pub fn column_estimates(table: &[f64], k: usize, seed: u64) -> Vec<Estimate> {
    (0..k).map(|j| Estimate::from_samples(&column(table, k, j), seed)).collect()
}

/// Single-functional convenience wrapper around [`sample_paths`].
pub fn monte_carlo<F>(n: usize, seed: u64, f: F) -> Estimate
where
    F: Fn(u64) -> f64 + Sync,
{
    let samples = sample_paths(n, 1, |i, row| row[0] = f(i));
    Estimate::from_samples(&samples, seed)
}

/// Median of group means; robust for heavy-tailed samples.
pub fn median_of_means(samples: &[f64], groups: usize) -> f64 {
    let groups = groups.clamp(1, samples.len().max(1));
    let size = samples.len() / groups;
    let mut means: Vec<f64> = (0..groups)
        .map(|g| samples[g * size..(g + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    median(&mut means)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Empirical quantile by linear interpolation, `q` in [0, 1].
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// Means of `groups` equal consecutive batches; used for batch standard errors of ratios.
pub fn batch_means(samples: &[f64], groups: usize) -> Vec<f64> {
    let size = samples.len() / groups;
    (0..groups)
        .map(|g| samples[g * size..(g + 1) * size].iter().sum::<f64>() / size as f64)
        .collect()
}

/// Standard error of the mean of batch statistics.
pub fn batch_se(stats: &[f64]) -> f64 {
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let var = stats.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_of_known_samples() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0], 0);
        assert_eq!(e.estimate, 2.5);
        let var = (2.25 + 0.25 + 0.25 + 2.25) / 3.0;
        assert!((e.std_error - (var / 4.0f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sample_paths_is_ordered() {
        let t = sample_paths(100, 2, |i, row| {
            row[0] = i as f64;
            row[1] = 2.0 * i as f64;
        });
        assert_eq!(column(&t, 2, 1)[37], 74.0);
    }

    #[test]
    fn median_and_quantiles() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(quantile(&mut [0.0, 10.0], 0.25), 2.5);
        assert_eq!(median_of_means(&[1.0, 1.0, 5.0, 5.0, 9.0, 9.0], 3), 5.0);
    }
}
