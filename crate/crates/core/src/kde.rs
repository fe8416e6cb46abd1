//! Gaussian kernel density estimates of per-δ error distributions.

use crate::dynamics::ErrorGrid;
use crate::error::{Error, Result};
use crate::linalg::exact_mean;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian KDE with a fixed bandwidth.
#[derive(Debug, Clone)]
pub struct Kde {
    samples: Vec<f64>,
    bandwidth: f64,
}

/// Estimated error distribution for one δ row.
#[derive(Debug, Clone)]
pub enum ErrorDensity {
    /// All samples identical (e.g. δ = 0).
    PointMass(f64),
    Smooth(Kde),
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule: 0.9·min(σ, IQR/1.34)·n^(−1/5); σ alone when the IQR vanishes.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = exact_mean(samples);
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

impl Kde {
    pub fn new(samples: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if samples.is_empty() || !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(
                "KDE needs samples and a positive bandwidth".into(),
            ));
        }
        Ok(Self { samples, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let sum: f64 = self
            .samples
            .iter()
            .map(|s| {
                let z = (x - s) / h;
                (-0.5 * z * z).exp()
            })
            .sum();
        sum * INV_SQRT_2PI / (h * self.samples.len() as f64)
    }

    /// Mean of the estimated distribution; a symmetric kernel leaves the sample mean unchanged.
    pub fn mean(&self) -> f64 {
        exact_mean(&self.samples)
    }

    /// Interval holding all but a negligible tail of the estimate.
    pub fn support(&self) -> (f64, f64) {
        let (lo, hi) = self
            .samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        (lo - 8.0 * self.bandwidth, hi + 8.0 * self.bandwidth)
    }
}

impl ErrorDensity {
    /// Silverman-bandwidth estimate, or a point mass when every sample coincides.
    pub fn estimate(samples: &[f64]) -> Result<Self> {
        let first = *samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty sample row".into()))?;
        if samples.iter().all(|&s| s == first) {
            return Ok(Self::PointMass(first));
        }
        Ok(Self::Smooth(Kde::new(samples.to_vec(), silverman_bandwidth(samples))?))
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::PointMass(v) => *v,
            Self::Smooth(k) => k.mean(),
        }
    }
}

/// Density of the errors in row `n` of the grid.
pub fn kde_error_density(grid: &ErrorGrid, n: usize) -> Result<ErrorDensity> {
    if n >= grid.rows() {
        return Err(Error::InvalidArgument(format!(
            "row {n} outside grid of {} rows",
            grid.rows()
        )));
    }
    ErrorDensity::estimate(grid.row(n))
}
