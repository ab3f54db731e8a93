//! One-dimensional mixture-of-Gaussians source densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every Gaussian standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Source density `p(s) = Σ_q π_q N(s; μ_q, σ_q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogSource {
    weights: Vec<f64>,
    means: Vec<f64>,
    stdevs: Vec<f64>,
}

impl MogSource {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stdevs: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(Error::invalid("a MoG source needs at least one Gaussian"));
        }
        if means.len() != m || stdevs.len() != m {
            return Err(Error::shape(
                format!("{m} means and stdevs"),
                format!("{} means, {} stdevs", means.len(), stdevs.len()),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("MoG weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("MoG weights sum to {total}, not 1")));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MoG mean"));
        }
        if stdevs
            .iter()
            .any(|s| !(*s >= SIGMA_FLOOR) || !s.is_finite())
        {
            return Err(Error::invalid(format!(
                "MoG standard deviations must be finite and at least {SIGMA_FLOOR}"
            )));
        }
        Ok(MogSource {
            weights,
            means,
            stdevs,
        })
    }

    /// A single standard normal.
    pub fn standard_normal() -> Self {
        MogSource {
            weights: vec![1.0],
            means: vec![0.0],
            stdevs: vec![1.0],
        }
    }

    /// `m` equally weighted unit-variance Gaussians centred on the
    /// `(q − ½)/m` quantiles of a standard normal.
    pub fn quantile_init(m: usize) -> Result<Self> {
        use statrs::distribution::{ContinuousCDF, Normal};
        if m == 0 {
            return Err(Error::invalid("a MoG source needs at least one Gaussian"));
        }
        let normal = Normal::standard();
        let means = (0..m)
            .map(|q| normal.inverse_cdf((q as f64 + 0.5) / m as f64))
            .collect();
        Ok(MogSource {
            weights: vec![1.0 / m as f64; m],
            means,
            stdevs: vec![1.0; m],
        })
    }

    /// Super-Gaussian preset: `0.8·N(0, 0.3²) + 0.2·N(0, 2²)`.
    pub fn sparse() -> Self {
        MogSource {
            weights: vec![0.8, 0.2],
            means: vec![0.0, 0.0],
            stdevs: vec![0.3, 2.0],
        }
    }

    /// Sub-Gaussian preset: `0.5·N(−1, 0.4²) + 0.5·N(1, 0.4²)`.
    pub fn bimodal() -> Self {
        MogSource {
            weights: vec![0.5, 0.5],
            means: vec![-1.0, 1.0],
            stdevs: vec![0.4, 0.4],
        }
    }

    /// The same density after the change of variables `s ↦ a·s + b`.
    pub fn affine(&self, a: f64, b: f64) -> Result<Self> {
        MogSource::new(
            self.weights.clone(),
            self.means.iter().map(|m| a * m + b).collect(),
            self.stdevs.iter().map(|s| a.abs() * s).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stdevs(&self) -> &[f64] {
        &self.stdevs
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * m)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stdevs)
            .map(|((w, m), s)| w * (s * s + (m - mu) * (m - mu)))
            .sum()
    }

    pub fn logpdf(&self, s: f64) -> f64 {
        mog_logpdf(self, s)
    }

    /// Posterior over the Gaussian index given `s`.
    pub fn responsibilities(&self, s: f64) -> Vec<f64> {
        let mut terms = vec![0.0; self.len()];
        let lse = log_terms(self, s, &mut terms);
        terms.iter().map(|t| (t - lse).exp()).collect()
    }

    /// Draws one value.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        use rand::RngExt;
        use rand_distr::{Distribution, StandardNormal};
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut q = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                q = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[q] + self.stdevs[q] * z
    }
}

/// Writes `ln π_q + ln N(s; μ_q, σ_q)` into `terms` and returns their log-sum-exp.
pub(crate) fn log_terms(src: &MogSource, s: f64, terms: &mut [f64]) -> f64 {
    for (q, t) in terms.iter_mut().enumerate() {
        let z = (s - src.means[q]) / src.stdevs[q];
        *t = src.weights[q].ln() - LN_SQRT_2PI - src.stdevs[q].ln() - 0.5 * z * z;
    }
    log_sum_exp(terms)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log Σ_q π_q N(s; μ_q, σ_q)`, log-sum-exp stabilized.
pub fn mog_logpdf(src: &MogSource, s: f64) -> f64 {
    let mut terms = vec![0.0; src.len()];
    log_terms(src, s, &mut terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn gauss(s: f64, mu: f64, sigma: f64) -> f64 {
        (-(s - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
    }

    #[test]
    fn standard_normal_at_mode() {
        let v = mog_logpdf(&MogSource::standard_normal(), 0.0);
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn two_component_matches_direct_sum() {
        for a in [0.0, 0.5, 1.7, 4.0] {
            let src = MogSource::new(vec![0.5, 0.5], vec![-a, a], vec![1.0, 1.0]).unwrap();
            let direct = 0.5 * gauss(0.0, -a, 1.0) + 0.5 * gauss(0.0, a, 1.0);
            assert!((mog_logpdf(&src, 0.0) - direct.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        for src in [
            MogSource::sparse(),
            MogSource::bimodal(),
            MogSource::quantile_init(3).unwrap(),
        ] {
            let (lo, hi, n) = (-30.0, 30.0, 600_000);
            let h = (hi - lo) / n as f64;
            let mut sum = 0.5 * (mog_logpdf(&src, lo).exp() + mog_logpdf(&src, hi).exp());
            for i in 1..n {
                sum += mog_logpdf(&src, lo + i as f64 * h).exp();
            }
            assert!((sum * h - 1.0).abs() < 1e-8, "{}", sum * h);
        }
    }

    #[test]
    fn far_tail_stays_finite() {
        let v = mog_logpdf(&MogSource::sparse(), 1e4);
        assert!(v.is_finite() && v < -1e6);
    }

    #[test]
    fn quantile_init_is_symmetric() {
        let src = MogSource::quantile_init(3).unwrap();
        assert!((src.means()[0] + src.means()[2]).abs() < 1e-12);
        assert_eq!(src.means()[1], 0.0);
        assert!((src.means()[2] - 0.967_421_566).abs() < 1e-8);
    }

    #[test]
    fn validation() {
        assert!(MogSource::new(vec![0.5, 0.4], vec![0.0; 2], vec![1.0; 2]).is_err());
        assert!(MogSource::new(vec![1.0], vec![0.0], vec![1e-5]).is_err());
        assert!(MogSource::new(vec![1.0], vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(MogSource::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn moments_of_presets() {
        assert!((MogSource::sparse().variance() - 0.872).abs() < 1e-12);
        assert!((MogSource::bimodal().variance() - 1.16).abs() < 1e-12);
    }
}
