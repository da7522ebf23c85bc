//! LMMSE estimates of the fading amplitude and receiver-side compensation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};

/// Jitter added to a zero noise level so the rank-one system stays invertible.
pub const SINGULAR_JITTER: f64 = 1e-12;

/// First two moments of the fading amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FadingPrior {
    pub mean: f64,
    pub variance: f64,
}

impl FadingPrior {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) || !mean.is_finite() {
            return Err(DrfError::invalid(format!("invalid fading prior mean {mean}, variance {variance}")));
        }
        Ok(Self { mean, variance })
    }

    /// Rayleigh amplitude with average power `Ω = 2σ²`:
    /// mean `σ√(π/2)`, variance `(2 − π/2)σ²`.
    pub fn rayleigh(omega: f64) -> Self {
        let s2 = omega / 2.0;
        Self { mean: s2.sqrt() * (PI / 2.0).sqrt(), variance: (2.0 - PI / 2.0) * s2 }
    }

    /// Deterministic unit gain (AWGN).
    pub fn unit() -> Self {
        Self { mean: 1.0, variance: 0.0 }
    }
}

/// Encoder-side CSI source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsiMode {
    /// The encoder uses the true fading amplitudes.
    #[default]
    Exact,
    /// The encoder uses LMMSE estimates from its feedback observations.
    Estimated,
}

/// Fast-fading LMMSE estimate of `α_{i-1}` from `z_i = α_{i-1} x_{i-1} + n + m`.
pub fn lmmse_fast(z: f64, x_prev: f64, prior: FadingPrior, noise_var: f64, feedback_var: f64) -> f64 {
    let s = noise_var + feedback_var;
    let den = x_prev * x_prev * prior.variance + s;
    if den == 0.0 {
        return prior.mean;
    }
    (x_prev * prior.variance * z + s * prior.mean) / den
}

/// Slow-fading LMMSE estimate from the causal history.
///
/// `z` holds `z_1..z_i` and `x` holds `x_1..x_{i-1}`; observation `z_{j+1}`
/// carries `α·x_j`. With no observations the prior mean is returned. The
/// observation covariance `var(α)·x xᵀ + s·I` is rank-one plus identity, so
/// the inverse is applied in closed form (Sherman–Morrison).
pub fn lmmse_slow(z: &[f64], x: &[f64], prior: FadingPrior, noise_var: f64, feedback_var: f64) -> Result<f64> {
    if z.is_empty() {
        return Err(DrfError::invalid("slow LMMSE needs at least z_1"));
    }
    if x.len() + 1 != z.len() {
        return Err(DrfError::invalid(format!("{} symbols for {} feedback values", x.len(), z.len())));
    }
    if x.is_empty() {
        return Ok(prior.mean);
    }
    let obs = &z[1..];
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let xo: f64 = x.iter().zip(obs).map(|(a, b)| a * b).sum();
    Ok(lmmse_slow_from_sums(xx, xo, prior, noise_var, feedback_var))
}

/// [`lmmse_slow`] from the sufficient statistics `Σx_j²` and `Σx_j·z_{j+1}`.
pub fn lmmse_slow_from_sums(xx: f64, xo: f64, prior: FadingPrior, noise_var: f64, feedback_var: f64) -> f64 {
    let mut s = noise_var + feedback_var;
    if s == 0.0 {
        s = SINGULAR_JITTER;
    }
    // var·xᵀ(var·xxᵀ + sI)⁻¹ = var·xᵀ / (s + var·‖x‖²)
    let den = s + prior.variance * xx;
    let gain_o = prior.variance * xo / den;
    let gain_x = prior.variance * xx / den;
    gain_o + prior.mean * (1.0 - gain_x)
}

/// LMMSE scaling of a received symbol with known amplitude: `α·y / (α² + σ_n²)`.
pub fn receiver_compensate(y: f64, alpha: f64, noise_var: f64) -> f64 {
    let den = alpha * alpha + noise_var;
    if den == 0.0 {
        0.0
    } else {
        alpha * y / den
    }
}

/// Multiplier applied to `y` by [`receiver_compensate`].
pub fn compensation_gain(alpha: f64, noise_var: f64) -> f64 {
    receiver_compensate(1.0, alpha, noise_var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_estimator_edge_cases() {
        let prior = FadingPrior::new(0.8, 0.0).unwrap();
        for z in [-3.0, 0.0, 2.5] {
            assert_eq!(lmmse_fast(z, 1.0, prior, 1.0, 0.1), 0.8);
        }
        let prior = FadingPrior::rayleigh(1.0);
        assert_eq!(lmmse_fast(0.37, 1.0, prior, 0.0, 0.0), 0.37);
        // 0/0 limit
        assert_eq!(lmmse_fast(0.37, 0.0, FadingPrior::new(0.5, 0.0).unwrap(), 0.0, 0.0), 0.5);
    }

    #[test]
    fn slow_estimator_edge_cases() {
        let prior = FadingPrior::rayleigh(1.0);
        assert_eq!(lmmse_slow(&[0.4], &[], prior, 1.0, 0.0).unwrap(), prior.mean);
        let alpha = 0.6;
        let est = lmmse_slow(&[0.0, alpha], &[1.0], prior, 0.0, 0.0).unwrap();
        assert!((est - alpha).abs() < 1e-10);
        assert!(lmmse_slow(&[0.0, 1.0], &[], prior, 1.0, 0.0).is_err());
    }

    #[test]
    fn rayleigh_prior_moments() {
        let p = FadingPrior::rayleigh(1.0);
        assert!((p.mean - 0.886_226_925).abs() < 1e-9);
        assert!((p.variance - 0.214_601_837).abs() < 1e-9);
        assert!((p.mean * p.mean + p.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compensation_values() {
        assert_eq!(receiver_compensate(1.3, 1.0, 0.0), 1.3);
        assert_eq!(receiver_compensate(2.0, 1.0, 1.0), 1.0);
    }
}
