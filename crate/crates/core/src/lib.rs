//! Phase tracking under photon-starved two-port detection.
//!
//! The crate models a diffusing optical phase ([`noisegen`]), the Poisson
//! two-port measurement and its information bounds ([`optics`]), the MLE and
//! prior-assisted recursive Bayesian estimators ([`tracker`]), a discrete-time
//! duty-gated servo loop ([`servo`]) and the fitting and sweep tools used to
//! calibrate and evaluate it ([`analysis`]).
//!
//! Time is in microseconds throughout, phases in radians, diffusion
//! coefficients in rad²/µs and fluxes in photons/µs.

pub mod analysis;
mod error;
mod linalg;
pub mod noisegen;
pub mod optics;
pub mod rng;
pub mod servo;
pub mod tracker;

pub use error::{Error, Result};

use std::f64::consts::PI;

/// Wraps an angle into (−π, π].
pub fn wrap(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept, r²)`.
pub fn line_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return Err(Error::Fit(format!("line fit needs ≥ 2 paired points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("line fit with zero spread in x".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok((slope, intercept, r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_range() {
        assert_eq!(wrap(PI), PI);
        assert!((wrap(-PI) - PI).abs() < 1e-12);
        assert!((wrap(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((wrap(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn line_fit_exact() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let (s, c, r2) = line_fit(&x, &y).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (c + 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
