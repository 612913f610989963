//! Two-port interferometer counts and information bounds.
//!
//! Dark counts enter [`mean_counts`] and [`sample_counts`] only; the analytic
//! bounds describe the ideal, dark-free model.

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::rng::Rng;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    /// Detected photon flux µ, photons/µs.
    pub flux: f64,
    /// Window τ, µs.
    pub window: f64,
    /// Intrinsic visibility V0.
    pub visibility: f64,
    /// Dark counts per µs per detector.
    #[serde(default)]
    pub dark_rate: f64,
}

impl MeasurementConfig {
    pub fn new(flux: f64, window: f64, visibility: f64) -> Self {
        Self { flux, window, visibility, dark_rate: 0.0 }
    }

    /// Mean photon number N = µτ.
    pub fn photons(&self) -> f64 {
        self.flux * self.window
    }

    pub fn with_window(&self, window: f64) -> Self {
        Self { window, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.flux >= 0.0 && self.flux.is_finite(), || format!("flux must be ≥ 0, got {}", self.flux))?;
        ensure(self.window > 0.0 && self.window.is_finite(), || format!("window must be > 0, got {}", self.window))?;
        ensure((0.0..=1.0).contains(&self.visibility), || {
            format!("visibility must lie in [0, 1], got {}", self.visibility)
        })?;
        ensure(self.dark_rate >= 0.0 && self.dark_rate.is_finite(), || {
            format!("dark_rate must be ≥ 0, got {}", self.dark_rate)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PortCounts {
    pub n1: u64,
    pub n2: u64,
}

impl PortCounts {
    pub fn total(&self) -> u64 {
        self.n1 + self.n2
    }
}

/// `(λ1, λ2) = N/2·(1 ± V0 cos φ) + dark·τ`.
pub fn mean_counts(phi: f64, cfg: &MeasurementConfig) -> (f64, f64) {
    let half = 0.5 * cfg.photons();
    let c = cfg.visibility * phi.cos();
    let dark = cfg.dark_rate * cfg.window;
    (half * (1.0 + c) + dark, half * (1.0 - c) + dark)
}

pub fn poisson(lambda: f64, rng: &mut Rng) -> u64 {
    if lambda > 0.0 {
        Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
    } else {
        0
    }
}

pub fn sample_counts(phi: f64, cfg: &MeasurementConfig, rng: &mut Rng) -> PortCounts {
    let (l1, l2) = mean_counts(phi, cfg);
    PortCounts { n1: poisson(l1, rng), n2: poisson(l2, rng) }
}

/// True at the 0/0 point of [`fisher_info`] (V0 = 1, φ ∈ {0, π}).
pub fn fisher_is_degenerate(phi: f64, cfg: &MeasurementConfig) -> bool {
    1.0 - (cfg.visibility * phi.cos()).powi(2) < 1e-15
}

/// `I_F(φ) = N V0² sin²φ / (1 − V0² cos²φ)`; the limit `N` at the 0/0 point.
pub fn fisher_info(phi: f64, cfg: &MeasurementConfig) -> f64 {
    let n = cfg.photons();
    if fisher_is_degenerate(phi, cfg) {
        return n;
    }
    let v2 = cfg.visibility * cfg.visibility;
    n * v2 * phi.sin().powi(2) / (1.0 - v2 * phi.cos().powi(2))
}

/// Average information per window under diffusion, `µV0²τe^{−Dτ}`.
pub fn avg_fisher(cfg: &MeasurementConfig, d: f64) -> f64 {
    cfg.flux * cfg.visibility.powi(2) * cfg.window * (-d * cfg.window).exp()
}

pub fn effective_visibility(v0: f64, d: f64, tau: f64) -> f64 {
    v0 * (-0.5 * d * tau).exp()
}

/// Conventional MLE bound `e^{Dτ}/(µV0²τ) + Dτ`.
pub fn conv_variance_bound(cfg: &MeasurementConfig, d: f64) -> f64 {
    let tau = cfg.window;
    (d * tau).exp() / (cfg.flux * cfg.visibility.powi(2) * tau) + d * tau
}

/// Tracking shot-noise limit `√(D/(ηµV0²))`.
pub fn tracking_snl(d: f64, flux: f64, v0: f64, eta: f64) -> f64 {
    (d / (eta * flux * v0 * v0)).sqrt()
}

/// Prior information `1/(Dτ + √(D/(ηµV0²)))`.
pub fn prior_info(cfg: &MeasurementConfig, d: f64, eta: f64) -> f64 {
    1.0 / (d * cfg.window + tracking_snl(d, cfg.flux, cfg.visibility, eta))
}

/// Prior-assisted bound `1/(I_prior + Ī_F) + Dτ`.
pub fn bayes_variance_bound(cfg: &MeasurementConfig, d: f64, eta: f64) -> f64 {
    1.0 / (prior_info(cfg, d, eta) + avg_fisher(cfg, d)) + d * cfg.window
}
