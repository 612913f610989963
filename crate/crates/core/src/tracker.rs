//! Phase estimators: per-window MLE, the Gaussian recursive update and the
//! nonlinear innovation filter.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::optics::{self, MeasurementConfig, PortCounts};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    /// Posterior mean, unwrapped.
    pub estimate: f64,
    pub variance: f64,
    pub step_index: u64,
}

impl EstimatorState {
    pub fn new(estimate: f64, variance: f64) -> Self {
        Self { estimate, variance, step_index: 0 }
    }
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kappa: f64,
    /// Squared prior coefficient D_p, rad²/µs^{2p}.
    pub prior_diffusion: f64,
    #[serde(default = "half")]
    pub prior_exponent: f64,
}

impl FilterConfig {
    pub fn new(kappa: f64, prior_diffusion: f64) -> Self {
        Self { kappa, prior_diffusion, prior_exponent: 0.5 }
    }

    /// Prior deviation over an elapsed interval, `√D_p·T^p`.
    pub fn sigma_prior(&self, elapsed: f64) -> f64 {
        self.prior_diffusion.sqrt() * elapsed.powf(self.prior_exponent)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.kappa > 0.0, || format!("kappa must be > 0, got {}", self.kappa))?;
        ensure(self.prior_diffusion >= 0.0 && self.prior_diffusion.is_finite(), || {
            format!("prior_diffusion must be ≥ 0, got {}", self.prior_diffusion)
        })?;
        ensure((0.5..=1.0).contains(&self.prior_exponent), || {
            format!("prior_exponent must lie in [0.5, 1], got {}", self.prior_exponent)
        })
    }
}

/// How a Bayes-mode tracker turns an innovation into a correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Unit gain on the filtered innovation, `φ̂ += f(ν; σ_p, κ)`.
    #[default]
    Limiter,
    /// Precision-weighted gain, `φ̂ += K·f(ν; σ_p/K, κ) = f(Kν; σ_p, κ)`.
    Kalman,
}

/// Maximum-likelihood phase of a two-port count pair, on the branch nearest
/// `anchor`.
pub fn mle_phase(counts: PortCounts, cfg: &MeasurementConfig, anchor: f64) -> Result<f64> {
    let n = counts.total();
    if n == 0 || cfg.visibility <= 0.0 {
        return Err(Error::NoInformation);
    }
    let c = ((counts.n1 as f64 - counts.n2 as f64) / (cfg.visibility * n as f64)).clamp(-1.0, 1.0);
    let a = c.acos();
    let mut best = f64::NAN;
    for base in [a, -a] {
        let m = ((anchor - base) / (2.0 * PI)).round();
        let cand = base + 2.0 * PI * m;
        if best.is_nan() || (cand - anchor).abs() < (best - anchor).abs() {
            best = cand;
        }
    }
    Ok(best)
}

/// Deviation from the π/2 lock point, `arcsin(−(n1 − n2)/(V0·n))`; 0 without counts.
pub fn error_signal(counts: PortCounts, cfg: &MeasurementConfig) -> f64 {
    let n = counts.total();
    if n == 0 || cfg.visibility <= 0.0 {
        return 0.0;
    }
    let x = -(counts.n1 as f64 - counts.n2 as f64) / (cfg.visibility * n as f64);
    x.clamp(-1.0, 1.0).asin()
}

/// Soft limiter: identity inside `κσ`, exponentially compressed excess beyond.
pub fn innovation_filter(delta: f64, sigma_prior: f64, kappa: f64) -> f64 {
    let thr = kappa * sigma_prior;
    let mag = delta.abs();
    if mag <= thr {
        return delta;
    }
    let excess = mag - thr;
    let tail = if sigma_prior > 0.0 { excess * (-excess / sigma_prior).exp() } else { 0.0 };
    delta.signum() * (thr + tail)
}

/// Gaussian posterior update: `σ²₊ = 1/(1/(σ² + drift) + info)`, mean moved by
/// `σ²₊·info` times the (already filtered) innovation.
pub fn bayes_update(state: EstimatorState, innovation: f64, info: f64, drift_var: f64) -> EstimatorState {
    let v = state.variance + drift_var;
    let (variance, gain) = if info.is_infinite() {
        (0.0, 1.0)
    } else if v.is_infinite() {
        (1.0 / info, 1.0)
    } else {
        let nv = 1.0 / (1.0 / v + info);
        (nv, nv * info)
    };
    EstimatorState {
        estimate: state.estimate + gain * innovation,
        variance,
        step_index: state.step_index + 1,
    }
}

const SS_TOL: f64 = 1e-10;
const SS_MAX_ITER: usize = 100_000;

/// Positive fixed point of `x = 1/(1/(x + Dτ) + ηµV0²τe^{−Dτ})`.
///
/// Solved by Steffensen-accelerated fixed-point iteration, falling back to a
/// plain step whenever the accelerated step is not usable.
pub fn steady_state_variance(d: f64, tau: f64, flux: f64, v0: f64, eta: f64) -> Result<f64> {
    ensure(d > 0.0 && tau > 0.0 && flux > 0.0 && v0 > 0.0 && eta > 0.0, || {
        "steady_state_variance needs positive inputs".into()
    })?;
    let a = d * tau;
    let info = eta * flux * v0 * v0 * tau * (-a).exp();
    if info.is_infinite() {
        return Ok(0.0);
    }
    let g = |x: f64| 1.0 / (1.0 / (x + a) + info);
    let mut x = (a / info).sqrt().min(1.0 / info).max(f64::MIN_POSITIVE);
    for _ in 0..SS_MAX_ITER {
        let g1 = g(x);
        let g2 = g(g1);
        let den = g2 - 2.0 * g1 + x;
        let mut next = if den.abs() > 1e-300 { x - (g1 - x).powi(2) / den } else { g2 };
        if !(next > 0.0 && next.is_finite()) {
            next = g2;
        }
        if (next - x).abs() <= SS_TOL * next {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::Numerical(format!("steady state did not converge in {SS_MAX_ITER} iterations")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtaEstimate {
    pub eta: f64,
    /// 95% half-width from batch means.
    pub ci_half_width: f64,
    pub trials: usize,
    /// Set when `trials < 1000`.
    pub wide_ci: bool,
    /// Empirical steady posterior variance behind the estimate.
    pub variance: f64,
}

const ETA_BATCHES: usize = 20;

/// Filter efficiency `η(κ)` from an open recursion at a pinned operating point.
///
/// The true phase diffuses with rate `d`; each window draws two-port counts at
/// the lock point offset by the tracking error, forms the score-linearized
/// measurement `(n2 − n1)/(V(τ)·N)` and applies the Kalman rule with the
/// prior threshold `σ_p = √(dτ)`. With `s²` the realized post-update mean
/// squared error, `η = (1/s² − 1/(s² + dτ)) / (µV0²τe^{−dτ})`.
pub fn estimate_eta(kappa: f64, cfg: &MeasurementConfig, d: f64, trials: usize, seed: u64) -> Result<EtaEstimate> {
    cfg.validate()?;
    ensure(kappa > 0.0 && d > 0.0 && cfg.flux > 0.0 && cfg.visibility > 0.0, || {
        "estimate_eta needs positive kappa, diffusion, flux and visibility".into()
    })?;
    ensure(trials >= 2 * ETA_BATCHES, || format!("estimate_eta needs ≥ {} trials", 2 * ETA_BATCHES))?;
    let tau = cfg.window;
    let drift = d * tau;
    let n_mean = cfg.photons();
    let info = optics::avg_fisher(cfg, d);
    let v_eff = optics::effective_visibility(cfg.visibility, d, tau);
    let probe = MeasurementConfig { visibility: v_eff, ..*cfg };
    let sigma_p = drift.sqrt();
    let mut r = rng::stream(seed, rng::COUNTS);
    let mut walk = rng::stream(seed, rng::WIENER);

    let mut phi = 0.0;
    let mut st = EstimatorState::new(0.0, drift);
    let burn = trials / 10;
    let per = (trials - burn) / ETA_BATCHES;
    let mut sums = [0.0; ETA_BATCHES];
    for k in 0..burn + per * ETA_BATCHES {
        let z: f64 = walk.sample(StandardNormal);
        phi += sigma_p * z;
        let counts = optics::sample_counts(FRAC_PI_2 + (phi - st.estimate), &probe, &mut r);
        let meas = (counts.n2 as f64 - counts.n1 as f64) / (v_eff * n_mean);
        let v = st.variance + drift;
        let gain = info / (1.0 / v + info);
        let nu = innovation_filter(meas, sigma_p / gain, kappa);
        st = bayes_update(st, nu, info, drift);
        if k >= burn {
            sums[(k - burn) / per] += (phi - st.estimate).powi(2);
        }
    }
    let eta_of = |s2: f64| (1.0 / s2 - 1.0 / (s2 + drift)) / info;
    let s2 = sums.iter().sum::<f64>() / (per * ETA_BATCHES) as f64;
    let batch: Vec<f64> = sums.iter().map(|s| eta_of(s / per as f64)).collect();
    let mb = batch.iter().sum::<f64>() / ETA_BATCHES as f64;
    let sd = (batch.iter().map(|e| (e - mb).powi(2)).sum::<f64>() / (ETA_BATCHES - 1) as f64).sqrt();
    Ok(EtaEstimate {
        eta: eta_of(s2),
        ci_half_width: 1.96 * sd / (ETA_BATCHES as f64).sqrt(),
        trials,
        wide_ci: trials < 1000,
        variance: s2,
    })
}
