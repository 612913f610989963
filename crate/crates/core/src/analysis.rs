//! Calibration, fitting and parameter sweeps.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::noisegen::{NoiseModel, PhaseTrajectory};
use crate::optics::{self, MeasurementConfig};
use crate::rng;
use crate::servo::{self, Estimator, ServoConfig};
use crate::tracker::FilterConfig;
use crate::{line_fit, linalg, wrap, Error, Result};

pub const BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionPoint {
    pub tau: f64,
    pub std: f64,
    /// 95% half-width from overlapping windows with an effective sample size
    /// of `(n − lag)/lag`.
    pub ci: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionFit {
    pub exponent: f64,
    /// rad/µs^p.
    pub coeff: f64,
    pub r_squared: f64,
    pub tau_range: (f64, f64),
    pub points: Vec<DiffusionPoint>,
}

impl DiffusionFit {
    /// Prior configuration implied by the fit.
    pub fn filter(&self, kappa: f64) -> FilterConfig {
        FilterConfig { kappa, prior_diffusion: self.coeff * self.coeff, prior_exponent: self.exponent.clamp(0.5, 1.0) }
    }
}

fn sample_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Power-law fit of increment deviation against lag on log-log axes.
pub fn calibrate_diffusion(traj: &PhaseTrajectory, taus: &[f64]) -> Result<DiffusionFit> {
    let mut lags: Vec<usize> = taus.iter().map(|t| (t / traj.step_size).round() as usize).collect();
    lags.sort_unstable();
    lags.dedup();
    lags.retain(|&l| l >= 1);
    if lags.len() < 4 {
        return Err(Error::Fit(format!("need ≥ 4 distinct taus, got {}", lags.len())));
    }
    let x = &traj.samples;
    let mut points = vec![];
    for &lag in &lags {
        let inc: Vec<f64> = x.iter().step_by(lag).collect::<Vec<_>>().windows(2).map(|w| w[1] - w[0]).collect();
        if inc.len() < 2 {
            return Err(Error::Fit(format!("tau {} beyond trajectory span", lag as f64 * traj.step_size)));
        }
        let s = sample_std(&inc);
        if !(s > 0.0) {
            return Err(Error::Fit(format!("zero increment deviation at tau {}", lag as f64 * traj.step_size)));
        }
        let n_eff = ((x.len() - lag) as f64 / lag as f64).max(1.0);
        points.push(DiffusionPoint { tau: lag as f64 * traj.step_size, std: s, ci: 1.96 * s / (2.0 * n_eff).sqrt(), windows: inc.len() });
    }
    let lx: Vec<f64> = points.iter().map(|p| p.tau.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.std.ln()).collect();
    let (slope, icept, r2) = line_fit(&lx, &ly)?;
    Ok(DiffusionFit {
        exponent: slope,
        coeff: icept.exp(),
        r_squared: r2,
        tau_range: (points[0].tau, points[points.len() - 1].tau),
        points,
    })
}

pub fn visibility_from_counts(c1: u64, c2: u64) -> Result<f64> {
    if c1 + c2 == 0 {
        return Err(Error::NoInformation);
    }
    Ok((c1 as f64 - c2 as f64) / (c1 + c2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibilityFit {
    pub v0: f64,
    pub ci: f64,
    pub rss: f64,
}

fn percentile_half_width(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let at = |q: f64| xs[((xs.len() - 1) as f64 * q).round() as usize];
    0.5 * (at(0.975) - at(0.025))
}

fn vis_ls(points: &[(f64, f64)]) -> Option<f64> {
    let smm: f64 = points.iter().map(|(p, _)| (FRAC_PI_2 + p).cos().powi(2)).sum();
    let svm: f64 = points.iter().map(|(p, v)| v * (FRAC_PI_2 + p).cos()).sum();
    (smm > 0.0).then(|| svm / smm)
}

/// Least-squares `V0` of `v = V0·cos(π/2 + φ)` with a bootstrap half-width.
pub fn fit_visibility(points: &[(f64, f64)]) -> Result<VisibilityFit> {
    fit_visibility_seeded(points, BOOTSTRAP_RESAMPLES, 0)
}

pub fn fit_visibility_seeded(points: &[(f64, f64)], resamples: usize, seed: u64) -> Result<VisibilityFit> {
    ensure(points.len() >= 3, || format!("visibility fit needs ≥ 3 points, got {}", points.len()))?;
    if points.iter().all(|(_, v)| *v == 0.0) {
        return Err(Error::Fit("all visibilities are zero".into()));
    }
    let v0 = vis_ls(points).ok_or_else(|| Error::Fit("no phase leverage in visibility points".into()))?;
    let rss = points.iter().map(|(p, v)| (v - v0 * (FRAC_PI_2 + p).cos()).powi(2)).sum();
    let mut r = rng::stream(seed, rng::BOOTSTRAP);
    let boots: Vec<f64> = (0..resamples)
        .filter_map(|_| {
            let s: Vec<(f64, f64)> = (0..points.len()).map(|_| points[r.random_range(0..points.len())]).collect();
            vis_ls(&s)
        })
        .collect();
    let ci = if boots.len() >= 2 { percentile_half_width(boots) } else { f64::NAN };
    Ok(VisibilityFit { v0, ci, rss })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParityFit {
    pub a: f64,
    pub phi0: f64,
    pub rss: f64,
    /// Bootstrap 95% half-width of `a`.
    pub a_ci: f64,
    /// Set when `a` vanishes and `phi0` is arbitrary.
    pub degenerate: bool,
}

fn parity_ls(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let a = DMatrix::from_fn(points.len(), 2, |i, j| {
        let x = 2.0 * points[i].0;
        if j == 0 { x.sin() } else { x.cos() }
    });
    let b = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let x = linalg::lstsq(&a, &b)?;
    Some((x[0], x[1]))
}

/// Least-squares `P(φ) = A·sin(2φ + φ0)` with `A ≥ 0`.
pub fn fit_parity(points: &[(f64, f64)]) -> Result<ParityFit> {
    fit_parity_seeded(points, BOOTSTRAP_RESAMPLES, 0)
}

pub fn fit_parity_seeded(points: &[(f64, f64)], resamples: usize, seed: u64) -> Result<ParityFit> {
    ensure(points.len() >= 3, || format!("parity fit needs ≥ 3 points, got {}", points.len()))?;
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > FRAC_PI_2) {
        return Err(Error::Fit(format!("parity phases span {} rad, need > π/2", hi - lo)));
    }
    let (b1, b2) = parity_ls(points).ok_or_else(|| Error::Fit("singular parity design".into()))?;
    let a = b1.hypot(b2);
    let degenerate = a < 1e-12;
    let phi0 = if degenerate { 0.0 } else { wrap(b2.atan2(b1)) };
    let rss = points.iter().map(|(p, v)| (v - a * (2.0 * p + phi0).sin()).powi(2)).sum();
    let mut r = rng::stream(seed, rng::BOOTSTRAP);
    let boots: Vec<f64> = (0..resamples)
        .filter_map(|_| {
            let s: Vec<(f64, f64)> = (0..points.len()).map(|_| points[r.random_range(0..points.len())]).collect();
            parity_ls(&s).map(|(x, y)| x.hypot(y))
        })
        .collect();
    let a_ci = if boots.len() >= 2 { percentile_half_width(boots) } else { f64::NAN };
    Ok(ParityFit { a, phi0, rss, a_ci, degenerate })
}

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> f64 {
    libm::j0(x)
}

/// How the excitation probability α reduces parity contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPenalty {
    /// `1 − α`.
    #[default]
    Linear,
    /// `(1 − α)²`.
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParityBudget {
    /// σ_θ², rad².
    pub phase_stab: f64,
    /// `(k·A_m, k·σ)`.
    pub motion: (f64, f64),
    pub excitation_alpha: f64,
    pub manipulation_err: f64,
    pub decoherence_err: f64,
    /// Heralding signal-to-noise ratio; `f64::INFINITY` for none.
    pub snr: f64,
    #[serde(default)]
    pub alpha_penalty: AlphaPenalty,
}

impl ParityBudget {
    pub fn ideal() -> Self {
        Self {
            phase_stab: 0.0,
            motion: (0.0, 0.0),
            excitation_alpha: 0.0,
            manipulation_err: 0.0,
            decoherence_err: 0.0,
            snr: f64::INFINITY,
            alpha_penalty: AlphaPenalty::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.phase_stab, self.motion.0, self.motion.1, self.manipulation_err, self.decoherence_err, self.snr];
        ensure(all.iter().all(|v| *v >= 0.0), || "parity budget terms must be ≥ 0".into())?;
        ensure((0.0..=1.0).contains(&self.excitation_alpha), || "excitation_alpha must lie in [0, 1]".into())
    }
}

/// Product of the independent contrast factors of a parity budget.
pub fn parity_contrast(b: &ParityBudget, v0: f64) -> f64 {
    let (ka, ks) = b.motion;
    let alpha = match b.alpha_penalty {
        AlphaPenalty::Linear => 1.0 - b.excitation_alpha,
        AlphaPenalty::Quadratic => (1.0 - b.excitation_alpha).powi(2),
    };
    let link = if b.snr.is_infinite() { 1.0 } else { 1.0 - 1.0 / (b.snr + 1.0) };
    v0 * (-0.5 * b.phase_stab).exp()
        * bessel_j0(2.0 * ka)
        * (-2.0 * ks * ks).exp()
        * alpha
        * (1.0 - b.manipulation_err)
        * (1.0 - b.decoherence_err)
        * link
}

/// Run-length policy for Monte-Carlo sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBudget {
    /// µs.
    pub min_duration: f64,
    pub min_windows: usize,
    /// Longest actuator tick, µs.
    pub max_tick: f64,
    pub max_ticks_per_window: usize,
}

impl Default for SimBudget {
    fn default() -> Self {
        Self { min_duration: 2.0e5, min_windows: 2000, max_tick: 1.0, max_ticks_per_window: 50 }
    }
}

impl SimBudget {
    pub fn duration(&self, tau: f64) -> f64 {
        self.min_duration.max(self.min_windows as f64 * tau)
    }

    fn servo(&self, tau: f64, mu: f64, v0: f64, filter: FilterConfig) -> ServoConfig {
        ServoConfig::continuous(MeasurementConfig::new(mu, tau, v0), filter, self.max_tick, self.max_ticks_per_window)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceCell {
    pub tau: f64,
    pub mu: f64,
    pub conv_bound: f64,
    pub bayes_bound: f64,
    pub mle_variance: f64,
    pub bayes_variance: f64,
    pub mle_sem: f64,
    pub bayes_sem: f64,
    pub mle_lock_losses: usize,
    pub bayes_lock_losses: usize,
    pub advantage: bool,
}

fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Analytic bounds and Monte-Carlo residual variances over a `(τ, µ)` grid.
///
/// Wiener noise of rate `d`; the filter prior uses the same rate. Both
/// estimators see identical seeds in every cell.
pub fn variance_surface(
    taus: &[f64],
    mus: &[f64],
    d: f64,
    v0: f64,
    kappa: f64,
    seeds: &[u64],
    budget: &SimBudget,
) -> Result<Vec<SurfaceCell>> {
    ensure(!taus.is_empty() && !mus.is_empty(), || "surface grids must be non-empty".into())?;
    ensure(!seeds.is_empty(), || "surface needs at least one seed".into())?;
    let noise = NoiseModel::wiener(d);
    let filter = FilterConfig::new(kappa, d);
    let mut jobs = vec![];
    for &mu in mus {
        for &tau in taus {
            for est in [Estimator::Mle, Estimator::Bayes] {
                for &s in seeds {
                    jobs.push((mu, tau, est, s));
                }
            }
        }
    }
    let runs: Vec<Result<(f64, usize)>> = jobs
        .par_iter()
        .map(|&(mu, tau, est, s)| {
            let cfg = budget.servo(tau, mu, v0, filter);
            let r = servo::run_closed_loop(&noise, &cfg, est, budget.duration(tau), s)?;
            Ok((r.residual_variance, r.lock_losses))
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let ns = seeds.len();
    let mut cells = vec![];
    for (k, chunk) in runs.chunks(2 * ns).enumerate() {
        let (mu, tau, _, _) = jobs[k * 2 * ns];
        let mle: Vec<f64> = chunk[..ns].iter().map(|r| r.0).collect();
        let bay: Vec<f64> = chunk[ns..].iter().map(|r| r.0).collect();
        let (mm, ms) = mean_sem(&mle);
        let (bm, bs) = mean_sem(&bay);
        let cfg = MeasurementConfig::new(mu, tau, v0);
        cells.push(SurfaceCell {
            tau,
            mu,
            conv_bound: optics::conv_variance_bound(&cfg, d),
            bayes_bound: optics::bayes_variance_bound(&cfg, d, 1.0),
            mle_variance: mm,
            bayes_variance: bm,
            mle_sem: ms,
            bayes_sem: bs,
            mle_lock_losses: chunk[..ns].iter().map(|r| r.1).sum(),
            bayes_lock_losses: chunk[ns..].iter().map(|r| r.1).sum(),
            advantage: bm < mm,
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSplit {
    pub mus: Vec<f64>,
    /// Per µ: minimum over τ of the MLE variance, and where it occurs.
    pub mle_min: Vec<f64>,
    pub mle_argmin_tau: Vec<f64>,
    /// Per µ: Bayes variance at the smallest τ of the grid.
    pub bayes_small_tau: Vec<f64>,
    pub small_tau: f64,
    pub mle_slope: f64,
    pub bayes_slope: f64,
}

/// Log-log slopes versus µ of the MLE min-over-τ variance and of the Bayes
/// variance at the smallest τ.
pub fn scaling_split(cells: &[SurfaceCell]) -> Result<ScalingSplit> {
    let mut mus: Vec<f64> = cells.iter().map(|c| c.mu).collect();
    mus.sort_by(f64::total_cmp);
    mus.dedup();
    ensure(mus.len() >= 2, || "scaling needs ≥ 2 flux values".into())?;
    let small_tau = cells.iter().map(|c| c.tau).fold(f64::INFINITY, f64::min);
    let (mut mle_min, mut mle_arg, mut bayes) = (vec![], vec![], vec![]);
    for &mu in &mus {
        let row: Vec<&SurfaceCell> = cells.iter().filter(|c| c.mu == mu).collect();
        let best = row.iter().min_by(|a, b| a.mle_variance.total_cmp(&b.mle_variance)).unwrap();
        mle_min.push(best.mle_variance);
        mle_arg.push(best.tau);
        bayes.push(row.iter().find(|c| c.tau == small_tau).unwrap().bayes_variance);
    }
    Ok(ScalingSplit {
        mle_slope: servo::loglog_slope(&mus, &mle_min)?,
        bayes_slope: servo::loglog_slope(&mus, &bayes)?,
        mus,
        mle_min,
        mle_argmin_tau: mle_arg,
        bayes_small_tau: bayes,
        small_tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaRow {
    pub kappa: f64,
    pub tau: f64,
    pub variance: f64,
    pub sem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaOptimum {
    pub tau: f64,
    pub best_kappa: f64,
    pub best_variance: f64,
    pub mle_variance: f64,
    /// Bayes variance at the κ nearest `reference_kappa`.
    pub reference_variance: f64,
    /// Bayes at the reference κ beats MLE.
    pub advantage: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaSweep {
    pub rows: Vec<KappaRow>,
    pub optima: Vec<KappaOptimum>,
    pub reference_kappa: f64,
}

/// Bayes residual variance per `(κ, τ)` under common seeds, with the per-τ
/// argmin and an MLE reference run per τ.
pub fn kappa_sweep(
    kappas: &[f64],
    taus: &[f64],
    mu: f64,
    d: f64,
    v0: f64,
    seeds: &[u64],
    budget: &SimBudget,
) -> Result<KappaSweep> {
    ensure(!kappas.is_empty() && !taus.is_empty() && !seeds.is_empty(), || "kappa sweep grids must be non-empty".into())?;
    for &k in kappas {
        ensure(k > 0.0 && k <= 10.0, || format!("kappa {k} outside (0, 10]"))?;
    }
    let noise = NoiseModel::wiener(d);
    let mut jobs = vec![];
    for &tau in taus {
        for k in 0..=kappas.len() {
            for &s in seeds {
                jobs.push((tau, k, s));
            }
        }
    }
    let runs: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(tau, k, s)| {
            let (est, kappa) = if k < kappas.len() { (Estimator::Bayes, kappas[k]) } else { (Estimator::Mle, 1.0) };
            let cfg = budget.servo(tau, mu, v0, FilterConfig::new(kappa, d));
            Ok(servo::run_closed_loop(&noise, &cfg, est, budget.duration(tau), s)?.residual_variance)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let ns = seeds.len();
    let reference_kappa = 1.0;
    let ref_idx = (0..kappas.len())
        .min_by(|&a, &b| (kappas[a] - reference_kappa).abs().total_cmp(&(kappas[b] - reference_kappa).abs()))
        .unwrap();
    let mut rows = vec![];
    let mut optima = vec![];
    for (ti, &tau) in taus.iter().enumerate() {
        let base = ti * (kappas.len() + 1) * ns;
        let stats: Vec<(f64, f64)> = (0..=kappas.len()).map(|k| mean_sem(&runs[base + k * ns..base + (k + 1) * ns])).collect();
        for (k, &kappa) in kappas.iter().enumerate() {
            rows.push(KappaRow { kappa, tau, variance: stats[k].0, sem: stats[k].1 });
        }
        let best = (0..kappas.len()).min_by(|&a, &b| stats[a].0.total_cmp(&stats[b].0)).unwrap();
        let mle = stats[kappas.len()].0;
        optima.push(KappaOptimum {
            tau,
            best_kappa: kappas[best],
            best_variance: stats[best].0,
            mle_variance: mle,
            reference_variance: stats[ref_idx].0,
            advantage: stats[ref_idx].0 < mle,
        });
    }
    Ok(KappaSweep { rows, optima, reference_kappa })
}
