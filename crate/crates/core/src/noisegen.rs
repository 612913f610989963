//! Stochastic phase trajectories.
//!
//! A [`NoiseModel`] describes a Wiener background plus optional sinusoidal
//! tones. Power-law exponents above one half are realized by a fitted bank of
//! low-frequency tones on top of a white floor (see [`synthesize_bank`]).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::rng::{self, Rng};
use crate::{line_fit, linalg, Error, Result};

/// Cycles completed by a tone of `freq_hz` over `t_us`.
pub fn cycles(freq_hz: f64, t_us: f64) -> f64 {
    freq_hz * t_us * 1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    /// Hz.
    pub frequency: f64,
    /// rad.
    pub amplitude: f64,
}

fn half() -> f64 {
    0.5
}

fn default_window() -> (f64, f64) {
    (10.0, 1.0e4)
}

/// Parameters of the phase process.
///
/// `diffusion_coeff` is the squared power-law coefficient, so the increment
/// standard deviation over `τ` is `√D·τ^p`. With `exponent = 0.5` and no tones
/// this is a Wiener process of rate `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub diffusion_coeff: f64,
    #[serde(default = "half")]
    pub exponent: f64,
    #[serde(default)]
    pub tones: Vec<Tone>,
    #[serde(default)]
    pub white_background: f64,
    /// τ range (µs) over which a synthesized tone bank matches the power law.
    #[serde(default = "default_window")]
    pub synthesis_window: (f64, f64),
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::wiener(0.0)
    }
}

impl NoiseModel {
    pub fn wiener(d: f64) -> Self {
        Self {
            diffusion_coeff: d,
            exponent: 0.5,
            tones: Vec::new(),
            white_background: 0.0,
            synthesis_window: default_window(),
        }
    }

    /// Power law `std(τ) = coeff·τ^p` with `coeff` in rad/µs^p.
    pub fn power_law(coeff: f64, exponent: f64) -> Self {
        Self {
            diffusion_coeff: coeff * coeff,
            exponent,
            ..Self::wiener(0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.diffusion_coeff >= 0.0 && self.diffusion_coeff.is_finite(), || {
            format!("diffusion_coeff must be finite and ≥ 0, got {}", self.diffusion_coeff)
        })?;
        ensure((0.5..=1.0).contains(&self.exponent), || {
            format!("exponent must lie in [0.5, 1], got {}", self.exponent)
        })?;
        ensure(self.white_background >= 0.0 && self.white_background.is_finite(), || {
            format!("white_background must be ≥ 0, got {}", self.white_background)
        })?;
        for (i, t) in self.tones.iter().enumerate() {
            ensure(t.frequency > 0.0 && t.frequency.is_finite(), || {
                format!("tones[{i}].frequency must be > 0, got {}", t.frequency)
            })?;
            ensure(t.amplitude >= 0.0 && t.amplitude.is_finite(), || {
                format!("tones[{i}].amplitude must be ≥ 0, got {}", t.amplitude)
            })?;
        }
        let (lo, hi) = self.synthesis_window;
        ensure(lo > 0.0 && hi > lo, || format!("synthesis_window must satisfy 0 < lo < hi, got ({lo}, {hi})"))?;
        Ok(())
    }

    pub fn is_wiener(&self) -> bool {
        self.tones.is_empty() && self.exponent == 0.5
    }

    /// Resolves the model into a Wiener rate and an explicit tone list.
    ///
    /// Explicit tones are used as given on top of `white_background`. With no
    /// tones and `exponent > 0.5` the bank is synthesized from
    /// `(√diffusion_coeff, exponent)` over `synthesis_window`. Otherwise the
    /// Wiener rate is `diffusion_coeff + white_background`.
    pub fn realize(&self) -> Result<Realization> {
        self.validate()?;
        if !self.tones.is_empty() {
            let white = self.white_background
                + if self.exponent == 0.5 { self.diffusion_coeff } else { 0.0 };
            return Ok(Realization { white, tones: self.tones.clone(), bank: None });
        }
        if self.exponent > 0.5 && self.diffusion_coeff > 0.0 {
            let bank = synthesize_bank(self.diffusion_coeff.sqrt(), self.exponent, self.synthesis_window)?;
            return Ok(Realization {
                white: self.white_background + bank.white,
                tones: bank.tones.clone(),
                bank: Some(bank),
            });
        }
        Ok(Realization {
            white: self.diffusion_coeff + self.white_background,
            tones: Vec::new(),
            bank: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Realization {
    /// Wiener rate, rad²/µs.
    pub white: f64,
    pub tones: Vec<Tone>,
    pub bank: Option<ToneBank>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrajectory {
    pub step_size: f64,
    pub samples: Vec<f64>,
    pub seed: u64,
}

impl PhaseTrajectory {
    pub fn duration(&self) -> f64 {
        self.step_size * (self.samples.len() - 1) as f64
    }
}

/// Sequential phase generator; one sample per call to [`PhaseStream::advance`].
///
/// Wiener increments and tone start phases come from separate seed streams, so
/// adding tones never perturbs the Wiener part of a trajectory.
#[derive(Debug, Clone)]
pub struct PhaseStream {
    rng: Rng,
    sd: f64,
    step: f64,
    tones: Vec<(f64, f64, f64)>,
    offset: f64,
    walk: f64,
    k: u64,
    current: f64,
}

impl PhaseStream {
    pub fn new(model: &NoiseModel, seed: u64, step: f64) -> Result<Self> {
        ensure(step > 0.0 && step.is_finite(), || format!("step size must be > 0, got {step}"))?;
        let real = model.realize()?;
        Ok(Self::from_realization(&real, seed, step))
    }

    pub fn from_realization(real: &Realization, seed: u64, step: f64) -> Self {
        let mut phase_rng = rng::stream(seed, rng::TONE_PHASE);
        let tones: Vec<(f64, f64, f64)> = real
            .tones
            .iter()
            .map(|t| {
                let theta = phase_rng.random::<f64>() * 2.0 * PI;
                (2.0 * PI * cycles(t.frequency, 1.0), t.amplitude, theta)
            })
            .collect();
        let offset = tones.iter().map(|(_, a, th)| a * th.sin()).sum();
        Self {
            rng: rng::stream(seed, rng::WIENER),
            sd: (real.white * step).sqrt(),
            step,
            tones,
            offset,
            walk: 0.0,
            k: 0,
            current: 0.0,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    pub fn advance(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        self.walk += self.sd * z;
        self.k += 1;
        let t = self.k as f64 * self.step;
        let tone: f64 = self.tones.iter().map(|(w, a, th)| a * (w * t + th).sin()).sum();
        self.current = self.walk + tone - self.offset;
        self.current
    }
}

fn collect(model: &NoiseModel, seed: u64, step_size: f64, steps: usize) -> Result<PhaseTrajectory> {
    ensure(steps >= 1, || "steps must be ≥ 1".into())?;
    let mut s = PhaseStream::new(model, seed, step_size)?;
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(0.0);
    for _ in 0..steps {
        samples.push(s.advance());
    }
    Ok(PhaseTrajectory { step_size, samples, seed })
}

/// Wiener trajectory of `steps + 1` samples starting at 0.
pub fn generate_wiener(model: &NoiseModel, seed: u64, step_size: f64, steps: usize) -> Result<PhaseTrajectory> {
    ensure(model.is_wiener(), || "generate_wiener needs exponent 0.5 and no tones".into())?;
    collect(model, seed, step_size, steps)
}

/// Wiener background plus tones (explicit or synthesized), starting at 0.
pub fn generate_composite(model: &NoiseModel, seed: u64, step_size: f64, steps: usize) -> Result<PhaseTrajectory> {
    collect(model, seed, step_size, steps)
}

/// Allan-type deviation of a tone: `A·sin²(πfτ)/(πfτ)`.
///
/// This is `√(½⟨(x̄ₖ₊₁ − x̄ₖ)²⟩)` for consecutive τ-averages `x̄` of the
/// sinusoid, averaged over its start phase.
pub fn tone_response(amplitude: f64, frequency: f64, tau: f64) -> f64 {
    let x = PI * cycles(frequency, tau);
    if x.abs() < 1e-8 {
        return amplitude * x;
    }
    amplitude * x.sin().powi(2) / x
}

/// Log-log slope of [`tone_response`]: `2πfτ·cot(πfτ) − 1`.
pub fn tone_slope(frequency: f64, tau: f64) -> Result<f64> {
    let x = PI * cycles(frequency, tau);
    if x.sin().abs() < 1e-9 {
        if x.abs() < 1e-9 {
            return Ok(1.0);
        }
        return Err(Error::Domain(format!("tone_slope pole at fτ = {}", x / PI)));
    }
    Ok(2.0 * x * x.cos() / x.sin() - 1.0)
}

/// White floor plus tones fitted to a power-law increment deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneBank {
    pub white: f64,
    pub tones: Vec<Tone>,
    pub window: (f64, f64),
    pub target_coeff: f64,
    pub target_exponent: f64,
    /// Slope and coefficient of a log-log fit to the bank's own deviation curve.
    pub fit_exponent: f64,
    pub fit_coeff: f64,
}

impl ToneBank {
    /// Increment variance of the bank over lag τ.
    pub fn increment_variance(&self, tau: f64) -> f64 {
        self.white * tau
            + self
                .tones
                .iter()
                .map(|t| 2.0 * (t.amplitude * (PI * cycles(t.frequency, tau)).sin()).powi(2))
                .sum::<f64>()
    }
}

const BANK_TONES: usize = 5;
const BANK_POINTS: usize = 40;

fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Fits `Wτ + Σ 2Aᵢ² sin²(πfᵢτ)` to `coeff²·τ^{2p}` over `window`.
///
/// Frequencies are log-spaced between a third of the half-period rates at the
/// window edges; the weights `(W, Aᵢ²)` come from non-negative least squares
/// on relative residuals at 40 log-spaced lags.
pub fn synthesize_bank(coeff: f64, exponent: f64, window: (f64, f64)) -> Result<ToneBank> {
    ensure(coeff > 0.0, || "bank coefficient must be > 0".into())?;
    ensure((0.5..=1.0).contains(&exponent), || format!("bank exponent {exponent} outside [0.5, 1]"))?;
    let (lo, hi) = window;
    ensure(lo > 0.0 && hi > lo, || "bank window must satisfy 0 < lo < hi".into())?;
    let taus = geomspace(lo, hi, BANK_POINTS);
    let freqs = geomspace(1.0 / (2.0 * hi * 1e-6) / 3.0, 1.0 / (2.0 * lo * 1e-6) / 3.0, BANK_TONES);
    let target: Vec<f64> = taus.iter().map(|t| coeff * coeff * t.powf(2.0 * exponent)).collect();
    let a = DMatrix::from_fn(BANK_POINTS, BANK_TONES + 1, |i, j| {
        let t = taus[i];
        let col = if j == 0 { t } else { 2.0 * (PI * cycles(freqs[j - 1], t)).sin().powi(2) };
        col / target[i]
    });
    let b = DVector::from_element(BANK_POINTS, 1.0);
    let w = linalg::nnls(&a, &b);
    let tones = freqs
        .iter()
        .zip(w.iter().skip(1))
        .map(|(&f, &v)| Tone { frequency: f, amplitude: v.max(0.0).sqrt() })
        .collect();
    let mut bank = ToneBank {
        white: w[0].max(0.0),
        tones,
        window,
        target_coeff: coeff,
        target_exponent: exponent,
        fit_exponent: f64::NAN,
        fit_coeff: f64::NAN,
    };
    let lx: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = taus.iter().map(|&t| 0.5 * bank.increment_variance(t).ln()).collect();
    let (slope, icept, _) = line_fit(&lx, &ly)?;
    bank.fit_exponent = slope;
    bank.fit_coeff = icept.exp();
    Ok(bank)
}
