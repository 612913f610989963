//! Discrete-time closed-loop phase servo.
//!
//! Time advances in `slow_interval` ticks. Each tick applies the pending
//! actuator increment, advances the true phase and, while the probe is on,
//! accumulates expected counts at the current residual. At the end of every
//! `fast_interval` the counts are sampled and, if any arrived, the estimator
//! and PI controller update. The controller drives the actuator rate: the
//! proportional part is a one-off correction spread over ticks, the integral
//! part a persistent slope scaled by the mean update interval of the probe
//! sequence.

use std::f64::consts::{FRAC_PI_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::noisegen::{NoiseModel, PhaseStream, Realization};
use crate::optics::{self, MeasurementConfig, PortCounts};
use crate::rng;
use crate::tracker::{self, EstimatorState, FilterConfig, UpdateRule};
use crate::{line_fit, wrap, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Mle,
    Bayes,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::Bayes => "bayes",
        }
    }
}

/// Interval over which a proportional correction is spread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    /// Until the next scheduled measurement.
    #[default]
    UntilNext,
    /// One fast interval.
    FastInterval,
}

/// When the estimator runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    FastInterval,
    /// Every slow tick, with the slow tick as measurement window.
    SlowTick,
}

fn one() -> f64 {
    1.0
}

fn lock_steps() -> usize {
    10
}

fn transient() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoConfig {
    /// Measurement window and update period, µs.
    pub fast_interval: f64,
    /// Actuator tick, µs.
    pub slow_interval: f64,
    #[serde(default = "one")]
    pub duty_cycle: f64,
    pub sequence_period: f64,
    /// Start of the probe block within each period, µs.
    #[serde(default)]
    pub block_offset: f64,
    #[serde(default = "one")]
    pub kp: f64,
    #[serde(default)]
    pub ki: f64,
    /// Phase quantum of the actuator, rad; 0 is ideal.
    #[serde(default)]
    pub actuator_resolution: f64,
    #[serde(default)]
    pub spread: Spread,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub update_rule: UpdateRule,
    /// Advance the Bayes prior mean by the integral actuator rate between
    /// updates.
    #[serde(default)]
    pub rate_prediction: bool,
    /// Consecutive fast steps beyond π/2 that count as one lock loss.
    #[serde(default = "lock_steps")]
    pub lock_loss_steps: usize,
    /// Fraction of fast steps discarded before statistics.
    #[serde(default = "transient")]
    pub transient_fraction: f64,
    pub filter: FilterConfig,
    pub measurement: MeasurementConfig,
}

impl ServoConfig {
    /// Continuous probe with `window` as both fast interval and period, ticks
    /// no longer than `max_tick` and at most `max_ticks` per window.
    pub fn continuous(measurement: MeasurementConfig, filter: FilterConfig, max_tick: f64, max_ticks: usize) -> Self {
        let w = measurement.window;
        let m = ((w / max_tick).ceil() as usize).clamp(1, max_ticks.max(1));
        Self {
            fast_interval: w,
            slow_interval: w / m as f64,
            duty_cycle: 1.0,
            sequence_period: w,
            block_offset: 0.0,
            kp: 1.0,
            ki: 0.0,
            actuator_resolution: 0.0,
            spread: Spread::UntilNext,
            schedule: Schedule::FastInterval,
            update_rule: UpdateRule::Limiter,
            rate_prediction: false,
            lock_loss_steps: lock_steps(),
            transient_fraction: transient(),
            filter,
            measurement,
        }
    }

    fn window(&self) -> f64 {
        match self.schedule {
            Schedule::FastInterval => self.fast_interval,
            Schedule::SlowTick => self.slow_interval,
        }
    }

    pub fn ticks_per_window(&self) -> usize {
        (self.window() / self.slow_interval).round().max(1.0) as usize
    }

    /// True when a period holds less probe time than one fast interval.
    pub fn starved(&self) -> bool {
        self.duty_cycle <= 0.0 || self.duty_cycle * self.sequence_period < self.fast_interval
    }

    pub fn validate(&self) -> Result<()> {
        self.measurement.validate()?;
        self.filter.validate()?;
        let (s, f, p) = (self.slow_interval, self.fast_interval, self.sequence_period);
        ensure(s > 0.0 && s <= f * (1.0 + 1e-12) && f <= p * (1.0 + 1e-12), || {
            format!("need 0 < slow_interval ≤ fast_interval ≤ sequence_period, got {s}, {f}, {p}")
        })?;
        let ratio = f / s;
        ensure((ratio - ratio.round()).abs() < 1e-6, || {
            format!("fast_interval {f} must be a whole number of slow_interval {s}")
        })?;
        ensure((self.measurement.window - f).abs() <= 1e-9 * f, || {
            format!("measurement.window {} must equal fast_interval {f}", self.measurement.window)
        })?;
        ensure((0.0..=1.0).contains(&self.duty_cycle), || {
            format!("duty_cycle must lie in [0, 1], got {}", self.duty_cycle)
        })?;
        ensure(self.kp >= 0.0 && self.ki >= 0.0, || "kp and ki must be ≥ 0".into())?;
        ensure(self.actuator_resolution >= 0.0, || "actuator_resolution must be ≥ 0".into())?;
        ensure(self.lock_loss_steps >= 1, || "lock_loss_steps must be ≥ 1".into())?;
        ensure((0.0..1.0).contains(&self.transient_fraction), || "transient_fraction must lie in [0, 1)".into())
    }

    /// Probe time inside `[t0, t1)`.
    pub fn probe_time(&self, t0: f64, t1: f64) -> f64 {
        if self.duty_cycle >= 1.0 {
            return t1 - t0;
        }
        let p = self.sequence_period;
        let len = self.duty_cycle * p;
        if len <= 0.0 {
            return 0.0;
        }
        let k0 = ((t0 - self.block_offset) / p).floor() as i64 - 1;
        let k1 = ((t1 - self.block_offset) / p).floor() as i64 + 1;
        (k0..=k1)
            .map(|k| {
                let a = k as f64 * p + self.block_offset;
                (t1.min(a + len) - t0.max(a)).max(0.0)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub seed: u64,
    pub estimator: Option<Estimator>,
    pub realization: Realization,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    /// End time of each fast step, µs.
    pub times: Vec<f64>,
    pub true_phase: Vec<f64>,
    pub correction: Vec<f64>,
    /// Wrapped `true − correction` per fast step.
    pub residual_series: Vec<f64>,
    pub probe_on: Vec<bool>,
    pub transient_steps: usize,
    /// Mean square of `residual_series` after the transient cut.
    pub residual_variance: f64,
    pub visibility: f64,
    pub lock_losses: usize,
    pub updates: usize,
    /// Largest gap between the controller command and the quantized actuator.
    pub max_quantization_error: f64,
    pub starved: bool,
    /// Open loop only: slope of increment variance against lag, rad²/µs.
    pub drift_slope: Option<f64>,
    pub meta: RunMeta,
}

pub fn mean_square_after(series: &[f64], cut: usize) -> f64 {
    let tail = &series[cut.min(series.len())..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(|r| r * r).sum::<f64>() / tail.len() as f64
}

fn cut_of(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).floor() as usize
}

/// Free evolution of the phase with no correction applied.
pub fn run_open_loop(noise: &NoiseModel, duration: f64, step: f64, seed: u64) -> Result<RunResult> {
    ensure(step > 0.0 && duration >= 100.0 * step, || "open loop needs duration ≥ 100·step".into())?;
    let real = noise.realize()?;
    let mut s = PhaseStream::from_realization(&real, seed, step);
    let n = (duration / step).round() as usize;
    let mut times = Vec::with_capacity(n);
    let mut phase = Vec::with_capacity(n);
    for k in 0..n {
        phase.push(s.advance());
        times.push((k + 1) as f64 * step);
    }
    let cut = cut_of(n, transient());
    let residual_variance = mean_square_after(&phase, cut);
    let drift_slope = msd_slope(&phase, step);
    Ok(RunResult {
        correction: vec![0.0; n],
        residual_series: phase.clone(),
        probe_on: vec![false; n],
        true_phase: phase,
        times,
        transient_steps: cut,
        residual_variance,
        visibility: (-0.5 * residual_variance).exp(),
        lock_losses: 0,
        updates: 0,
        max_quantization_error: 0.0,
        starved: false,
        drift_slope,
        meta: RunMeta { seed, estimator: None, realization: real },
    })
}

/// Slope of the time-averaged increment variance against lag, over octave
/// lags up to 1% of the series, each lag weighted by its inverse.
fn msd_slope(x: &[f64], step: f64) -> Option<f64> {
    let max_lag = x.len() / 100;
    if max_lag < 1 {
        return None;
    }
    let mut lags = vec![];
    let mut lag = 1;
    while lag <= max_lag {
        lags.push(lag);
        lag = (lag * 2).max(lag + 1);
    }
    let (mut acc, mut norm) = (0.0, 0.0);
    for &l in &lags {
        let m = x.windows(l + 1).map(|w| (w[l] - w[0]).powi(2)).sum::<f64>() / (x.len() - l) as f64;
        acc += m / (l as f64 * step) / l as f64;
        norm += 1.0 / l as f64;
    }
    Some(acc / norm)
}

struct Controller {
    kp: f64,
    ki: f64,
    rate_i: f64,
    p_rem: f64,
    p_rate: f64,
}

impl Controller {
    fn step(&mut self, dt: f64) -> f64 {
        let mut d = self.rate_i * dt;
        if self.p_rem != 0.0 {
            let mut s = self.p_rate * dt;
            if s.abs() >= self.p_rem.abs() {
                s = self.p_rem;
            }
            self.p_rem -= s;
            d += s;
        }
        d
    }

    fn update(&mut self, e: f64, mean_gap: f64, spread: f64) {
        self.rate_i += self.ki * e / mean_gap;
        self.p_rem = self.kp * e;
        self.p_rate = self.p_rem / spread;
    }
}

/// Closed-loop run of one channel.
pub fn run_closed_loop(
    noise: &NoiseModel,
    servo: &ServoConfig,
    estimator: Estimator,
    duration: f64,
    seed: u64,
) -> Result<RunResult> {
    servo.validate()?;
    let real = noise.realize()?;
    run_realized(&real, servo, estimator, duration, seed)
}

fn run_realized(
    real: &Realization,
    servo: &ServoConfig,
    estimator: Estimator,
    duration: f64,
    seed: u64,
) -> Result<RunResult> {
    let dt = servo.slow_interval;
    let m = servo.ticks_per_window();
    let window = dt * m as f64;
    ensure(duration >= window, || format!("duration {duration} shorter than one window {window}"))?;
    let steps = (duration / window).floor() as usize;
    let meas = &servo.measurement;
    let q = servo.actuator_resolution;

    let mut phase = PhaseStream::from_realization(real, seed, dt);
    let mut counts_rng = rng::stream(seed, rng::COUNTS);
    let mut ctl = Controller { kp: servo.kp, ki: servo.ki, rate_i: 0.0, p_rem: 0.0, p_rate: 0.0 };
    let mut cmd = 0.0;
    let mut applied = 0.0;
    let mut est = EstimatorState::new(0.0, servo.filter.sigma_prior(window).powi(2));
    let mut elapsed = 0.0;

    let mut times = Vec::with_capacity(steps);
    let mut true_phase = Vec::with_capacity(steps);
    let mut correction = Vec::with_capacity(steps);
    let mut residual = Vec::with_capacity(steps);
    let mut probe_on = Vec::with_capacity(steps);
    let mut lock_losses = 0;
    let mut run_len = 0;
    let mut updates = 0;
    let mut max_q = 0.0f64;

    let next_gap = |w: usize| -> f64 {
        let limit = (servo.sequence_period / window).ceil() as usize + 2;
        for j in 1..=limit {
            let t0 = (w + j) as f64 * window;
            if servo.probe_time(t0, t0 + window) > 0.0 {
                return j as f64 * window;
            }
        }
        servo.sequence_period
    };

    let probed = (0..((servo.sequence_period / window).round() as usize).max(1))
        .filter(|&j| servo.probe_time(j as f64 * window, (j + 1) as f64 * window) > 0.0)
        .count();
    let mean_gap = servo.sequence_period.max(window) / probed.max(1) as f64;

    let mut t = 0.0;
    let mut tick: u64 = 0;
    for w in 0..steps {
        let (mut l1, mut l2, mut c_on, mut on) = (0.0, 0.0, 0.0, 0.0);
        let mut phi = 0.0;
        for _ in 0..m {
            cmd += ctl.step(dt);
            applied = if q > 0.0 { (cmd / q).round() * q } else { cmd };
            max_q = max_q.max((applied - cmd).abs());
            phi = phase.advance();
            tick += 1;
            let t1 = tick as f64 * dt;
            let ov = servo.probe_time(t, t1);
            if ov > 0.0 {
                let (a, b) = optics::mean_counts(FRAC_PI_2 + (phi - applied), &meas.with_window(ov));
                l1 += a;
                l2 += b;
                c_on += ov * applied;
                on += ov;
            }
            t = t1;
        }
        let r = wrap(phi - applied);
        times.push(t);
        true_phase.push(phi);
        correction.push(applied);
        residual.push(r);
        probe_on.push(on > 0.0);
        if r.abs() > FRAC_PI_2 {
            run_len += 1;
            if run_len == servo.lock_loss_steps {
                lock_losses += 1;
            }
        } else {
            run_len = 0;
        }

        elapsed += window;
        if on <= 0.0 {
            continue;
        }
        let counts = PortCounts { n1: optics::poisson(l1, &mut counts_rng), n2: optics::poisson(l2, &mut counts_rng) };
        if counts.total() == 0 {
            continue;
        }
        let c_avg = c_on / on;
        let e = match estimator {
            Estimator::Mle => {
                let z = tracker::mle_phase(counts, meas, FRAC_PI_2)? - FRAC_PI_2;
                z + c_avg - applied
            }
            Estimator::Bayes => {
                let z = tracker::error_signal(counts, meas);
                if servo.rate_prediction {
                    est.estimate += ctl.rate_i * elapsed;
                }
                let nu = wrap(z + c_avg - est.estimate);
                let sp = servo.filter.sigma_prior(elapsed);
                let info = meas.visibility.powi(2) * counts.total() as f64;
                let drift = sp * sp;
                let kappa = servo.filter.kappa;
                est = match servo.update_rule {
                    UpdateRule::Kalman => {
                        let gain = info / (1.0 / (est.variance + drift) + info);
                        tracker::bayes_update(est, tracker::innovation_filter(nu, sp / gain, kappa), info, drift)
                    }
                    UpdateRule::Limiter => {
                        let mut next = tracker::bayes_update(est, 0.0, info, drift);
                        next.estimate += tracker::innovation_filter(nu, sp, kappa);
                        next
                    }
                };
                elapsed = 0.0;
                est.estimate - applied
            }
        };
        updates += 1;
        let gap = next_gap(w);
        let spread = match servo.spread {
            Spread::UntilNext => gap,
            Spread::FastInterval => window,
        };
        ctl.update(e, mean_gap, spread);
    }

    let cut = cut_of(steps, servo.transient_fraction);
    let residual_variance = mean_square_after(&residual, cut);
    Ok(RunResult {
        times,
        true_phase,
        correction,
        residual_series: residual,
        probe_on,
        transient_steps: cut,
        residual_variance,
        visibility: meas.visibility * (-0.5 * residual_variance).exp(),
        lock_losses,
        updates,
        max_quantization_error: max_q,
        starved: servo.starved(),
        drift_slope: None,
        meta: RunMeta { seed, estimator: Some(estimator), realization: real.clone() },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channel {
    pub servo: ServoConfig,
    pub noise: NoiseModel,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualBandConfig {
    /// Continuous fiber-link channel.
    pub link_channel: Channel,
    /// Duty-gated residual channel.
    pub residual_channel: Channel,
    /// Visibility of the final interference, used for the combined figure.
    pub visibility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualBandResult {
    pub link: RunResult,
    pub residual: RunResult,
    pub combined: RunResult,
}

fn run_channel(ch: &Channel, estimator: Estimator, duration: f64, seed: u64) -> Result<RunResult> {
    if ch.enabled {
        return run_closed_loop(&ch.noise, &ch.servo, estimator, duration, seed);
    }
    let window = ch.servo.fast_interval;
    let mut open = run_open_loop(&ch.noise, duration, window, seed)?;
    for r in open.residual_series.iter_mut() {
        *r = wrap(*r);
    }
    open.residual_variance = mean_square_after(&open.residual_series, open.transient_steps);
    open.visibility = ch.servo.measurement.visibility * (-0.5 * open.residual_variance).exp();
    Ok(open)
}

/// Link and residual channels run independently; the combined residual is
/// their sum sampled on the residual channel's grid.
pub fn run_dual_band(cfg: &DualBandConfig, estimator: Estimator, duration: f64, seed: u64) -> Result<DualBandResult> {
    ensure((0.0..=1.0).contains(&cfg.visibility), || "dual band visibility must lie in [0, 1]".into())?;
    let link = run_channel(&cfg.link_channel, estimator, duration, rng::derive_seed(seed, rng::LINK_CHANNEL))?;
    let res = run_channel(&cfg.residual_channel, estimator, duration, rng::derive_seed(seed, rng::RESIDUAL_CHANNEL))?;
    let lw = cfg.link_channel.servo.fast_interval;
    let at = |t: f64| -> usize {
        (((t / lw).round() as usize).max(1) - 1).min(link.residual_series.len() - 1)
    };
    let series: Vec<f64> = res.times.iter().zip(&res.residual_series).map(|(&t, r)| wrap(r + link.residual_series[at(t)])).collect();
    let true_phase = res.times.iter().zip(&res.true_phase).map(|(&t, p)| p + link.true_phase[at(t)]).collect();
    let correction = res.times.iter().zip(&res.correction).map(|(&t, c)| c + link.correction[at(t)]).collect();
    let cut = res.transient_steps;
    let var = mean_square_after(&series, cut);
    let combined = RunResult {
        times: res.times.clone(),
        true_phase,
        correction,
        residual_series: series,
        probe_on: res.probe_on.clone(),
        transient_steps: cut,
        residual_variance: var,
        visibility: cfg.visibility * (-0.5 * (link.residual_variance + res.residual_variance)).exp(),
        lock_losses: link.lock_losses + res.lock_losses,
        updates: link.updates + res.updates,
        max_quantization_error: link.max_quantization_error.max(res.max_quantization_error),
        starved: res.starved,
        drift_slope: None,
        meta: RunMeta { seed, estimator: Some(estimator), realization: res.meta.realization.clone() },
    };
    Ok(DualBandResult { link, residual: res, combined })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DutyRow {
    pub duty: f64,
    pub estimator: Estimator,
    pub seeds: usize,
    /// Seed-averaged.
    pub residual_variance: f64,
    pub visibility: f64,
    /// Summed over seeds.
    pub lock_losses: usize,
    pub starved: bool,
}

/// Per duty and estimator: seed-averaged variance and visibility, total lock
/// losses. Seeds are shared across duties and estimators.
pub fn duty_cycle_sweep(
    noise: &NoiseModel,
    base: &ServoConfig,
    duties: &[f64],
    duration: f64,
    seeds: &[u64],
) -> Result<Vec<DutyRow>> {
    ensure(!duties.is_empty() && !seeds.is_empty(), || "duty sweep needs duties and seeds".into())?;
    for &d in duties {
        ensure(d > 0.0 && d <= 1.0, || format!("duty {d} outside (0, 1]"))?;
    }
    let real = noise.realize()?;
    let mut jobs = vec![];
    for &d in duties {
        for est in [Estimator::Mle, Estimator::Bayes] {
            for &s in seeds {
                jobs.push((d, est, s));
            }
        }
    }
    let runs: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(d, est, s)| {
            let cfg = ServoConfig { duty_cycle: d, ..base.clone() };
            cfg.validate()?;
            let mut r = run_realized(&real, &cfg, est, duration, s)?;
            strip(&mut r);
            Ok(r)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = vec![];
    for (chunk, jobs) in runs.chunks(seeds.len()).zip(jobs.chunks(seeds.len())) {
        let (d, est, _) = jobs[0];
        let n = chunk.len() as f64;
        rows.push(DutyRow {
            duty: d,
            estimator: est,
            seeds: chunk.len(),
            residual_variance: chunk.iter().map(|r| r.residual_variance).sum::<f64>() / n,
            visibility: chunk.iter().map(|r| r.visibility).sum::<f64>() / n,
            lock_losses: chunk.iter().map(|r| r.lock_losses).sum(),
            starved: chunk[0].starved,
        });
    }
    Ok(rows)
}

/// Drops the per-step series of a result kept only for its statistics.
pub fn strip(r: &mut RunResult) {
    r.times = vec![];
    r.true_phase = vec![];
    r.correction = vec![];
    r.residual_series = vec![];
    r.probe_on = vec![];
}

/// Log-log slope of `values` against `xs`.
pub fn loglog_slope(xs: &[f64], values: &[f64]) -> Result<f64> {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    Ok(line_fit(&lx, &ly)?.0)
}

/// Ratio of open- to closed-loop residual power below `f_max` (Hz), in dB,
/// from Welch-averaged periodograms of the two series.
pub fn suppression_db(open: &[f64], closed: &[f64], step_us: f64, f_max: f64) -> Option<f64> {
    let seg = 256.min(open.len().min(closed.len()));
    if seg < 16 {
        return None;
    }
    let power = |x: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; seg / 2];
        let mut count = 0;
        for chunk in x.chunks_exact(seg) {
            let m = chunk.iter().sum::<f64>() / seg as f64;
            for (k, a) in acc.iter_mut().enumerate().skip(1) {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in chunk.iter().enumerate() {
                    let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos();
                    let arg = 2.0 * PI * (k * i) as f64 / seg as f64;
                    re += hann * (v - m) * arg.cos();
                    im -= hann * (v - m) * arg.sin();
                }
                *a += re * re + im * im;
            }
            count += 1;
        }
        acc.iter().map(|a| a / count.max(1) as f64).collect()
    };
    let (po, pc) = (power(open), power(closed));
    let df = 1.0 / (seg as f64 * step_us * 1e-6);
    let kmax = ((f_max / df).floor() as usize).min(seg / 2 - 1);
    if kmax < 1 {
        return None;
    }
    let so: f64 = po[1..=kmax].iter().sum();
    let sc: f64 = pc[1..=kmax].iter().sum();
    (sc > 0.0).then(|| 10.0 * (so / sc).log10())
}
