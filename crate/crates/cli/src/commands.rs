//! `simulate`, `sweep` and `calibrate`.

use std::path::{Path, PathBuf};

use phasetrack::analysis::{self, DiffusionFit, SurfaceCell};
use phasetrack::noisegen::{self, PhaseTrajectory};
use phasetrack::optics;
use phasetrack::servo::{self, Estimator, RunResult};
use serde_json::json;

use crate::config::{self, RunConfig};
use crate::output::{num, Plot, Series, Sink};
use crate::{parse_list, parse_seeds, Cli, CliError, Command, Common, GridArgs, SweepKind};

const DEFAULT_TAUS: [f64; 10] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0];
const DEFAULT_MUS: [f64; 7] = [0.02, 0.05, 0.2, 0.6, 2.0, 6.0, 20.0];
const DEFAULT_FLUX_MUS: [f64; 7] = [0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0];
const DEFAULT_KAPPAS: [f64; 9] = [0.2, 0.5, 0.8, 1.0, 1.2, 1.5, 2.0, 3.0, 5.0];
const DEFAULT_KAPPA_TAUS: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0];
const DEFAULT_DUTIES: [f64; 7] = [0.001, 0.005, 0.01, 0.02, 0.065, 0.2, 1.0];
const DEFAULT_SEED_COUNT: u64 = 8;

pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let (text, origin) = match (&common.config, &common.preset) {
        (Some(p), _) => {
            let t = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            (t, p.display().to_string())
        }
        (None, Some(name)) => (config::preset(name)?.to_string(), format!("preset {name}")),
        (None, None) => (config::preset(config::DEFAULT_PRESET)?.to_string(), format!("preset {}", config::DEFAULT_PRESET)),
    };
    config::load(&text, &origin, &common.set, common.seed)
}

pub fn dispatch(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::Simulate => simulate(&cfg, &cli.common),
        Command::Sweep { kind, grid } => sweep(*kind, grid, &cfg, &cli.common),
        Command::Calibrate { input, taus } => calibrate(input.as_deref(), taus.as_deref(), &cfg, &cli.common),
    }
}

fn series_rows(r: &RunResult) -> Vec<Vec<String>> {
    (0..r.times.len())
        .map(|i| {
            vec![
                num(r.times[i]),
                num(r.true_phase[i]),
                num(r.correction[i]),
                num(r.residual_series[i]),
                if r.probe_on[i] { "1".into() } else { "0".into() },
            ]
        })
        .collect()
}

const SERIES_HEADER: [&str; 5] = ["t_us", "true_phase_rad", "correction_rad", "residual_rad", "probe_on"];

/// Closed-loop suppression of the true phase below a tenth of the update
/// rate.
fn suppression(r: &RunResult, fast_interval: f64) -> Option<f64> {
    let step = r.times.get(1).zip(r.times.first()).map(|(b, a)| b - a)?;
    servo::suppression_db(&r.true_phase, &r.residual_series, step, 1e6 / (10.0 * fast_interval))
}

fn simulate(cfg: &RunConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let mut sink = Sink::new("simulate", cfg, &common.out_dir, common.format, "simulate")?;
    let estimators = cfg.estimator.estimators();
    let tag = |e: Estimator| (estimators.len() > 1).then_some(e.name());
    let mut runs = vec![];
    let mut plot = Plot {
        title: "Residual phase".into(),
        x_label: "t (µs)".into(),
        y_label: "residual (rad)".into(),
        log_x: false,
        log_y: false,
        series: vec![],
    };
    for &e in &estimators {
        let shown = if let Some(db) = &cfg.dual_band {
            let mut r = servo::run_dual_band(db, e, cfg.duration, cfg.seed)?;
            sink.csv(tag(e), &SERIES_HEADER, &series_rows(&r.combined))?;
            let shown = decimate(&r.combined);
            println!(
                "{}: combined visibility {:.5}, residual variance {:.5} rad², lock losses {}+{}",
                e.name(),
                r.combined.visibility,
                r.combined.residual_variance,
                r.link.lock_losses,
                r.residual.lock_losses
            );
            servo::strip(&mut r.link);
            servo::strip(&mut r.residual);
            servo::strip(&mut r.combined);
            runs.push(json!({"estimator": e, "link": r.link, "residual": r.residual, "combined": r.combined}));
            shown
        } else {
            let mut r = servo::run_closed_loop(&cfg.noise, &cfg.servo, e, cfg.duration, cfg.seed)?;
            sink.csv(tag(e), &SERIES_HEADER, &series_rows(&r))?;
            let supp = suppression(&r, cfg.servo.fast_interval);
            let shown = decimate(&r);
            println!(
                "{}: residual variance {:.6} rad², visibility {:.5}, lock losses {}",
                e.name(),
                r.residual_variance,
                r.visibility,
                r.lock_losses
            );
            servo::strip(&mut r);
            runs.push(json!({"estimator": e, "suppression_db": supp, "run": r}));
            shown
        };
        plot.series.push(Series { label: e.name().into(), points: shown });
    }
    sink.json(json!({ "runs": runs }))?;
    sink.svg(&plot);
    Ok(sink.written())
}

fn decimate(r: &RunResult) -> Vec<(f64, f64)> {
    let every = r.times.len().div_ceil(2000).max(1);
    r.times.iter().zip(&r.residual_series).step_by(every).map(|(&t, &v)| (t, v)).collect()
}

/// Grid from the flag, else the config, else `default`; a flag given empty is
/// an error.
fn grid(flag: &Option<String>, name: &str, from_cfg: &[f64], default: &[f64]) -> Result<Vec<f64>, CliError> {
    match flag {
        Some(s) => {
            let v = parse_list(name, s)?;
            if v.is_empty() {
                return Err(CliError::Config(format!("--{name}: empty grid")));
            }
            Ok(v)
        }
        None if !from_cfg.is_empty() => Ok(from_cfg.to_vec()),
        None => Ok(default.to_vec()),
    }
}

fn seeds(flag: &Option<String>, cfg: &RunConfig) -> Result<Vec<u64>, CliError> {
    match flag {
        Some(s) => {
            let v = parse_seeds(s)?;
            if v.is_empty() {
                return Err(CliError::Config("--seeds: empty grid".into()));
            }
            Ok(v)
        }
        None if !cfg.sweep.seeds.is_empty() => Ok(cfg.sweep.seeds.clone()),
        None => Ok((cfg.seed..cfg.seed + DEFAULT_SEED_COUNT).collect()),
    }
}

fn wiener_rate(cfg: &RunConfig, kind: &str) -> Result<f64, CliError> {
    if !cfg.noise.is_wiener() {
        return Err(CliError::Config(format!("noise: sweep {kind} needs a Wiener model (exponent 0.5, no tones)")));
    }
    Ok(cfg.noise.diffusion_coeff)
}

fn sweep(kind: SweepKind, g: &GridArgs, cfg: &RunConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let stem = format!("sweep_{}", kind.name());
    let mut sink = Sink::new(&stem, cfg, &common.out_dir, common.format, &stem)?;
    let sw = &cfg.sweep;
    let seeds = seeds(&g.seeds, cfg)?;
    let budget = sw.budget.unwrap_or_default();
    let v0 = cfg.measurement.visibility;
    match kind {
        SweepKind::Surface | SweepKind::Flux => {
            let d = wiener_rate(cfg, kind.name())?;
            let taus = grid(&g.taus, "taus", &sw.taus, &DEFAULT_TAUS)?;
            let default_mus: &[f64] = if kind == SweepKind::Flux { &DEFAULT_FLUX_MUS } else { &DEFAULT_MUS };
            let mus = grid(&g.mus, "mus", &sw.mus, default_mus)?;
            let cells = analysis::variance_surface(&taus, &mus, d, v0, cfg.filter.kappa, &seeds, &budget)?;
            let split = if mus.len() >= 2 { Some(analysis::scaling_split(&cells)?) } else { None };
            if let Some(s) = &split {
                println!("log-log slope vs µ: MLE min-over-τ {:.3}, Bayes at τ = {} µs {:.3}", s.mle_slope, s.small_tau, s.bayes_slope);
            }
            println!("advantage cells: {}/{}", cells.iter().filter(|c| c.advantage).count(), cells.len());
            if kind == SweepKind::Surface {
                surface_outputs(&mut sink, &cells, &mus)?;
                sink.json(json!({"cells": cells, "scaling": split}))?;
            } else {
                let s = split.as_ref().ok_or_else(|| CliError::Config("--mus: flux sweep needs ≥ 2 values".into()))?;
                let snl: Vec<f64> = s.mus.iter().map(|&m| optics::tracking_snl(d, m, v0, 1.0)).collect();
                let rows: Vec<Vec<String>> = (0..s.mus.len())
                    .map(|i| vec![num(s.mus[i]), num(s.mle_min[i]), num(s.mle_argmin_tau[i]), num(s.bayes_small_tau[i]), num(snl[i])])
                    .collect();
                sink.csv(None, &["mu_per_us", "mle_min_rad2", "mle_argmin_tau_us", "bayes_small_tau_rad2", "snl_rad2"], &rows)?;
                let pts = |v: &[f64]| s.mus.iter().copied().zip(v.iter().copied()).collect();
                sink.svg(&Plot {
                    title: "Residual variance versus flux".into(),
                    x_label: "µ (photons/µs)".into(),
                    y_label: "variance (rad²)".into(),
                    log_x: true,
                    log_y: true,
                    series: vec![
                        Series { label: "MLE, min over τ".into(), points: pts(&s.mle_min) },
                        Series { label: format!("Bayes, τ = {} µs", s.small_tau), points: pts(&s.bayes_small_tau) },
                        Series { label: "tracking SNL".into(), points: pts(&snl) },
                    ],
                });
                sink.json(json!({"scaling": s, "snl": snl, "cells": cells}))?;
            }
        }
        SweepKind::Kappa => {
            let d = wiener_rate(cfg, kind.name())?;
            let kappas = grid(&g.kappas, "kappas", &sw.kappas, &DEFAULT_KAPPAS)?;
            let taus = grid(&g.taus, "taus", &sw.taus, &DEFAULT_KAPPA_TAUS)?;
            let k = analysis::kappa_sweep(&kappas, &taus, cfg.measurement.flux, d, v0, &seeds, &budget)?;
            for o in &k.optima {
                println!("τ = {} µs: best κ {} (advantage {})", o.tau, o.best_kappa, o.advantage);
            }
            let rows: Vec<Vec<String>> = k.rows.iter().map(|r| vec![num(r.kappa), num(r.tau), num(r.variance), num(r.sem)]).collect();
            sink.csv(None, &["kappa", "tau_us", "variance_rad2", "sem_rad2"], &rows)?;
            sink.svg(&Plot {
                title: "Bayes residual variance versus κ".into(),
                x_label: "κ".into(),
                y_label: "variance (rad²)".into(),
                log_x: false,
                log_y: true,
                series: taus
                    .iter()
                    .map(|&t| Series {
                        label: format!("τ = {t} µs"),
                        points: k.rows.iter().filter(|r| r.tau == t).map(|r| (r.kappa, r.variance)).collect(),
                    })
                    .collect(),
            });
            sink.json(&k)?;
        }
        SweepKind::Duty => {
            let duties = grid(&g.duties, "duties", &sw.duties, &DEFAULT_DUTIES)?;
            let rows = servo::duty_cycle_sweep(&cfg.noise, &cfg.servo, &duties, cfg.duration, &seeds)?;
            for r in &rows {
                println!(
                    "duty {}: {} variance {:.5} rad², lock losses {}",
                    r.duty,
                    r.estimator.name(),
                    r.residual_variance,
                    r.lock_losses
                );
            }
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        num(r.duty),
                        r.estimator.name().into(),
                        r.seeds.to_string(),
                        num(r.residual_variance),
                        num(r.visibility),
                        r.lock_losses.to_string(),
                        r.starved.to_string(),
                    ]
                })
                .collect();
            sink.csv(None, &["duty", "estimator", "seeds", "residual_variance_rad2", "visibility", "lock_losses", "starved"], &table)?;
            sink.svg(&Plot {
                title: "Residual variance versus duty cycle".into(),
                x_label: "duty".into(),
                y_label: "variance (rad²)".into(),
                log_x: true,
                log_y: true,
                series: [Estimator::Mle, Estimator::Bayes]
                    .iter()
                    .map(|&e| Series {
                        label: e.name().into(),
                        points: rows.iter().filter(|r| r.estimator == e).map(|r| (r.duty, r.residual_variance)).collect(),
                    })
                    .collect(),
            });
            sink.json(json!({ "rows": rows }))?;
        }
    }
    Ok(sink.written())
}

fn surface_outputs(sink: &mut Sink, cells: &[SurfaceCell], mus: &[f64]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                num(c.tau),
                num(c.mu),
                num(c.conv_bound),
                num(c.bayes_bound),
                num(c.mle_variance),
                num(c.mle_sem),
                num(c.bayes_variance),
                num(c.bayes_sem),
                c.mle_lock_losses.to_string(),
                c.bayes_lock_losses.to_string(),
                c.advantage.to_string(),
            ]
        })
        .collect();
    sink.csv(
        None,
        &[
            "tau_us",
            "mu_per_us",
            "conv_bound_rad2",
            "bayes_bound_rad2",
            "mle_variance_rad2",
            "mle_sem_rad2",
            "bayes_variance_rad2",
            "bayes_sem_rad2",
            "mle_lock_losses",
            "bayes_lock_losses",
            "advantage",
        ],
        &rows,
    )?;
    let mut series = vec![];
    for &mu in mus {
        let row: Vec<&SurfaceCell> = cells.iter().filter(|c| c.mu == mu).collect();
        series.push(Series { label: format!("MLE µ = {mu}"), points: row.iter().map(|c| (c.tau, c.mle_variance)).collect() });
        series.push(Series { label: format!("Bayes µ = {mu}"), points: row.iter().map(|c| (c.tau, c.bayes_variance)).collect() });
    }
    sink.svg(&Plot {
        title: "Residual variance surface".into(),
        x_label: "τ (µs)".into(),
        y_label: "variance (rad²)".into(),
        log_x: true,
        log_y: true,
        series,
    });
    Ok(())
}

/// Reads a `t_us, phase_rad` series with uniform time steps. A non-numeric
/// first row is taken as a header; `#` lines are comments.
pub fn read_series(path: &Path) -> Result<PhaseTrajectory, CliError> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{name}: {e}")))?;
    let mut t = vec![];
    let mut phase = vec![];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Input(format!("{name}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| CliError::Input(format!("{name}:{line}: {what}"));
        if rec.len() != 2 {
            return Err(bad(&format!("expected 2 columns (t_us, phase_rad), found {}", rec.len())));
        }
        let parsed = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
        match parsed {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => {
                t.push(a);
                phase.push(b);
            }
            _ if i == 0 => continue,
            _ => return Err(bad(&format!("cannot parse {:?}, {:?} as numbers", &rec[0], &rec[1]))),
        }
        if t.len() >= 3 {
            let n = t.len();
            let (step, last) = (t[1] - t[0], t[n - 1] - t[n - 2]);
            if (last - step).abs() > 1e-6 * step.abs() {
                return Err(bad(&format!("time step {last} differs from the first step {step}")));
            }
        }
    }
    if t.len() < 2 {
        return Err(CliError::Input(format!("{name}: need at least 2 samples, found {}", t.len())));
    }
    let step = t[1] - t[0];
    if step <= 0.0 {
        return Err(CliError::Input(format!("{name}: time must increase")));
    }
    Ok(PhaseTrajectory { step_size: step, samples: phase, seed: 0 })
}

fn default_calibration_taus(traj: &PhaseTrajectory) -> Vec<f64> {
    let lo = 10.0 * traj.step_size;
    let hi = (traj.duration() / 100.0).min(1e4);
    if hi <= lo {
        return vec![];
    }
    (0..12).map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / 11.0).exp()).collect()
}

fn calibrate(input: Option<&Path>, taus: Option<&str>, cfg: &RunConfig, common: &Common) -> Result<Vec<PathBuf>, CliError> {
    let fit_err = |e: phasetrack::Error| CliError::Input(format!("calibration: {e}"));
    let (traj, source) = match input {
        Some(p) => (read_series(p)?, json!({ "input": p.display().to_string() })),
        None => {
            let step = cfg.sweep.step.unwrap_or(1.0);
            if !(step > 0.0) {
                return Err(CliError::Config(format!("sweep.step: must be > 0, got {step}")));
            }
            let steps = (cfg.duration / step).round() as usize;
            let traj = noisegen::generate_composite(&cfg.noise, cfg.seed, step, steps)?;
            (traj, json!({"generated": {"step_us": step, "steps": steps, "seed": cfg.seed}}))
        }
    };
    let taus = match taus {
        Some(s) => parse_list("taus", s)?,
        None if !cfg.sweep.taus.is_empty() => cfg.sweep.taus.clone(),
        None => default_calibration_taus(&traj),
    };
    if taus.len() < 2 {
        return Err(CliError::Input(format!(
            "calibration: series of {} samples is too short for ≥ 2 averaging times",
            traj.samples.len()
        )));
    }
    let fit: DiffusionFit = analysis::calibrate_diffusion(&traj, &taus).map_err(fit_err)?;
    println!("exponent {:.4}, coeff {:.4e} rad/µs^p, R² {:.5}", fit.exponent, fit.coeff, fit.r_squared);
    let mut sink = Sink::new("calibrate", cfg, &common.out_dir, common.format, "calibrate")?;
    let rows: Vec<Vec<String>> = fit.points.iter().map(|p| vec![num(p.tau), num(p.std), num(p.ci), p.windows.to_string()]).collect();
    sink.csv(None, &["tau_us", "std_rad", "ci_rad", "windows"], &rows)?;
    let line = fit.points.iter().map(|p| (p.tau, fit.coeff * p.tau.powf(fit.exponent))).collect();
    sink.svg(&Plot {
        title: "Increment deviation".into(),
        x_label: "τ (µs)".into(),
        y_label: "std (rad)".into(),
        log_x: true,
        log_y: true,
        series: vec![
            Series { label: "measured".into(), points: fit.points.iter().map(|p| (p.tau, p.std)).collect() },
            Series { label: format!("fit, p = {:.3}", fit.exponent), points: line },
        ],
    });
    sink.json(json!({"source": source, "fit": fit, "filter": fit.filter(cfg.filter.kappa)}))?;
    Ok(sink.written())
}
