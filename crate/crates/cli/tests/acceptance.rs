//! Acceptance run: one PASS/FAIL line per criterion, then supplementary
//! checks of worked examples. Exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::{E, FRAC_PI_2, PI};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use phasetrack::analysis::{self, AlphaPenalty, ParityBudget, SimBudget};
use phasetrack::noisegen::{self, NoiseModel};
use phasetrack::optics::{self, MeasurementConfig};
use phasetrack::servo::{self, Estimator};
use phasetrack::tracker::{self, FilterConfig};
use phasetrack::{line_fit, rng};
use phasetrack_cli::config;
use rand::Rng as _;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

const D: f64 = 2e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn filter_exactness() -> Outcome {
    let mut r = rng::stream(101, 1);
    let (mut mismatches, mut bound, mut continuity) = (0, 0, 0);
    for i in 0..100_000 {
        let sigma = 10f64.powf(r.random_range(-3.0..1.0));
        let kappa = r.random_range(0.05..5.0);
        let thr = kappa * sigma;
        let delta = match i % 4 {
            0 => thr,
            1 => -thr,
            _ => r.random_range(-20.0..20.0) * thr,
        };
        let got = tracker::innovation_filter(delta, sigma, kappa);
        let excess = delta.abs() - thr;
        let want = if excess <= 0.0 { delta } else { delta.signum() * (thr + excess * (-excess / sigma).exp()) };
        if (got - want).abs() > 1e-12 * want.abs().max(thr) {
            mismatches += 1;
        }
        if got.abs() > (thr + sigma / E) * (1.0 + 1e-12) {
            bound += 1;
        }
        if i % 4 < 2 {
            let eps = 1e-9 * thr;
            let outside = tracker::innovation_filter(delta.signum() * (thr + eps), sigma, kappa);
            if got != delta || (outside - got).abs() > 2.0 * eps {
                continuity += 1;
            }
        }
    }
    outcome(mismatches + bound + continuity == 0, format!("{mismatches} mismatches, {bound} bound and {continuity} continuity violations in 1e5 points"))
}

fn ln_pmf(n: u64, lambda: f64) -> f64 {
    let lf: f64 = (2..=n).map(|k| (k as f64).ln()).sum();
    n as f64 * lambda.ln() - lambda - lf
}

fn support(lambda: f64) -> u64 {
    let mut cum = 0.0;
    let mut n = 0;
    loop {
        cum += ln_pmf(n, lambda).exp();
        if cum >= 1.0 - 1e-12 {
            return n;
        }
        n += 1;
    }
}

fn brute_fisher(phi: f64, cfg: &MeasurementConfig) -> f64 {
    let (l1, l2) = optics::mean_counts(phi, cfg);
    let half = 0.5 * cfg.photons() * cfg.visibility;
    let (d1, d2) = (-half * phi.sin(), half * phi.sin());
    let mut total = 0.0;
    for n1 in 0..=support(l1) {
        let p1 = ln_pmf(n1, l1);
        let s1 = d1 * (n1 as f64 / l1 - 1.0);
        for n2 in 0..=support(l2) {
            let s2 = d2 * (n2 as f64 / l2 - 1.0);
            total += (p1 + ln_pmf(n2, l2)).exp() * (s1 + s2).powi(2);
        }
    }
    total
}

fn fisher_oracle() -> Outcome {
    let mut r = rng::stream(102, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let phi = r.random_range(0.05..PI - 0.05) * if r.random::<bool>() { 1.0 } else { -1.0 };
        let cfg = MeasurementConfig::new(r.random_range(0.5..20.0), 1.0, r.random_range(0.05..0.99));
        worst = worst.max((brute_fisher(phi, &cfg) / optics::fisher_info(phi, &cfg) - 1.0).abs());
    }
    outcome(worst < 1e-3, format!("worst relative error {worst:.2e} over 100 triples"))
}

fn steady_state() -> Outcome {
    let mut r = rng::stream(103, 1);
    let (mut worst_def, mut worst_snl, mut regime): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..1000 {
        let d = 10f64.powf(r.random_range(-6.0..-1.0));
        let tau = 10f64.powf(r.random_range(-2.0..2.0));
        let mu = 10f64.powf(r.random_range(-1.0..2.0));
        let v0 = r.random_range(0.3..1.0);
        let x = tracker::steady_state_variance(d, tau, mu, v0, 1.0).unwrap();
        let info = mu * v0 * v0 * tau * (-d * tau).exp();
        worst_def = worst_def.max((1.0 / x / (1.0 / (x + d * tau) + info) - 1.0).abs());
        if d * tau <= 0.1 * x {
            regime += 1;
            worst_snl = worst_snl.max((x / optics::tracking_snl(d, mu, v0, 1.0) - 1.0).abs());
        }
    }
    outcome(
        worst_def < 1e-8 && worst_snl < 0.05 && regime > 0,
        format!("defining equation {worst_def:.1e}; {regime} draws with Dτ ≤ 0.1σ², worst SNL deviation {:.2}%", 100.0 * worst_snl),
    )
}

fn scaling_split() -> Outcome {
    let mus = [0.02, 0.05, 0.2, 0.6, 2.0, 6.0, 20.0];
    let taus = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0];
    let seeds: Vec<u64> = (0..20).collect();
    let cells = analysis::variance_surface(&taus, &mus, D, 1.0, 1.0, &seeds, &SimBudget::default()).unwrap();
    let s = analysis::scaling_split(&cells).unwrap();
    let mle_ok = (s.mle_slope + 1.0).abs() <= 0.1;
    let bayes_ok = (s.bayes_slope + 0.5).abs() <= 0.1;
    let args: Vec<String> = s.mle_argmin_tau.iter().map(|t| format!("{t}")).collect();
    outcome(
        mle_ok && bayes_ok,
        format!(
            "MLE min-over-τ slope {:.3} (target −1.0 ± 0.1, argmin τ {}), Bayes τ = {} µs slope {:.3} (target −0.5 ± 0.1)",
            s.mle_slope,
            args.join("/"),
            s.small_tau,
            s.bayes_slope
        ),
    )
}

fn fig_s1_servo() -> FilterConfig {
    FilterConfig::new(1.0, D)
}

fn fig_s1_comparison() -> Outcome {
    let cfg = servo::ServoConfig::continuous(MeasurementConfig::new(2.0, 10.0, 1.0), fig_s1_servo(), 1.0, 50);
    let noise = NoiseModel::wiener(D);
    let wins: usize = (0..100u64)
        .into_par_iter()
        .map(|s| {
            let m = servo::run_closed_loop(&noise, &cfg, Estimator::Mle, 2e5, s).unwrap().residual_variance;
            let b = servo::run_closed_loop(&noise, &cfg, Estimator::Bayes, 2e5, s).unwrap().residual_variance;
            usize::from(b < m)
        })
        .sum();
    outcome(wins >= 95, format!("Bayes < MLE in {wins}/100 paired seeds"))
}

fn kappa_range() -> Outcome {
    let kappas = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.5, 1.7, 2.0, 3.0, 5.0];
    let taus = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];
    let seeds: Vec<u64> = (0..20).collect();
    let k = analysis::kappa_sweep(&kappas, &taus, 2.0, D, 1.0, &seeds, &SimBudget::default()).unwrap();
    let adv: Vec<_> = k.optima.iter().filter(|o| o.advantage).collect();
    let inside = adv.iter().all(|o| (0.8..=1.7).contains(&o.best_kappa));
    let per: Vec<String> = adv.iter().map(|o| format!("τ={}:κ*={}", o.tau, o.best_kappa)).collect();
    outcome(!adv.is_empty() && inside, format!("advantage region {}", per.join(", ")))
}

fn calibration() -> Outcome {
    let coeff = 0.15f64.to_radians();
    let taus: Vec<f64> = (0..12).map(|i| (10f64.ln() + 1e3f64.ln() * i as f64 / 11.0).exp()).collect();
    let mut parts = vec![];
    let mut ok = true;
    for (p, model) in [(0.5, NoiseModel::wiener(coeff * coeff)), (0.71, NoiseModel::power_law(coeff, 0.71))] {
        let t = noisegen::generate_composite(&model, 7, 2.0, 2_000_000).unwrap();
        let fit = analysis::calibrate_diffusion(&t, &taus).unwrap();
        let ce = (fit.coeff / coeff - 1.0).abs();
        ok &= (fit.exponent - p).abs() <= 0.05 && ce <= 0.10;
        parts.push(format!("p={p}: fit {:.3}, coeff error {:.1}%", fit.exponent, 100.0 * ce));
    }
    outcome(ok, parts.join("; "))
}

fn preset(name: &str) -> config::RunConfig {
    config::load(config::preset(name).unwrap(), name, &[], None).unwrap()
}

fn visibility_chain() -> Outcome {
    let cfg = preset("table_s1_10km");
    let db = cfg.dual_band.clone().unwrap();
    let vis: Vec<f64> = (0..50u64)
        .into_par_iter()
        .map(|s| servo::run_dual_band(&db, Estimator::Bayes, cfg.duration, s).unwrap().combined.visibility)
        .collect();
    let hits = vis.iter().filter(|&&v| v >= 0.97).count();
    let mean = vis.iter().sum::<f64>() / vis.len() as f64;
    outcome(hits >= 45, format!("combined V ≥ 0.97 in {hits}/50 runs (mean {mean:.4}, duty {})", db.residual_channel.servo.duty_cycle))
}

fn duty_robustness() -> Outcome {
    let cfg = preset("fig3c_duty");
    let duties = [0.001, 0.005, 0.01, 0.02, 0.065, 0.2, 1.0];
    let rows = servo::duty_cycle_sweep(&cfg.noise, &cfg.servo, &duties, 1e7, &cfg.sweep.seeds).unwrap();
    let bayes_clean = rows.iter().filter(|r| r.estimator == Estimator::Bayes && r.duty >= 0.02).all(|r| r.lock_losses == 0);
    let mle_loses = rows.iter().any(|r| r.estimator == Estimator::Mle && r.duty <= 0.02 && r.lock_losses >= 1);
    let table: Vec<String> = duties
        .iter()
        .map(|&d| {
            let ll = |e| rows.iter().find(|r| r.duty == d && r.estimator == e).unwrap().lock_losses;
            format!("{d}:{}/{}", ll(Estimator::Mle), ll(Estimator::Bayes))
        })
        .collect();
    outcome(bayes_clean && mle_loses, format!("lock losses MLE/Bayes per duty over 10 s × {} seeds: {}", cfg.sweep.seeds.len(), table.join(" ")))
}

fn parity_budget() -> Outcome {
    let b = ParityBudget {
        phase_stab: -2.0 * 0.98f64.ln(),
        motion: (0.0, (-0.97f64.ln() / 2.0).sqrt()),
        excitation_alpha: 0.05,
        manipulation_err: 0.01,
        decoherence_err: 0.02,
        snr: 99.0,
        alpha_penalty: AlphaPenalty::Linear,
    };
    let c = analysis::parity_contrast(&b, 1.0);
    let pts: Vec<(f64, f64)> = (0..24).map(|i| {
        let p = PI * i as f64 / 24.0;
        (p, 0.867 * (2.0 * p + 0.4).sin())
    }).collect();
    let fit = analysis::fit_parity(&pts).unwrap();
    outcome(c > 0.86 && (fit.a - 0.867).abs() <= 1e-6, format!("budget contrast {c:.4}, fitted A {:.9}", fit.a))
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let h = Sha256::digest(std::fs::read(&p).unwrap());
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), format!("{h:x}"));
    }
    out
}

fn determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_phasetrack");
    let runs: [&[&str]; 3] = [
        &["simulate", "--seed", "7", "--set", "duration=5e4"],
        &["sweep", "kappa", "--taus", "2,10", "--kappas", "0.5,1,1.5", "--seeds", "0..3", "--set", "sweep.budget={\"min_duration\":2e4,\"min_windows\":200,\"max_tick\":1,\"max_ticks_per_window\":10}"],
        &["calibrate", "--preset", "wiener_2e-4", "--seed", "3"],
    ];
    let mut same = true;
    let mut files = 0;
    for args in runs {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for (i, d) in dirs.iter().enumerate() {
            let jobs = if i == 0 { "1" } else { "4" };
            let st = Command::new(exe).args(args).args(["--jobs", jobs, "--out-dir"]).arg(d.path()).output().unwrap();
            if !st.status.success() {
                return outcome(false, format!("{args:?} failed: {}", String::from_utf8_lossy(&st.stderr)));
            }
        }
        let (a, b) = (digests(dirs[0].path()), digests(dirs[1].path()));
        files += a.len();
        same &= !a.is_empty() && a == b;
    }
    outcome(same, format!("{files} artifacts from 3 commands hash-identical across reruns (1 and 4 jobs)"))
}

fn eta_at_unit_kappa() -> Outcome {
    let e = tracker::estimate_eta(1.0, &MeasurementConfig::new(2.0, 10.0, 1.0), D, 400_000, 5).unwrap();
    outcome((e.eta - 1.0).abs() <= 0.1, format!("η(κ=1) = {:.3} ± {:.3}; worked example expects 1 ± 0.1", e.eta, e.ci_half_width))
}

fn conventional_flux_slope() -> Outcome {
    let mus: Vec<f64> = (0..9).map(|i| 0.02 * 10f64.powf(i as f64 * 3.0 / 8.0)).collect();
    let mins: Vec<f64> = mus
        .iter()
        .map(|&mu| {
            (0..4000)
                .map(|i| 10f64.powf(-2.0 + 7.0 * i as f64 / 3999.0))
                .map(|tau| optics::conv_variance_bound(&MeasurementConfig::new(mu, tau, 1.0), D))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let lx: Vec<f64> = mus.iter().map(|m| m.ln()).collect();
    let ly: Vec<f64> = mins.iter().map(|m| m.ln()).collect();
    let slope = line_fit(&lx, &ly).unwrap().0;
    outcome((slope + 1.0).abs() <= 0.02, format!("min over τ of the conventional bound has slope {slope:.3}; worked example expects −1 ± 0.02"))
}

fn error_signal_sign() -> Outcome {
    let c = MeasurementConfig::new(1e4, 1.0, 1.0);
    let mut r = rng::stream(3, rng::COUNTS);
    let m = (0..10_000).map(|_| tracker::error_signal(optics::sample_counts(FRAC_PI_2 + 0.05, &c, &mut r), &c)).sum::<f64>() / 1e4;
    outcome((m + 0.05).abs() <= 0.002, format!("mean error signal at φ = π/2 + 0.05 is {m:+.4}; worked example expects −0.05 ± 0.002"))
}

fn main() {
    let criteria: [Check; 11] = [
        ("filter exactness", filter_exactness),
        ("Fisher information oracle", fisher_oracle),
        ("steady-state fixed point", steady_state),
        ("scaling split", scaling_split),
        ("Bayes versus MLE closed loop", fig_s1_comparison),
        ("κ range", kappa_range),
        ("calibration round trip", calibration),
        ("visibility chain", visibility_chain),
        ("duty-cycle robustness", duty_robustness),
        ("parity budget", parity_budget),
        ("determinism", determinism),
    ];
    let mut failed = vec![];
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict} {name}: {} [{:.1} s]", i + 1, o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(i + 1);
        }
    }
    println!("supplementary (not acceptance criteria):");
    let extra: [Check; 3] = [
        ("filter efficiency", eta_at_unit_kappa),
        ("conventional bound flux scaling", conventional_flux_slope),
        ("error signal sign", error_signal_sign),
    ];
    for (name, check) in extra {
        let o = check();
        println!("  {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed.is_empty() {
        println!("all 11 criteria passed");
    } else {
        let list: Vec<String> = failed.iter().map(|c| c.to_string()).collect();
        println!("failed criteria: {}", list.join(", "));
        std::process::exit(1);
    }
}
