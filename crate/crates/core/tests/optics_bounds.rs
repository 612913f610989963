use std::f64::consts::{FRAC_PI_2, PI};

use phasetrack::optics::{self, MeasurementConfig};
use phasetrack::rng;
use phasetrack::tracker;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

fn ln_pmf(n: u64, lambda: f64) -> f64 {
    let mut lf = 0.0;
    for k in 2..=n {
        lf += (k as f64).ln();
    }
    n as f64 * lambda.ln() - lambda - lf
}

/// Counts `0..=n` holding all but `1e-12` of a Poisson mass.
fn support(lambda: f64) -> u64 {
    let mut cum = 0.0;
    let mut n = 0;
    loop {
        cum += ln_pmf(n, lambda).exp();
        if cum >= 1.0 - 1e-12 || n > 10_000 {
            return n;
        }
        n += 1;
    }
}

/// `Σ L·(∂ log L/∂φ)²` over both ports by direct summation.
fn brute_fisher(phi: f64, cfg: &MeasurementConfig) -> f64 {
    let (l1, l2) = optics::mean_counts(phi, cfg);
    let half = 0.5 * cfg.photons() * cfg.visibility;
    let (d1, d2) = (-half * phi.sin(), half * phi.sin());
    let (k1, k2) = (support(l1), support(l2));
    let mut total = 0.0;
    for n1 in 0..=k1 {
        let p1 = ln_pmf(n1, l1);
        let s1 = d1 * (n1 as f64 / l1 - 1.0);
        for n2 in 0..=k2 {
            let s2 = d2 * (n2 as f64 / l2 - 1.0);
            total += (p1 + ln_pmf(n2, l2)).exp() * (s1 + s2).powi(2);
        }
    }
    total
}

#[test]
fn fisher_matches_likelihood_curvature() {
    let mut r = rng::stream(17, 99);
    for _ in 0..100 {
        let phi = r.random_range(0.05..PI - 0.05) * if r.random::<bool>() { 1.0 } else { -1.0 };
        let n = r.random_range(0.5..20.0);
        let v0 = r.random_range(0.05..0.99);
        let cfg = MeasurementConfig::new(n, 1.0, v0);
        let exact = optics::fisher_info(phi, &cfg);
        let brute = brute_fisher(phi, &cfg);
        assert!((brute / exact - 1.0).abs() < 1e-3, "φ={phi} N={n} V0={v0}: {brute} vs {exact}");
    }
    let cfg = MeasurementConfig::new(10.0, 1.0, 0.8);
    assert!((brute_fisher(1.0, &cfg) / optics::fisher_info(1.0, &cfg) - 1.0).abs() < 1e-3);
}

#[test]
fn mle_respects_cramer_rao() {
    let cfg = MeasurementConfig::new(200.0, 1.0, 0.9);
    let bound = 1.0 / optics::fisher_info(FRAC_PI_2, &cfg);
    let mut r = rng::stream(5, rng::COUNTS);
    let k = 200_000;
    let est: Vec<f64> = (0..k)
        .map(|_| tracker::mle_phase(optics::sample_counts(FRAC_PI_2, &cfg, &mut r), &cfg, FRAC_PI_2).unwrap())
        .collect();
    let m = est.iter().sum::<f64>() / k as f64;
    let v = est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (k - 1) as f64;
    assert!(v >= bound, "{v} < {bound}");
    assert!(v / bound < 1.2, "{v} vs {bound}");
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d
        } else {
            a = c
        }
    }
    0.5 * (a + b)
}

#[test]
fn averaged_information_peaks_at_inverse_diffusion() {
    let d = 2e-4;
    let info = |tau: f64| optics::avg_fisher(&MeasurementConfig::new(2.0, tau, 1.0), d);
    let t = golden_min(|tau| -info(tau), 1.0, 1e5);
    assert!((t * d - 1.0).abs() < 1e-6, "{t}");
}

#[test]
fn effective_visibility_is_gaussian_characteristic() {
    let (v0, d, tau): (f64, f64, f64) = (0.93, 1e-3, 500.0);
    let g = Normal::new(0.0, (d * tau).sqrt()).unwrap();
    let mut r = rng::stream(8, 1);
    let k = 1_000_000;
    let m = (0..k).map(|_| g.sample(&mut r).cos()).sum::<f64>() / k as f64;
    assert!((v0 * m - optics::effective_visibility(v0, d, tau)).abs() < 1e-3);
}

#[test]
fn conventional_bound_minimum_matches_grid() {
    let d = 2e-4;
    let cfg = |tau: f64| MeasurementConfig::new(2.0, tau, 1.0);
    let f = |tau: f64| optics::conv_variance_bound(&cfg(tau), d);
    let (lo, hi) = (1.0f64, 1e4f64);
    let n = 10_000;
    let grid: Vec<f64> = (0..n).map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp()).collect();
    let (gi, gv) = grid.iter().enumerate().map(|(i, &t)| (i, f(t))).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let t = golden_min(f, lo, hi);
    let step = (hi / lo).ln() / (n - 1) as f64;
    assert!((t.ln() - grid[gi].ln()).abs() <= step);
    assert!(f(t) <= gv && (gv - f(t)) / f(t) < 1e-6);
}

#[test]
fn conventional_minimum_flux_slope() {
    // Minimising e^{Dτ}/(µτ) + Dτ gives τ* ≈ 1/√(µD) and a minimum of about
    // 2√(D/µ), so the analytic slope against µ is −1/2.
    let d = 2e-4;
    let mus: Vec<f64> = (0..9).map(|i| 0.02 * 10f64.powf(i as f64 * 3.0 / 8.0)).collect();
    let mins: Vec<f64> = mus
        .iter()
        .map(|&mu| {
            let f = |tau: f64| optics::conv_variance_bound(&MeasurementConfig::new(mu, tau, 1.0), d);
            f(golden_min(f, 1e-3, 1e6))
        })
        .collect();
    let lx: Vec<f64> = mus.iter().map(|m| m.ln()).collect();
    let ly: Vec<f64> = mins.iter().map(|m| m.ln()).collect();
    let (slope, _, _) = phasetrack::line_fit(&lx, &ly).unwrap();
    assert!((slope + 0.5).abs() < 0.02, "{slope}");
}

#[test]
fn snl_matches_fixed_point_when_drift_is_small() {
    let mut r = rng::stream(23, 1);
    let mut checked = 0;
    for _ in 0..2000 {
        let d = 10f64.powf(r.random_range(-6.0..-2.0));
        let tau = 10f64.powf(r.random_range(-2.0..1.0));
        let mu = 10f64.powf(r.random_range(-1.0..2.0));
        let v0 = r.random_range(0.5..1.0);
        let snl = optics::tracking_snl(d, mu, v0, 1.0);
        if d * tau > 0.1 * snl {
            continue;
        }
        checked += 1;
        let x = tracker::steady_state_variance(d, tau, mu, v0, 1.0).unwrap();
        assert!((x / snl - 1.0).abs() < 0.05, "d={d} τ={tau} µ={mu}: {x} vs {snl}");
    }
    assert!(checked > 100);
}

#[test]
fn bayes_bound_limits() {
    let (d, mu) = (2e-4, 2.0);
    let snl = optics::tracking_snl(d, mu, 1.0, 1.0);
    let b = optics::bayes_variance_bound(&MeasurementConfig::new(mu, 1e-9, 1.0), d, 1.0);
    assert!((b / snl - 1.0).abs() < 1e-6);
    for tau in [0.1, 1.0, 10.0, 100.0] {
        let c = MeasurementConfig::new(mu, tau, 0.9);
        assert!(optics::bayes_variance_bound(&c, 0.0, 1.0) < 1.0 / (mu * 0.81 * tau));
    }
}

#[test]
fn bounds_are_finite_on_acceptance_grid() {
    for mu in [0.02, 0.05, 0.2, 0.6, 2.0, 6.0, 20.0] {
        for tau in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0] {
            for v0 in [0.3, 0.9, 0.9826, 0.999] {
                let c = MeasurementConfig::new(mu, tau, v0);
                for v in [
                    optics::conv_variance_bound(&c, 2e-4),
                    optics::bayes_variance_bound(&c, 2e-4, 1.0),
                    optics::avg_fisher(&c, 2e-4),
                    optics::prior_info(&c, 2e-4, 1.0),
                ] {
                    assert!(v.is_finite() && v > 0.0);
                }
            }
        }
    }
}
