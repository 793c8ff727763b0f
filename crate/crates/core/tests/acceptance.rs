//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each (plus detail lines) and exits non-zero on any failure.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::f64::consts::{FRAC_PI_4, PI};
use std::time::Instant;

use num_complex::Complex64;
use optomech_entangle::analytic::{
    filter_chain, g2_two_cavity, n_max, tau_max, witness_from_g2, witness_rm, Color, Detector, DetectorTag,
    FilterChainParams,
};
use optomech_entangle::cooling::{derive, Bath, DerivedParams, SystemParams, TwoCavityParams, TWO_PI};
use optomech_entangle::counting::{crossing_time, estimate_witness, G2Options};
use optomech_entangle::heterodyne::{reconstruct_g2, synthesize_surrogate, unravel_qsd_single, QsdOptions, ReconstructOptions};
use optomech_entangle::master_equation::{thermal_state, Mat, MasterEquation};
use optomech_entangle::quadrature::integrate;
use optomech_entangle::stats::stream_rng;
use optomech_entangle::trajectory::{
    build_channels, conditional_after_red, simulate_records, transient_moments, ChannelSet, EnsembleConfig, JointState,
};
use rand::Rng;

type C = Complex64;

const A_R: DetectorTag = DetectorTag::new(Detector::A, Color::Red);
const A_B: DetectorTag = DetectorTag::new(Detector::A, Color::Blue);
const B_B: DetectorTag = DetectorTag::new(Detector::B, Color::Blue);

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { pass: true, summary: String::new(), details: Vec::new() }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.details.push(format!("{} {line}", if ok { "ok  " } else { "BAD " }));
    }

    fn note(&mut self, line: String) {
        self.details.push(format!("     {line}"));
    }
}

fn within(v: f64, target: f64, tol: f64) -> bool {
    (v - target).abs() <= tol
}

fn reference_numbers() -> Outcome {
    let mut o = Outcome::new();
    let d = derive(&SystemParams::membrane()).unwrap();
    let g_khz = d.gamma_eff / TWO_PI / 1e3;
    let tmax_ms = tau_max(d.n_m, d.gamma_eff) * 1e3;
    o.check(within(d.n_m, 0.068, 0.001), format!("n_M = {:.5} (0.068 ± 0.001)", d.n_m));
    o.check(within(d.n_opt, 0.016, 0.0005), format!("n_opt = {:.5} (0.016 ± 0.0005)", d.n_opt));
    o.check(within(g_khz, 0.4, 0.02), format!("gamma_eff/2pi = {g_khz:.4} kHz (0.4 ± 5%)"));
    o.check(within(d.f_r, 41.0, 1.0), format!("f_r = {:.2} /s (41 ± 1)", d.f_r));
    o.check(within(d.f_b, 172.0, 2.0), format!("f_b = {:.2} /s (172 ± 2)", d.f_b));
    o.check(within(tmax_ms, 0.47, 0.01), format!("tau_max = {tmax_ms:.4} ms (0.47 ± 0.01)"));
    o.summary = format!("n_M {:.4}, n_opt {:.4}, gamma/2pi {g_khz:.3} kHz, f_r {:.1}, f_b {:.1}, tau_max {tmax_ms:.3} ms", d.n_m, d.n_opt, d.f_r, d.f_b);
    o
}

fn witness_threshold() -> Outcome {
    let mut o = Outcome::new();
    let root = n_max();
    o.check((root * 100.0).round() / 100.0 == 0.26, format!("root of 7n^2 + 2n - 1 = {root:.6} -> {:.2}", root));
    let mut rng = stream_rng(2024, 0);
    let mut worst: f64 = 0.0;
    let mut draws = 0;
    while draws < 100 {
        let n = rng.random_range(0.01..1.0);
        let delta = rng.random_range(-10.0..10.0);
        let phi = rng.random_range(0.0..PI);
        let tau = rng.random_range(0.0..3.0);
        let p = TwoCavityParams::symmetric(SystemParams::desk(n), delta, phi);
        let d = p.derive_symmetric().unwrap();
        let (Ok(aa), Ok(ba)) = (g2_two_cavity(tau, A_R, A_B, &p, &d), g2_two_cavity(tau, A_R, B_B, &p, &d)) else { continue };
        let (Ok(w), Ok(r)) = (witness_from_g2(aa.value, ba.value), witness_rm(tau, &p, &d)) else { continue };
        worst = worst.max(((w - r.value) / r.value).abs());
        draws += 1;
    }
    o.check(worst <= 1e-10, format!("witness from g2 vs closed form over {draws} draws: max rel diff {worst:.2e} (<= 1e-10)"));
    o.summary = format!("n threshold {root:.4}, identity max rel diff {worst:.1e}");
    o
}

fn filter_budget() -> Outcome {
    let mut o = Outcome::new();
    let mut sp = SystemParams::membrane();
    sp.bare_coupling = Some(TWO_PI * 100.0);
    let d = derive(&sp).unwrap();
    let r = filter_chain(&FilterChainParams::reference(), &d).unwrap();
    let leak = r.carrier_leakage_ratio;
    let bl = r.blue_to_leakage.unwrap();
    // the flux-ratio example assumes n_M = 0.1 with the same coupling and cavity
    let n_th = (0.1 * d.gamma_eff - d.gamma_opt * d.n_opt) / d.gamma;
    sp.bath = Bath::Occupancy(n_th);
    let d01 = derive(&sp).unwrap();
    let bc = d01.blue_to_carrier().unwrap();
    o.note(format!("flux-ratio example at n_M = {:.4} (bath occupancy {n_th:.2})", d01.n_m));
    o.check((0.3e-10..=3e-10).contains(&leak), format!("f_c^(b)/f_c = {leak:.3e} in [3e-11, 3e-10]"));
    o.check((0.3e2..=3e2).contains(&bl), format!("f_b/f_c^(b) = {bl:.3e} in [30, 300]"));
    o.check((0.3e-8..=3e-8).contains(&bc), format!("f_b/f_c = {bc:.3e} in [3e-9, 3e-8]"));
    for w in &r.warnings {
        o.note(format!("warning: {w}"));
    }
    o.summary = format!("leakage {leak:.2e}, blue/leakage {bl:.1}, blue/carrier {bc:.2e}");
    o
}

/// Average of the analytic correlator over a counting bin.
fn bin_average(center: f64, width: f64, to: DetectorTag, p: &TwoCavityParams, d: &DerivedParams) -> f64 {
    let (a, b) = ((center - 0.5 * width).max(0.0), center + 0.5 * width);
    integrate(|t| g2_two_cavity(t, A_R, to, p, d).unwrap().value, a, b, 2, 8) / (b - a)
}

struct ScenarioFit {
    clicks: usize,
    checked: usize,
    bad: Vec<String>,
    mean_z: f64,
    witness: optomech_entangle::counting::WitnessEstimate,
}

fn scenario(p: &TwoCavityParams, d: &DerivedParams, levels: usize, seed: u64) -> ScenarioFit {
    let set = build_channels(p, d, levels, 1.0).unwrap();
    let cfg = EnsembleConfig::new(&set, 40, 5000.0, 4000 + seed);
    let recs = simulate_records(&set, &cfg).unwrap();
    let clicks: usize = recs.iter().map(|r| r.events.len()).sum();
    let opts = G2Options { bootstrap: 200, seed, ..G2Options::new(3.0, 0.1) };
    let witness = estimate_witness(&recs, &opts).unwrap();
    let (mut bad, mut checked, mut zsum) = (Vec::new(), 0, 0.0);
    for (est, to) in [(&witness.g2_aa, A_B), (&witness.g2_ba, B_B)] {
        let err = est.best_errors();
        for i in 0..est.values.len() {
            if est.counts[i] < 100 {
                continue;
            }
            checked += 1;
            let a = bin_average(est.tau[i], est.bin_width, to, p, d);
            let z = (est.values[i] - a) / err[i];
            zsum += z;
            if z.abs() > 3.0 {
                bad.push(format!("{to} tau {:.2}: {:.4} vs {a:.4} ({z:+.2} sigma)", est.tau[i], est.values[i]));
            }
        }
    }
    ScenarioFit { clicks, checked, bad, mean_z: zsum / checked.max(1) as f64, witness }
}

fn trajectory_vs_analytic() -> Outcome {
    let mut o = Outcome::new();
    let mut bins_checked = 0usize;
    let mut bins_bad = 0usize;
    let mut k = 0u64;
    for n in [0.1, 0.3] {
        for delta in [0.0, 5.0] {
            for phi in [0.0, FRAC_PI_4] {
                k += 1;
                let p = TwoCavityParams::symmetric(SystemParams::desk(n), delta, phi);
                let d = p.derive_symmetric().unwrap();
                let fit = scenario(&p, &d, 5, k);
                bins_checked += fit.checked;
                bins_bad += fit.bad.len();
                let label = format!("n {n}, delta {delta}, phi {phi:.3}");
                o.check(
                    fit.clicks >= 50_000 && fit.bad.is_empty(),
                    format!("{label}: {} clicks, {} bins within 3 sigma except {} (mean z {:+.2})", fit.clicks, fit.checked, fit.bad.len(), fit.mean_z),
                );
                for b in &fit.bad {
                    o.note(b.clone());
                }
                if !fit.bad.is_empty() {
                    // same seeds with more levels separates truncation from chance
                    let wide = scenario(&p, &d, 8, k);
                    o.note(format!("diagnostic at N_max = 8: {} bins outside 3 sigma, mean z {:+.2}", wide.bad.len(), wide.mean_z));
                }
                if delta == 0.0 && phi == 0.0 {
                    let w = &fit.witness;
                    let predicted = ((2f64.sqrt() - 1.0) * (n + 1.0) / (2.0 * n)).ln();
                    let errs = w.bootstrap_errors.clone().unwrap();
                    if predicted > 0.0 {
                        let t = crossing_time(&w.tau, &w.values, &errs, 1.0, 0.5);
                        let ok = t.is_some_and(|t| (t - predicted).abs() <= 0.15);
                        o.check(ok, format!("{label}: R_m crosses 1 at {t:?} vs {predicted:.3} ± 0.15"));
                    } else {
                        // no crossing: the witness never dips significantly below one
                        let dips = (0..w.values.len()).filter(|&i| w.values[i] + 3.0 * errs[i] < 1.0).count();
                        o.check(dips == 0, format!("{label}: no crossing predicted ({predicted:.3} < 0), {dips} bins significantly below 1"));
                    }
                }
            }
        }
    }
    let expected = 0.0027 * bins_checked as f64;
    o.note(format!(
        "{bins_checked} bins compared; {expected:.1} chance exceedances of 3 sigma expected, P(none) = {:.2} without any bias",
        (1.0f64 - 0.0027).powi(bins_checked as i32)
    ));
    o.summary = format!("8 scenarios at N_max = 5, {bins_checked} bins, {bins_bad} outside 3 sigma");
    o
}

/// `p00 p11 / |q|^2` and concurrence of a two-mode density matrix.
fn sector(rho: &Mat, s: optomech_entangle::master_equation::FockSpace) -> (f64, f64) {
    let p00 = rho.get(s.index(&[0, 0]), s.index(&[0, 0])).re;
    let p11 = rho.get(s.index(&[1, 1]), s.index(&[1, 1])).re;
    let q = rho.get(s.index(&[1, 0]), s.index(&[0, 1]));
    (p00 * p11 / q.norm_sqr(), optomech_entangle::analytic::concurrence(p00, p11, q))
}

fn conditional_concurrence() -> Outcome {
    let mut o = Outcome::new();
    let n = 0.05;
    let p = TwoCavityParams::symmetric(SystemParams::desk(n), 0.0, 0.0);
    let d = p.derive_symmetric().unwrap();
    let set = build_channels(&p, &d, 5, 1.0).unwrap();
    let bound = tau_max(d.n_m, d.gamma_eff);
    let tau: Vec<f64> = (0..=20).map(|i| 0.1 * i as f64).collect();
    let cfg = EnsembleConfig::new(&set, 40, 5000.0, 505);
    let s = conditional_after_red(&set, &cfg, &tau, 1000).unwrap();

    // master-equation reference: steady state, red click at A, free evolution
    let me = MasterEquation::new(2, 5, set.rates.down(), set.rates.up(), 0.0);
    let sp = me.space;
    let mut l = sp.lower(0).dagger();
    l.add_scaled(&sp.lower(1).dagger(), C::new(-1.0, 0.0));
    let rho0 = MasterEquation::condition(&thermal_state(sp, d.n_m), &l);

    let c0 = s.concurrence[0];
    o.check(c0 >= 0.8, format!("C(0+) = {c0:.4} ± {:.4} (>= 0.8) from {} red clicks", s.concurrence_se[0], s.clicks));
    let (_, c0_me) = sector(&rho0, sp);
    o.note(format!("master-equation C(0+) = {c0_me:.4}"));
    let mut rho = rho0;
    let mut last = 0.0;
    for (i, &t) in tau.iter().enumerate() {
        rho = me.evolve(&rho, t - last, 0.01);
        last = t;
        let (ratio_me, _) = sector(&rho, sp);
        let (r, se) = (s.separability[i], s.separability_se[i]);
        let agree = (r - ratio_me).abs() <= 3.0 * se;
        if t < bound {
            o.check(agree && r < 1.0, format!("tau {t:.1}: ratio {r:.4} ± {se:.4} vs {ratio_me:.4}, below 1"));
        } else {
            o.check(agree, format!("tau {t:.1}: ratio {r:.4} ± {se:.4} vs {ratio_me:.4} (beyond bound {bound:.3})"));
        }
    }
    o.summary = format!("C(0+) {c0:.3}, separability ratio < 1 for tau < {bound:.3}");
    o
}

fn heterodyne_pipeline() -> Outcome {
    let mut o = Outcome::new();
    let n = 0.1;
    let d = derive(&SystemParams::desk(n)).unwrap();
    let (r, b) = (DetectorTag::new(Detector::Single, Color::Red), DetectorTag::new(Detector::Single, Color::Blue));
    let pairs = [(r, r), (b, b), (r, b)];
    let mut opts = ReconstructOptions::new(8.0, vec![0.5, 1.0, 1.5, 2.0, 3.0]);
    opts.window_half = Some(8.0);
    let classical = |t: f64| 1.0 + (-t).exp();
    let quantum = |t: f64| 1.0 + (n + 1.0) / n * (-t).exp();

    let sur = synthesize_surrogate(&d, 100_000.0, 0.01, 61).unwrap();
    let rs = reconstruct_g2(&sur, &pairs, &opts).unwrap();
    o.note(format!("surrogate floor {:.4}, weights {:?}", rs.floors["Single"], rs.weights));
    for c in &rs.correlations {
        for i in 0..c.tau.len() {
            let (t, v, se) = (c.tau[i], c.values[i], c.std_errors[i]);
            let z = (v - classical(t)) / se;
            o.check(z.abs() <= 3.0, format!("(a) surrogate {}->{} tau {t}: {v:.4} ± {se:.4} vs classical {:.4}", c.from, c.to, classical(t)));
            if c.from != c.to {
                let zq = (quantum(t) - v) / se;
                o.check(zq > 3.0, format!("(a) surrogate cross stays {zq:.1} sigma below the quantum value {:.3}", quantum(t)));
            }
        }
    }

    let (qsd, _) = unravel_qsd_single(&d, 5, 100_000.0, &QsdOptions::desk(), 62).unwrap();
    let rq = reconstruct_g2(&qsd, &pairs, &opts).unwrap();
    o.note(format!("QSD floor {:.4}, weights {:?}", rq.floors["Single"], rq.weights));
    let c = rq.get(r, b).unwrap();
    for i in 0..c.tau.len() {
        let (t, v, se) = (c.tau[i], c.values[i], c.std_errors[i]);
        let z = (v - quantum(t)) / se;
        o.check(z.abs() <= 3.0, format!("(b) QSD blue|red tau {t}: {v:.4} ± {se:.4} vs {:.4} ({z:+.2} sigma)", quantum(t)));
    }

    let mut worst: f64 = 0.0;
    for (rec, base) in [(&sur, &rs), (&qsd, &rq)] {
        let mut scaled = rec.clone();
        scaled.scale(Detector::Single, C::from_polar(2.7, 1.1));
        let other = reconstruct_g2(&scaled, &pairs, &opts).unwrap();
        for (x, y) in base.correlations.iter().zip(&other.correlations) {
            for (u, v) in x.values.iter().zip(&y.values) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    o.check(worst <= 1e-12, format!("(c) gain 2.7 and phase 1.1 rad change g2 by at most {worst:.1e}"));
    o.summary = format!("surrogate classical, QSD excess reproduced, invariance {worst:.0e}");
    o
}

fn oracle_equivalence() -> Outcome {
    let mut o = Outcome::new();
    let p = TwoCavityParams::symmetric(SystemParams::desk(0.1), 5.0, 0.0);
    let d = p.derive_symmetric().unwrap();
    let set: ChannelSet = build_channels(&p, &d, 3, 1.0).unwrap();
    let me = MasterEquation::new(2, 3, set.rates.down(), set.rates.up(), p.delta);
    let sp = me.space;
    let times: Vec<f64> = (1..=8).map(|i| 0.25 * i as f64).collect();
    let coh_op = sp.lower(1).dagger().mul(&sp.lower(0));

    let starts: [(&str, Vec<([usize; 2], C)>); 2] = [
        ("(|10> + |01>)/sqrt2", vec![([1, 0], C::new(0.5f64.sqrt(), 0.0)), ([0, 1], C::new(0.5f64.sqrt(), 0.0))]),
        ("|2,1>", vec![([2, 1], C::new(1.0, 0.0))]),
    ];
    let mut worst_rel: f64 = 0.0;
    for (k, (name, amps)) in starts.iter().enumerate() {
        let mut psi = vec![C::new(0.0, 0.0); set.dim()];
        let mut rho = Mat::zeros(sp.dim());
        for &(occ, a) in amps {
            psi[set.index(occ)] = a;
        }
        for &(oa, a) in amps {
            for &(ob, b) in amps {
                rho.set(sp.index(&oa), sp.index(&ob), a * b.conj());
            }
        }
        let init = JointState { amplitudes: psi, time: 0.0 };
        let s = transient_moments(&set, &init, &times, 40_000, 700 + k as u64).unwrap();
        let mut last = 0.0;
        let mut bad = 0;
        for (i, &t) in times.iter().enumerate() {
            rho = me.evolve(&rho, t - last, 0.005);
            last = t;
            let exact = [
                rho.expect(&sp.number(0)).re,
                rho.expect(&sp.number(1)).re,
                rho.expect(&coh_op).re,
                rho.expect(&coh_op).im,
            ];
            let got = [s.occupation[i][0], s.occupation[i][1], s.coherence[i].re, s.coherence[i].im];
            let se = [s.occupation_se[i][0], s.occupation_se[i][1], s.coherence_se[i][0], s.coherence_se[i][1]];
            for m in 0..4 {
                let diff = (got[m] - exact[m]).abs();
                if exact[m].abs() > 0.05 {
                    worst_rel = worst_rel.max(diff / exact[m].abs());
                }
                if diff > (3.0 * se[m]).max(0.01 * exact[m].abs()) {
                    bad += 1;
                    o.note(format!("{name} t {t}: quantity {m} {:.5} ± {:.5} vs {:.5}", got[m], se[m], exact[m]));
                }
            }
        }
        o.check(bad == 0, format!("{name}: n1, n2, Re/Im <c2^dag c1> at {} times within 1% or 3 sigma", times.len()));
    }
    o.summary = format!("N_max = 3 oracle agrees; worst relative deviation {:.2}% on quantities above 0.05", 100.0 * worst_rel);
    o
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("reference-number reproduction", reference_numbers),
        ("witness threshold", witness_threshold),
        ("filter-chain budget", filter_budget),
        ("trajectory vs analytic", trajectory_vs_analytic),
        ("conditional concurrence", conditional_concurrence),
        ("heterodyne pipeline", heterodyne_pipeline),
        ("master-equation oracle", oracle_equivalence),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        for line in &out.details {
            println!("    {line}");
        }
        println!(
            "{} criterion {} ({name}): {} [{:.1} s]",
            if out.pass { "PASS" } else { "FAIL" },
            i + 1,
            out.summary,
            start.elapsed().as_secs_f64()
        );
        if !out.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
