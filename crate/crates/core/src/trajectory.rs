//! Quantum-jump simulation of one or two mechanical modes under color- and
//! detector-tagged photodetection.
//!
//! Cavities are adiabatically eliminated: each sideband photon is a jump of
//! the mechanical state, blue photons lowering and red photons raising it.
//! With two oscillators the sideband fields meet on a beam splitter before
//! detectors A and B, so those jumps act on superpositions of the modes.
//!
//! The sum of `L^dag L` over all channels is diagonal in the Fock basis, so
//! the no-jump evolution is an exact exponential and waiting times are drawn
//! by solving `|psi(t)|^2 = r` directly.

use std::collections::VecDeque;
use std::io::{BufRead, Read, Write};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{concurrence, Color, Detector, DetectorTag};
use crate::cooling::{DerivedParams, TwoCavityParams};
use crate::stats::{jackknife_vec, stream_rng};
use crate::{Error, Result};

type C = Complex64;
const ZERO: C = C::new(0.0, 0.0);

pub const DEFAULT_N_MAX: usize = 5;
/// Tolerance on the time-averaged population of the top Fock level.
pub const DEFAULT_EPS_TRUNC: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Single,
    Pair,
}

impl Topology {
    pub fn modes(self) -> usize {
        match self {
            Topology::Single => 1,
            Topology::Pair => 2,
        }
    }
}

/// Rates of the effective mechanical model, in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub gamma: f64,
    pub n_th: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    /// Observed fraction of the sideband photons.
    pub eta_esc: f64,
    /// Frequency offset of oscillator 2.
    pub delta: f64,
    pub phi: f64,
}

impl Rates {
    pub fn from_derived(d: &DerivedParams, eta_esc: f64, delta: f64, phi: f64) -> Self {
        Rates {
            gamma: d.gamma,
            n_th: d.n_th,
            a_minus: d.a_minus,
            a_plus: d.a_plus,
            eta_esc,
            delta,
            phi,
        }
    }

    /// Total phonon loss rate per unit occupation.
    pub fn down(&self) -> f64 {
        self.gamma * (self.n_th + 1.0) + self.a_minus
    }

    pub fn up(&self) -> f64 {
        self.gamma * self.n_th + self.a_plus
    }

    pub fn steady_occupancy(&self) -> f64 {
        self.up() / (self.down() - self.up())
    }
}

/// Sparse operator as `(row, column, value)` triplets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseOp {
    pub entries: Vec<(usize, usize, C)>,
}

impl SparseOp {
    pub fn apply(&self, psi: &[C], out: &mut [C]) {
        out.iter_mut().for_each(|v| *v = ZERO);
        for &(r, c, v) in &self.entries {
            out[r] += v * psi[c];
        }
    }

    /// `|| L psi ||^2` using `scratch` as workspace.
    pub fn norm_sqr_applied(&self, psi: &[C], scratch: &mut [C]) -> f64 {
        self.apply(psi, scratch);
        scratch.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: C) -> SparseOp {
        SparseOp { entries: self.entries.iter().map(|&(r, c, v)| (r, c, v * s)).collect() }
    }

    pub fn plus(mut self, other: &SparseOp) -> SparseOp {
        self.entries.extend_from_slice(&other.entries);
        self
    }

    pub fn to_dense(&self, dim: usize) -> Vec<C> {
        let mut m = vec![ZERO; dim * dim];
        for &(r, c, v) in &self.entries {
            m[r * dim + c] += v;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelTag {
    /// Photon reaching a detector.
    Click(DetectorTag),
    /// Sideband photon lost before detection.
    Escape { mode: usize, color: Color },
    /// Exchange with the mechanical bath.
    Thermal { mode: usize, up: bool },
}

#[derive(Debug, Clone)]
pub struct JumpChannel {
    pub tag: ChannelTag,
    pub op: SparseOp,
    pub observed: bool,
}

/// Jump channels, effective Hamiltonian and Fock-space bookkeeping.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub topology: Topology,
    pub n_max: usize,
    pub rates: Rates,
    pub channels: Vec<JumpChannel>,
    /// Hermitian part of `H_eff`, diagonal.
    pub energy: Vec<f64>,
    /// `sum L^dag L`, diagonal.
    pub decay: Vec<f64>,
    top: Vec<bool>,
}

fn basis_occupations(modes: usize, n_max: usize, i: usize) -> [usize; 2] {
    match modes {
        1 => [i, 0],
        _ => [i / (n_max + 1), i % (n_max + 1)],
    }
}

fn basis_index(modes: usize, n_max: usize, occ: [usize; 2]) -> usize {
    match modes {
        1 => occ[0],
        _ => occ[0] * (n_max + 1) + occ[1],
    }
}

impl ChannelSet {
    pub fn dim(&self) -> usize {
        (self.n_max + 1).pow(self.topology.modes() as u32)
    }

    pub fn modes(&self) -> usize {
        self.topology.modes()
    }

    pub fn occupations(&self, i: usize) -> [usize; 2] {
        basis_occupations(self.modes(), self.n_max, i)
    }

    pub fn index(&self, occ: [usize; 2]) -> usize {
        basis_index(self.modes(), self.n_max, occ)
    }

    /// Relaxation rate of the occupancy, `gamma_eff`.
    pub fn relax_rate(&self) -> f64 {
        self.rates.down() - self.rates.up()
    }

    /// Builds the channels from raw rates. Zero-rate channels are omitted.
    pub fn from_rates(topology: Topology, rates: Rates, n_max: usize) -> Result<Self> {
        if n_max < 1 {
            return Err(Error::InvalidParameter("n_max must be at least 1".into()));
        }
        let vals = [rates.gamma, rates.n_th, rates.a_minus, rates.a_plus];
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("rates must be finite and >= 0: {rates:?}")));
        }
        if !(0.0..=1.0).contains(&rates.eta_esc) {
            return Err(Error::InvalidParameter(format!("eta_esc must lie in [0, 1], got {}", rates.eta_esc)));
        }
        let modes = topology.modes();
        let dim = (n_max + 1).pow(modes as u32);
        let ladder = |mode: usize, raise: bool| {
            let mut op = SparseOp::default();
            for i in 0..dim {
                let mut occ = basis_occupations(modes, n_max, i);
                let n = occ[mode];
                if raise && n < n_max {
                    occ[mode] = n + 1;
                    op.entries.push((basis_index(modes, n_max, occ), i, C::new(((n + 1) as f64).sqrt(), 0.0)));
                } else if !raise && n > 0 {
                    occ[mode] = n - 1;
                    op.entries.push((basis_index(modes, n_max, occ), i, C::new((n as f64).sqrt(), 0.0)));
                }
            }
            op
        };
        let real = |x: f64| C::new(x, 0.0);
        let mut channels = Vec::new();
        let mut push = |tag: ChannelTag, op: SparseOp, rate: f64, observed: bool| {
            if rate > 0.0 {
                channels.push(JumpChannel { tag, op: op.scaled(real(rate.sqrt())), observed });
            }
        };
        let eta = rates.eta_esc;
        for (color, rate, raise) in [(Color::Blue, rates.a_minus, false), (Color::Red, rates.a_plus, true)] {
            match topology {
                Topology::Single => {
                    let tag = ChannelTag::Click(DetectorTag::new(Detector::Single, color));
                    push(tag, ladder(0, raise), eta * rate, true);
                }
                Topology::Pair => {
                    let e = C::from_polar(1.0, -rates.phi);
                    let x1 = ladder(0, raise);
                    let x2 = ladder(1, raise);
                    let a = x1.clone().plus(&x2.scaled(-e)).scaled(C::new(0.0, 1.0));
                    let b = x1.plus(&x2.scaled(e));
                    push(ChannelTag::Click(DetectorTag::new(Detector::A, color)), a, 0.5 * eta * rate, true);
                    push(ChannelTag::Click(DetectorTag::new(Detector::B, color)), b, 0.5 * eta * rate, true);
                }
            }
            for mode in 0..modes {
                push(ChannelTag::Escape { mode, color }, ladder(mode, raise), (1.0 - eta) * rate, false);
            }
        }
        for mode in 0..modes {
            push(ChannelTag::Thermal { mode, up: false }, ladder(mode, false), rates.gamma * (rates.n_th + 1.0), false);
            push(ChannelTag::Thermal { mode, up: true }, ladder(mode, true), rates.gamma * rates.n_th, false);
        }

        // sum L^dag L must be diagonal for the exact no-jump propagator
        let mut sum = vec![ZERO; dim * dim];
        for ch in &channels {
            let l = ch.op.to_dense(dim);
            for j in 0..dim {
                for k in 0..dim {
                    let mut s = ZERO;
                    for r in 0..dim {
                        s += l[r * dim + j].conj() * l[r * dim + k];
                    }
                    sum[j * dim + k] += s;
                }
            }
        }
        let scale = sum.iter().map(|v| v.norm()).fold(1e-300, f64::max);
        for j in 0..dim {
            for k in 0..dim {
                if j != k && sum[j * dim + k].norm() > 1e-12 * scale {
                    return Err(Error::RateInconsistency(format!(
                        "sum of L^dag L has off-diagonal element ({j},{k}) = {}",
                        sum[j * dim + k]
                    )));
                }
            }
        }
        let decay = (0..dim).map(|k| sum[k * dim + k].re).collect();
        let energy = (0..dim)
            .map(|k| if modes == 2 { rates.delta * basis_occupations(modes, n_max, k)[1] as f64 } else { 0.0 })
            .collect();
        let top = (0..dim)
            .map(|k| basis_occupations(modes, n_max, k)[..modes].contains(&n_max))
            .collect();
        Ok(ChannelSet { topology, n_max, rates, channels, energy, decay, top })
    }

    pub fn channel(&self, tag: ChannelTag) -> Option<usize> {
        self.channels.iter().position(|c| c.tag == tag)
    }

    /// Red-photon channel used for conditioning (`A_r`, or the single red
    /// detector).
    pub fn conditioning_channel(&self) -> Option<usize> {
        let det = match self.topology {
            Topology::Single => Detector::Single,
            Topology::Pair => Detector::A,
        };
        self.channel(ChannelTag::Click(DetectorTag::new(det, Color::Red)))
    }

    pub fn top_population(&self, psi: &[C]) -> f64 {
        psi.iter().zip(&self.top).filter(|(_, t)| **t).map(|(v, _)| v.norm_sqr()).sum()
    }
}

/// Checks that the loss and gain rates relax to the derived occupancy.
fn check_detailed_balance(rates: &Rates, d: &DerivedParams) -> Result<()> {
    if !(rates.down() > rates.up()) {
        return Err(Error::RateInconsistency(format!(
            "gain {} is not below loss {}",
            rates.up(),
            rates.down()
        )));
    }
    let n = rates.steady_occupancy();
    if (n - d.n_m).abs() > 1e-9 * d.n_m.abs().max(1e-300) {
        return Err(Error::RateInconsistency(format!("rates relax to {n}, derived occupancy is {}", d.n_m)));
    }
    Ok(())
}

/// Two-oscillator channels for a symmetric pair.
pub fn build_channels(p: &TwoCavityParams, d: &DerivedParams, n_max: usize, eta_esc: f64) -> Result<ChannelSet> {
    if n_max < 3 {
        return Err(Error::InvalidParameter(format!("n_max must be at least 3, got {n_max}")));
    }
    let rates = Rates::from_derived(d, eta_esc, p.delta, p.phi);
    check_detailed_balance(&rates, d)?;
    ChannelSet::from_rates(Topology::Pair, rates, n_max)
}

/// Channels of a single cavity-oscillator pair with one detector per color.
pub fn build_single_channels(d: &DerivedParams, n_max: usize, eta_esc: f64) -> Result<ChannelSet> {
    if n_max < 3 {
        return Err(Error::InvalidParameter(format!("n_max must be at least 3, got {n_max}")));
    }
    let rates = Rates::from_derived(d, eta_esc, 0.0, 0.0);
    check_detailed_balance(&rates, d)?;
    ChannelSet::from_rates(Topology::Single, rates, n_max)
}

/// Pure state on the truncated Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub amplitudes: Vec<C>,
    pub time: f64,
}

impl JointState {
    pub fn fock(set: &ChannelSet, occ: [usize; 2]) -> Self {
        let mut amplitudes = vec![ZERO; set.dim()];
        amplitudes[set.index(occ)] = C::new(1.0, 0.0);
        JointState { amplitudes, time: 0.0 }
    }

    /// Fock state with each occupation drawn from a thermal distribution
    /// at `n`, restricted to the truncated space.
    pub fn thermal_sample<R: Rng + ?Sized>(set: &ChannelSet, n: f64, rng: &mut R) -> Self {
        let ratio = n / (n + 1.0);
        let mut occ = [0usize; 2];
        for o in occ.iter_mut().take(set.modes()) {
            *o = loop {
                let mut k = 0;
                while rng.random::<f64>() < ratio {
                    k += 1;
                }
                if k <= set.n_max {
                    break k;
                }
            };
        }
        Self::fock(set, occ)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn mean_occupation(&self, set: &ChannelSet, mode: usize) -> f64 {
        occupation(set, &self.amplitudes, mode)
    }
}

fn occupation(set: &ChannelSet, psi: &[C], mode: usize) -> f64 {
    psi.iter().enumerate().map(|(k, v)| v.norm_sqr() * set.occupations(k)[mode] as f64).sum()
}

/// `<c2^dag c1>` of a two-mode state.
pub fn cross_coherence(set: &ChannelSet, psi: &[C]) -> C {
    let n = set.n_max;
    let mut s = ZERO;
    for n1 in 1..=n {
        for n2 in 0..n {
            // c2^dag c1 |n1, n2> = sqrt(n1 (n2 + 1)) |n1 - 1, n2 + 1>
            let from = set.index([n1, n2]);
            let to = set.index([n1 - 1, n2 + 1]);
            s += psi[to].conj() * psi[from] * ((n1 * (n2 + 1)) as f64).sqrt();
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub time: f64,
    pub tag: DetectorTag,
}

/// Callbacks from the jump engine. Sample times must strictly increase.
pub trait Observer {
    /// Next time at which the state is wanted, if any.
    fn next_sample(&self) -> Option<f64> {
        None
    }
    /// Normalized state at a requested time, before any jump at that time.
    fn sample(&mut self, _t: f64, _psi: &[C]) {}
    /// Normalized state right after a jump.
    fn jump(&mut self, _t: f64, _channel: usize, _psi: &[C]) {}
}

pub struct NoObserver;
impl Observer for NoObserver {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub eps_trunc: f64,
    /// Spacing of the truncation probes; `None` uses `0.5 / gamma_eff`.
    pub probe_interval: Option<f64>,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { eps_trunc: DEFAULT_EPS_TRUNC, probe_interval: None }
    }
}

#[derive(Debug, Clone)]
pub struct EvolveOutcome {
    pub clicks: Vec<Click>,
    pub state: JointState,
    /// Time-averaged population of the top Fock level.
    pub top_population: f64,
    pub jumps: usize,
}

/// Time `s` at which `sum_k w_k exp(-g_k s)` falls to `r`, or infinity.
fn waiting_time(w: &[f64], g: &[f64], r: f64) -> f64 {
    let floor: f64 = w.iter().zip(g).filter(|(_, g)| **g <= 0.0).map(|(w, _)| w).sum();
    if floor >= r {
        return f64::INFINITY;
    }
    let ln_r = r.ln();
    let mut s = 0.0f64;
    // ln f(s) is convex and decreasing, so Newton from s = 0 approaches the
    // root from below without overshooting.
    for _ in 0..200 {
        let (mut f, mut df) = (0.0, 0.0);
        for (wk, gk) in w.iter().zip(g) {
            let e = wk * (-gk * s).exp();
            f += e;
            df += gk * e;
        }
        let step = (f.ln() - ln_r) * f / df;
        s += step;
        if step.abs() <= 1e-14 * s.max(1e-300) {
            break;
        }
    }
    s
}

fn propagate(set: &ChannelSet, psi0: &[C], dt: f64, out: &mut [C]) {
    let mut norm = 0.0;
    for k in 0..psi0.len() {
        let f = C::new(-0.5 * set.decay[k] * dt, -set.energy[k] * dt).exp();
        out[k] = psi0[k] * f;
        norm += out[k].norm_sqr();
    }
    let inv = 1.0 / norm.sqrt();
    out.iter_mut().for_each(|v| *v *= inv);
}

/// Runs one trajectory for `duration`, starting at local time zero.
pub fn evolve_with<R: Rng + ?Sized, O: Observer>(
    set: &ChannelSet,
    initial: &JointState,
    duration: f64,
    opts: &EvolveOptions,
    rng: &mut R,
    obs: &mut O,
) -> Result<EvolveOutcome> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::InvalidParameter(format!("duration must be positive, got {duration}")));
    }
    let dim = set.dim();
    if initial.amplitudes.len() != dim {
        return Err(Error::InvalidParameter("state dimension does not match the channel set".into()));
    }
    let probe = opts.probe_interval.unwrap_or(0.5 / set.relax_rate().max(1e-300));
    let mut psi0 = initial.amplitudes.clone();
    let n0 = initial.norm_sqr().sqrt();
    psi0.iter_mut().for_each(|v| *v /= n0);
    let mut t0 = 0.0;
    let mut buf = vec![ZERO; dim];
    let mut scratch = vec![ZERO; dim];
    let mut w = vec![0.0; dim];
    let mut clicks = Vec::new();
    let mut jumps = 0;
    let (mut top_sum, mut probes) = (0.0, 0usize);
    let mut next_probe = 0.0;
    let mut last_sample = f64::NEG_INFINITY;

    let mut draw_jump = |psi0: &[C], t0: f64, rng: &mut R| {
        for (wk, v) in w.iter_mut().zip(psi0) {
            *wk = v.norm_sqr();
        }
        let r = 1.0 - rng.random::<f64>();
        t0 + waiting_time(&w, &set.decay, r)
    };
    let mut tj = draw_jump(&psi0, t0, rng);

    loop {
        let horizon = tj.min(duration);
        loop {
            let s = obs.next_sample().filter(|&s| s <= horizon && s >= t0);
            let p = (next_probe <= horizon).then_some(next_probe);
            let t = match (s, p) {
                (None, None) => break,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (Some(a), Some(b)) => a.min(b),
            };
            propagate(set, &psi0, t - t0, &mut buf);
            if s == Some(t) {
                if t <= last_sample {
                    return Err(Error::InvalidParameter("observer sample times must increase".into()));
                }
                last_sample = t;
                obs.sample(t, &buf);
            }
            if p == Some(t) {
                top_sum += set.top_population(&buf);
                probes += 1;
                next_probe += probe;
            }
        }
        if tj > duration {
            break;
        }
        propagate(set, &psi0, tj - t0, &mut buf);
        let probs: Vec<f64> = set.channels.iter().map(|c| c.op.norm_sqr_applied(&buf, &mut scratch)).collect();
        let total: f64 = probs.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            if u < *p {
                pick = i;
                break;
            }
            u -= p;
        }
        let ch = &set.channels[pick];
        ch.op.apply(&buf, &mut psi0);
        let nrm = probs[pick].sqrt();
        psi0.iter_mut().for_each(|v| *v /= nrm);
        t0 = tj;
        jumps += 1;
        if let (true, ChannelTag::Click(tag)) = (ch.observed, ch.tag) {
            clicks.push(Click { time: tj, tag });
        }
        obs.jump(tj, pick, &psi0);
        tj = draw_jump(&psi0, t0, rng);
    }
    propagate(set, &psi0, duration - t0, &mut buf);
    let top_population = if probes > 0 { top_sum / probes as f64 } else { set.top_population(&buf) };
    if top_population > opts.eps_trunc {
        return Err(Error::TruncationExceeded { population: top_population, tolerance: opts.eps_trunc });
    }
    Ok(EvolveOutcome { clicks, state: JointState { amplitudes: buf, time: duration }, top_population, jumps })
}

/// Seeded trajectory returning its click record and final state.
pub fn evolve(set: &ChannelSet, initial: &JointState, duration: f64, seed: u64) -> Result<(ClickRecord, JointState)> {
    let mut rng = stream_rng(seed, 0);
    let out = evolve_with(set, initial, duration, &EvolveOptions::default(), &mut rng, &mut NoObserver)?;
    let record = ClickRecord {
        events: out.clicks,
        duration,
        seed,
        stream: 0,
        params: RecordParams::of(set, 0.0),
    };
    Ok((record, out.state))
}

/// Simulation settings stored alongside a click record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordParams {
    pub topology: Topology,
    pub n_max: usize,
    pub rates: Rates,
    pub burn_in: f64,
}

impl RecordParams {
    pub fn of(set: &ChannelSet, burn_in: f64) -> Self {
        RecordParams { topology: set.topology, n_max: set.n_max, rates: set.rates, burn_in }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub events: Vec<Click>,
    pub duration: f64,
    pub seed: u64,
    /// Index of the trajectory within its ensemble.
    pub stream: u64,
    pub params: RecordParams,
}

const BINARY_MAGIC: &[u8; 8] = b"OMCLICK1";

fn tag_code(t: DetectorTag) -> u8 {
    let d = match t.detector {
        Detector::A => 0,
        Detector::B => 1,
        Detector::Single => 2,
    };
    let c = match t.color {
        Color::Red => 0,
        Color::Blue => 1,
    };
    d * 2 + c
}

fn tag_from_code(code: u8) -> Result<DetectorTag> {
    let detector = match code / 2 {
        0 => Detector::A,
        1 => Detector::B,
        2 => Detector::Single,
        _ => return Err(Error::Format(format!("bad tag byte {code}"))),
    };
    let color = if code.is_multiple_of(2) { Color::Red } else { Color::Blue };
    Ok(DetectorTag { detector, color })
}

fn detector_name(d: Detector) -> &'static str {
    match d {
        Detector::A => "A",
        Detector::B => "B",
        Detector::Single => "S",
    }
}

fn color_name(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Blue => "blue",
    }
}

impl ClickRecord {
    pub fn count(&self, tag: DetectorTag) -> usize {
        self.events.iter().filter(|e| e.tag == tag).count()
    }

    pub fn times(&self, tag: DetectorTag) -> Vec<f64> {
        self.events.iter().filter(|e| e.tag == tag).map(|e| e.time).collect()
    }

    /// Checks strictly increasing times inside `[0, duration]`.
    pub fn validate(&self) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for e in &self.events {
            if !(e.time > prev) || e.time < 0.0 || e.time > self.duration {
                return Err(Error::Format(format!("event time {} out of order or range", e.time)));
            }
            prev = e.time;
        }
        Ok(())
    }

    /// Text form: `#` header lines, then `time<TAB>detector<TAB>color`.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# optomech click record")?;
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# stream={}", self.stream)?;
        writeln!(w, "# duration={}", self.duration)?;
        let params = serde_json::to_string(&self.params).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "# params={params}")?;
        for e in &self.events {
            writeln!(w, "{}\t{}\t{}", e.time, detector_name(e.tag.detector), color_name(e.tag.color))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let (mut seed, mut stream, mut duration, mut params) = (None, 0, None, None);
        let mut events = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
            if let Some(h) = line.strip_prefix('#') {
                let h = h.trim();
                if let Some((k, v)) = h.split_once('=') {
                    match k.trim() {
                        "seed" => seed = Some(v.trim().parse().map_err(|_| bad("seed"))?),
                        "stream" => stream = v.trim().parse().map_err(|_| bad("stream"))?,
                        "duration" => duration = Some(v.trim().parse().map_err(|_| bad("duration"))?),
                        "params" => {
                            params = Some(serde_json::from_str(v.trim()).map_err(|e| bad(&e.to_string()))?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let mut it = line.split('\t');
            let time: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("time"))?;
            let detector = match it.next() {
                Some("A") => Detector::A,
                Some("B") => Detector::B,
                Some("S") => Detector::Single,
                _ => return Err(bad("detector")),
            };
            let color = match it.next() {
                Some("red") => Color::Red,
                Some("blue") => Color::Blue,
                _ => return Err(bad("color")),
            };
            events.push(Click { time, tag: DetectorTag { detector, color } });
        }
        let record = ClickRecord {
            events,
            duration: duration.ok_or_else(|| Error::Format("missing duration".into()))?,
            seed: seed.ok_or_else(|| Error::Format("missing seed".into()))?,
            stream,
            params: params.ok_or_else(|| Error::Format("missing params".into()))?,
        };
        record.validate()?;
        Ok(record)
    }

    /// Binary form: magic, seed, stream, duration, JSON params, then
    /// little-endian `f64` time plus one tag byte per event.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.stream.to_le_bytes())?;
        w.write_all(&self.duration.to_le_bytes())?;
        let params = serde_json::to_vec(&self.params).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        w.write_all(&params)?;
        w.write_all(&(self.events.len() as u64).to_le_bytes())?;
        for e in &self.events {
            w.write_all(&e.time.to_le_bytes())?;
            w.write_all(&[tag_code(e.tag)])?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("not a binary click record".into()));
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let stream = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let duration = f64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let mut params = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut params)?;
        let params = serde_json::from_slice(&params).map_err(|e| Error::Format(e.to_string()))?;
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut events = Vec::with_capacity(n.min(1 << 24));
        let mut b1 = [0u8; 1];
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            r.read_exact(&mut b1)?;
            events.push(Click { time: f64::from_le_bytes(b8), tag: tag_from_code(b1[0])? });
        }
        let record = ClickRecord { events, duration, seed, stream, params };
        record.validate()?;
        Ok(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub trajectories: usize,
    /// Recorded time per trajectory, after burn-in.
    pub duration: f64,
    pub burn_in: f64,
    pub seed: u64,
    pub options: EvolveOptions,
}

impl EnsembleConfig {
    /// Burn-in of ten relaxation times.
    pub fn new(set: &ChannelSet, trajectories: usize, duration: f64, seed: u64) -> Self {
        EnsembleConfig {
            trajectories,
            duration,
            burn_in: 10.0 / set.relax_rate(),
            seed,
            options: EvolveOptions::default(),
        }
    }
}

/// One trajectory: thermal start, burn-in, then the recorded run.
fn run_one<O: Observer>(set: &ChannelSet, cfg: &EnsembleConfig, index: usize, obs: &mut O) -> Result<(ClickRecord, EvolveOutcome)> {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let mut state = JointState::thermal_sample(set, set.rates.steady_occupancy(), &mut rng);
    if cfg.burn_in > 0.0 {
        // the starting draw may sit on the top level, so burn-in is not checked
        let loose = EvolveOptions { eps_trunc: f64::INFINITY, ..cfg.options };
        state = evolve_with(set, &state, cfg.burn_in, &loose, &mut rng, &mut NoObserver)?.state;
    }
    let out = evolve_with(set, &state, cfg.duration, &cfg.options, &mut rng, obs)?;
    let record = ClickRecord {
        events: out.clicks.clone(),
        duration: cfg.duration,
        seed: cfg.seed,
        stream: index as u64,
        params: RecordParams::of(set, cfg.burn_in),
    };
    Ok((record, out))
}

/// Independent steady-state trajectories, run in parallel.
pub fn simulate_records(set: &ChannelSet, cfg: &EnsembleConfig) -> Result<Vec<ClickRecord>> {
    (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| run_one(set, cfg, i, &mut NoObserver).map(|(r, _)| r))
        .collect()
}

/// Time-averaged moments of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n1: f64,
    pub n2: f64,
    pub coherence: C,
    pub top_population: f64,
}

struct MomentObserver<'a> {
    set: &'a ChannelSet,
    interval: f64,
    next: f64,
    sum: [f64; 2],
    coh: C,
    count: usize,
}

impl Observer for MomentObserver<'_> {
    fn next_sample(&self) -> Option<f64> {
        Some(self.next)
    }

    fn sample(&mut self, _t: f64, psi: &[C]) {
        self.sum[0] += occupation(self.set, psi, 0);
        if self.set.modes() == 2 {
            self.sum[1] += occupation(self.set, psi, 1);
            self.coh += cross_coherence(self.set, psi);
        }
        self.count += 1;
        self.next += self.interval;
    }
}

/// Steady-state occupancies and cross-coherence, one entry per trajectory.
pub fn unconditioned_moments(set: &ChannelSet, cfg: &EnsembleConfig, interval: f64) -> Result<Vec<Moments>> {
    (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut obs = MomentObserver { set, interval, next: 0.0, sum: [0.0; 2], coh: ZERO, count: 0 };
            let (_, out) = run_one(set, cfg, i, &mut obs)?;
            let k = obs.count.max(1) as f64;
            Ok(Moments {
                n1: obs.sum[0] / k,
                n2: obs.sum[1] / k,
                coherence: obs.coh / k,
                top_population: out.top_population,
            })
        })
        .collect()
}

struct GridObserver<'a> {
    set: &'a ChannelSet,
    times: &'a [f64],
    k: usize,
    values: Vec<[f64; 4]>,
}

impl Observer for GridObserver<'_> {
    fn next_sample(&self) -> Option<f64> {
        self.times.get(self.k).copied()
    }

    fn sample(&mut self, _t: f64, psi: &[C]) {
        let (n2, coh) = if self.set.modes() == 2 {
            (occupation(self.set, psi, 1), cross_coherence(self.set, psi))
        } else {
            (0.0, ZERO)
        };
        self.values.push([occupation(self.set, psi, 0), n2, coh.re, coh.im]);
        self.k += 1;
    }
}

/// Ensemble means and standard errors on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransientSeries {
    pub times: Vec<f64>,
    pub occupation: Vec<[f64; 2]>,
    pub occupation_se: Vec<[f64; 2]>,
    /// `<c2^dag c1>`.
    pub coherence: Vec<C>,
    /// Standard errors of the real and imaginary parts.
    pub coherence_se: Vec<[f64; 2]>,
}

/// Ensemble-averaged occupancies and cross-coherence at `times` from a
/// fixed initial state.
pub fn transient_moments(
    set: &ChannelSet,
    initial: &JointState,
    times: &[f64],
    trajectories: usize,
    seed: u64,
) -> Result<TransientSeries> {
    if times.windows(2).any(|w| !(w[1] > w[0])) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidParameter("times must be non-negative and increasing".into()));
    }
    let end = times.iter().copied().fold(0.0, f64::max);
    let opts = EvolveOptions { eps_trunc: 1.0, probe_interval: None };
    let per: Vec<Vec<[f64; 4]>> = (0..trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut obs = GridObserver { set, times, k: 0, values: Vec::new() };
            evolve_with(set, initial, end * (1.0 + 1e-12), &opts, &mut rng, &mut obs)?;
            Ok(obs.values)
        })
        .collect::<Result<_>>()?;
    let n = trajectories as f64;
    let stat = |k: usize, m: usize| {
        let vals: Vec<f64> = per.iter().map(|v| v[k][m]).collect();
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (mu, (var / n).sqrt())
    };
    let mut out = TransientSeries {
        times: times.to_vec(),
        occupation: Vec::new(),
        occupation_se: Vec::new(),
        coherence: Vec::new(),
        coherence_se: Vec::new(),
    };
    for k in 0..times.len() {
        let s: Vec<(f64, f64)> = (0..4).map(|m| stat(k, m)).collect();
        out.occupation.push([s[0].0, s[1].0]);
        out.occupation_se.push([s[0].1, s[1].1]);
        out.coherence.push(C::new(s[2].0, s[3].0));
        out.coherence_se.push([s[2].1, s[3].1]);
    }
    Ok(out)
}

/// Occupancy part of [`transient_moments`]: `(mean, se)` per time.
/// Per-time `[n1, n2]` means and their standard errors.
pub type OccupationSeries = (Vec<[f64; 2]>, Vec<[f64; 2]>);

pub fn transient_occupations(
    set: &ChannelSet,
    initial: &JointState,
    times: &[f64],
    trajectories: usize,
    seed: u64,
) -> Result<OccupationSeries> {
    let s = transient_moments(set, initial, times, trajectories, seed)?;
    Ok((s.occupation, s.occupation_se))
}

/// Two-mode state restricted to the 0/1 phonon sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDensity {
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
    /// `<c2^dag c1>` within the sector, `<1,0| rho |0,1>`.
    pub q: C,
    /// Weight outside the sector.
    pub rest: f64,
    pub tau_since_red: f64,
}

impl ConditionalDensity {
    pub fn concurrence(&self) -> f64 {
        concurrence(self.p00, self.p11, self.q)
    }

    /// `p00 p11 / |q|^2`; below one certifies entanglement.
    pub fn separability_ratio(&self) -> f64 {
        self.p00 * self.p11 / self.q.norm_sqr()
    }

    fn to_array(self) -> [f64; 6] {
        [self.p00, self.p01, self.p10, self.p11, self.q.re, self.q.im]
    }

    fn from_array(a: [f64; 6], tau: f64) -> Self {
        let rest = 1.0 - a[0] - a[1] - a[2] - a[3];
        ConditionalDensity { p00: a[0], p01: a[1], p10: a[2], p11: a[3], q: C::new(a[4], a[5]), rest, tau_since_red: tau }
    }

    /// Sector elements of a pure state.
    pub fn from_state(set: &ChannelSet, psi: &[C], tau: f64) -> Self {
        let amp = |a, b| psi[set.index([a, b])];
        let (p00, p01, p10, p11) = (
            amp(0, 0).norm_sqr(),
            amp(0, 1).norm_sqr(),
            amp(1, 0).norm_sqr(),
            amp(1, 1).norm_sqr(),
        );
        let q = amp(1, 0) * amp(0, 1).conj();
        ConditionalDensity { p00, p01, p10, p11, q, rest: 1.0 - p00 - p01 - p10 - p11, tau_since_red: tau }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSeries {
    pub tau: Vec<f64>,
    pub density: Vec<ConditionalDensity>,
    /// Standard errors of `p00, p01, p10, p11, Re q, Im q`.
    pub density_se: Vec<[f64; 6]>,
    pub concurrence: Vec<f64>,
    pub concurrence_se: Vec<f64>,
    pub separability: Vec<f64>,
    pub separability_se: Vec<f64>,
    /// Conditioning clicks used.
    pub clicks: usize,
}

struct ConditionalObserver<'a> {
    set: &'a ChannelSet,
    tau: &'a [f64],
    trigger: usize,
    pending: VecDeque<(f64, usize)>,
    sums: Vec<[f64; 6]>,
    counts: Vec<usize>,
    clicks: usize,
}

impl ConditionalObserver<'_> {
    fn record(&mut self, k: usize, psi: &[C]) {
        let a = ConditionalDensity::from_state(self.set, psi, self.tau[k]).to_array();
        for (s, v) in self.sums[k].iter_mut().zip(a) {
            *s += v;
        }
        self.counts[k] += 1;
    }
}

impl Observer for ConditionalObserver<'_> {
    fn next_sample(&self) -> Option<f64> {
        self.pending.iter().map(|&(t, k)| t + self.tau[k]).min_by(f64::total_cmp)
    }

    fn sample(&mut self, t: f64, psi: &[C]) {
        let mut due = Vec::new();
        for (i, &(tc, k)) in self.pending.iter().enumerate() {
            if tc + self.tau[k] == t {
                due.push((i, k));
            }
        }
        for &(i, k) in &due {
            self.record(k, psi);
            self.pending[i].1 += 1;
        }
        let n = self.tau.len();
        self.pending.retain(|&(_, k)| k < n);
    }

    fn jump(&mut self, t: f64, channel: usize, psi: &[C]) {
        if channel != self.trigger {
            return;
        }
        self.clicks += 1;
        let mut k = 0;
        if self.tau[0] == 0.0 {
            self.record(0, psi);
            k = 1;
        }
        if k < self.tau.len() {
            self.pending.push_back((t, k));
        }
    }
}

/// Ensemble-averaged two-mode state versus delay after each `A_r` click in
/// steady state. Standard errors are delete-one-trajectory jackknife.
pub fn conditional_after_red(
    set: &ChannelSet,
    cfg: &EnsembleConfig,
    tau: &[f64],
    min_clicks: usize,
) -> Result<ConditionalSeries> {
    if set.topology != Topology::Pair {
        return Err(Error::InvalidParameter("conditional states need two oscillators".into()));
    }
    if tau.is_empty() || tau.windows(2).any(|w| !(w[1] > w[0])) || tau[0] < 0.0 {
        return Err(Error::InvalidParameter("tau grid must be non-negative and increasing".into()));
    }
    let trigger = set
        .conditioning_channel()
        .ok_or_else(|| Error::EmptyChannel("no A_r channel (red rate or efficiency is zero)".into()))?;
    let per: Vec<(Vec<[f64; 6]>, Vec<usize>, usize)> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut obs = ConditionalObserver {
                set,
                tau,
                trigger,
                pending: VecDeque::new(),
                sums: vec![[0.0; 6]; tau.len()],
                counts: vec![0; tau.len()],
                clicks: 0,
            };
            run_one(set, cfg, i, &mut obs)?;
            Ok((obs.sums, obs.counts, obs.clicks))
        })
        .collect::<Result<_>>()?;
    let clicks: usize = per.iter().map(|p| p.2).sum();
    if clicks < min_clicks {
        return Err(Error::InsufficientClicks { found: clicks, required: min_clicks });
    }
    let m = tau.len();
    // Averaged sector elements, with trajectory `skip` left out.
    let averaged = |skip: Option<usize>| -> Vec<[f64; 6]> {
        let mut sums = vec![[0.0; 6]; m];
        let mut counts = vec![0usize; m];
        for (j, (s, c, _)) in per.iter().enumerate() {
            if Some(j) == skip {
                continue;
            }
            for k in 0..m {
                for e in 0..6 {
                    sums[k][e] += s[k][e];
                }
                counts[k] += c[k];
            }
        }
        (0..m)
            .map(|k| {
                let n = counts[k] as f64;
                sums[k].map(|v| if n > 0.0 { v / n } else { f64::NAN })
            })
            .collect()
    };
    let derived = |skip: Option<usize>| -> Vec<f64> {
        averaged(skip)
            .iter()
            .zip(tau)
            .flat_map(|(a, &t)| {
                let d = ConditionalDensity::from_array(*a, t);
                [d.concurrence(), d.separability_ratio()]
            })
            .collect()
    };
    let groups = per.len();
    let (elems, elems_se) = jackknife_vec(groups, |skip| averaged(skip).concat());
    let (der, der_se) = jackknife_vec(groups, derived);
    let density = (0..m)
        .map(|k| ConditionalDensity::from_array(elems[6 * k..6 * k + 6].try_into().unwrap(), tau[k]))
        .collect();
    let density_se = (0..m).map(|k| elems_se[6 * k..6 * k + 6].try_into().unwrap()).collect();
    Ok(ConditionalSeries {
        tau: tau.to_vec(),
        density,
        density_se,
        concurrence: (0..m).map(|k| der[2 * k]).collect(),
        concurrence_se: (0..m).map(|k| der_se[2 * k]).collect(),
        separability: (0..m).map(|k| der[2 * k + 1]).collect(),
        separability_se: (0..m).map(|k| der_se[2 * k + 1]).collect(),
        clicks,
    })
}
