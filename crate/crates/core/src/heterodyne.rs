//! Heterodyne detection without physical sideband separation.
//!
//! Records are complex demodulated photocurrents in units where the shot
//! noise floor is one: `J dt = <L> dt + dZ` with `E|dZ|^2 = dt`. The red
//! sideband rotates as `e^{+i omega_M t}` and the blue as `e^{-i omega_M t}`;
//! with the transform `X(omega) = sum x(t) e^{-i omega t}` red sits at
//! `+omega_M` and blue at `-omega_M`.
//!
//! Two sources are provided: a classical Gaussian surrogate used to
//! calibrate the pipeline, and a quantum-state-diffusion unraveling of the
//! mechanical model. The analysis side filters both sidebands digitally and
//! rebuilds every g2 from the integrated sideband weights and the filtered
//! current correlations.

use std::io::{Read, Write};
use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::analytic::{Color, Detector, DetectorTag};
use crate::cooling::{DerivedParams, TwoCavityParams};
use crate::stats::{complex_normal, jackknife_vec, stream_rng};
use crate::trajectory::{ChannelSet, ChannelTag, JointState, Rates, SparseOp, Topology};
use crate::{Error, Result};

type C = Complex64;
const ZERO: C = C::new(0.0, 0.0);

/// How a record was produced, kept with the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterodyneParams {
    pub source: String,
    pub omega_m: f64,
    pub gamma_eff: f64,
    pub n_m: f64,
    pub f_r: f64,
    pub f_b: f64,
    pub delta: f64,
    pub phi: f64,
    pub n_max: Option<usize>,
}

impl HeterodyneParams {
    fn new(source: &str, d: &DerivedParams, delta: f64, phi: f64, n_max: Option<usize>) -> Self {
        HeterodyneParams {
            source: source.into(),
            omega_m: d.omega_m,
            gamma_eff: d.gamma_eff,
            n_m: d.n_m,
            f_r: d.f_r,
            f_b: d.f_b,
            delta,
            phi,
            n_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dt: f64,
    duration: f64,
    frame: f64,
    noise_floor: f64,
    seed: u64,
    detectors: Vec<Detector>,
    samples: usize,
    params: HeterodyneParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterodyneRecord {
    pub detectors: Vec<Detector>,
    /// One sample stream per detector, all of equal length.
    pub samples: Vec<Vec<C>>,
    pub dt: f64,
    /// Declared shot-noise spectral density.
    pub noise_floor: f64,
    /// Offset of the demodulation frame from the drive, rad/s.
    pub frame: f64,
    pub seed: u64,
    pub params: HeterodyneParams,
}

const RECORD_MAGIC: &[u8; 8] = b"OMHET001";

impl HeterodyneRecord {
    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    pub fn channel(&self, detector: Detector) -> Result<&[C]> {
        self.detectors
            .iter()
            .position(|&d| d == detector)
            .map(|i| &self.samples[i][..])
            .ok_or_else(|| Error::EmptyChannel(format!("no record for detector {detector:?}")))
    }

    /// Multiplies one detector's samples by `factor`.
    pub fn scale(&mut self, detector: Detector, factor: C) {
        if let Some(i) = self.detectors.iter().position(|&d| d == detector) {
            self.samples[i].iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Magic, JSON header length and header, then per detector the samples
    /// as interleaved little-endian `f64` real and imaginary parts.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            dt: self.dt,
            duration: self.duration(),
            frame: self.frame,
            noise_floor: self.noise_floor,
            seed: self.seed,
            detectors: self.detectors.clone(),
            samples: self.len(),
            params: self.params.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(RECORD_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(16 * self.len());
        for s in &self.samples {
            buf.clear();
            for v in s {
                buf.extend_from_slice(&v.re.to_le_bytes());
                buf.extend_from_slice(&v.im.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != RECORD_MAGIC {
            return Err(Error::Format("not a heterodyne record".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        let mut samples = Vec::with_capacity(h.detectors.len());
        let mut buf = vec![0u8; 16 * h.samples];
        for _ in &h.detectors {
            r.read_exact(&mut buf)?;
            let s = buf
                .chunks_exact(16)
                .map(|c| {
                    C::new(
                        f64::from_le_bytes(c[..8].try_into().unwrap()),
                        f64::from_le_bytes(c[8..].try_into().unwrap()),
                    )
                })
                .collect();
            samples.push(s);
        }
        Ok(HeterodyneRecord {
            detectors: h.detectors,
            samples,
            dt: h.dt,
            noise_floor: h.noise_floor,
            frame: h.frame,
            seed: h.seed,
            params: h.params,
        })
    }
}

/// Classical stand-in: one complex Ornstein-Uhlenbeck amplitude `u` of unit
/// variance and decay `gamma_eff / 2` drives both sidebands,
/// `sqrt(f_r) u* e^{+i omega_M t} + sqrt(f_b) u e^{-i omega_M t}`, on top of
/// unit white noise. Its same-color statistics match the quantum model; its
/// cross-color correlation is the classical maximum.
pub fn synthesize_surrogate(d: &DerivedParams, duration: f64, dt: f64, seed: u64) -> Result<HeterodyneRecord> {
    if !(dt > 0.0) || !(duration > dt) {
        return Err(Error::InvalidParameter(format!("need 0 < dt < duration, got dt {dt}, duration {duration}")));
    }
    if d.omega_m * dt > 1.0 {
        return Err(Error::Aliasing(format!("omega_m dt = {:.3} exceeds 1", d.omega_m * dt)));
    }
    let n = (duration / dt).round() as usize;
    let mut rng = stream_rng(seed, 0);
    let decay = (-0.5 * d.gamma_eff * dt).exp();
    let kick = (1.0 - decay * decay).sqrt();
    let noise = 1.0 / dt.sqrt();
    let (sr, sb) = (d.f_r.sqrt(), d.f_b.sqrt());
    let mut u = complex_normal(&mut rng);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let rot = C::from_polar(1.0, -d.omega_m * k as f64 * dt);
        out.push(sr * u.conj() * rot.conj() + sb * u * rot + noise * complex_normal(&mut rng));
        u = u * decay + kick * complex_normal(&mut rng);
    }
    Ok(HeterodyneRecord {
        detectors: vec![Detector::Single],
        samples: vec![out],
        dt,
        noise_floor: 1.0,
        frame: 0.0,
        seed,
        params: HeterodyneParams::new("surrogate", d, 0.0, 0.0, None),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QsdOptions {
    /// Integration step.
    pub dt: f64,
    /// Integration steps averaged into one record sample.
    pub decimate: usize,
    pub burn_in: f64,
    pub eps_trunc: f64,
    /// Spacing of the occupancy trace and truncation probes.
    pub trace_interval: f64,
}

impl QsdOptions {
    pub fn desk() -> Self {
        QsdOptions { dt: 1e-3, decimate: 10, burn_in: 10.0, eps_trunc: crate::trajectory::DEFAULT_EPS_TRUNC, trace_interval: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub time: f64,
    pub n1: f64,
    pub n2: f64,
}

/// Measured channel with its lowering (blue) and raising (red) parts.
struct Measured {
    blue: SparseOp,
    red: SparseOp,
    blue_dag: SparseOp,
    red_dag: SparseOp,
}

fn dagger(op: &SparseOp) -> SparseOp {
    SparseOp { entries: op.entries.iter().map(|&(r, c, v)| (c, r, v.conj())).collect() }
}

/// Splits the click channels of a zero-loss set into the heterodyne
/// measurement operators, one per detector.
fn measured_channels(set: &ChannelSet) -> (Vec<Detector>, Vec<Measured>) {
    let dets: Vec<Detector> = match set.topology {
        Topology::Single => vec![Detector::Single],
        Topology::Pair => vec![Detector::A, Detector::B],
    };
    let dim = set.dim();
    let get = |det, color| {
        set.channel(ChannelTag::Click(DetectorTag::new(det, color)))
            .map(|i| set.channels[i].op.clone())
            .unwrap_or_else(|| SparseOp { entries: vec![(0, 0, ZERO)] })
    };
    let ms = dets
        .iter()
        .map(|&det| {
            let blue = get(det, Color::Blue);
            let red = get(det, Color::Red);
            debug_assert!(blue.to_dense(dim).len() == dim * dim);
            Measured { blue_dag: dagger(&blue), red_dag: dagger(&red), blue, red }
        })
        .collect();
    (dets, ms)
}

/// Quantum-state-diffusion record of the detector currents. Sideband
/// channels are measured by heterodyne; escape and bath channels are
/// unraveled as unrecorded jumps.
fn unravel(
    set: &ChannelSet,
    d: &DerivedParams,
    omega_m: f64,
    duration: f64,
    opts: &QsdOptions,
    seed: u64,
) -> Result<(HeterodyneRecord, Vec<TracePoint>)> {
    let rate_max = set.decay.iter().copied().fold(0.0, f64::max);
    if opts.dt * omega_m > 0.05 || opts.dt * rate_max > 0.05 {
        return Err(Error::InvalidParameter(format!(
            "dt = {} too coarse: omega_m dt = {:.3}, rate dt = {:.3} (limit 0.05)",
            opts.dt,
            opts.dt * omega_m,
            opts.dt * rate_max
        )));
    }
    if opts.decimate == 0 {
        return Err(Error::InvalidParameter("decimate must be at least 1".into()));
    }
    let (detectors, measured) = measured_channels(set);
    let unobserved: Vec<&SparseOp> = set.channels.iter().filter(|c| !c.observed).map(|c| &c.op).collect();
    let dim = set.dim();
    // diagonal of the summed unobserved L^dag L
    let mut u_diag = vec![0.0; dim];
    for op in &unobserved {
        for &(_, c, v) in &op.entries {
            u_diag[c] += v.norm_sqr();
        }
    }
    let mut rng = stream_rng(seed, 0);
    let mut psi = JointState::thermal_sample(set, set.rates.steady_occupancy(), &mut rng).amplitudes;
    let dt = opts.dt;
    let sdt = dt.sqrt();
    let burn = (opts.burn_in / dt).round() as usize;
    let n_rec = ((duration / dt) as usize / opts.decimate).max(1);
    let total = burn + n_rec * opts.decimate;
    let dt_rec = dt * opts.decimate as f64;
    let m = measured.len();
    let mut samples = vec![Vec::with_capacity(n_rec); m];
    let mut acc = vec![ZERO; m];
    let mut trace = Vec::new();
    let trace_every = ((opts.trace_interval / dt).round() as usize).max(1);
    let (mut top_sum, mut probes) = (0.0, 0usize);

    let mut lpsi = vec![vec![ZERO; dim]; m];
    let mut tmp = vec![ZERO; dim];
    let mut tmp2 = vec![ZERO; dim];
    let mut dpsi = vec![ZERO; dim];
    for step in 0..total {
        let t = (step as f64 - burn as f64) * dt;
        let rot = C::from_polar(1.0, -omega_m * t);
        let rot_c = rot.conj();
        // unobserved jump this step?
        let u_mean: f64 = psi.iter().zip(&u_diag).map(|(v, u)| v.norm_sqr() * u).sum();
        if u_mean > 0.0 && rng.random::<f64>() < u_mean * dt {
            let mut x = rng.random::<f64>() * u_mean;
            let mut pick = unobserved.len() - 1;
            for (i, op) in unobserved.iter().enumerate() {
                let p = op.norm_sqr_applied(&psi, &mut tmp);
                if x < p {
                    pick = i;
                    break;
                }
                x -= p;
            }
            unobserved[pick].apply(&psi, &mut tmp);
            let nrm = tmp.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            for (p, v) in psi.iter_mut().zip(&tmp) {
                *p = v / nrm;
            }
        }
        for k in 0..dim {
            dpsi[k] = psi[k] * C::new(-0.5 * (u_diag[k] - u_mean) * dt, -set.energy[k] * dt);
        }
        for (c, ms) in measured.iter().enumerate() {
            ms.blue.apply(&psi, &mut tmp);
            ms.red.apply(&psi, &mut tmp2);
            let l = &mut lpsi[c];
            for k in 0..dim {
                l[k] = rot * tmp[k] + rot_c * tmp2[k];
            }
            let mean: C = psi.iter().zip(l.iter()).map(|(p, v)| p.conj() * v).sum();
            let dz = sdt * complex_normal(&mut rng);
            // L^dag L psi
            ms.blue_dag.apply(l, &mut tmp);
            ms.red_dag.apply(l, &mut tmp2);
            for k in 0..dim {
                let ldl = rot_c * tmp[k] + rot * tmp2[k];
                dpsi[k] += (-0.5 * ldl + mean.conj() * l[k] - 0.5 * mean.norm_sqr() * psi[k]) * dt
                    + (l[k] - mean * psi[k]) * dz.conj();
            }
            if step >= burn {
                acc[c] += mean * dt + dz;
            }
        }
        let mut nrm = 0.0;
        for k in 0..dim {
            psi[k] += dpsi[k];
            nrm += psi[k].norm_sqr();
        }
        let inv = 1.0 / nrm.sqrt();
        psi.iter_mut().for_each(|v| *v *= inv);
        if step >= burn {
            let local = step - burn + 1;
            if local.is_multiple_of(opts.decimate) {
                for c in 0..m {
                    samples[c].push(acc[c] / dt_rec);
                    acc[c] = ZERO;
                }
            }
            if local.is_multiple_of(trace_every) {
                let occ = |mode: usize| -> f64 {
                    psi.iter().enumerate().map(|(k, v)| v.norm_sqr() * set.occupations(k)[mode] as f64).sum()
                };
                let n2 = if set.modes() == 2 { occ(1) } else { 0.0 };
                trace.push(TracePoint { time: local as f64 * dt, n1: occ(0), n2 });
                top_sum += set.top_population(&psi);
                probes += 1;
            }
        }
    }
    let top = if probes > 0 { top_sum / probes as f64 } else { set.top_population(&psi) };
    if top > opts.eps_trunc {
        return Err(Error::TruncationExceeded { population: top, tolerance: opts.eps_trunc });
    }
    let (delta, phi) = (set.rates.delta, set.rates.phi);
    let record = HeterodyneRecord {
        detectors,
        samples,
        dt: dt_rec,
        noise_floor: 1.0,
        frame: 0.0,
        seed,
        params: HeterodyneParams::new("qsd", d, delta, phi, Some(set.n_max)),
    };
    Ok((record, trace))
}

/// QSD record of a single cavity with one heterodyne detector.
pub fn unravel_qsd_single(
    d: &DerivedParams,
    n_max: usize,
    duration: f64,
    opts: &QsdOptions,
    seed: u64,
) -> Result<(HeterodyneRecord, Vec<TracePoint>)> {
    let set = crate::trajectory::build_single_channels(d, n_max, d.eta_esc)?;
    unravel(&set, d, d.omega_m, duration, opts, seed)
}

/// QSD records for detectors A and B behind the beam splitter.
pub fn unravel_qsd(
    p: &TwoCavityParams,
    d: &DerivedParams,
    n_max: usize,
    duration: f64,
    opts: &QsdOptions,
    seed: u64,
) -> Result<(HeterodyneRecord, Vec<TracePoint>)> {
    let set = crate::trajectory::build_channels(p, d, n_max, d.eta_esc)?;
    unravel(&set, d, d.omega_m, duration, opts, seed)
}

/// QSD with raw rates; `omega_m` sets the sideband rotation.
pub fn unravel_qsd_rates(
    topology: Topology,
    rates: Rates,
    omega_m: f64,
    n_max: usize,
    duration: f64,
    opts: &QsdOptions,
    seed: u64,
) -> Result<(HeterodyneRecord, Vec<TracePoint>)> {
    let set = ChannelSet::from_rates(topology, rates, n_max)?;
    let n = rates.steady_occupancy();
    let gamma_eff = rates.down() - rates.up();
    let d = DerivedParams {
        omega_m,
        omega_eff: omega_m,
        gamma: rates.gamma,
        n_th: rates.n_th,
        kappa: f64::NAN,
        kappa_r: f64::NAN,
        alpha_mag: f64::NAN,
        detuning: f64::NAN,
        eta_esc: rates.eta_esc,
        a_minus: rates.a_minus,
        a_plus: rates.a_plus,
        gamma_opt: rates.a_minus - rates.a_plus,
        gamma_eff,
        n_opt: f64::NAN,
        n_m: n,
        f_r: rates.eta_esc * rates.a_plus * (n + 1.0),
        f_b: rates.eta_esc * rates.a_minus * n,
        f_c: None,
        bare_coupling: None,
        warnings: Vec::new(),
    };
    unravel(&set, &d, omega_m, duration, opts, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterShape {
    /// Amplitude response `exp(-x^2 / 2 lambda^2)`.
    #[default]
    Gaussian,
    /// `(1 + cos(pi x / B)) / 2` for `|x| < B`, with `B` chosen for the same
    /// noise bandwidth as the Gaussian.
    RaisedCosine,
}

impl FilterShape {
    /// Amplitude response at offset `x` from the passband center.
    pub fn response(self, x: f64, lambda: f64) -> f64 {
        match self {
            FilterShape::Gaussian => (-x * x / (2.0 * lambda * lambda)).exp(),
            FilterShape::RaisedCosine => {
                let b = 4.0 * lambda * std::f64::consts::PI.sqrt() / 3.0;
                if x.abs() < b {
                    0.5 * (1.0 + (std::f64::consts::PI * x / b).cos())
                } else {
                    0.0
                }
            }
        }
    }

    /// Highest frequency offset with appreciable response.
    fn support(self, lambda: f64) -> f64 {
        match self {
            FilterShape::Gaussian => 6.0 * lambda,
            FilterShape::RaisedCosine => 4.0 * lambda * std::f64::consts::PI.sqrt() / 3.0,
        }
    }

    /// Samples discarded at each end after circular filtering.
    fn trim(self, lambda: f64, dt: f64) -> usize {
        let t = match self {
            FilterShape::Gaussian => 8.0 / lambda,
            FilterShape::RaisedCosine => 60.0 / lambda,
        };
        (t / dt).ceil() as usize
    }
}

/// `lambda / (2 sqrt(pi))`: noise bandwidth of the Gaussian filter, per `d omega / 2 pi`.
pub fn noise_bandwidth(lambda: f64) -> f64 {
    lambda / (2.0 * std::f64::consts::PI.sqrt())
}

/// Carrier response relative to the passband peak.
pub fn carrier_response(omega_m: f64, lambda: f64, shape: FilterShape) -> f64 {
    shape.response(omega_m, lambda)
}

/// Angular frequency of FFT bin `k` for `n` samples at spacing `dt`.
fn bin_omega(k: usize, n: usize, dt: f64) -> f64 {
    let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    2.0 * std::f64::consts::PI * kk / (n as f64 * dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidebandCurrents {
    pub red: Vec<C>,
    pub blue: Vec<C>,
    pub dt: f64,
    pub lambda: f64,
    pub shape: FilterShape,
    /// Samples dropped from each end of the input.
    pub trim: usize,
    pub warnings: Vec<String>,
}

fn check_band(omega_m: f64, lambda: f64, shape: FilterShape, dt: f64) -> Result<Vec<String>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("filter width must be positive, got {lambda}")));
    }
    let nyquist = std::f64::consts::PI / dt;
    if omega_m + shape.support(lambda) > nyquist {
        return Err(Error::Aliasing(format!(
            "sideband at {omega_m} plus filter support {} exceeds Nyquist {nyquist:.3}",
            shape.support(lambda)
        )));
    }
    let mut warnings = Vec::new();
    let leak = carrier_response(omega_m, lambda, shape);
    if leak > 1e-8 {
        warnings.push(format!("carrier response {leak:.2e} exceeds 1e-8 of peak"));
    }
    Ok(warnings)
}

/// Reusable FFT plans for one transform length.
struct Plans {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Plans { n, fwd: p.plan_fft_forward(n), inv: p.plan_fft_inverse(n) }
    }
}

/// Applies the red and blue passbands to the spectrum `x` (length `n`)
/// and returns both currents, untrimmed.
fn bandpass(spectrum: &[C], plans: &Plans, dt: f64, omega_m: f64, lambda: f64, shape: FilterShape) -> (Vec<C>, Vec<C>) {
    let n = plans.n;
    let scale = 1.0 / n as f64;
    let run = |center: f64| {
        let mut buf: Vec<C> = spectrum
            .iter()
            .enumerate()
            .map(|(k, v)| v * (shape.response(bin_omega(k, n, dt) - center, lambda) * scale))
            .collect();
        plans.inv.process(&mut buf);
        buf
    };
    (run(omega_m), run(-omega_m))
}

/// Digital sideband separation of one detector stream.
pub fn filter_sidebands(rec: &HeterodyneRecord, detector: Detector, lambda: f64, shape: FilterShape) -> Result<SidebandCurrents> {
    let x = rec.channel(detector)?;
    let omega_m = rec.params.omega_m - rec.frame;
    let warnings = check_band(omega_m.abs(), lambda, shape, rec.dt)?;
    let trim = shape.trim(lambda, rec.dt);
    if x.len() <= 2 * trim + 1 {
        return Err(Error::InvalidParameter(format!("record of {} samples is shorter than the filter", x.len())));
    }
    let plans = Plans::new(x.len());
    let mut spectrum = x.to_vec();
    plans.fwd.process(&mut spectrum);
    let (red, blue) = bandpass(&spectrum, &plans, rec.dt, omega_m, lambda, shape);
    let cut = |v: Vec<C>| v[trim..v.len() - trim].to_vec();
    Ok(SidebandCurrents { red: cut(red), blue: cut(blue), dt: rec.dt, lambda, shape, trim, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub lambda: f64,
    pub shape: FilterShape,
    /// Half-width of the sideband integration window; `lambda / 2` if unset.
    pub window_half: Option<f64>,
    /// Minimum distance of floor bins from the sidebands and the carrier,
    /// in units of `lambda`.
    pub floor_exclusion: f64,
    /// Samples per analysis segment.
    pub segment: usize,
    pub tau: Vec<f64>,
}

impl ReconstructOptions {
    pub fn new(lambda: f64, tau: Vec<f64>) -> Self {
        ReconstructOptions { lambda, shape: FilterShape::Gaussian, window_half: None, floor_exclusion: 5.0, segment: 1 << 18, tau }
    }

    pub fn window(&self) -> f64 {
        self.window_half.unwrap_or(0.5 * self.lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructedG2 {
    pub from: DetectorTag,
    pub to: DetectorTag,
    /// Lags actually used (nearest sample).
    pub tau: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `|Lambda|` and `|Gamma|` averaged over segments.
    pub lambda_abs: Vec<f64>,
    pub gamma_abs: Vec<f64>,
    pub w_from: f64,
    pub w_to: f64,
}

impl ReconstructedG2 {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tau,value,std_error,lambda_abs,gamma_abs")?;
        for i in 0..self.tau.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.tau[i], self.values[i], self.std_errors[i], self.lambda_abs[i], self.gamma_abs[i]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconstruction {
    /// Fitted white floor per detector, averaged over segments.
    pub floors: BTreeMap<String, f64>,
    /// Floor-subtracted sideband weights per detector and color.
    pub weights: BTreeMap<String, f64>,
    /// Time-domain current power minus floor times noise bandwidth, per tag.
    pub parseval: BTreeMap<String, f64>,
    pub segments: usize,
    pub correlations: Vec<ReconstructedG2>,
    pub warnings: Vec<String>,
}

impl Reconstruction {
    pub fn get(&self, from: DetectorTag, to: DetectorTag) -> Option<&ReconstructedG2> {
        self.correlations.iter().find(|c| c.from == from && c.to == to)
    }
}

/// Per-segment sufficient statistics.
struct SegmentStats {
    floor: Vec<f64>,
    /// Indexed by detector * 2 + color (red 0, blue 1).
    weight: Vec<f64>,
    power: Vec<f64>,
    lam: Vec<Vec<C>>,
    gam: Vec<Vec<C>>,
}

fn color_index(c: Color) -> usize {
    match c {
        Color::Red => 0,
        Color::Blue => 1,
    }
}

/// Median periodogram over bins at least `exclusion` from the carrier and
/// both sidebands, divided by `ln 2` (the median of an exponential law).
fn fit_floor(periodogram: &[f64], dt: f64, omega_m: f64, exclusion: f64) -> Result<f64> {
    let n = periodogram.len();
    let mut far: Vec<(f64, f64)> = (0..n)
        .map(|k| (bin_omega(k, n, dt), periodogram[k]))
        .filter(|(w, _)| w.abs() >= exclusion && (w - omega_m).abs() >= exclusion && (w + omega_m).abs() >= exclusion)
        .collect();
    if far.len() < 256 {
        return Err(Error::FloorFitFailed(format!(
            "only {} bins lie {exclusion:.3} away from the carrier and sidebands",
            far.len()
        )));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.total_cmp(b));
        v[v.len() / 2]
    };
    // flatness: inner and outer halves of the plateau must agree
    far.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()));
    let half = far.len() / 2;
    let mut inner: Vec<f64> = far[..half].iter().map(|p| p.1).collect();
    let mut outer: Vec<f64> = far[half..].iter().map(|p| p.1).collect();
    let (mi, mo) = (median(&mut inner), median(&mut outer));
    let spread = 4.0 / (half as f64).sqrt();
    if (mi - mo).abs() > spread.max(0.05) * 0.5 * (mi + mo) {
        return Err(Error::FloorFitFailed(format!("no flat plateau: inner median {mi:.4}, outer {mo:.4}")));
    }
    let mut all: Vec<f64> = far.into_iter().map(|p| p.1).collect();
    Ok(median(&mut all) / std::f64::consts::LN_2)
}

/// Rebuilds g2 between sideband pairs from unseparated heterodyne records:
/// `g2 = 1 + (|Lambda|^2 + |Gamma|^2) / (W_from W_to)`, where `W` are the
/// floor-subtracted sideband weights, `Lambda = E[i_from^* i_to(tau)]` and
/// `Gamma = E[i_from^* i_to^*(tau)]`. Valid for lags well beyond `1/lambda`.
/// Errors come from a jackknife over segments.
pub fn reconstruct_g2(rec: &HeterodyneRecord, pairs: &[(DetectorTag, DetectorTag)], opts: &ReconstructOptions) -> Result<Reconstruction> {
    let omega_m = rec.params.omega_m - rec.frame;
    let mut warnings = check_band(omega_m.abs(), opts.lambda, opts.shape, rec.dt)?;
    let dt = rec.dt;
    let seg = opts.segment.min(rec.len());
    let n_seg = rec.len() / seg.max(1);
    let trim = opts.shape.trim(opts.lambda, dt);
    let lags: Vec<usize> = opts.tau.iter().map(|t| (t / dt).round().max(0.0) as usize).collect();
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    if n_seg < 2 || seg <= 2 * trim + max_lag + 16 {
        return Err(Error::InvalidParameter(format!(
            "need at least two segments longer than the filter and lag range; have {n_seg} of {seg} samples"
        )));
    }
    let det_index = |d: Detector| rec.detectors.iter().position(|&x| x == d);
    for (a, b) in pairs {
        for t in [a, b] {
            if det_index(t.detector).is_none() {
                return Err(Error::EmptyChannel(format!("no record for {t}")));
            }
        }
    }
    let n_det = rec.detectors.len();
    let window = opts.window();
    let exclusion = opts.floor_exclusion * opts.lambda;
    let nb = match opts.shape {
        FilterShape::Gaussian | FilterShape::RaisedCosine => noise_bandwidth(opts.lambda),
    };
    let plans = Plans::new(seg);
    let kept = seg - 2 * trim;
    let padded = (kept + max_lag).next_power_of_two();
    let pad_plans = Plans::new(padded);

    // autocorrelation of unit white noise after each passband, per lag
    let noise_acf: Vec<Vec<C>> = [omega_m, -omega_m]
        .iter()
        .map(|&center| {
            lags.iter()
                .map(|&m| {
                    (0..seg)
                        .map(|k| {
                            let w = bin_omega(k, seg, dt);
                            let f = opts.shape.response(w - center, opts.lambda);
                            if f == 0.0 {
                                ZERO
                            } else {
                                C::from_polar(f * f, w * m as f64 * dt)
                            }
                        })
                        .sum::<C>()
                        / (seg as f64 * dt)
                })
                .collect()
        })
        .collect();

    let mut stats = Vec::with_capacity(n_seg);
    for s in 0..n_seg {
        let mut floor = vec![0.0; n_det];
        let mut weight = vec![0.0; 2 * n_det];
        let mut power = vec![0.0; 2 * n_det];
        let mut spectra: Vec<[Vec<C>; 2]> = Vec::with_capacity(n_det);
        let mut conj_spectra: Vec<[Vec<C>; 2]> = Vec::with_capacity(n_det);
        for (di, x) in rec.samples.iter().enumerate() {
            let mut spectrum = x[s * seg..(s + 1) * seg].to_vec();
            plans.fwd.process(&mut spectrum);
            let per: Vec<f64> = spectrum.iter().map(|v| v.norm_sqr() * dt / seg as f64).collect();
            floor[di] = fit_floor(&per, dt, omega_m, exclusion)?;
            for (ci, center) in [(0, omega_m), (1, -omega_m)] {
                let sum: f64 = (0..seg)
                    .filter(|&k| (bin_omega(k, seg, dt) - center).abs() <= window)
                    .map(|k| per[k] - floor[di])
                    .sum();
                weight[2 * di + ci] = sum / (seg as f64 * dt);
            }
            let (red, blue) = bandpass(&spectrum, &plans, dt, omega_m, opts.lambda, opts.shape);
            let fwd = |v: &[C], conj: bool| {
                let mut buf = vec![ZERO; padded];
                for (b, x) in buf.iter_mut().zip(&v[trim..seg - trim]) {
                    *b = if conj { x.conj() } else { *x };
                }
                pad_plans.fwd.process(&mut buf);
                buf
            };
            for (ci, cur) in [(0, &red), (1, &blue)] {
                let p: f64 = cur[trim..seg - trim].iter().map(|v| v.norm_sqr()).sum::<f64>() / kept as f64;
                power[2 * di + ci] = p - floor[di] * nb;
            }
            spectra.push([fwd(&red, false), fwd(&blue, false)]);
            conj_spectra.push([fwd(&red, true), fwd(&blue, true)]);
        }
        let corr = |a: &[C], b: &[C]| -> Vec<C> {
            // sum_n a[n]^* b[n+m] from spectra of a and b
            let mut buf: Vec<C> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
            pad_plans.inv.process(&mut buf);
            lags.iter().map(|&m| buf[m] / (padded as f64 * (kept - m) as f64)).collect()
        };
        let mut lam = Vec::with_capacity(pairs.len());
        let mut gam = Vec::with_capacity(pairs.len());
        for (from, to) in pairs {
            let (fi, ti) = (det_index(from.detector).unwrap(), det_index(to.detector).unwrap());
            let a = &spectra[fi][color_index(from.color)];
            let mut l = corr(a, &spectra[ti][color_index(to.color)]);
            if from == to {
                // filtered shot noise survives at short lags
                let ci = color_index(from.color);
                for (v, n) in l.iter_mut().zip(&noise_acf[ci]) {
                    *v -= floor[fi] * n;
                }
            }
            lam.push(l);
            gam.push(corr(a, &conj_spectra[ti][color_index(to.color)]));
        }
        stats.push(SegmentStats { floor, weight, power, lam, gam });
    }

    let mean_over = |sel: &[usize], f: &dyn Fn(&SegmentStats) -> f64| -> f64 {
        sel.iter().map(|&i| f(&stats[i])).sum::<f64>() / sel.len() as f64
    };
    let all: Vec<usize> = (0..n_seg).collect();
    let tag_key = |di: usize, ci: usize| {
        DetectorTag::new(rec.detectors[di], if ci == 0 { Color::Red } else { Color::Blue }).to_string()
    };
    let mut floors = BTreeMap::new();
    let mut weights = BTreeMap::new();
    let mut parseval = BTreeMap::new();
    for di in 0..n_det {
        floors.insert(format!("{:?}", rec.detectors[di]), mean_over(&all, &|s| s.floor[di]));
        for ci in 0..2 {
            weights.insert(tag_key(di, ci), mean_over(&all, &|s| s.weight[2 * di + ci]));
            parseval.insert(tag_key(di, ci), mean_over(&all, &|s| s.power[2 * di + ci]));
        }
    }

    let mut correlations = Vec::with_capacity(pairs.len());
    for (pi, (from, to)) in pairs.iter().enumerate() {
        let (fi, ti) = (det_index(from.detector).unwrap(), det_index(to.detector).unwrap());
        let (wf, wt) = (2 * fi + color_index(from.color), 2 * ti + color_index(to.color));
        let estimate = |sel: &[usize]| -> Vec<f64> {
            let w1 = mean_over(sel, &|s| s.weight[wf]);
            let w2 = mean_over(sel, &|s| s.weight[wt]);
            (0..lags.len())
                .map(|j| {
                    let l: C = sel.iter().map(|&i| stats[i].lam[pi][j]).sum::<C>() / sel.len() as f64;
                    let g: C = sel.iter().map(|&i| stats[i].gam[pi][j]).sum::<C>() / sel.len() as f64;
                    1.0 + (l.norm_sqr() + g.norm_sqr()) / (w1 * w2)
                })
                .collect()
        };
        let (values, std_errors) = jackknife_vec(n_seg, |drop| match drop {
            None => estimate(&all),
            Some(k) => estimate(&all.iter().copied().filter(|&i| i != k).collect::<Vec<_>>()),
        });
        let avg_abs = |f: &dyn Fn(&SegmentStats, usize) -> C| -> Vec<f64> {
            (0..lags.len()).map(|j| (all.iter().map(|&i| f(&stats[i], j)).sum::<C>() / n_seg as f64).norm()).collect()
        };
        let w_from = mean_over(&all, &|s| s.weight[wf]);
        let w_to = mean_over(&all, &|s| s.weight[wt]);
        if w_from <= 0.0 || w_to <= 0.0 {
            warnings.push(format!("non-positive sideband weight for {from} or {to}"));
        }
        correlations.push(ReconstructedG2 {
            from: *from,
            to: *to,
            tau: lags.iter().map(|&m| m as f64 * dt).collect(),
            values,
            std_errors,
            lambda_abs: avg_abs(&|s, j| s.lam[pi][j]),
            gamma_abs: avg_abs(&|s, j| s.gam[pi][j]),
            w_from,
            w_to,
        });
    }
    Ok(Reconstruction { floors, weights, parseval, segments: n_seg, correlations, warnings })
}
