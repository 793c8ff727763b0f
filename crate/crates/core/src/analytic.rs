//! Closed-form spectra, correlation functions, witness and filter chain.
//!
//! These are the reference values the stochastic estimators are checked
//! against. Time-domain results hold for delays long against the cavity and
//! filter response times; outside that window values are still returned but
//! flagged as extrapolated.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cooling::{DerivedParams, TwoCavityParams};
use crate::quadrature;
use crate::{Error, Result};

/// `cos^2(delta tau + 2 phi)` below this raises [`Error::BlindSpot`].
pub const BLIND_SPOT_TOLERANCE: f64 = 1e-6;
/// `|g2_aa - g2_ba|` below this raises [`Error::Degenerate`].
pub const DEGENERATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Detector {
    A,
    B,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectorTag {
    pub detector: Detector,
    pub color: Color,
}

impl DetectorTag {
    pub const fn new(detector: Detector, color: Color) -> Self {
        DetectorTag { detector, color }
    }
}

impl std::fmt::Display for DetectorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = match self.detector {
            Detector::A => "A",
            Detector::B => "B",
            Detector::Single => "S",
        };
        let c = match self.color {
            Color::Red => "r",
            Color::Blue => "b",
        };
        write!(f, "{d}_{c}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    BlueGivenRed,
    RedGivenBlue,
}

/// Delays below `min_tau` are outside the regime the closed forms describe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityWindow {
    pub min_tau: f64,
}

impl ValidityWindow {
    /// `tau >= 10 max(1/kappa, 1/lambda)`; the filter term is dropped when no
    /// filter linewidth is given.
    pub fn new(kappa: f64, lambda: Option<f64>) -> Self {
        let slow = lambda.map_or(1.0 / kappa, |l| (1.0 / kappa).max(1.0 / l));
        ValidityWindow { min_tau: 10.0 * slow }
    }

    pub fn from_derived(d: &DerivedParams) -> Self {
        Self::new(d.kappa, None)
    }

    pub fn contains(&self, tau: f64) -> bool {
        tau >= self.min_tau
    }
}

/// A value together with its validity flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flagged<T> {
    pub value: T,
    pub extrapolated: bool,
}

impl<T> Flagged<T> {
    fn at(value: T, tau: f64, d: &DerivedParams) -> Self {
        Flagged { value, extrapolated: !ValidityWindow::from_derived(d).contains(tau) }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be finite and >= 0, got {tau}")));
    }
    Ok(())
}

/// Excess of the blue-given-red correlator, `((n+1)/n) e^{-gamma_eff tau}`.
fn excess_blue_given_red(tau: f64, d: &DerivedParams) -> Result<f64> {
    if d.n_m <= 0.0 {
        return Err(Error::Undefined(
            "n_M = 0: a blue photon can never follow a red one".into(),
        ));
    }
    Ok((d.n_m + 1.0) / d.n_m * (-d.gamma_eff * tau).exp())
}

/// Same-color correlator of a single cavity, `1 + e^{-gamma_eff tau}`.
pub fn g2_single_same(tau: f64, d: &DerivedParams) -> Result<Flagged<f64>> {
    check_tau(tau)?;
    Ok(Flagged::at(1.0 + (-d.gamma_eff * tau).exp(), tau, d))
}

pub fn g2_single_cross(tau: f64, direction: Direction, d: &DerivedParams) -> Result<Flagged<f64>> {
    check_tau(tau)?;
    let v = match direction {
        Direction::BlueGivenRed => 1.0 + excess_blue_given_red(tau, d)?,
        Direction::RedGivenBlue => {
            1.0 + d.n_m / (d.n_m + 1.0) * (-d.gamma_eff * tau).exp()
        }
    };
    Ok(Flagged::at(v, tau, d))
}

/// Interference weight for a red click at `from` followed by a blue click at
/// `to`. `A_r -> A_b` goes as `cos^2(delta tau/2 + phi)`; a B-side red click
/// shifts `phi` by `pi/2`.
pub fn two_cavity_weight(tau: f64, from: Detector, to: Detector, delta: f64, phi: f64) -> f64 {
    let theta = 0.5 * delta * tau + phi;
    let c2 = theta.cos().powi(2);
    let same = matches!((from, to), (Detector::A, Detector::A) | (Detector::B, Detector::B));
    if same {
        c2
    } else {
        1.0 - c2
    }
}

pub fn g2_two_cavity(
    tau: f64,
    from: DetectorTag,
    to: DetectorTag,
    p: &TwoCavityParams,
    d: &DerivedParams,
) -> Result<Flagged<f64>> {
    check_tau(tau)?;
    let two_port = |t: DetectorTag| matches!(t.detector, Detector::A | Detector::B);
    if !two_port(from) || !two_port(to) {
        return Err(Error::InvalidParameter("two-cavity correlators need A/B detectors".into()));
    }
    if from.color != Color::Red || to.color != Color::Blue {
        return Err(Error::InvalidParameter(format!(
            "only red-conditioned blue correlators are defined, got {from} -> {to}"
        )));
    }
    let x = excess_blue_given_red(tau, d)?;
    let w = two_cavity_weight(tau, from.detector, to.detector, p.delta, p.phi);
    Ok(Flagged::at(1.0 + x * w, tau, d))
}

/// Measurable upper bound `4 (g_aa + g_ba - 1) / (g_aa - g_ba)^2` on the
/// entanglement witness. Values below one certify entanglement.
pub fn witness_from_g2(g2_aa: f64, g2_ba: f64) -> Result<f64> {
    let diff = g2_aa - g2_ba;
    if !(diff.abs() >= DEGENERATE_TOLERANCE) {
        return Err(Error::Degenerate { g2_aa, g2_ba });
    }
    Ok(4.0 * (g2_aa + g2_ba - 1.0) / (diff * diff))
}

pub fn witness_rm(tau: f64, p: &TwoCavityParams, d: &DerivedParams) -> Result<Flagged<f64>> {
    check_tau(tau)?;
    let cos2 = (p.delta * tau + 2.0 * p.phi).cos().powi(2);
    if cos2 < BLIND_SPOT_TOLERANCE {
        return Err(Error::BlindSpot { cos2 });
    }
    let n = d.n_m;
    let e = (-d.gamma_eff * tau).exp();
    let v = 4.0 * n * (n + (n + 1.0) * e) / ((n + 1.0).powi(2) * e * e * cos2);
    Ok(Flagged::at(v, tau, d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationBoundary {
    /// Largest occupancy that can violate the bound at any delay.
    pub n_max: f64,
    /// Longest delay with a violation at the given occupancy (in phase).
    pub tau_max: f64,
}

/// Positive root of `7n^2 + 2n - 1 = 0`.
pub fn n_max() -> f64 {
    (2.0 * std::f64::consts::SQRT_2 - 1.0) / 7.0
}

pub fn tau_max(n_m: f64, gamma_eff: f64) -> f64 {
    ((std::f64::consts::SQRT_2 - 1.0) * (n_m + 1.0) / (2.0 * n_m)).ln() / gamma_eff
}

pub fn violation_boundary(d: &DerivedParams) -> Result<ViolationBoundary> {
    let n_max = n_max();
    if !(d.n_m < n_max) {
        return Err(Error::NoViolationPossible { n_m: d.n_m, n_max });
    }
    Ok(ViolationBoundary { n_max, tau_max: tau_max(d.n_m, d.gamma_eff) })
}

/// Delay below which the blue-given-red correlator beats the classical
/// Cauchy-Schwarz bound `g2_br(tau)^2 <= g2_bb(0) g2_rr(0)`.
pub fn cauchy_schwarz_crossover(d: &DerivedParams) -> f64 {
    ((d.n_m + 1.0) / d.n_m).ln() / d.gamma_eff
}

/// Lorentzian with unit integral over `d omega / 2 pi`.
pub fn lorentzian(omega: f64, center: f64, width: f64) -> f64 {
    let x = omega - center;
    width / (x * x + 0.25 * width * width)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub total: f64,
    pub red: f64,
    pub blue: f64,
    /// `None` when the carrier flux is unknown.
    pub carrier: Option<f64>,
}

/// Output spectrum in the frame rotating at the drive: suppressed carrier at
/// zero, red sideband at `+omega_eff`, blue at `-omega_eff`.
pub fn output_spectrum(omega: f64, d: &DerivedParams, laser_linewidth: f64, r_suppress: f64) -> SpectrumPoint {
    let red = d.f_r * lorentzian(omega, d.omega_eff, d.gamma_eff);
    let blue = d.f_b * lorentzian(omega, -d.omega_eff, d.gamma_eff);
    let carrier = d.f_c.map(|fc| r_suppress * fc * lorentzian(omega, 0.0, laser_linewidth));
    SpectrumPoint { total: red + blue + carrier.unwrap_or(0.0), red, blue, carrier }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCorrelator {
    pub value: Complex64,
    /// Filter phase. It cancels in every observable built from `|value|^2`
    /// and is carried only for reference; zero unless set by the caller.
    pub theta: f64,
}

/// `<b_r^dag(t) b_b^dag(t + tau)>` for filtered sideband modes.
pub fn sideband_cross_correlator(tau: f64, d: &DerivedParams) -> Result<Flagged<CrossCorrelator>> {
    check_tau(tau)?;
    let chi = |w: f64| Complex64::new(d.kappa / 2.0, -(w + d.detuning)).inv();
    let theta = 0.0;
    let alpha_conj_sq = Complex64::new(d.alpha_mag * d.alpha_mag, 0.0);
    let decay = Complex64::new(-0.5 * d.gamma_eff * tau, d.omega_eff * tau).exp();
    let value = -d.kappa_r
        * alpha_conj_sq
        * Complex64::from_polar(1.0, -theta)
        * chi(d.omega_m).conj()
        * chi(-d.omega_m).conj()
        * (d.n_m + 1.0)
        * decay;
    Ok(Flagged::at(CrossCorrelator { value, theta }, tau, d))
}

/// Same-time-ordered normal correlator `<b_r^dag b_b(tau)>`, which vanishes
/// in the rotating-wave limit.
pub fn sideband_normal_correlator(_tau: f64, _d: &DerivedParams) -> Complex64 {
    Complex64::new(0.0, 0.0)
}

/// Three-cavity carrier filter: one cavity of width `mu` that reflects the
/// carrier, followed by a pair of sideband filters of width `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterChainParams {
    pub mu: f64,
    pub delta1: f64,
    pub capital_delta1: f64,
    pub lambda: f64,
    pub delta2: f64,
    pub gamma_laser: f64,
    pub r_suppress: f64,
}

impl FilterChainParams {
    /// 10 kHz filter cavities, 100 Hz laser linewidth, 1e-3 displacement
    /// suppression, ideal mirrors.
    pub fn reference() -> Self {
        let tp = crate::cooling::TWO_PI;
        FilterChainParams {
            mu: tp * 1e4,
            delta1: 0.0,
            capital_delta1: 0.0,
            lambda: tp * 1e4,
            delta2: 0.0,
            gamma_laser: tp * 100.0,
            r_suppress: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [("mu", self.mu), ("lambda", self.lambda), ("gamma_laser", self.gamma_laser)];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.r_suppress > 0.0 && self.r_suppress <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "r_suppress must lie in (0, 1], got {}",
                self.r_suppress
            )));
        }
        if !(self.delta2.abs() < 0.5) {
            return Err(Error::InvalidParameter(format!("|delta2| must be < 1/2, got {}", self.delta2)));
        }
        Ok(())
    }

    /// Scale-separation checks. `much` means at least a factor of ten.
    pub fn warnings(&self, d: &DerivedParams) -> Vec<String> {
        let mut w = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                w.push(msg.to_string());
            }
        };
        need(10.0 * self.gamma_laser <= self.mu, "laser linewidth not << mu");
        need(10.0 * self.mu <= d.omega_m, "mu not << omega_m");
        need(10.0 * d.gamma_eff <= self.lambda, "gamma_eff not << lambda");
        need(10.0 * self.lambda <= d.omega_m, "lambda not << omega_m");
        need(10.0 * self.capital_delta1.abs() <= self.mu, "Delta1 not << mu");
        w
    }

    pub fn lambda_l(&self) -> f64 {
        self.lambda * (0.5 + self.delta2)
    }

    pub fn lambda_r(&self) -> f64 {
        self.lambda * (0.5 - self.delta2)
    }

    /// Carrier-rejection factor of the first cavity.
    pub fn rho(&self, omega: f64) -> Complex64 {
        let x = omega + self.capital_delta1;
        Complex64::new(self.mu * self.delta1, x) / Complex64::new(0.5 * self.mu, -x)
    }

    pub fn blue_filter(&self, omega_m: f64, omega: f64) -> Complex64 {
        let g = (self.lambda_l() * self.lambda_r()).sqrt();
        g / Complex64::new(0.5 * self.lambda, -(omega - omega_m)) * self.rho(omega)
    }

    pub fn red_filter(&self, omega_m: f64, omega: f64) -> Complex64 {
        let g = (self.lambda_l() * self.lambda_r()).sqrt();
        let first = g / Complex64::new(0.5 * self.lambda, -(omega + omega_m));
        let second = Complex64::new(self.lambda * self.delta2, omega - omega_m)
            / Complex64::new(0.5 * self.lambda, -(omega - omega_m));
        first * second * self.rho(omega)
    }

    /// Leaked carrier flux in the blue port relative to the carrier flux.
    pub fn carrier_leakage_ratio(&self, omega_m: f64) -> f64 {
        self.lambda_l() * self.lambda_r() / (omega_m * omega_m)
            * (self.gamma_laser / self.mu + 4.0 * self.delta1 * self.delta1)
            * self.r_suppress
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterChainReport {
    pub omega: Vec<f64>,
    pub blue_filter: Vec<Complex64>,
    pub red_filter: Vec<Complex64>,
    /// `f_c^(b) / f_c`.
    pub carrier_leakage_ratio: f64,
    /// `f_c^(b)`, when the carrier flux is known.
    pub carrier_leakage_flux: Option<f64>,
    /// `f_b / f_c`.
    pub blue_to_carrier: Option<f64>,
    /// `f_b / f_c^(b)`.
    pub blue_to_leakage: Option<f64>,
    /// Fraction of each sideband's flux passed by its filter.
    pub blue_transmission: f64,
    pub red_transmission: f64,
    pub warnings: Vec<String>,
}

/// Grid points used by [`filter_chain`] for the filter functions.
pub const FILTER_GRID_POINTS: usize = 2001;

pub fn filter_chain(fc: &FilterChainParams, d: &DerivedParams) -> Result<FilterChainReport> {
    fc.validate()?;
    let wm = d.omega_m;
    let span = 2.0 * wm;
    let n = FILTER_GRID_POINTS;
    let omega: Vec<f64> = (0..n).map(|i| -span + 2.0 * span * i as f64 / (n - 1) as f64).collect();
    let blue_filter = omega.iter().map(|&w| fc.blue_filter(wm, w)).collect();
    let red_filter = omega.iter().map(|&w| fc.red_filter(wm, w)).collect();
    let ratio = fc.carrier_leakage_ratio(wm);
    let leak = d.f_c.map(|c| c * ratio);
    let blue_to_carrier = d.f_c.map(|c| d.f_b / c);
    let blue_to_leakage = leak.map(|l| d.f_b / l);
    Ok(FilterChainReport {
        omega,
        blue_filter,
        red_filter,
        carrier_leakage_ratio: ratio,
        carrier_leakage_flux: leak,
        blue_to_carrier,
        blue_to_leakage,
        blue_transmission: transmitted_fraction(fc, d, Color::Blue),
        red_transmission: transmitted_fraction(fc, d, Color::Red),
        warnings: fc.warnings(d),
    })
}

/// `int |F(omega)|^2 L(omega) d omega / 2 pi` for a unit-flux sideband
/// Lorentzian of width `gamma_eff` at the filter's pass frequency.
pub fn transmitted_fraction(fc: &FilterChainParams, d: &DerivedParams, color: Color) -> f64 {
    let wm = d.omega_m;
    let (center, filt): (f64, Box<dyn Fn(f64) -> Complex64>) = match color {
        Color::Blue => (d.omega_eff, Box::new(|w| fc.blue_filter(wm, w))),
        Color::Red => (-d.omega_eff, Box::new(|w| fc.red_filter(wm, w))),
    };
    // omega = center + (gamma/2) tan(t) turns the Lorentzian into dt / pi.
    let half = 0.5 * d.gamma_eff;
    let lim = std::f64::consts::FRAC_PI_2;
    let f = |t: f64| filt(center + half * t.tan()).norm_sqr();
    quadrature::integrate(f, -lim, lim, 4000, 8) / std::f64::consts::PI
}

/// Concurrence of a two-mode state restricted to at most one phonon per
/// mode, `max(2 (|q| - sqrt(p00 p11)), 0)`.
pub fn concurrence(p00: f64, p11: f64, q: Complex64) -> f64 {
    (2.0 * (q.norm() - (p00 * p11).max(0.0).sqrt())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooling::{derive, SystemParams, TWO_PI};
    use approx::assert_relative_eq;

    fn with_n(n_m: f64) -> DerivedParams {
        let mut d = derive(&SystemParams::desk(0.1)).unwrap();
        d.n_m = n_m;
        d
    }

    fn pair(delta: f64, phi: f64) -> TwoCavityParams {
        TwoCavityParams::symmetric(SystemParams::desk(0.1), delta, phi)
    }

    const AR: DetectorTag = DetectorTag::new(Detector::A, Color::Red);
    const BR: DetectorTag = DetectorTag::new(Detector::B, Color::Red);
    const AB: DetectorTag = DetectorTag::new(Detector::A, Color::Blue);
    const BB: DetectorTag = DetectorTag::new(Detector::B, Color::Blue);

    #[test]
    fn same_color_values() {
        let d = with_n(0.1);
        assert_eq!(g2_single_same(0.0, &d).unwrap().value, 2.0);
        assert!((g2_single_same(1e6, &d).unwrap().value - 1.0).abs() < 1e-12);
        let v = g2_single_same(1.0 / d.gamma_eff, &d).unwrap().value;
        assert_relative_eq!(v, 1.0 + (-1.0f64).exp(), max_relative = 1e-12);
        assert!(g2_single_same(-1.0, &d).is_err());
    }

    #[test]
    fn cross_values() {
        let d = with_n(0.068);
        let v = g2_single_cross(0.0, Direction::BlueGivenRed, &d).unwrap().value;
        assert!((v - 16.71).abs() < 0.01, "{v}");
        let big = with_n(1e9);
        let br = g2_single_cross(0.3, Direction::BlueGivenRed, &big).unwrap().value;
        let rb = g2_single_cross(0.3, Direction::RedGivenBlue, &big).unwrap().value;
        let same = g2_single_same(0.3, &big).unwrap().value;
        assert!((br - same).abs() < 1e-8 && (rb - same).abs() < 1e-8);
        let small = with_n(1e-12);
        let rb = g2_single_cross(0.0, Direction::RedGivenBlue, &small).unwrap().value;
        assert!((rb - 1.0).abs() < 1e-11);
        assert!(matches!(
            g2_single_cross(0.1, Direction::BlueGivenRed, &with_n(0.0)),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn validity_flag() {
        let d = with_n(0.1);
        let w = ValidityWindow::from_derived(&d);
        assert!(g2_single_same(0.0, &d).unwrap().extrapolated);
        assert!(!g2_single_same(w.min_tau, &d).unwrap().extrapolated);
        let wf = ValidityWindow::new(d.kappa, Some(d.kappa / 100.0));
        assert_relative_eq!(wf.min_tau, 1000.0 / d.kappa);
    }

    #[test]
    fn two_cavity_values() {
        let d = with_n(0.068);
        let p = pair(0.0, 0.0);
        for tau in [0.0, 0.3, 2.0] {
            assert_eq!(g2_two_cavity(tau, AR, BB, &p, &d).unwrap().value, 1.0);
        }
        let aa = g2_two_cavity(0.0, AR, AB, &p, &d).unwrap().value;
        assert!((aa - 16.71).abs() < 0.01);
        let p = pair(0.7, 0.4);
        for tau in [0.0, 0.5, 1.5] {
            let aa = g2_two_cavity(tau, AR, AB, &p, &d).unwrap().value;
            let ba = g2_two_cavity(tau, AR, BB, &p, &d).unwrap().value;
            let x = (d.n_m + 1.0) / d.n_m * (-d.gamma_eff * tau).exp();
            assert_relative_eq!(aa + ba, 2.0 + x, max_relative = 1e-13);
            // B_r conditioning swaps the ports
            let bb = g2_two_cavity(tau, BR, BB, &p, &d).unwrap().value;
            let ab = g2_two_cavity(tau, BR, AB, &p, &d).unwrap().value;
            assert_relative_eq!(bb, aa, max_relative = 1e-13);
            assert_relative_eq!(ab, ba, max_relative = 1e-13);
        }
        assert!(g2_two_cavity(0.1, AB, AR, &p, &d).is_err());
        let s = DetectorTag::new(Detector::Single, Color::Red);
        assert!(g2_two_cavity(0.1, s, AB, &p, &d).is_err());
    }

    #[test]
    fn witness_values() {
        let w = witness_from_g2(16.7059, 1.0).unwrap();
        assert!((w - 0.270).abs() < 1e-3, "{w}");
        assert_eq!(witness_from_g2(2.0, 1.0).unwrap(), 8.0);
        assert!(matches!(witness_from_g2(1.5, 1.5), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn witness_rm_boundary() {
        let d = with_n(0.068);
        let p = pair(0.0, 0.0);
        let tau = tau_max(0.068, d.gamma_eff);
        assert_relative_eq!(witness_rm(tau, &p, &d).unwrap().value, 1.0, max_relative = 1e-12);
        let d = with_n(n_max());
        assert_relative_eq!(witness_rm(0.0, &p, &d).unwrap().value, 1.0, max_relative = 1e-12);
        assert!((n_max() - 0.2612).abs() < 1e-4);
        let d = with_n(1e-9);
        assert!(witness_rm(0.5, &p, &d).unwrap().value < 1e-7);
    }

    #[test]
    fn blind_spot() {
        let d = with_n(0.1);
        let p = pair(0.0, std::f64::consts::FRAC_PI_4);
        assert!(matches!(witness_rm(0.2, &p, &d), Err(Error::BlindSpot { .. })));
    }

    #[test]
    fn boundary_values() {
        let d = derive(&SystemParams::membrane()).unwrap();
        let b = violation_boundary(&d).unwrap();
        assert!((b.tau_max * 1e3 - 0.47).abs() < 0.01, "{}", b.tau_max);
        let n = 1e-6;
        let lim = ((std::f64::consts::SQRT_2 - 1.0) / (2.0 * n)).ln();
        assert_relative_eq!(tau_max(n, 1.0), lim, max_relative = 1e-5);
        assert!(tau_max(n_max(), 1.0).abs() < 1e-14);
        assert!(matches!(violation_boundary(&with_n(0.3)), Err(Error::NoViolationPossible { .. })));
    }

    #[test]
    fn spectrum_normalization() {
        let d = derive(&SystemParams::membrane()).unwrap();
        let red = quadrature::integrate(
            |t: f64| {
                let w = d.omega_eff + 0.5 * d.gamma_eff * t.tan();
                output_spectrum(w, &d, 1.0, 1e-3).red * (0.5 * d.gamma_eff) / t.cos().powi(2)
            },
            -std::f64::consts::FRAC_PI_2,
            std::f64::consts::FRAC_PI_2,
            400,
            8,
        ) / TWO_PI;
        assert_relative_eq!(red, d.f_r, max_relative = 1e-3);
        let peak = output_spectrum(d.omega_eff, &d, 1.0, 1e-3).red;
        assert_relative_eq!(peak, 4.0 * d.f_r / d.gamma_eff, max_relative = 1e-12);
        let mut bare = d.clone();
        bare.f_c = None;
        assert!(output_spectrum(0.0, &bare, 1.0, 1e-3).carrier.is_none());
        let b = output_spectrum(-d.omega_eff, &d, 1.0, 1e-3);
        assert!(b.blue > b.red);
    }

    #[test]
    fn cross_correlator_magnitude() {
        let d = derive(&SystemParams::desk(0.1)).unwrap();
        for tau in [0.0, 0.5, 2.0] {
            let c = sideband_cross_correlator(tau, &d).unwrap().value;
            let ratio = c.value.norm_sqr() / (d.f_r * d.f_b);
            let expect = (d.n_m + 1.0) / d.n_m * (-d.gamma_eff * tau).exp();
            assert_relative_eq!(ratio, expect, max_relative = 1e-10);
        }
        let far = sideband_cross_correlator(1e3, &d).unwrap().value.value;
        assert!(far.norm() < 1e-100);
        assert_eq!(sideband_normal_correlator(1.0, &d), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn filter_chain_budget() {
        let mut sp = SystemParams::membrane();
        sp.bare_coupling = Some(TWO_PI * 100.0);
        let d = derive(&sp).unwrap();
        let fc = FilterChainParams::reference();
        let r = filter_chain(&fc, &d).unwrap();
        let leak = r.carrier_leakage_ratio;
        assert!(leak > 1e-11 && leak < 1e-9, "{leak}");
        let bc = r.blue_to_carrier.unwrap();
        assert!(bc > 1e-9 && bc < 1e-7, "{bc}");
        let bl = r.blue_to_leakage.unwrap();
        assert!(bl > 10.0 && bl < 1e3, "{bl}");
        assert_eq!(fc.rho(0.0), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn filter_transmission_is_lorentzian_overlap() {
        let d = derive(&SystemParams::membrane()).unwrap();
        let mut fc = FilterChainParams::reference();
        fc.lambda = 25.0 * d.gamma_eff;
        fc.mu = fc.lambda;
        let expect = fc.lambda / (fc.lambda + d.gamma_eff);
        let got = transmitted_fraction(&fc, &d, Color::Blue);
        assert_relative_eq!(got, expect * fc.rho(d.omega_m).norm_sqr(), max_relative = 1e-4);
        let red = transmitted_fraction(&fc, &d, Color::Red);
        assert!((red - expect).abs() < 1e-3, "{red} vs {expect}");
    }

    #[test]
    fn concurrence_values() {
        assert_eq!(concurrence(0.3, 0.1, Complex64::new(0.0, 0.0)), 0.0);
        assert_relative_eq!(concurrence(0.0, 0.0, Complex64::new(0.5, 0.0)), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn witness_identity(n in 1e-3f64..2.0, tau in 0.0f64..3.0,
                                delta in -2.0f64..2.0, phi in -3.2f64..3.2) {
                let d = with_n(n);
                let p = pair(delta, phi);
                prop_assume!((delta * tau + 2.0 * phi).cos().powi(2) > 1e-4);
                let aa = g2_two_cavity(tau, AR, AB, &p, &d).unwrap().value;
                let ba = g2_two_cavity(tau, AR, BB, &p, &d).unwrap().value;
                let w1 = witness_from_g2(aa, ba).unwrap();
                let w2 = witness_rm(tau, &p, &d).unwrap().value;
                prop_assert!(((w1 - w2) / w2).abs() < 1e-10, "{} vs {}", w1, w2);
            }

            #[test]
            fn correlators_at_least_one(n in 1e-3f64..10.0, tau in 0.0f64..10.0,
                                        delta in -2.0f64..2.0, phi in -3.2f64..3.2) {
                let d = with_n(n);
                let p = pair(delta, phi);
                prop_assert!(g2_single_same(tau, &d).unwrap().value >= 1.0);
                for dir in [Direction::BlueGivenRed, Direction::RedGivenBlue] {
                    prop_assert!(g2_single_cross(tau, dir, &d).unwrap().value >= 1.0);
                }
                for (a, b) in [(AR, AB), (AR, BB), (BR, AB), (BR, BB)] {
                    prop_assert!(g2_two_cavity(tau, a, b, &p, &d).unwrap().value >= 1.0);
                }
            }

            #[test]
            fn spectrum_nonnegative(w in -200.0f64..200.0, n in 0.01f64..1.0) {
                let mut sp = SystemParams::desk(n);
                sp.bare_coupling = Some(1.0);
                let d = derive(&sp).unwrap();
                let s = output_spectrum(w, &d, 0.1, 1e-3);
                prop_assert!(s.total >= 0.0 && s.red >= 0.0 && s.blue >= 0.0);
                prop_assert!(s.carrier.unwrap() >= 0.0);
            }

            // (1+X)^2 > g_bb(0) g_rr(0) = 4 exactly when tau is below the crossover
            #[test]
            fn cauchy_schwarz_crossover_exact(n in 1e-3f64..5.0, frac in 0.0f64..2.0) {
                let d = with_n(n);
                let tc = cauchy_schwarz_crossover(&d);
                let tau = frac * tc;
                prop_assume!((frac - 1.0).abs() > 1e-6);
                let br = g2_single_cross(tau, Direction::BlueGivenRed, &d).unwrap().value;
                let bound = g2_single_same(0.0, &d).unwrap().value.powi(2);
                prop_assert_eq!(br * br > bound, frac < 1.0);
            }

            // separability criterion p00 p11 < |q|^2 matches C > 0
            #[test]
            fn concurrence_separability(p in proptest::array::uniform4(0.0f64..1.0),
                                        ph in 0.0f64..6.3, s in 0.0f64..1.0) {
                let tot: f64 = p.iter().sum();
                prop_assume!(tot > 1e-3);
                let [p00, p01, p10, p11] = p.map(|x| x / tot);
                let q = Complex64::from_polar(s * (p01 * p10).sqrt(), ph);
                prop_assume!(q.norm_sqr() > 1e-12 && (p00 * p11 / q.norm_sqr() - 1.0).abs() > 1e-9);
                prop_assert_eq!(concurrence(p00, p11, q) > 0.0, p00 * p11 / q.norm_sqr() < 1.0);
            }
        }

        #[test]
        fn two_thirds_crossover_matches_root() {
            // A_b/(A_b + B_b) > 2/3 at delta = phi = 0 iff X > 1
            for n in [0.02, 0.1, 0.5, 2.0] {
                let d = with_n(n);
                let p = pair(0.0, 0.0);
                let ratio = |tau: f64| {
                    let aa = g2_two_cavity(tau, AR, AB, &p, &d).unwrap().value;
                    let ba = g2_two_cavity(tau, AR, BB, &p, &d).unwrap().value;
                    aa / (aa + ba) - 2.0 / 3.0
                };
                let (mut lo, mut hi) = (0.0, 50.0);
                assert!(ratio(lo) > 0.0 && ratio(hi) < 0.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if ratio(mid) > 0.0 { lo = mid } else { hi = mid }
                }
                let root = ((n + 1.0) / n).ln() / d.gamma_eff;
                assert!((lo - root).abs() < 1e-10, "n={n}: {lo} vs {root}");
            }
        }
    }
}
