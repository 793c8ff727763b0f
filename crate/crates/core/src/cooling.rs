//! Physical parameters of a laser-cooled cavity-oscillator pair and the
//! quantities that follow from the linearized steady state: scattering rates,
//! optical damping, effective occupancy and the sideband photon fluxes.
//!
//! All rates and frequencies are angular (rad/s). The "desk" presets are
//! dimensionless, in units where the effective mechanical linewidth is one.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const HBAR: f64 = 1.054_571_817e-34;
pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Thermal bath of the mechanical mode, given either as a temperature or as
/// an occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bath {
    /// Kelvin.
    Temperature(f64),
    /// Dimensionless mean thermal phonon number.
    Occupancy(f64),
}

impl Bath {
    /// Builds a bath from optional parts; exactly one must be present.
    pub fn from_parts(temperature: Option<f64>, n_th: Option<f64>) -> Result<Self> {
        match (temperature, n_th) {
            (Some(_), Some(_)) => Err(Error::InvalidBath(
                "both temperature and n_th given; supply exactly one".into(),
            )),
            (None, None) => Err(Error::InvalidBath(
                "neither temperature nor n_th given".into(),
            )),
            (Some(t), None) if t >= 0.0 => Ok(Bath::Temperature(t)),
            (None, Some(n)) if n >= 0.0 => Ok(Bath::Occupancy(n)),
            _ => Err(Error::InvalidBath("bath value must be non-negative".into())),
        }
    }

    /// Occupancy `k_B T / (hbar omega_m)` (no Bose-Einstein refinement).
    pub fn occupancy(&self, omega_m: f64) -> f64 {
        match *self {
            Bath::Temperature(t) => BOLTZMANN * t / (HBAR * omega_m),
            Bath::Occupancy(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub omega_m: f64,
    /// Intrinsic mechanical damping.
    pub gamma: f64,
    /// Total cavity linewidth.
    pub kappa: f64,
    /// Decay rate through the output (right) mirror.
    pub kappa_r: f64,
    /// Effective optomechanical coupling |alpha| = g x_zpf |a|.
    pub alpha_mag: f64,
    pub detuning: f64,
    pub bath: Bath,
    /// Optional override of the spring-shifted mechanical frequency.
    #[serde(default)]
    pub omega_eff: Option<f64>,
    /// Optional bare coupling g x_zpf; enables the carrier flux.
    #[serde(default)]
    pub bare_coupling: Option<f64>,
}

impl SystemParams {
    /// Membrane-in-the-middle parameters: omega_m/2pi = 2 MHz, Q = 2e7,
    /// kappa/2pi = 1 MHz, |alpha|/2pi = 10 kHz, T = 20 mK, kappa_R = kappa.
    pub fn membrane() -> Self {
        let omega_m = TWO_PI * 2.0e6;
        let kappa = TWO_PI * 1.0e6;
        SystemParams {
            omega_m,
            gamma: omega_m / 2.0e7,
            kappa,
            kappa_r: kappa,
            alpha_mag: TWO_PI * 1.0e4,
            detuning: -omega_m,
            bath: Bath::Temperature(0.020),
            omega_eff: None,
            bare_coupling: None,
        }
    }

    /// Dimensionless preset with effective linewidth 1 and occupancy `n_m`.
    ///
    /// omega_m = 50, gamma = 0.1, n_th = n_opt = n_m, and the cavity
    /// linewidth and coupling are chosen so that gamma_opt = 0.9 at
    /// detuning -omega_m. All light leaves through the output mirror.
    pub fn desk(n_m: f64) -> Self {
        let omega_m = 50.0;
        let gamma = 0.1;
        let gamma_opt = 0.9;
        let kappa = 4.0 * omega_m * n_m.sqrt();
        let chi_plus = 4.0 / (kappa * kappa);
        let chi_minus = 1.0 / (kappa * kappa / 4.0 + 4.0 * omega_m * omega_m);
        let alpha_sq = gamma_opt / (kappa * (chi_plus - chi_minus));
        SystemParams {
            omega_m,
            gamma,
            kappa,
            kappa_r: kappa,
            alpha_mag: alpha_sq.sqrt(),
            detuning: -omega_m,
            bath: Bath::Occupancy(n_m),
            omega_eff: None,
            bare_coupling: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega_m", self.omega_m),
            ("gamma", self.gamma),
            ("kappa", self.kappa),
            ("kappa_r", self.kappa_r),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.alpha_mag.is_finite() && self.alpha_mag >= 0.0) {
            return Err(Error::InvalidParameter("alpha_mag must be >= 0".into()));
        }
        if self.kappa_r > self.kappa * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "kappa_r = {} exceeds kappa = {}",
                self.kappa_r, self.kappa
            )));
        }
        if !self.detuning.is_finite() {
            return Err(Error::InvalidParameter("detuning must be finite".into()));
        }
        if let Some(g0) = self.bare_coupling {
            if !(g0 > 0.0) {
                return Err(Error::InvalidParameter("bare_coupling must be > 0".into()));
            }
        }
        let n_th = self.bath.occupancy(self.omega_m);
        if !(n_th.is_finite() && n_th >= 0.0) {
            return Err(Error::InvalidBath(format!("n_th = {n_th}")));
        }
        Ok(())
    }

    pub fn n_th(&self) -> f64 {
        self.bath.occupancy(self.omega_m)
    }
}

/// Bare cavity susceptibility `1 / (kappa/2 - i (omega + detuning))`.
pub fn cavity_susceptibility(params: &SystemParams, omega: f64) -> Complex64 {
    Complex64::new(params.kappa / 2.0, -(omega + params.detuning)).inv()
}

/// Effective mechanical susceptibility `1 / (gamma_eff/2 - i (omega - omega_eff))`.
pub fn mechanical_susceptibility(gamma_eff: f64, omega_eff: f64, omega: f64) -> Complex64 {
    Complex64::new(gamma_eff / 2.0, -(omega - omega_eff)).inv()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub omega_m: f64,
    pub omega_eff: f64,
    pub gamma: f64,
    pub n_th: f64,
    pub kappa: f64,
    pub kappa_r: f64,
    pub alpha_mag: f64,
    pub detuning: f64,
    /// Fraction of scattered sideband photons leaving through the output mirror.
    pub eta_esc: f64,
    /// Anti-Stokes (phonon-destroying, blue) scattering rate.
    pub a_minus: f64,
    /// Stokes (phonon-creating, red) scattering rate.
    pub a_plus: f64,
    pub gamma_opt: f64,
    pub gamma_eff: f64,
    pub n_opt: f64,
    pub n_m: f64,
    pub f_r: f64,
    pub f_b: f64,
    /// Carrier flux, present only when the bare coupling is known.
    pub f_c: Option<f64>,
    pub bare_coupling: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn derive(params: &SystemParams) -> Result<DerivedParams> {
    params.validate()?;
    let mut warnings = Vec::new();
    if params.alpha_mag > 0.1 * params.kappa {
        warnings.push(format!(
            "weak-coupling assumption strained: |alpha|/kappa = {:.3}",
            params.alpha_mag / params.kappa
        ));
    }
    let chi_blue = cavity_susceptibility(params, params.omega_m).norm_sqr();
    let chi_red = cavity_susceptibility(params, -params.omega_m).norm_sqr();
    let alpha_sq = params.alpha_mag * params.alpha_mag;
    let a_minus = params.kappa * alpha_sq * chi_blue;
    let a_plus = params.kappa * alpha_sq * chi_red;
    let gamma_opt = a_minus - a_plus;
    if chi_blue <= chi_red || (alpha_sq > 0.0 && gamma_opt <= 0.0) {
        return Err(Error::HeatingRegime { gamma_opt });
    }
    // a_plus / gamma_opt without the coupling, so it stays defined at alpha = 0.
    let n_opt = chi_red / (chi_blue - chi_red);
    let n_th = params.n_th();
    let gamma_eff = params.gamma + gamma_opt;
    let n_m = (params.gamma * n_th + gamma_opt * n_opt) / gamma_eff;
    let eta_esc = params.kappa_r / params.kappa;
    let f_b = eta_esc * a_minus * n_m;
    let f_r = eta_esc * a_plus * (n_m + 1.0);
    let f_c = params.bare_coupling.map(|g0| {
        let a_bar = params.alpha_mag / g0;
        params.kappa_r * a_bar * a_bar
    });
    Ok(DerivedParams {
        omega_m: params.omega_m,
        omega_eff: params.omega_eff.unwrap_or(params.omega_m),
        gamma: params.gamma,
        n_th,
        kappa: params.kappa,
        kappa_r: params.kappa_r,
        alpha_mag: params.alpha_mag,
        detuning: params.detuning,
        eta_esc,
        a_minus,
        a_plus,
        gamma_opt,
        gamma_eff,
        n_opt,
        n_m,
        f_r,
        f_b,
        f_c,
        bare_coupling: params.bare_coupling,
        warnings,
    })
}

impl DerivedParams {
    /// Blue-to-carrier flux ratio `4 (g x_zpf / kappa)^2 n_M` when the bare
    /// coupling is known. Valid at detuning -omega_m.
    pub fn blue_to_carrier(&self) -> Option<f64> {
        self.bare_coupling
            .map(|g0| 4.0 * (g0 / self.kappa).powi(2) * self.n_m)
    }

    /// Red-to-blue flux ratio written through the occupancies.
    pub fn red_to_blue_identity(&self) -> f64 {
        self.n_opt * (self.n_m + 1.0) / ((self.n_opt + 1.0) * self.n_m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoolingRegime {
    /// gamma_opt >= 10 gamma.
    OpticallyDominated,
    /// gamma >= 10 gamma_opt.
    IntrinsicallyDominated,
    Intermediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyBreakdown {
    /// gamma n_th / gamma_eff.
    pub bath_part: f64,
    /// gamma_opt n_opt / gamma_eff.
    pub backaction_part: f64,
    pub exact: f64,
    /// (gamma/gamma_opt) n_th + n_opt; `None` when gamma_opt = 0.
    pub optical_limit: Option<f64>,
    /// n_th + (gamma_opt/gamma) n_opt.
    pub intrinsic_limit: f64,
    pub regime: CoolingRegime,
}

pub fn occupancy_regime(params: &SystemParams) -> Result<OccupancyBreakdown> {
    let d = derive(params)?;
    let bath_part = d.gamma * d.n_th / d.gamma_eff;
    let backaction_part = d.gamma_opt * d.n_opt / d.gamma_eff;
    let optical_limit = (d.gamma_opt > 0.0).then(|| d.gamma / d.gamma_opt * d.n_th + d.n_opt);
    let intrinsic_limit = d.n_th + d.gamma_opt / d.gamma * d.n_opt;
    let regime = if d.gamma_opt >= 10.0 * d.gamma {
        CoolingRegime::OpticallyDominated
    } else if d.gamma >= 10.0 * d.gamma_opt {
        CoolingRegime::IntrinsicallyDominated
    } else {
        CoolingRegime::Intermediate
    };
    Ok(OccupancyBreakdown {
        bath_part,
        backaction_part,
        exact: d.n_m,
        optical_limit,
        intrinsic_limit,
        regime,
    })
}

/// Two cavity-oscillator pairs combined on a 50:50 beam splitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoCavityParams {
    pub cavity1: SystemParams,
    pub cavity2: SystemParams,
    /// Mechanical frequency difference omega_m2 - omega_m1.
    pub delta: f64,
    /// Interferometer phase entering the detector-resolved correlators.
    pub phi: f64,
}

impl TwoCavityParams {
    pub fn symmetric(cavity: SystemParams, delta: f64, phi: f64) -> Self {
        TwoCavityParams {
            cavity2: cavity.clone(),
            cavity1: cavity,
            delta,
            phi,
        }
    }

    /// Warnings for a frequency mismatch that is not small against kappa and
    /// omega_m.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let d = self.delta.abs();
        if d > 0.1 * self.cavity1.kappa {
            w.push(format!("|delta|/kappa = {:.3} is not small", d / self.cavity1.kappa));
        }
        if d > 0.1 * self.cavity1.omega_m {
            w.push(format!("|delta|/omega_m = {:.3} is not small", d / self.cavity1.omega_m));
        }
        w
    }

    /// Derives both cavities and rejects asymmetries beyond 1% in the
    /// quantities the witness relies on.
    pub fn derive_symmetric(&self) -> Result<DerivedParams> {
        let d1 = derive(&self.cavity1)?;
        let d2 = derive(&self.cavity2)?;
        let checks = [
            ("kappa", d1.kappa, d2.kappa),
            ("kappa_r", d1.kappa_r, d2.kappa_r),
            ("alpha", self.cavity1.alpha_mag, self.cavity2.alpha_mag),
            ("n_M", d1.n_m, d2.n_m),
            ("gamma_eff", d1.gamma_eff, d2.gamma_eff),
            ("f_b", d1.f_b, d2.f_b),
            ("f_r", d1.f_r, d2.f_r),
        ];
        for (name, a, b) in checks {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 && (a - b).abs() / scale > 0.01 {
                return Err(Error::Asymmetric(format!("{name}: {a} vs {b}")));
            }
        }
        let mut d = d1;
        d.warnings.extend(self.warnings());
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn cavity_susceptibility_values() {
        let p = SystemParams::membrane();
        let at_blue = cavity_susceptibility(&p, p.omega_m);
        assert!(rel(at_blue.re, 2.0 / p.kappa) < 1e-14);
        assert!(at_blue.im.abs() < 1e-20);
        let at_red = cavity_susceptibility(&p, -p.omega_m);
        let expect = Complex64::new(p.kappa / 2.0, 2.0 * p.omega_m).inv();
        assert!((at_red - expect).norm() < 1e-14 * expect.norm());
        let ratio = at_blue.norm_sqr() / at_red.norm_sqr();
        assert!((ratio - 65.0).abs() < 1e-9);
    }

    // Window of +-1000 gamma_eff plus the leading tail correction.
    #[test]
    fn mechanical_kernel_fourier_transform() {
        let d = derive(&SystemParams::membrane()).unwrap();
        let (g, w0) = (d.gamma_eff, d.omega_eff);
        let half = 1000.0 * g;
        for tau in [0.0, 1.0 / g, 3.0 / g] {
            let f = |w: f64| {
                let chi = mechanical_susceptibility(g, w0, w);
                Complex64::from_polar(g * chi.norm_sqr(), w * tau)
            };
            let panels = (2.0 * half / (0.25 * g)) as usize;
            let mut v = crate::quadrature::integrate_complex(f, w0 - half, w0 + half, panels, 8) / TWO_PI;
            let tail = if tau == 0.0 {
                1.0 - (2.0 / std::f64::consts::PI) * (2.0 * half / g).atan()
            } else {
                -(g / std::f64::consts::PI) * (half * tau).sin() / (tau * half * half)
            };
            v += Complex64::from_polar(tail, w0 * tau);
            let expect = Complex64::new(-0.5 * g * tau, w0 * tau).exp();
            let rel = (v - expect).norm() / expect.norm();
            assert!(rel < 1e-6, "tau = {tau}: rel err {rel:.2e}");
        }
    }

    #[test]
    fn mechanical_susceptibility_lorentzian() {
        let (g, w0) = (3.0, 40.0);
        assert!((mechanical_susceptibility(g, w0, w0) - Complex64::new(2.0 / g, 0.0)).norm() < 1e-15);
        let peak = mechanical_susceptibility(g, w0, w0).norm_sqr();
        for s in [-1.0, 1.0] {
            let half = mechanical_susceptibility(g, w0, w0 + s * g / 2.0).norm_sqr();
            assert!(rel(half, peak / 2.0) < 1e-14);
        }
    }

    #[test]
    fn membrane_numbers() {
        let d = derive(&SystemParams::membrane()).unwrap();
        assert!((d.n_m - 0.068).abs() < 0.001, "n_M {}", d.n_m);
        assert!((d.n_opt - 0.016).abs() < 0.0005, "n_opt {}", d.n_opt);
        let g_khz = d.gamma_eff / TWO_PI / 1e3;
        assert!((g_khz - 0.4).abs() < 0.02, "gamma_eff {g_khz}");
        assert!((d.f_r - 41.0).abs() < 1.0, "f_r {}", d.f_r);
        assert!((d.f_b - 172.0).abs() < 2.0, "f_b {}", d.f_b);
        assert!(d.f_c.is_none());
    }

    #[test]
    fn zero_coupling() {
        let mut p = SystemParams::membrane();
        p.alpha_mag = 0.0;
        let d = derive(&p).unwrap();
        assert_eq!(d.gamma_opt, 0.0);
        assert_eq!(d.n_m, d.n_th);
        assert_eq!(d.f_r, 0.0);
        assert_eq!(d.f_b, 0.0);
    }

    #[test]
    fn heating_rejected() {
        let mut p = SystemParams::membrane();
        p.detuning = p.omega_m;
        assert!(matches!(derive(&p), Err(Error::HeatingRegime { .. })));
    }

    #[test]
    fn bath_parts() {
        assert!(matches!(
            Bath::from_parts(Some(0.02), Some(3.0)),
            Err(Error::InvalidBath(_))
        ));
        assert_eq!(Bath::from_parts(None, Some(3.0)).unwrap(), Bath::Occupancy(3.0));
        let n = Bath::Temperature(0.02).occupancy(TWO_PI * 2e6);
        assert!((n - 208.4).abs() < 0.1, "{n}");
    }

    #[test]
    fn occupancy_breakdown_membrane() {
        let b = occupancy_regime(&SystemParams::membrane()).unwrap();
        assert!((b.bath_part - 0.053).abs() < 5e-4, "{}", b.bath_part);
        assert!((b.backaction_part - 0.016).abs() < 5e-4, "{}", b.backaction_part);
        assert_eq!(b.regime, CoolingRegime::OpticallyDominated);
        assert!(rel(b.bath_part + b.backaction_part, b.exact) < 1e-12);
        assert!(rel(b.optical_limit.unwrap(), b.exact) < 0.01);
    }

    #[test]
    fn occupancy_limits() {
        let mut p = SystemParams::membrane();
        p.alpha_mag = 0.0;
        let b = occupancy_regime(&p).unwrap();
        assert_eq!(b.exact, p.n_th());
        // cold bath, weak drive: n_M ~ (gamma_opt/gamma) n_opt
        let mut p = SystemParams::membrane();
        p.bath = Bath::Occupancy(0.0);
        p.alpha_mag = TWO_PI * 10.0;
        let b = occupancy_regime(&p).unwrap();
        assert_eq!(b.regime, CoolingRegime::IntrinsicallyDominated);
        assert!(rel(b.exact, b.intrinsic_limit) < 0.05);
    }

    #[test]
    fn desk_preset_is_scaled() {
        for n in [0.05, 0.1, 0.3] {
            let d = derive(&SystemParams::desk(n)).unwrap();
            assert!((d.gamma_eff - 1.0).abs() < 1e-12);
            assert!(rel(d.n_m, n) < 1e-12);
            assert!(rel(d.n_opt, n) < 1e-12);
        }
    }

    #[test]
    fn asymmetry_rejected() {
        let mut tc = TwoCavityParams::symmetric(SystemParams::membrane(), 0.0, 0.0);
        assert!(tc.derive_symmetric().is_ok());
        tc.cavity2.alpha_mag *= 1.05;
        assert!(matches!(tc.derive_symmetric(), Err(Error::Asymmetric(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn params() -> impl Strategy<Value = SystemParams> {
            (1.0e5..1.0e8f64, 1e-8..1e-3f64, 0.05..2.0f64, 0.2..1.0f64, 1e-4..0.05f64, 0.0..500.0f64, 0.5..1.5f64)
                .prop_map(|(wm, q, kr, eta, ar, nth, det)| SystemParams {
                    omega_m: wm,
                    gamma: wm * q,
                    kappa: wm * kr,
                    kappa_r: wm * kr * eta,
                    alpha_mag: wm * kr * ar,
                    detuning: -wm * det,
                    bath: Bath::Occupancy(nth),
                    omega_eff: None,
                    bare_coupling: None,
                })
        }

        proptest! {
            #[test]
            fn weighted_sum_identity(p in params()) {
                let d = derive(&p).unwrap();
                let lhs = d.n_m * (d.gamma + d.gamma_opt);
                let rhs = d.gamma * d.n_th + d.gamma_opt * d.n_opt;
                prop_assert!(rel(lhs, rhs) < 1e-12);
                prop_assert!(rel(d.n_opt, d.a_plus / d.gamma_opt) < 1e-10);
            }

            #[test]
            fn flux_ratio_identity(p in params()) {
                let d = derive(&p).unwrap();
                prop_assert!(rel(d.f_r / d.f_b, d.red_to_blue_identity()) < 1e-12);
            }

            #[test]
            fn n_opt_at_optimal_detuning(mut p in params()) {
                p.detuning = -p.omega_m;
                let d = derive(&p).unwrap();
                let expect = (p.kappa / (4.0 * p.omega_m)).powi(2);
                prop_assert!(rel(d.n_opt, expect) < 1e-12);
            }
        }
    }
}
