//! Dense Lindblad integrator for one or two truncated oscillators.
//!
//! Deliberately plain: fixed-step RK4 on the full density matrix, with its
//! own ladder operators. Used as an independent check of the trajectory
//! ensembles on small Fock spaces.

use num_complex::Complex64;

type C = Complex64;

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub dim: usize,
    pub data: Vec<C>,
}

impl Mat {
    pub fn zeros(dim: usize) -> Self {
        Mat { dim, data: vec![C::new(0.0, 0.0); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = C::new(1.0, 0.0);
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C {
        self.data[r * self.dim + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C) {
        self.data[r * self.dim + c] = v;
    }

    pub fn mul(&self, o: &Mat) -> Mat {
        let n = self.dim;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == C::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * o.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn dagger(&self) -> Mat {
        let n = self.dim;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j].conj();
            }
        }
        out
    }

    pub fn add_scaled(&mut self, o: &Mat, s: C) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b * s;
        }
    }

    pub fn scale(&self, s: C) -> Mat {
        Mat { dim: self.dim, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn trace(&self) -> C {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// `Tr(self * op)`.
    pub fn expect(&self, op: &Mat) -> C {
        let n = self.dim;
        let mut s = C::new(0.0, 0.0);
        for i in 0..n {
            for k in 0..n {
                s += self.data[i * n + k] * op.data[k * n + i];
            }
        }
        s
    }

    pub fn max_abs_diff(&self, o: &Mat) -> f64 {
        self.data.iter().zip(&o.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

/// Truncated Fock space of `modes` oscillators with levels `0..=n_max`.
#[derive(Debug, Clone, Copy)]
pub struct FockSpace {
    pub modes: usize,
    pub n_max: usize,
}

impl FockSpace {
    pub fn dim(&self) -> usize {
        (self.n_max + 1).pow(self.modes as u32)
    }

    /// Occupation of each mode for basis index `i`; mode 0 is most significant.
    pub fn occupations(&self, i: usize) -> Vec<usize> {
        let base = self.n_max + 1;
        let mut out = vec![0; self.modes];
        let mut r = i;
        for m in (0..self.modes).rev() {
            out[m] = r % base;
            r /= base;
        }
        out
    }

    pub fn index(&self, occ: &[usize]) -> usize {
        occ.iter().fold(0, |acc, &n| acc * (self.n_max + 1) + n)
    }

    pub fn lower(&self, mode: usize) -> Mat {
        let mut m = Mat::zeros(self.dim());
        for i in 0..self.dim() {
            let mut occ = self.occupations(i);
            let n = occ[mode];
            if n > 0 {
                occ[mode] = n - 1;
                m.set(self.index(&occ), i, C::new((n as f64).sqrt(), 0.0));
            }
        }
        m
    }

    pub fn number(&self, mode: usize) -> Mat {
        let a = self.lower(mode);
        a.dagger().mul(&a)
    }
}

/// Unconditioned dynamics: every mode is damped towards occupancy
/// `up / (down - up)`; mode 1 (if present) is detuned by `delta`.
#[derive(Debug, Clone)]
pub struct MasterEquation {
    pub space: FockSpace,
    pub hamiltonian: Mat,
    pub collapse: Vec<Mat>,
    decay: Mat,
}

impl MasterEquation {
    /// `down` and `up` are the total phonon loss and gain rates per mode.
    pub fn new(modes: usize, n_max: usize, down: f64, up: f64, delta: f64) -> Self {
        let space = FockSpace { modes, n_max };
        let dim = space.dim();
        let mut hamiltonian = Mat::zeros(dim);
        if modes > 1 {
            hamiltonian = space.number(1).scale(C::new(delta, 0.0));
        }
        let mut collapse = Vec::new();
        for m in 0..modes {
            let a = space.lower(m);
            collapse.push(a.scale(C::new(down.sqrt(), 0.0)));
            collapse.push(a.dagger().scale(C::new(up.sqrt(), 0.0)));
        }
        let mut decay = Mat::zeros(dim);
        for l in &collapse {
            decay.add_scaled(&l.dagger().mul(l), C::new(1.0, 0.0));
        }
        MasterEquation { space, hamiltonian, collapse, decay }
    }

    pub fn rhs(&self, rho: &Mat) -> Mat {
        let i = C::new(0.0, 1.0);
        let hr = self.hamiltonian.mul(rho);
        let rh = rho.mul(&self.hamiltonian);
        let mut out = Mat::zeros(rho.dim);
        out.add_scaled(&hr, -i);
        out.add_scaled(&rh, i);
        for l in &self.collapse {
            out.add_scaled(&l.mul(rho).mul(&l.dagger()), C::new(1.0, 0.0));
        }
        out.add_scaled(&self.decay.mul(rho), C::new(-0.5, 0.0));
        out.add_scaled(&rho.mul(&self.decay), C::new(-0.5, 0.0));
        out
    }

    fn rk4_step(&self, rho: &Mat, dt: f64) -> Mat {
        let k1 = self.rhs(rho);
        let mut y = rho.clone();
        y.add_scaled(&k1, C::new(0.5 * dt, 0.0));
        let k2 = self.rhs(&y);
        let mut y = rho.clone();
        y.add_scaled(&k2, C::new(0.5 * dt, 0.0));
        let k3 = self.rhs(&y);
        let mut y = rho.clone();
        y.add_scaled(&k3, C::new(dt, 0.0));
        let k4 = self.rhs(&y);
        let mut out = rho.clone();
        out.add_scaled(&k1, C::new(dt / 6.0, 0.0));
        out.add_scaled(&k2, C::new(dt / 3.0, 0.0));
        out.add_scaled(&k3, C::new(dt / 3.0, 0.0));
        out.add_scaled(&k4, C::new(dt / 6.0, 0.0));
        out
    }

    /// Integrates for `duration` with at most `max_dt` per step.
    pub fn evolve(&self, rho: &Mat, duration: f64, max_dt: f64) -> Mat {
        if duration <= 0.0 {
            return rho.clone();
        }
        let steps = (duration / max_dt).ceil().max(1.0) as usize;
        let dt = duration / steps as f64;
        let mut r = rho.clone();
        for _ in 0..steps {
            r = self.rk4_step(&r, dt);
        }
        r
    }

    /// Long-time limit from the vacuum, stopping once a further `1/rate`
    /// changes no element by more than `tol`.
    pub fn steady_state(&self, rate: f64, max_dt: f64, tol: f64) -> Mat {
        let mut rho = Mat::zeros(self.space.dim());
        rho.set(0, 0, C::new(1.0, 0.0));
        for _ in 0..10_000 {
            let next = self.evolve(&rho, 1.0 / rate, max_dt);
            let diff = next.max_abs_diff(&rho);
            rho = next;
            if diff < tol {
                break;
            }
        }
        rho
    }

    /// `L rho L^dag / Tr(...)`.
    pub fn condition(rho: &Mat, l: &Mat) -> Mat {
        let out = l.mul(rho).mul(&l.dagger());
        let tr = out.trace();
        out.scale(tr.inv())
    }
}

/// Product of truncated thermal states, renormalized.
pub fn thermal_state(space: FockSpace, n: f64) -> Mat {
    let dim = space.dim();
    let mut rho = Mat::zeros(dim);
    let ratio = n / (n + 1.0);
    let mut total = 0.0;
    for i in 0..dim {
        let p: f64 = space.occupations(i).iter().map(|&k| ratio.powi(k as i32)).product();
        rho.set(i, i, C::new(p, 0.0));
        total += p;
    }
    rho.scale(C::new(1.0 / total, 0.0))
}
