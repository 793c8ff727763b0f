//! Small statistics and random-number helpers shared by the estimators.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Generator for work item `stream` under `root_seed`.
///
/// Each item draws from its own ChaCha stream, so results do not depend on
/// how items are scheduled across threads.
pub fn stream_rng(root_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(stream);
    rng
}

/// Circular complex Gaussian with `E|z|^2 = 1`.
#[inline]
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Delete-one jackknife standard error of a statistic built from `groups`
/// independent groups. `estimate(None)` uses every group,
/// `estimate(Some(i))` leaves group `i` out.
pub fn jackknife<F>(groups: usize, estimate: F) -> (f64, f64)
where
    F: Fn(Option<usize>) -> f64,
{
    let full = estimate(None);
    if groups < 2 {
        return (full, f64::NAN);
    }
    let loo: Vec<f64> = (0..groups).map(|i| estimate(Some(i))).collect();
    let finite: Vec<f64> = loo.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return (full, f64::NAN);
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = (n - 1.0) / n * finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (full, var.sqrt())
}

/// Vector-valued jackknife: each call returns one value per output bin.
pub fn jackknife_vec<F>(groups: usize, estimate: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(Option<usize>) -> Vec<f64>,
{
    let full = estimate(None);
    let m = full.len();
    if groups < 2 {
        return (full, vec![f64::NAN; m]);
    }
    let loo: Vec<Vec<f64>> = (0..groups).map(|i| estimate(Some(i))).collect();
    let mut se = vec![f64::NAN; m];
    for k in 0..m {
        let vals: Vec<f64> = loo.iter().map(|v| v[k]).filter(|v| v.is_finite()).collect();
        if vals.len() < 2 {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        se[k] = ((n - 1.0) / n * vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt();
    }
    (full, se)
}
