//! Photon-counting estimators: g2 from click records, the witness built from
//! two conditional correlators, first-blue-after-red statistics and the
//! classical inequalities.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{witness_from_g2, Color, Detector, DetectorTag};
use crate::stats::stream_rng;
use crate::trajectory::ClickRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G2Options {
    pub tau_max: f64,
    pub bin: f64,
    /// Block length for the bootstrap; `None` uses whole records as blocks.
    pub block: Option<f64>,
    /// Bootstrap resamples; zero disables the bootstrap.
    pub bootstrap: usize,
    pub seed: u64,
}

impl G2Options {
    pub fn new(tau_max: f64, bin: f64) -> Self {
        G2Options { tau_max, bin, block: None, bootstrap: 0, seed: 0 }
    }

    fn nbins(&self) -> Result<usize> {
        if !(self.bin > 0.0) || !(self.tau_max >= self.bin) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < bin <= tau_max, got bin {} and tau_max {}",
                self.bin, self.tau_max
            )));
        }
        Ok((self.tau_max / self.bin + 1e-9).floor() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    /// Bin centers.
    pub tau: Vec<f64>,
    pub values: Vec<f64>,
    /// Poisson errors from the pair counts.
    pub std_errors: Vec<f64>,
    pub bootstrap_errors: Option<Vec<f64>>,
    /// Ordered pairs per bin.
    pub counts: Vec<u64>,
    /// Conditioning events whose bin lies wholly inside the record.
    pub from_events: Vec<u64>,
    pub from: DetectorTag,
    pub to: DetectorTag,
    pub bin_width: f64,
    pub n_from: u64,
    pub n_to: u64,
    pub duration: f64,
}

impl CorrelationEstimate {
    /// Bootstrap error where available, Poisson otherwise.
    pub fn best_errors(&self) -> &[f64] {
        self.bootstrap_errors.as_deref().unwrap_or(&self.std_errors)
    }

    /// CSV with columns `tau,value,std_error,counts`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tau,value,std_error,counts")?;
        for k in 0..self.tau.len() {
            writeln!(w, "{},{},{},{}", self.tau[k], self.values[k], self.best_errors()[k], self.counts[k])?;
        }
        Ok(())
    }
}

/// Counts for one block of one record.
#[derive(Debug, Clone)]
struct Block {
    pairs: Vec<u32>,
    from_ok: Vec<u32>,
    n_from: u64,
    n_to: u64,
    duration: f64,
}

/// Blocks for several `(from, to)` pairs over a common partition.
fn blocks_for(
    records: &[ClickRecord],
    pairs: &[(DetectorTag, DetectorTag)],
    nbins: usize,
    bin: f64,
    block: Option<f64>,
) -> Vec<Vec<Block>> {
    let per_record: Vec<Vec<Vec<Block>>> = records
        .par_iter()
        .map(|rec| {
            let len = block.unwrap_or(rec.duration).min(rec.duration);
            let nblocks = ((rec.duration / len).ceil() as usize).max(1);
            pairs
                .iter()
                .map(|&(from, to)| {
                    let tf = rec.times(from);
                    let tt = rec.times(to);
                    let mut blocks: Vec<Block> = (0..nblocks)
                        .map(|b| Block {
                            pairs: vec![0; nbins],
                            from_ok: vec![0; nbins],
                            n_from: 0,
                            n_to: 0,
                            duration: (rec.duration - b as f64 * len).min(len),
                        })
                        .collect();
                    let which = |t: f64| ((t / len) as usize).min(nblocks - 1);
                    for &t in &tt {
                        blocks[which(t)].n_to += 1;
                    }
                    let mut j = 0;
                    for &t in &tf {
                        let blk = &mut blocks[which(t)];
                        blk.n_from += 1;
                        let inside = (((rec.duration - t) / bin).floor() as usize).min(nbins);
                        for v in &mut blk.from_ok[..inside] {
                            *v += 1;
                        }
                        while j < tt.len() && tt[j] <= t {
                            j += 1;
                        }
                        let mut i = j;
                        while i < tt.len() {
                            let k = ((tt[i] - t) / bin) as usize;
                            if k >= inside {
                                break;
                            }
                            blk.pairs[k] += 1;
                            i += 1;
                        }
                    }
                    blocks
                })
                .collect()
        })
        .collect();
    let mut out = vec![Vec::new(); pairs.len()];
    for rec in per_record {
        for (p, blocks) in rec.into_iter().enumerate() {
            out[p].extend(blocks);
        }
    }
    out
}

struct Totals {
    pairs: Vec<u64>,
    from_ok: Vec<u64>,
    n_from: u64,
    n_to: u64,
    duration: f64,
}

fn totals<'a, I: Iterator<Item = &'a Block>>(blocks: I, nbins: usize) -> Totals {
    let mut t = Totals { pairs: vec![0; nbins], from_ok: vec![0; nbins], n_from: 0, n_to: 0, duration: 0.0 };
    for b in blocks {
        for k in 0..nbins {
            t.pairs[k] += b.pairs[k] as u64;
            t.from_ok[k] += b.from_ok[k] as u64;
        }
        t.n_from += b.n_from;
        t.n_to += b.n_to;
        t.duration += b.duration;
    }
    t
}

fn g2_values(t: &Totals, bin: f64) -> Vec<f64> {
    let rate = t.n_to as f64 / t.duration;
    t.pairs
        .iter()
        .zip(&t.from_ok)
        .map(|(&c, &f)| if f > 0 && rate > 0.0 { c as f64 / (f as f64 * bin * rate) } else { f64::NAN })
        .collect()
}

/// Standard deviation across resamples, ignoring non-finite draws.
fn spread(samples: &[Vec<f64>], m: usize) -> Vec<f64> {
    (0..m)
        .map(|k| {
            let v: Vec<f64> = samples.iter().map(|s| s[k]).filter(|x| x.is_finite()).collect();
            if v.len() < 2 {
                return f64::NAN;
            }
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect()
}

/// Block-bootstrap resamples: `stat` maps resampled blocks to a vector.
fn bootstrap<F>(nblocks: usize, reps: usize, seed: u64, stat: F) -> Vec<Vec<f64>>
where
    F: Fn(&[usize]) -> Vec<f64> + Sync,
{
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let idx: Vec<usize> = (0..nblocks).map(|_| rng.random_range(0..nblocks)).collect();
            stat(&idx)
        })
        .collect()
}

fn estimate_from_blocks(
    blocks: &[Block],
    from: DetectorTag,
    to: DetectorTag,
    nbins: usize,
    opts: &G2Options,
) -> CorrelationEstimate {
    let t = totals(blocks.iter(), nbins);
    let values = g2_values(&t, opts.bin);
    let std_errors = values
        .iter()
        .zip(&t.pairs)
        .map(|(&v, &c)| if c > 0 { v / (c as f64).sqrt() } else { f64::NAN })
        .collect();
    let bootstrap_errors = (opts.bootstrap > 1).then(|| {
        let s = bootstrap(blocks.len(), opts.bootstrap, opts.seed, |idx| {
            g2_values(&totals(idx.iter().map(|&i| &blocks[i]), nbins), opts.bin)
        });
        spread(&s, nbins)
    });
    CorrelationEstimate {
        tau: (0..nbins).map(|k| (k as f64 + 0.5) * opts.bin).collect(),
        values,
        std_errors,
        bootstrap_errors,
        counts: t.pairs,
        from_events: t.from_ok,
        from,
        to,
        bin_width: opts.bin,
        n_from: t.n_from,
        n_to: t.n_to,
        duration: t.duration,
    }
}

fn require_events(records: &[ClickRecord], tags: &[DetectorTag]) -> Result<()> {
    for &tag in tags {
        if records.iter().all(|r| r.count(tag) == 0) {
            return Err(Error::EmptyChannel(format!("no {tag} events in the record")));
        }
    }
    Ok(())
}

/// `g2(tau_k) = [C_k / (N_from bin)] / (N_to / duration)` with ordered pairs
/// `0 < t_to - t_from`, pooled over all records.
pub fn estimate_g2_with(
    records: &[ClickRecord],
    from: DetectorTag,
    to: DetectorTag,
    opts: &G2Options,
) -> Result<CorrelationEstimate> {
    let nbins = opts.nbins()?;
    require_events(records, &[from, to])?;
    let blocks = blocks_for(records, &[(from, to)], nbins, opts.bin, opts.block).remove(0);
    Ok(estimate_from_blocks(&blocks, from, to, nbins, opts))
}

pub fn estimate_g2(
    rec: &ClickRecord,
    from: DetectorTag,
    to: DetectorTag,
    tau_max: f64,
    bin: f64,
) -> Result<CorrelationEstimate> {
    estimate_g2_with(std::slice::from_ref(rec), from, to, &G2Options::new(tau_max, bin))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessEstimate {
    pub tau: Vec<f64>,
    pub values: Vec<f64>,
    /// First-order propagation of the Poisson errors.
    pub std_errors: Vec<f64>,
    pub bootstrap_errors: Option<Vec<f64>>,
    /// Bins where the two correlators differ by less than two standard errors.
    pub degenerate: Vec<bool>,
    pub g2_aa: CorrelationEstimate,
    pub g2_ba: CorrelationEstimate,
}

impl WitnessEstimate {
    pub fn best_errors(&self) -> &[f64] {
        self.bootstrap_errors.as_deref().unwrap_or(&self.std_errors)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tau,value,std_error,counts")?;
        for k in 0..self.tau.len() {
            let counts = self.g2_aa.counts[k] + self.g2_ba.counts[k];
            writeln!(w, "{},{},{},{}", self.tau[k], self.values[k], self.best_errors()[k], counts)?;
        }
        Ok(())
    }
}

fn witness_values(aa: &[f64], ba: &[f64]) -> Vec<f64> {
    aa.iter().zip(ba).map(|(&a, &b)| witness_from_g2(a, b).unwrap_or(f64::NAN)).collect()
}

const A_RED: DetectorTag = DetectorTag::new(Detector::A, Color::Red);
const A_BLUE: DetectorTag = DetectorTag::new(Detector::A, Color::Blue);
const B_BLUE: DetectorTag = DetectorTag::new(Detector::B, Color::Blue);

/// Bin-wise witness from `g2_{A_b|A_r}` and `g2_{B_b|A_r}`.
pub fn estimate_witness(records: &[ClickRecord], opts: &G2Options) -> Result<WitnessEstimate> {
    let nbins = opts.nbins()?;
    require_events(records, &[A_RED, A_BLUE, B_BLUE])?;
    let mut blocks = blocks_for(records, &[(A_RED, A_BLUE), (A_RED, B_BLUE)], nbins, opts.bin, opts.block);
    let ba_blocks = blocks.pop().unwrap();
    let aa_blocks = blocks.pop().unwrap();
    let plain = G2Options { bootstrap: 0, ..*opts };
    let mut aa = estimate_from_blocks(&aa_blocks, A_RED, A_BLUE, nbins, &plain);
    let mut ba = estimate_from_blocks(&ba_blocks, A_RED, B_BLUE, nbins, &plain);
    let values = witness_values(&aa.values, &ba.values);
    let mut std_errors = Vec::with_capacity(nbins);
    let mut degenerate = Vec::with_capacity(nbins);
    for k in 0..nbins {
        let (a, b) = (aa.values[k], ba.values[k]);
        let (sa, sb) = (aa.std_errors[k], ba.std_errors[k]);
        let d = a - b;
        let s1 = a + b - 1.0;
        let da = 4.0 / (d * d) - 8.0 * s1 / (d * d * d);
        let db = 4.0 / (d * d) + 8.0 * s1 / (d * d * d);
        std_errors.push(((da * sa).powi(2) + (db * sb).powi(2)).sqrt());
        degenerate.push(!(d.abs() >= 2.0 * (sa * sa + sb * sb).sqrt()));
    }
    let bootstrap_errors = (opts.bootstrap > 1).then(|| {
        let s = bootstrap(aa_blocks.len(), opts.bootstrap, opts.seed, |idx| {
            let ga = g2_values(&totals(idx.iter().map(|&i| &aa_blocks[i]), nbins), opts.bin);
            let gb = g2_values(&totals(idx.iter().map(|&i| &ba_blocks[i]), nbins), opts.bin);
            let mut v = witness_values(&ga, &gb);
            v.extend(ga);
            v.extend(gb);
            v
        });
        let all = spread(&s, 3 * nbins);
        aa.bootstrap_errors = Some(all[nbins..2 * nbins].to_vec());
        ba.bootstrap_errors = Some(all[2 * nbins..].to_vec());
        all[..nbins].to_vec()
    });
    Ok(WitnessEstimate { tau: aa.tau.clone(), values, std_errors, bootstrap_errors, degenerate, g2_aa: aa, g2_ba: ba })
}

/// Delay at which a noisy, increasing curve crosses `level`: a weighted
/// straight-line fit of `ln(value)` over bins within `window` of the first
/// bin at or above `level`.
pub fn crossing_time(tau: &[f64], values: &[f64], errors: &[f64], level: f64, window: f64) -> Option<f64> {
    let first = (0..tau.len()).find(|&k| values[k].is_finite() && values[k] >= level)?;
    let t0 = tau[first];
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..tau.len() {
        let (x, v, e) = (tau[k], values[k], errors[k]);
        if (x - t0).abs() > window || !(v > 0.0) || !(e > 0.0) || !v.is_finite() {
            continue;
        }
        let y = v.ln();
        let w = (v / e).powi(2);
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let det = sw * sxx - sx * sx;
    if !(det > 0.0) {
        return None;
    }
    let slope = (sw * sxy - sx * sy) / det;
    let icpt = (sy - slope * sx) / sw;
    if !(slope > 0.0) {
        return None;
    }
    Some((level.ln() - icpt) / slope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstBlueStats {
    pub tau: Vec<f64>,
    /// First blue clicks per delay bin at each detector.
    pub a_first: Vec<u64>,
    pub b_first: Vec<u64>,
    /// `P(A_b first | A_r)` per bin.
    pub p_a_first: Vec<f64>,
    pub p_a_first_se: Vec<f64>,
    /// Waiting-time density per unit delay, normalized over all conditioning clicks.
    pub density: Vec<f64>,
    pub conditioning: u64,
    /// Conditioning clicks with no blue click before the record ended.
    pub truncated: u64,
    /// Overall `P(A_b first)`.
    pub p_a_total: f64,
}

/// Delay and detector of the next blue click after each `A_r` click.
pub fn first_blue_after_red(records: &[ClickRecord], tau_max: f64, bin: f64) -> Result<FirstBlueStats> {
    let nbins = G2Options::new(tau_max, bin).nbins()?;
    require_events(records, &[A_RED])?;
    let mut a_first = vec![0u64; nbins];
    let mut b_first = vec![0u64; nbins];
    let (mut conditioning, mut truncated, mut a_total, mut b_total) = (0u64, 0u64, 0u64, 0u64);
    for rec in records {
        let mut settle = |t_red: f64, t: f64, det: Detector, a: &mut Vec<u64>, b: &mut Vec<u64>| {
            let k = ((t - t_red) / bin) as usize;
            match det {
                Detector::A => a_total += 1,
                _ => b_total += 1,
            }
            if k < nbins {
                match det {
                    Detector::A => a[k] += 1,
                    _ => b[k] += 1,
                }
            }
        };
        // every A_r click waiting for a blue click; all settle on the same one
        let mut waiting: Vec<f64> = Vec::new();
        for e in &rec.events {
            if e.tag == A_RED {
                conditioning += 1;
                waiting.push(e.time);
            } else if e.tag.color == Color::Blue && !waiting.is_empty() {
                for &t_red in &waiting {
                    settle(t_red, e.time, e.tag.detector, &mut a_first, &mut b_first);
                }
                waiting.clear();
            }
        }
        truncated += waiting.len() as u64;
    }
    let total = conditioning as f64;
    let mut p = Vec::with_capacity(nbins);
    let mut pse = Vec::with_capacity(nbins);
    let mut density = Vec::with_capacity(nbins);
    for k in 0..nbins {
        let n = (a_first[k] + b_first[k]) as f64;
        let pk = a_first[k] as f64 / n;
        p.push(if n > 0.0 { pk } else { f64::NAN });
        pse.push(if n > 0.0 { (pk * (1.0 - pk) / n).sqrt().max(0.5 / n) } else { f64::NAN });
        density.push(n / (total * bin));
    }
    Ok(FirstBlueStats {
        tau: (0..nbins).map(|k| (k as f64 + 0.5) * bin).collect(),
        a_first,
        b_first,
        p_a_first: p,
        p_a_first_se: pse,
        density,
        conditioning,
        truncated,
        p_a_total: a_total as f64 / (a_total + b_total) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InequalityPoint {
    pub tau: f64,
    /// Side that a classical field keeps at or below `rhs`.
    pub lhs: f64,
    pub rhs: f64,
    pub sigma: f64,
    /// `(lhs - rhs) / sigma`.
    pub significance: f64,
    /// Significance above three.
    pub violated: bool,
}

fn point(tau: f64, lhs: f64, rhs: f64, sigma: f64) -> InequalityPoint {
    let significance = (lhs - rhs) / sigma;
    InequalityPoint { tau, lhs, rhs, sigma, significance, violated: significance > 3.0 }
}

/// `[g2_{b|r}(tau)]^2 <= g2_{r|r}(0) g2_{b|b}(0)`, with the zero-delay values
/// taken from the first bin of the same-color estimates.
pub fn cauchy_schwarz_test(
    cross: &CorrelationEstimate,
    same_red: &CorrelationEstimate,
    same_blue: &CorrelationEstimate,
) -> Vec<InequalityPoint> {
    let (r0, sr) = (same_red.values[0], same_red.best_errors()[0]);
    let (b0, sb) = (same_blue.values[0], same_blue.best_errors()[0]);
    let rhs = r0 * b0;
    let s_rhs = ((sr * b0).powi(2) + (sb * r0).powi(2)).sqrt();
    (0..cross.tau.len())
        .filter(|&k| cross.counts[k] > 0)
        .map(|k| {
            let g = cross.values[k];
            let s = 2.0 * g * cross.best_errors()[k];
            point(cross.tau[k], g * g, rhs, (s * s + s_rhs * s_rhs).sqrt())
        })
        .collect()
}

/// `g_AA / (g_AA + g_BA) <= 2/3` for classical fields.
pub fn ratio_test(aa: &CorrelationEstimate, ba: &CorrelationEstimate) -> Vec<InequalityPoint> {
    (0..aa.tau.len())
        .filter(|&k| aa.counts[k] > 0 && ba.counts[k] > 0)
        .map(|k| {
            let (a, b) = (aa.values[k], ba.values[k]);
            let (sa, sb) = (aa.best_errors()[k], ba.best_errors()[k]);
            let s = a + b;
            let r = a / s;
            let sigma = ((b / (s * s) * sa).powi(2) + (a / (s * s) * sb).powi(2)).sqrt();
            point(aa.tau[k], r, 2.0 / 3.0, sigma)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalReport {
    pub cauchy_schwarz: Option<Vec<InequalityPoint>>,
    pub ratio: Option<Vec<InequalityPoint>>,
    pub cauchy_schwarz_violated: bool,
    pub ratio_violated: bool,
    pub max_significance: f64,
}

/// Runs whichever inequalities the records support: Cauchy-Schwarz on a
/// single-detector record, the 2/3 ratio bound on an A/B record.
pub fn classical_tests(records: &[ClickRecord], opts: &G2Options) -> Result<ClassicalReport> {
    let has = |t: DetectorTag| records.iter().any(|r| r.count(t) > 0);
    let s_red = DetectorTag::new(Detector::Single, Color::Red);
    let s_blue = DetectorTag::new(Detector::Single, Color::Blue);
    let cauchy_schwarz = if has(s_red) && has(s_blue) {
        let cross = estimate_g2_with(records, s_red, s_blue, opts)?;
        let rr = estimate_g2_with(records, s_red, s_red, opts)?;
        let bb = estimate_g2_with(records, s_blue, s_blue, opts)?;
        Some(cauchy_schwarz_test(&cross, &rr, &bb))
    } else {
        None
    };
    let ratio = if has(A_RED) && has(A_BLUE) && has(B_BLUE) {
        let aa = estimate_g2_with(records, A_RED, A_BLUE, opts)?;
        let ba = estimate_g2_with(records, A_RED, B_BLUE, opts)?;
        Some(ratio_test(&aa, &ba))
    } else {
        None
    };
    if cauchy_schwarz.is_none() && ratio.is_none() {
        return Err(Error::EmptyChannel("records support neither inequality".into()));
    }
    let all = cauchy_schwarz.iter().chain(ratio.iter()).flatten();
    let max_significance = all.map(|p| p.significance).filter(|s| s.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    Ok(ClassicalReport {
        cauchy_schwarz_violated: cauchy_schwarz.as_ref().is_some_and(|v| v.iter().any(|p| p.violated)),
        ratio_violated: ratio.as_ref().is_some_and(|v| v.iter().any(|p| p.violated)),
        cauchy_schwarz,
        ratio,
        max_significance,
    })
}
