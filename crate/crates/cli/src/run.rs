//! Mode dispatch and the individual commands.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use optomech_entangle::analytic::{
    g2_single_cross, g2_single_same, g2_two_cavity, n_max, tau_max as violation_tau, witness_rm, Color, Detector,
    DetectorTag, Direction,
};
use optomech_entangle::cooling::{derive, occupancy_regime, DerivedParams, SystemParams, TwoCavityParams, TWO_PI};
use optomech_entangle::counting::{estimate_g2_with, estimate_witness, CorrelationEstimate, G2Options};
use optomech_entangle::heterodyne::{
    reconstruct_g2, synthesize_surrogate, unravel_qsd, unravel_qsd_single, HeterodyneRecord, QsdOptions,
    ReconstructOptions, Reconstruction,
};
use optomech_entangle::trajectory::{
    build_channels, build_single_channels, simulate_records, ClickRecord, EnsembleConfig, Topology, DEFAULT_EPS_TRUNC,
};

use crate::config::{Format, Mode, RunConfig, Source, Units};
use crate::error::{CliError, CliResult};
use crate::svg::{heat_map, line_plot, Grid, Series};
use crate::table::{Cell, Table};

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

const S_R: DetectorTag = DetectorTag::new(Detector::Single, Color::Red);
const S_B: DetectorTag = DetectorTag::new(Detector::Single, Color::Blue);
const A_R: DetectorTag = DetectorTag::new(Detector::A, Color::Red);
const A_B: DetectorTag = DetectorTag::new(Detector::A, Color::Blue);
const B_B: DetectorTag = DetectorTag::new(Detector::B, Color::Blue);

/// Files written by one run, collected for the manifest.
pub struct Outputs {
    dir: PathBuf,
    format: Format,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path, format: Format) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), format, files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn table(&mut self, stem: &str, t: &Table) -> CliResult<()> {
        let name = format!("{stem}.{}", self.format.extension());
        self.write(&name, t.render(self.format).as_bytes())
    }

    pub fn finish(mut self, cfg: &RunConfig) -> CliResult<Vec<String>> {
        let mut manifest = cfg.manifest();
        manifest.push_str("\n# outputs\n");
        for f in &self.files {
            manifest.push_str(&format!("#   {f}\n"));
        }
        self.write("manifest.cfg", manifest.as_bytes())?;
        Ok(self.files)
    }
}

pub fn run(cfg: &RunConfig, out_dir: &Path) -> CliResult<Vec<String>> {
    let mut out = Outputs::new(out_dir, cfg.format)?;
    match cfg.mode {
        Mode::Derive => cmd_derive(cfg, &mut out)?,
        Mode::Sweep => cmd_sweep(cfg, &mut out)?,
        Mode::SimulateJumps => cmd_jumps(cfg, &mut out)?,
        Mode::SimulateHeterodyne => cmd_heterodyne(cfg, &mut out)?,
        Mode::Analyze => cmd_analyze(cfg, &mut out)?,
        Mode::WitnessMap => cmd_witness_map(cfg, &mut out)?,
    }
    out.finish(cfg)
}

fn provenance(cfg: &RunConfig) -> String {
    format!("generated by optomech {} from the manifest below\n{}", env!("CARGO_PKG_VERSION"), cfg.manifest())
}

fn warn(lines: &[String]) {
    for w in lines {
        eprintln!("warning: {w}");
    }
}

struct Labels {
    si: bool,
}

impl Labels {
    fn freq(&self, name: &str, v: f64) -> Vec<Cell> {
        if self.si {
            vec![format!("{name}/2pi").into(), (v / TWO_PI).into(), "Hz".into()]
        } else {
            vec![name.into(), v.into(), "gamma_eff".into()]
        }
    }

    fn rate(&self, name: &str, v: f64) -> Vec<Cell> {
        vec![name.into(), v.into(), if self.si { "1/s" } else { "gamma_eff" }.into()]
    }

    fn time(&self, name: &str, v: f64) -> Vec<Cell> {
        vec![name.into(), v.into(), if self.si { "s" } else { "1/gamma_eff" }.into()]
    }

    fn plain(&self, name: &str, v: f64) -> Vec<Cell> {
        vec![name.into(), v.into(), "".into()]
    }

    fn time_axis(&self) -> &'static str {
        if self.si {
            "tau (s)"
        } else {
            "gamma_eff tau"
        }
    }
}

fn print_table(t: &Table) {
    for row in &t.rows {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Num(v) if v.abs() >= 1e4 || (v.abs() < 1e-3 && *v != 0.0) => format!("{v:.4e}"),
                Cell::Num(v) => format!("{v:.4}"),
                Cell::Text(s) => s.clone(),
            })
            .collect();
        match cells.as_slice() {
            [name, value, unit] => say!("{name:<22} {value:>14} {unit}"),
            _ => say!("{}", cells.join("  ")),
        }
    }
}

fn derived_table(d: &DerivedParams, regime: &str, labels: &Labels) -> Table {
    let mut t = Table::new(&["quantity", "value", "unit"]);
    t.push(labels.freq("omega_m", d.omega_m));
    t.push(labels.freq("gamma", d.gamma));
    t.push(labels.freq("kappa", d.kappa));
    t.push(labels.freq("alpha", d.alpha_mag));
    t.push(labels.plain("n_th", d.n_th));
    t.push(labels.rate("a_minus", d.a_minus));
    t.push(labels.rate("a_plus", d.a_plus));
    t.push(labels.freq("gamma_opt", d.gamma_opt));
    t.push(labels.freq("gamma_eff", d.gamma_eff));
    t.push(labels.plain("n_opt", d.n_opt));
    t.push(labels.plain("n_M", d.n_m));
    t.push(labels.plain("eta_esc", d.eta_esc));
    t.push(labels.rate("f_r", d.f_r));
    t.push(labels.rate("f_b", d.f_b));
    if let Some(fc) = d.f_c {
        t.push(labels.rate("f_c", fc));
    }
    if let Some(bc) = d.blue_to_carrier() {
        t.push(labels.plain("f_b/f_c", bc));
    }
    t.push(labels.plain("n_M threshold", n_max()));
    let tau = if d.n_m < n_max() { violation_tau(d.n_m, d.gamma_eff) } else { f64::NAN };
    t.push(labels.time("tau_max", tau));
    t.push(labels.time("cs_crossover", optomech_entangle::analytic::cauchy_schwarz_crossover(d)));
    t.push(vec!["cooling_regime".into(), Cell::Text(regime.into()), "".into()]);
    t
}

fn cmd_derive(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let d = derive(&cfg.system)?;
    warn(&d.warnings);
    let regime = format!("{:?}", occupancy_regime(&cfg.system)?.regime);
    let t = derived_table(&d, &regime, &Labels { si: cfg.units == Units::Si });
    print_table(&t);
    out.table("derived", &t)
}

fn sweep_values(from: f64, to: f64, points: usize, log: bool) -> Vec<f64> {
    (0..points)
        .map(|i| {
            let s = i as f64 / (points - 1) as f64;
            if log {
                (from.ln() + s * (to.ln() - from.ln())).exp()
            } else {
                from + s * (to - from)
            }
        })
        .collect()
}

fn cmd_sweep(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let s = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] section with param, from, to".into()))?;
    let swept = format!("swept_{}", s.param);
    let mut t = Table::new(&[&swept, "n_m", "n_opt", "gamma_opt", "gamma_eff", "f_r", "f_b", "tau_max", "cs_crossover"]);
    for v in sweep_values(s.from, s.to, s.points, s.log) {
        let d = derive(&cfg.system_with(&s.param, v)?)?;
        let tau = if d.n_m < n_max() { violation_tau(d.n_m, d.gamma_eff) } else { f64::NAN };
        t.push(vec![
            v.into(),
            d.n_m.into(),
            d.n_opt.into(),
            d.gamma_opt.into(),
            d.gamma_eff.into(),
            d.f_r.into(),
            d.f_b.into(),
            tau.into(),
            optomech_entangle::analytic::cauchy_schwarz_crossover(&d).into(),
        ]);
    }
    out.table("sweep", &t)?;
    let mut x = t.column(&swept);
    let mut xlabel = format!("{} (base units)", s.param);
    if s.log {
        x.iter_mut().for_each(|v| *v = v.log10());
        xlabel = format!("log10 {xlabel}");
    }
    let threshold = vec![n_max(); x.len()];
    let series = [Series::line("n_M", x.clone(), t.column("n_m")), Series::line("witness threshold", x, threshold)];
    let svg = line_plot(&format!("occupancy versus {}", s.param), &xlabel, "n_M", &series, &provenance(cfg));
    out.write("sweep.svg", svg.as_bytes())?;
    say!("swept {} over {} points", s.param, s.points);
    Ok(())
}

fn clicks_table(records: &[ClickRecord], tags: &[DetectorTag]) -> Table {
    let mut t = Table::new(&["channel", "clicks", "rate"]);
    let duration: f64 = records.iter().map(|r| r.duration).sum();
    for &tag in tags {
        let n: usize = records.iter().map(|r| r.count(tag)).sum();
        t.push(vec![tag.to_string().into(), (n as f64).into(), (n as f64 / duration).into()]);
    }
    t
}

/// Appends `value, std_error, counts[, analytic]` columns for one estimate.
fn estimate_columns(t: &mut Table, name: &str, est: &CorrelationEstimate, analytic: Option<&[f64]>) {
    t.columns.push(name.to_string());
    t.columns.push(format!("{name}_err"));
    t.columns.push(format!("{name}_counts"));
    if analytic.is_some() {
        t.columns.push(format!("{name}_analytic"));
    }
    let err = est.best_errors();
    for (i, row) in t.rows.iter_mut().enumerate() {
        row.push(est.values[i].into());
        row.push(err[i].into());
        row.push((est.counts[i] as f64).into());
        if let Some(a) = analytic {
            row.push(a[i].into());
        }
    }
}

fn tau_table(tau: &[f64]) -> Table {
    let mut t = Table::new(&["tau"]);
    for &v in tau {
        t.push(vec![v.into()]);
    }
    t
}

fn curve(tau: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    tau.iter().map(|&t| f(t)).collect()
}

fn fine_grid(hi: f64) -> Vec<f64> {
    (0..=200).map(|i| hi * i as f64 / 200.0).collect()
}

fn g2_options(cfg: &RunConfig, tau_max: f64, bin: f64, bootstrap: usize) -> G2Options {
    G2Options { bootstrap, seed: cfg.seed, ..G2Options::new(tau_max, bin) }
}

/// Witness and the two correlators behind it, with optional analytic columns.
fn witness_outputs(
    cfg: &RunConfig,
    out: &mut Outputs,
    records: &[ClickRecord],
    opts: &G2Options,
    theory: Option<(&TwoCavityParams, &DerivedParams)>,
) -> CliResult<()> {
    let w = estimate_witness(records, opts)?;
    let labels = Labels { si: cfg.units == Units::Si };
    let analytic = |to: DetectorTag, tau: &[f64]| -> Option<Vec<f64>> {
        theory.map(|(p, d)| curve(tau, |t| g2_two_cavity(t, A_R, to, p, d).map_or(f64::NAN, |v| v.value)))
    };
    let mut t = tau_table(&w.tau);
    estimate_columns(&mut t, "g2_aa", &w.g2_aa, analytic(A_B, &w.tau).as_deref());
    estimate_columns(&mut t, "g2_ba", &w.g2_ba, analytic(B_B, &w.tau).as_deref());
    t.columns.push("witness".into());
    t.columns.push("witness_err".into());
    let wa = theory.map(|(p, d)| curve(&w.tau, |x| witness_rm(x, p, d).map_or(f64::NAN, |v| v.value)));
    if wa.is_some() {
        t.columns.push("witness_analytic".into());
    }
    for (i, row) in t.rows.iter_mut().enumerate() {
        row.push(w.values[i].into());
        row.push(w.best_errors()[i].into());
        if let Some(a) = &wa {
            row.push(a[i].into());
        }
    }
    out.table("g2_witness", &t)?;

    let prov = provenance(cfg);
    let mut series = vec![
        Series::points("A_b | A_r", w.tau.clone(), w.g2_aa.values.clone(), w.g2_aa.best_errors().to_vec()),
        Series::points("B_b | A_r", w.tau.clone(), w.g2_ba.values.clone(), w.g2_ba.best_errors().to_vec()),
    ];
    let fine = fine_grid(opts.tau_max);
    if theory.is_some() {
        series.push(Series::line("A_b | A_r analytic", fine.clone(), analytic(A_B, &fine).unwrap()));
        series.push(Series::line("B_b | A_r analytic", fine.clone(), analytic(B_B, &fine).unwrap()));
    }
    out.write("g2.svg", line_plot("red-conditioned blue correlations", labels.time_axis(), "g2", &series, &prov).as_bytes())?;

    let mut series = vec![Series::points("R_m estimate", w.tau.clone(), w.values.clone(), w.best_errors().to_vec())];
    if let Some((p, d)) = theory {
        series.push(Series::line("R_m analytic", fine.clone(), curve(&fine, |x| witness_rm(x, p, d).map_or(f64::NAN, |v| v.value))));
    }
    series.push(Series::line("entanglement bound", vec![0.0, opts.tau_max], vec![1.0, 1.0]));
    out.write("witness.svg", line_plot("entanglement witness", labels.time_axis(), "R_m", &series, &prov).as_bytes())?;
    let below = (0..w.values.len()).filter(|&i| w.values[i] + 3.0 * w.best_errors()[i] < 1.0).count();
    say!("witness: {below} of {} bins below 1 by more than 3 sigma", w.values.len());
    Ok(())
}

const SINGLE_PAIRS: [(DetectorTag, DetectorTag, &str); 4] =
    [(S_R, S_B, "g2_rb"), (S_B, S_R, "g2_br"), (S_R, S_R, "g2_rr"), (S_B, S_B, "g2_bb")];

fn single_analytic(from: DetectorTag, to: DetectorTag, tau: f64, d: &DerivedParams) -> f64 {
    let v = match (from.color, to.color) {
        (Color::Red, Color::Blue) => g2_single_cross(tau, Direction::BlueGivenRed, d),
        (Color::Blue, Color::Red) => g2_single_cross(tau, Direction::RedGivenBlue, d),
        _ => g2_single_same(tau, d),
    };
    v.map_or(f64::NAN, |f| f.value)
}

fn single_outputs(
    cfg: &RunConfig,
    out: &mut Outputs,
    records: &[ClickRecord],
    opts: &G2Options,
    theory: Option<&DerivedParams>,
) -> CliResult<()> {
    let labels = Labels { si: cfg.units == Units::Si };
    let mut t: Option<Table> = None;
    let mut series = Vec::new();
    let fine = fine_grid(opts.tau_max);
    for (from, to, name) in SINGLE_PAIRS {
        let est = estimate_g2_with(records, from, to, opts)?;
        let table = t.get_or_insert_with(|| tau_table(&est.tau));
        let analytic = theory.map(|d| curve(&est.tau, |x| single_analytic(from, to, x, d)));
        estimate_columns(table, name, &est, analytic.as_deref());
        series.push(Series::points(&format!("{to} | {from}"), est.tau.clone(), est.values.clone(), est.best_errors().to_vec()));
        if let Some(d) = theory {
            series.push(Series::line(&format!("{to} | {from} analytic"), fine.clone(), curve(&fine, |x| single_analytic(from, to, x, d))));
        }
    }
    out.table("g2_single", &t.expect("four pairs"))?;
    let svg = line_plot("single-cavity correlations", labels.time_axis(), "g2", &series, &provenance(cfg));
    out.write("g2.svg", svg.as_bytes())
}

fn cmd_jumps(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let j = &cfg.jumps;
    let p = cfg.pair();
    let (set, d) = match cfg.topology {
        Topology::Pair => {
            let d = p.derive_symmetric()?;
            (build_channels(&p, &d, j.n_max, j.eta)?, d)
        }
        Topology::Single => {
            let d = derive(&cfg.system)?;
            (build_single_channels(&d, j.n_max, j.eta)?, d)
        }
    };
    warn(&d.warnings);
    let mut ens = EnsembleConfig::new(&set, j.trajectories, j.duration, cfg.seed);
    if let Some(b) = j.burn_in {
        ens.burn_in = b;
    }
    let records = simulate_records(&set, &ens)?;
    if j.write_records {
        for r in &records {
            let mut bytes = Vec::new();
            r.write_binary(&mut bytes)?;
            out.write(&format!("records/traj_{:04}.clk", r.stream), &bytes)?;
        }
    }
    let opts = g2_options(cfg, j.tau_max, j.bin, j.bootstrap);
    match cfg.topology {
        Topology::Pair => {
            let tags = [A_R, A_B, DetectorTag::new(Detector::B, Color::Red), B_B];
            out.table("clicks", &clicks_table(&records, &tags))?;
            witness_outputs(cfg, out, &records, &opts, Some((&p, &d)))?;
        }
        Topology::Single => {
            out.table("clicks", &clicks_table(&records, &[S_R, S_B]))?;
            single_outputs(cfg, out, &records, &opts, Some(&d))?;
        }
    }
    let total: usize = records.iter().map(|r| r.events.len()).sum();
    say!("{} trajectories, {total} clicks", records.len());
    Ok(())
}

fn reconstruction_outputs(
    cfg: &RunConfig,
    out: &mut Outputs,
    rec: &HeterodyneRecord,
    theory: Option<(&TwoCavityParams, &DerivedParams)>,
) -> CliResult<Reconstruction> {
    let h = &cfg.heterodyne;
    let pairs: Vec<(DetectorTag, DetectorTag)> = if rec.detectors == [Detector::Single] {
        vec![(S_R, S_B), (S_B, S_R), (S_R, S_R), (S_B, S_B)]
    } else {
        let a_r = A_R;
        vec![(a_r, A_B), (a_r, B_B), (a_r, a_r), (A_B, A_B)]
    };
    let opts = ReconstructOptions {
        shape: h.shape,
        window_half: Some(h.window),
        segment: h.segment,
        ..ReconstructOptions::new(h.lambda, h.tau.clone())
    };
    let r = reconstruct_g2(rec, &pairs, &opts)?;
    warn(&r.warnings);
    let g = rec.params.gamma_eff;
    let quantum = |from: DetectorTag, to: DetectorTag, tau: f64| -> f64 {
        match (theory, from.detector) {
            (Some((_, d)), Detector::Single) => single_analytic(from, to, tau, d),
            (Some((p, d)), _) if from.color == Color::Red && to.color == Color::Blue => {
                g2_two_cavity(tau, from, to, p, d).map_or(f64::NAN, |v| v.value)
            }
            _ => f64::NAN,
        }
    };
    let mut t = Table::new(&["from", "to", "tau", "value", "std_error", "quantum", "classical"]);
    let mut series = Vec::new();
    for c in &r.correlations {
        for i in 0..c.tau.len() {
            let classical = if c.from.detector == Detector::Single { 1.0 + (-g * c.tau[i]).exp() } else { f64::NAN };
            t.push(vec![
                c.from.to_string().into(),
                c.to.to_string().into(),
                c.tau[i].into(),
                c.values[i].into(),
                c.std_errors[i].into(),
                quantum(c.from, c.to, c.tau[i]).into(),
                classical.into(),
            ]);
        }
        series.push(Series::points(&format!("{} | {}", c.to, c.from), c.tau.clone(), c.values.clone(), c.std_errors.clone()));
    }
    out.table("g2_heterodyne", &t)?;

    let mut s = Table::new(&["quantity", "value"]);
    for (k, v) in &r.floors {
        s.push(vec![format!("floor_{k}").into(), (*v).into()]);
    }
    for (k, v) in &r.weights {
        s.push(vec![format!("weight_{k}").into(), (*v).into()]);
    }
    for (k, v) in &r.parseval {
        s.push(vec![format!("parseval_{k}").into(), (*v).into()]);
    }
    s.push(vec!["segments".into(), (r.segments as f64).into()]);
    s.push(vec!["samples".into(), (rec.len() as f64).into()]);
    s.push(vec!["dt".into(), rec.dt.into()]);
    out.table("heterodyne_summary", &s)?;

    if theory.is_some() {
        let hi = h.tau.iter().copied().fold(0.0, f64::max);
        let fine = fine_grid(hi);
        let (from, to) = pairs[0];
        series.push(Series::line(&format!("{to} | {from} quantum"), fine.clone(), curve(&fine, |x| quantum(from, to, x))));
        if rec.detectors == [Detector::Single] {
            series.push(Series::line("classical 1 + exp(-gamma tau)", fine.clone(), curve(&fine, |x| 1.0 + (-g * x).exp())));
        }
    }
    let labels = Labels { si: cfg.units == Units::Si };
    let svg = line_plot("g2 from heterodyne records", labels.time_axis(), "g2", &series, &provenance(cfg));
    out.write("g2_heterodyne.svg", svg.as_bytes())?;
    Ok(r)
}

fn cmd_heterodyne(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let h = &cfg.heterodyne;
    let p = cfg.pair();
    let d = match cfg.topology {
        Topology::Pair => p.derive_symmetric()?,
        Topology::Single => derive(&cfg.system)?,
    };
    warn(&d.warnings);
    let rec = match (h.source, cfg.topology) {
        (Source::Surrogate, Topology::Single) => synthesize_surrogate(&d, h.duration, h.dt * h.decimate as f64, cfg.seed)?,
        (Source::Surrogate, Topology::Pair) => {
            return Err(CliError::Config("the classical surrogate is single-cavity; set pair.topology = single".into()))
        }
        (Source::Qsd, topology) => {
            let opts = QsdOptions {
                dt: h.dt,
                decimate: h.decimate,
                burn_in: h.burn_in,
                eps_trunc: DEFAULT_EPS_TRUNC,
                trace_interval: 0.5 / d.gamma_eff,
            };
            let (rec, trace) = match topology {
                Topology::Single => unravel_qsd_single(&d, h.n_max, h.duration, &opts, cfg.seed)?,
                Topology::Pair => unravel_qsd(&p, &d, h.n_max, h.duration, &opts, cfg.seed)?,
            };
            let mut t = Table::new(&["time", "n1", "n2"]);
            for pt in &trace {
                t.push(vec![pt.time.into(), pt.n1.into(), pt.n2.into()]);
            }
            out.table("occupation_trace", &t)?;
            rec
        }
    };
    let mut bytes = Vec::new();
    rec.write(&mut bytes)?;
    out.write("record.omhet", &bytes)?;
    let r = reconstruction_outputs(cfg, out, &rec, Some((&p, &d)))?;
    say!("{} samples at dt = {}, {} segments", rec.len(), rec.dt, r.segments);
    Ok(())
}

enum Input {
    Clicks(Vec<ClickRecord>),
    Heterodyne(HeterodyneRecord),
}

fn read_inputs(paths: &[PathBuf]) -> CliResult<Input> {
    if paths.is_empty() {
        return Err(CliError::Config("analyze needs analyze.input or --input".into()));
    }
    let mut clicks = Vec::new();
    let mut het = None;
    for path in paths {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| CliError::io(path, e))?;
        let located = |e: optomech_entangle::Error| CliError::Config(format!("{}: {e}", path.display()));
        if bytes.starts_with(b"OMHET001") {
            het = Some(HeterodyneRecord::read(bytes.as_slice()).map_err(located)?);
        } else if bytes.starts_with(b"OMCLICK1") {
            clicks.push(ClickRecord::read_binary(bytes.as_slice()).map_err(located)?);
        } else {
            clicks.push(ClickRecord::read_text(bytes.as_slice()).map_err(located)?);
        }
    }
    match het {
        Some(rec) if clicks.is_empty() && paths.len() == 1 => Ok(Input::Heterodyne(rec)),
        Some(_) => Err(CliError::Config("analyze one heterodyne record at a time, without click records".into())),
        None => Ok(Input::Clicks(clicks)),
    }
}

fn cmd_analyze(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    match read_inputs(&cfg.analyze.input)? {
        Input::Clicks(records) => {
            let topology = records[0].params.topology;
            if records.iter().any(|r| r.params.topology != topology) {
                return Err(CliError::Config("click records mix single and pair topologies".into()));
            }
            let a = &cfg.analyze;
            let opts = g2_options(cfg, a.tau_max, a.bin, a.bootstrap);
            match topology {
                Topology::Pair => {
                    let tags = [A_R, A_B, DetectorTag::new(Detector::B, Color::Red), B_B];
                    out.table("clicks", &clicks_table(&records, &tags))?;
                    witness_outputs(cfg, out, &records, &opts, None)
                }
                Topology::Single => {
                    out.table("clicks", &clicks_table(&records, &[S_R, S_B]))?;
                    single_outputs(cfg, out, &records, &opts, None)
                }
            }
        }
        Input::Heterodyne(rec) => {
            let g = derive(&cfg.system)?.gamma_eff;
            let rg = rec.params.gamma_eff;
            if (g - rg).abs() > 0.01 * rg {
                return Err(CliError::Config(format!(
                    "record has gamma_eff = {rg} but the configured system gives {g}; configure the matching system so the filter settings apply"
                )));
            }
            reconstruction_outputs(cfg, out, &rec, None).map(|_| ())
        }
    }
}

fn linspace(hi: f64, points: usize) -> Vec<f64> {
    (0..points).map(|i| hi * i as f64 / (points - 1) as f64).collect()
}

/// `max(1 - R_m, 0)` in phase, with `gamma_eff = 1`.
fn violation(n: f64, tau: f64) -> CliResult<f64> {
    if n == 0.0 {
        return Ok(1.0);
    }
    let p = TwoCavityParams::symmetric(SystemParams::desk(n), 0.0, 0.0);
    let d = p.derive_symmetric()?;
    Ok((1.0 - witness_rm(tau * d.gamma_eff, &p, &d)?.value).max(0.0))
}

fn cmd_witness_map(cfg: &RunConfig, out: &mut Outputs) -> CliResult<()> {
    let m = &cfg.map;
    let taus = linspace(m.tau_max, m.tau_points);
    let ns = linspace(m.n_top, m.n_points);
    let mut t = Table::new(&["gamma_tau", "n_m", "violation"]);
    let mut grid = Vec::with_capacity(ns.len());
    for &n in &ns {
        let mut row = Vec::with_capacity(taus.len());
        for &tau in &taus {
            let v = violation(n, tau)?;
            t.push(vec![tau.into(), n.into(), v.into()]);
            row.push(v);
        }
        grid.push(row);
    }
    out.table("witness_map", &t)?;

    // boundary gamma tau_max(n) from the map's right edge down to tau = 0
    let root = n_max();
    let c = std::f64::consts::SQRT_2 - 1.0;
    let n_lo = c / (2.0 * m.tau_max.exp() - c);
    let mut b = Table::new(&["n_m", "gamma_tau"]);
    let (mut bx, mut by) = (Vec::new(), Vec::new());
    for i in 0..=200 {
        let n = n_lo + (root - n_lo) * i as f64 / 200.0;
        let tau = violation_tau(n, 1.0).max(0.0);
        b.push(vec![n.into(), tau.into()]);
        bx.push(tau);
        by.push(n);
    }
    out.table("witness_boundary", &b)?;
    let svg = heat_map(
        "max(1 - R_m, 0)",
        "gamma_eff tau",
        "n_M",
        &Grid { x: &taus, y: &ns, values: &grid },
        (&bx, &by),
        &provenance(cfg),
    );
    out.write("witness_map.svg", svg.as_bytes())?;
    say!("boundary meets gamma_eff tau = 0 at n_M = {root:.4}; at n_M = {n_lo:.5} it reaches gamma_eff tau = {}", m.tau_max);
    Ok(())
}
