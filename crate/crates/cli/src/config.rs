//! Run configuration: `[section]` headers and `key = value` lines with
//! explicit unit suffixes, merged with command-line overrides, resolved into
//! typed settings and written back as a canonical manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use optomech_entangle::cooling::{derive, Bath, SystemParams, TwoCavityParams, TWO_PI};
use optomech_entangle::heterodyne::FilterShape;
use optomech_entangle::trajectory::Topology;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Frequency,
    Time,
    Temperature,
    Number,
    Angle,
    Integer,
    Text,
    TimeList,
    /// Parsed later against another key's kind (sweep bounds).
    Deferred,
}

/// Every accepted `(section, key)` and its kind.
const KEYS: &[(&str, &str, Kind)] = &[
    ("run", "mode", Kind::Text),
    ("run", "seed", Kind::Integer),
    ("run", "format", Kind::Text),
    ("system", "preset", Kind::Text),
    ("system", "units", Kind::Text),
    ("system", "n_m", Kind::Number),
    ("system", "omega_m", Kind::Frequency),
    ("system", "q", Kind::Number),
    ("system", "gamma", Kind::Frequency),
    ("system", "kappa", Kind::Frequency),
    ("system", "kappa_r", Kind::Frequency),
    ("system", "alpha", Kind::Frequency),
    ("system", "detuning", Kind::Frequency),
    ("system", "temperature", Kind::Temperature),
    ("system", "n_th", Kind::Number),
    ("system", "bare_coupling", Kind::Frequency),
    ("system", "omega_eff", Kind::Frequency),
    ("pair", "topology", Kind::Text),
    ("pair", "delta", Kind::Frequency),
    ("pair", "phi", Kind::Angle),
    ("jumps", "n_max", Kind::Integer),
    ("jumps", "eta", Kind::Number),
    ("jumps", "trajectories", Kind::Integer),
    ("jumps", "duration", Kind::Time),
    ("jumps", "burn_in", Kind::Time),
    ("jumps", "bin", Kind::Time),
    ("jumps", "tau_max", Kind::Time),
    ("jumps", "bootstrap", Kind::Integer),
    ("jumps", "write_records", Kind::Text),
    ("heterodyne", "source", Kind::Text),
    ("heterodyne", "duration", Kind::Time),
    ("heterodyne", "dt", Kind::Time),
    ("heterodyne", "decimate", Kind::Integer),
    ("heterodyne", "burn_in", Kind::Time),
    ("heterodyne", "n_max", Kind::Integer),
    ("heterodyne", "lambda", Kind::Frequency),
    ("heterodyne", "window", Kind::Frequency),
    ("heterodyne", "shape", Kind::Text),
    ("heterodyne", "segment", Kind::Integer),
    ("heterodyne", "tau", Kind::TimeList),
    ("analyze", "input", Kind::Text),
    ("analyze", "tau_max", Kind::Time),
    ("analyze", "bin", Kind::Time),
    ("analyze", "bootstrap", Kind::Integer),
    ("sweep", "param", Kind::Text),
    ("sweep", "from", Kind::Deferred),
    ("sweep", "to", Kind::Deferred),
    ("sweep", "points", Kind::Integer),
    ("sweep", "scale", Kind::Text),
    ("map", "tau_points", Kind::Integer),
    ("map", "n_points", Kind::Integer),
    ("map", "tau_max", Kind::Number),
    ("map", "n_top", Kind::Number),
];

fn kind_of(section: &str, key: &str) -> Option<Kind> {
    KEYS.iter().find(|(s, k, _)| *s == section && *k == key).map(|e| e.2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    /// Rates in rad/s, times in s; suffixes required.
    Si,
    /// Rates and times in units of the effective linewidth; bare numbers only.
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(CliError::Config(format!("unknown preset '{s}' (paper or desk)"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Derive,
    Sweep,
    SimulateJumps,
    SimulateHeterodyne,
    Analyze,
    WitnessMap,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Derive => "derive",
            Mode::Sweep => "sweep",
            Mode::SimulateJumps => "simulate-jumps",
            Mode::SimulateHeterodyne => "simulate-heterodyne",
            Mode::Analyze => "analyze",
            Mode::WitnessMap => "witness-map",
        }
    }

    fn parse(s: &str) -> CliResult<Self> {
        [Mode::Derive, Mode::Sweep, Mode::SimulateJumps, Mode::SimulateHeterodyne, Mode::Analyze, Mode::WitnessMap]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown mode '{s}'")))
    }
}

/// Raw `key = value` text keyed by `(section, key)`, with the source line.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<(String, String), (String, String)>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut cfg = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let at = format!("{origin}:{}", i + 1);
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("{at}: malformed section header")))?
                    .trim();
                if !KEYS.iter().any(|(s, _, _)| *s == name) {
                    return Err(CliError::Config(format!("{at}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("{at}: expected key = value")));
            };
            let section = section
                .clone()
                .ok_or_else(|| CliError::Config(format!("{at}: key outside any section")))?;
            cfg.insert(&section, key.trim(), value.trim(), &at)?;
        }
        Ok(cfg)
    }

    fn insert(&mut self, section: &str, key: &str, value: &str, at: &str) -> CliResult<()> {
        if kind_of(section, key).is_none() {
            return Err(CliError::Config(format!("{at}: unknown key {section}.{key}")));
        }
        let slot = (section.to_string(), key.to_string());
        if let Some((_, prev)) = self.entries.get(&slot) {
            return Err(CliError::Config(format!("{at}: {section}.{key} already set at {prev}")));
        }
        self.entries.insert(slot, (value.to_string(), at.to_string()));
        Ok(())
    }

    /// Command-line override `section.key=value`; replaces any file value.
    pub fn set_override(&mut self, arg: &str) -> CliResult<()> {
        let (path, value) = arg
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects section.key=value, got '{arg}'")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| CliError::Config(format!("--set expects section.key=value, got '{arg}'")))?;
        self.entries.remove(&(section.to_string(), key.to_string()));
        self.insert(section, key, value.trim(), "--set")
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.entries.insert((section.into(), key.into()), (value.into(), "command line".into()));
    }

    fn raw(&self, section: &str, key: &str) -> Option<(&str, &str)> {
        self.entries.get(&(section.to_string(), key.to_string())).map(|(v, at)| (v.as_str(), at.as_str()))
    }
}

/// Unit suffixes, longest first so `ms` wins over `s`.
const UNITS: &[(&str, Kind, f64)] = &[
    ("rad/s", Kind::Frequency, 1.0),
    ("GHz", Kind::Frequency, TWO_PI * 1e9),
    ("MHz", Kind::Frequency, TWO_PI * 1e6),
    ("kHz", Kind::Frequency, TWO_PI * 1e3),
    ("Hz", Kind::Frequency, TWO_PI),
    ("deg", Kind::Angle, std::f64::consts::PI / 180.0),
    ("rad", Kind::Angle, 1.0),
    ("mK", Kind::Temperature, 1e-3),
    ("uK", Kind::Temperature, 1e-6),
    ("K", Kind::Temperature, 1.0),
    ("ms", Kind::Time, 1e-3),
    ("us", Kind::Time, 1e-6),
    ("ns", Kind::Time, 1e-9),
    ("s", Kind::Time, 1.0),
];

fn kind_name(k: Kind) -> &'static str {
    match k {
        Kind::Frequency => "a frequency",
        Kind::Time => "a time",
        Kind::Temperature => "a temperature",
        Kind::Angle => "an angle",
        _ => "dimensionless",
    }
}

/// Parses one number with an optional unit into base units (rad/s, s, K, rad).
pub fn parse_quantity(text: &str, kind: Kind, units: Units, what: &str) -> CliResult<f64> {
    let text = text.trim();
    let (number, unit) = match UNITS.iter().find(|(u, _, _)| text.ends_with(u)) {
        Some(&(u, k, scale)) => (text[..text.len() - u.len()].trim(), Some((u, k, scale))),
        None => (text, None),
    };
    let v: f64 = number
        .parse()
        .map_err(|_| CliError::Config(format!("{what}: cannot read '{text}' as a number with unit")))?;
    if !v.is_finite() {
        return Err(CliError::Config(format!("{what}: value must be finite")));
    }
    match (kind, unit, units) {
        (Kind::Number, None, _) | (Kind::Angle, None, _) => Ok(v),
        (Kind::Number, Some((u, _, _)), _) => Err(CliError::Config(format!("{what} is dimensionless, got unit '{u}'"))),
        (_, Some((u, k, scale)), Units::Si) => {
            if k != kind {
                return Err(CliError::Config(format!("{what} needs {}, but '{u}' is {}", kind_name(kind), kind_name(k))));
            }
            Ok(v * scale)
        }
        (Kind::Angle, Some((_, Kind::Angle, scale)), Units::Scaled) => Ok(v * scale),
        (Kind::Temperature, _, Units::Scaled) => Err(CliError::Config(format!(
            "{what}: temperatures need SI units; give n_th in scaled runs"
        ))),
        (_, Some((u, _, _)), Units::Scaled) => Err(CliError::Config(format!(
            "{what}: scaled units take bare numbers in units of the effective linewidth, got '{u}'"
        ))),
        (_, None, Units::Si) => Err(CliError::Config(format!(
            "{what} = {text} is ambiguous: give a unit ({})",
            match kind {
                Kind::Frequency => "Hz, kHz, MHz, GHz for cyclic or rad/s for angular",
                Kind::Time => "s, ms, us, ns",
                _ => "K, mK, uK",
            }
        ))),
        (_, None, Units::Scaled) => Ok(v),
    }
}

/// Shortest round-trip text, in exponent form at extreme magnitudes.
fn num(v: f64) -> String {
    if v != 0.0 && !(1e-3..1e7).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Sweepable system keys.
pub const SWEEPABLE: &[&str] =
    &["n_m", "omega_m", "q", "gamma", "kappa", "kappa_r", "alpha", "detuning", "temperature", "n_th", "bare_coupling"];

#[derive(Debug, Clone, PartialEq)]
pub struct JumpSettings {
    pub n_max: usize,
    pub eta: f64,
    pub trajectories: usize,
    pub duration: f64,
    pub burn_in: Option<f64>,
    pub bin: f64,
    pub tau_max: f64,
    pub bootstrap: usize,
    pub write_records: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Surrogate,
    Qsd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterodyneSettings {
    pub source: Source,
    pub duration: f64,
    pub dt: f64,
    pub decimate: usize,
    pub burn_in: f64,
    pub n_max: usize,
    pub lambda: f64,
    pub window: f64,
    pub shape: FilterShape,
    pub segment: usize,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSettings {
    pub input: Vec<PathBuf>,
    pub tau_max: f64,
    pub bin: f64,
    pub bootstrap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub param: String,
    pub from: f64,
    pub to: f64,
    pub points: usize,
    pub log: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSettings {
    pub tau_points: usize,
    pub n_points: usize,
    pub tau_max: f64,
    pub n_top: f64,
}

/// Fully resolved run: everything a command needs, in base units.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub format: Format,
    pub preset: Preset,
    pub units: Units,
    /// Explicit numeric system entries, base units; the preset fills the rest.
    system_entries: BTreeMap<String, f64>,
    pub system: SystemParams,
    pub topology: Topology,
    pub delta: f64,
    pub phi: f64,
    pub jumps: JumpSettings,
    pub heterodyne: HeterodyneSettings,
    pub analyze: AnalyzeSettings,
    pub sweep: Option<SweepSettings>,
    pub map: MapSettings,
}

struct Reader<'a> {
    raw: &'a RawConfig,
    units: Units,
}

impl Reader<'_> {
    fn what(&self, section: &str, key: &str) -> String {
        match self.raw.raw(section, key) {
            Some((_, at)) => format!("{section}.{key} ({at})"),
            None => format!("{section}.{key}"),
        }
    }

    fn num(&self, section: &str, key: &str) -> CliResult<Option<f64>> {
        let kind = kind_of(section, key).expect("known key");
        self.raw
            .raw(section, key)
            .map(|(v, _)| parse_quantity(v, kind, self.units, &self.what(section, key)))
            .transpose()
    }

    fn int(&self, section: &str, key: &str) -> CliResult<Option<u64>> {
        self.raw
            .raw(section, key)
            .map(|(v, _)| {
                v.parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{} must be a non-negative integer, got '{v}'", self.what(section, key))))
            })
            .transpose()
    }

    fn text(&self, section: &str, key: &str) -> Option<&str> {
        self.raw.raw(section, key).map(|(v, _)| v)
    }

    fn times(&self, section: &str, key: &str) -> CliResult<Option<Vec<f64>>> {
        let Some((v, _)) = self.raw.raw(section, key) else { return Ok(None) };
        let what = self.what(section, key);
        v.split(',')
            .map(|item| parse_quantity(item, Kind::Time, self.units, &what))
            .collect::<CliResult<Vec<_>>>()
            .map(Some)
    }

    fn positive(&self, section: &str, key: &str, default: f64) -> CliResult<f64> {
        let v = self.num(section, key)?.unwrap_or(default);
        if !(v > 0.0) {
            return Err(CliError::Config(format!("{} must be > 0, got {v}", self.what(section, key))));
        }
        Ok(v)
    }

    fn count(&self, section: &str, key: &str, default: usize, min: usize) -> CliResult<usize> {
        let v = self.int(section, key)?.map_or(default, |v| v as usize);
        if v < min {
            return Err(CliError::Config(format!("{} must be >= {min}, got {v}", self.what(section, key))));
        }
        Ok(v)
    }

    fn flag(&self, section: &str, key: &str, default: bool) -> CliResult<bool> {
        match self.text(section, key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(CliError::Config(format!("{} must be true or false, got '{v}'", self.what(section, key)))),
        }
    }
}

/// Builds the system from the preset and explicit entries (base units).
pub fn build_system(preset: Preset, entries: &BTreeMap<String, f64>) -> CliResult<SystemParams> {
    let get = |k: &str| entries.get(k).copied();
    let mut sp = match preset {
        Preset::Paper => {
            if get("n_m").is_some() {
                return Err(CliError::Config("system.n_m only applies to the desk preset".into()));
            }
            SystemParams::membrane()
        }
        Preset::Desk => SystemParams::desk(get("n_m").unwrap_or(0.1)),
    };
    if let Some(v) = get("omega_m") {
        // keep the resolved-sideband detuning unless it is given
        sp.detuning = -v;
        sp.omega_m = v;
    }
    match (get("q"), get("gamma")) {
        (Some(_), Some(_)) => return Err(CliError::Config("give system.q or system.gamma, not both".into())),
        (Some(q), None) => {
            if !(q > 0.0) {
                return Err(CliError::Config(format!("system.q must be > 0, got {q}")));
            }
            sp.gamma = sp.omega_m / q;
        }
        (None, Some(g)) => sp.gamma = g,
        (None, None) => {}
    }
    if let Some(v) = get("kappa") {
        sp.kappa = v;
        sp.kappa_r = v;
    }
    if let Some(v) = get("kappa_r") {
        sp.kappa_r = v;
    }
    if let Some(v) = get("alpha") {
        sp.alpha_mag = v;
    }
    if let Some(v) = get("detuning") {
        sp.detuning = v;
    }
    match (get("temperature"), get("n_th")) {
        (None, None) => {}
        (t, n) => sp.bath = Bath::from_parts(t, n)?,
    }
    if let Some(v) = get("bare_coupling") {
        sp.bare_coupling = Some(v);
    }
    if let Some(v) = get("omega_eff") {
        sp.omega_eff = Some(v);
    }
    sp.validate()?;
    Ok(sp)
}

impl RunConfig {
    /// `run.mode` from a config or manifest, if present.
    pub fn declared_mode(raw: &RawConfig) -> CliResult<Option<Mode>> {
        raw.raw("run", "mode").map(|(m, _)| Mode::parse(m)).transpose()
    }

    pub fn resolve(raw: &RawConfig, mode: Mode) -> CliResult<Self> {
        if let Some(m) = raw.raw("run", "mode") {
            let declared = Mode::parse(m.0)?;
            if declared != mode {
                return Err(CliError::Config(format!(
                    "config declares mode {} but {} was requested",
                    declared.name(),
                    mode.name()
                )));
            }
        }
        let preset = Preset::parse(raw.raw("system", "preset").map_or("paper", |v| v.0))?;
        let units = match raw.raw("system", "units").map(|v| v.0) {
            None => match preset {
                Preset::Paper => Units::Si,
                Preset::Desk => Units::Scaled,
            },
            Some("si") => Units::Si,
            Some("scaled") => Units::Scaled,
            Some(v) => return Err(CliError::Config(format!("system.units must be si or scaled, got '{v}'"))),
        };
        let r = Reader { raw, units };
        let seed = r.int("run", "seed")?.unwrap_or(1);
        let format = match r.text("run", "format").unwrap_or("csv") {
            "csv" => Format::Csv,
            "json" => Format::Json,
            v => return Err(CliError::Config(format!("run.format must be csv or json, got '{v}'"))),
        };

        let mut system_entries = BTreeMap::new();
        for &(s, k, kind) in KEYS {
            if s == "system" && !matches!(kind, Kind::Text) {
                if let Some(v) = r.num(s, k)? {
                    system_entries.insert(k.to_string(), v);
                }
            }
        }
        let system = build_system(preset, &system_entries)?;
        // time and rate defaults scale with the effective linewidth
        let g = derive(&system)?.gamma_eff;

        let topology = match r.text("pair", "topology").unwrap_or("pair") {
            "pair" => Topology::Pair,
            "single" => Topology::Single,
            v => return Err(CliError::Config(format!("pair.topology must be pair or single, got '{v}'"))),
        };
        let delta = r.num("pair", "delta")?.unwrap_or(0.0);
        let phi = r.num("pair", "phi")?.unwrap_or(0.0);

        let jumps = JumpSettings {
            n_max: r.count("jumps", "n_max", 5, 1)?,
            eta: r.positive("jumps", "eta", 1.0)?,
            trajectories: r.count("jumps", "trajectories", 8, 1)?,
            duration: r.positive("jumps", "duration", 1000.0 / g)?,
            burn_in: r.num("jumps", "burn_in")?,
            bin: r.positive("jumps", "bin", 0.1 / g)?,
            tau_max: r.positive("jumps", "tau_max", 3.0 / g)?,
            bootstrap: r.count("jumps", "bootstrap", 100, 0)?,
            write_records: r.flag("jumps", "write_records", true)?,
        };
        if jumps.eta > 1.0 {
            return Err(CliError::Config(format!("jumps.eta must be in (0, 1], got {}", jumps.eta)));
        }

        let lambda = r.positive("heterodyne", "lambda", 8.0 * g)?;
        let source = match r.text("heterodyne", "source").unwrap_or("qsd") {
            "qsd" => Source::Qsd,
            "surrogate" => Source::Surrogate,
            v => return Err(CliError::Config(format!("heterodyne.source must be qsd or surrogate, got '{v}'"))),
        };
        let shape = match r.text("heterodyne", "shape").unwrap_or("gaussian") {
            "gaussian" => FilterShape::Gaussian,
            "raised-cosine" => FilterShape::RaisedCosine,
            v => return Err(CliError::Config(format!("heterodyne.shape must be gaussian or raised-cosine, got '{v}'"))),
        };
        let tau = r.times("heterodyne", "tau")?.unwrap_or_else(|| [0.5, 1.0, 1.5, 2.0, 3.0].map(|t| t / g).to_vec());
        if tau.iter().any(|&t| !(t >= 0.0)) {
            return Err(CliError::Config("heterodyne.tau entries must be >= 0".into()));
        }
        let heterodyne = HeterodyneSettings {
            source,
            duration: r.positive("heterodyne", "duration", 2000.0 / g)?,
            dt: r.positive("heterodyne", "dt", (1e-3 / g).min(0.05 / system.omega_m))?,
            decimate: r.count("heterodyne", "decimate", 10, 1)?,
            burn_in: r.num("heterodyne", "burn_in")?.unwrap_or(10.0 / g),
            n_max: r.count("heterodyne", "n_max", 6, 1)?,
            lambda,
            window: r.positive("heterodyne", "window", lambda)?,
            shape,
            segment: r.count("heterodyne", "segment", 1 << 18, 1024)?,
            tau,
        };

        let analyze = AnalyzeSettings {
            input: r
                .text("analyze", "input")
                .map(|s| s.split(',').map(|p| PathBuf::from(p.trim())).filter(|p| !p.as_os_str().is_empty()).collect())
                .unwrap_or_default(),
            tau_max: r.positive("analyze", "tau_max", jumps.tau_max)?,
            bin: r.positive("analyze", "bin", jumps.bin)?,
            bootstrap: r.count("analyze", "bootstrap", jumps.bootstrap, 0)?,
        };

        let sweep = match r.text("sweep", "param") {
            None => None,
            Some(param) => {
                let kind = kind_of("system", param)
                    .filter(|_| SWEEPABLE.contains(&param))
                    .ok_or_else(|| CliError::Config(format!("sweep.param '{param}' is not sweepable ({})", SWEEPABLE.join(", "))))?;
                let bound = |key: &str| -> CliResult<f64> {
                    let (v, _) = raw
                        .raw("sweep", key)
                        .ok_or_else(|| CliError::Config(format!("sweep.{key} is required")))?;
                    parse_quantity(v, kind, units, &r.what("sweep", key))
                };
                let log = match r.text("sweep", "scale").unwrap_or("lin") {
                    "lin" => false,
                    "log" => true,
                    v => return Err(CliError::Config(format!("sweep.scale must be lin or log, got '{v}'"))),
                };
                let (from, to) = (bound("from")?, bound("to")?);
                if log && !(from > 0.0 && to > 0.0) {
                    return Err(CliError::Config("log sweeps need positive bounds".into()));
                }
                Some(SweepSettings { param: param.to_string(), from, to, points: r.count("sweep", "points", 21, 2)?, log })
            }
        };

        let map = MapSettings {
            tau_points: r.count("map", "tau_points", 81, 2)?,
            n_points: r.count("map", "n_points", 61, 2)?,
            tau_max: r.positive("map", "tau_max", 4.0)?,
            n_top: r.positive("map", "n_top", 0.3)?,
        };

        Ok(RunConfig {
            mode,
            seed,
            format,
            preset,
            units,
            system_entries,
            system,
            topology,
            delta,
            phi,
            jumps,
            heterodyne,
            analyze,
            sweep,
            map,
        })
    }

    /// System with one entry replaced, for sweeps.
    pub fn system_with(&self, key: &str, value: f64) -> CliResult<SystemParams> {
        let mut e = self.system_entries.clone();
        let partner = match key {
            "temperature" => Some("n_th"),
            "n_th" => Some("temperature"),
            "q" => Some("gamma"),
            "gamma" => Some("q"),
            _ => None,
        };
        if let Some(p) = partner {
            e.remove(p);
        }
        e.insert(key.to_string(), value);
        build_system(self.preset, &e)
    }

    pub fn pair(&self) -> TwoCavityParams {
        TwoCavityParams::symmetric(self.system.clone(), self.delta, self.phi)
    }

    /// Canonical config that reproduces this run: every resolved value,
    /// written with round-trip precision in base units.
    pub fn manifest(&self) -> String {
        let si = self.units == Units::Si;
        let f = |v: f64| if si { format!("{} rad/s", num(v)) } else { num(v) };
        let t = |v: f64| if si { format!("{} s", num(v)) } else { num(v) };
        let mut m = String::new();
        let sp = &self.system;
        let _ = writeln!(m, "# optomech run manifest; rerun with `optomech rerun <this file>`");
        let _ = writeln!(m, "[run]\nmode = {}\nseed = {}\nformat = {}", self.mode.name(), self.seed, self.format.extension());
        let _ = writeln!(m, "\n[system]\npreset = {}\nunits = {}", self.preset.name(), if si { "si" } else { "scaled" });
        if let (Preset::Desk, Some(n)) = (self.preset, self.system_entries.get("n_m")) {
            let _ = writeln!(m, "n_m = {n}");
        }
        let _ = writeln!(m, "omega_m = {}", f(sp.omega_m));
        let _ = writeln!(m, "gamma = {}", f(sp.gamma));
        let _ = writeln!(m, "kappa = {}", f(sp.kappa));
        let _ = writeln!(m, "kappa_r = {}", f(sp.kappa_r));
        let _ = writeln!(m, "alpha = {}", f(sp.alpha_mag));
        let _ = writeln!(m, "detuning = {}", f(sp.detuning));
        match sp.bath {
            Bath::Temperature(k) => {
                let _ = writeln!(m, "temperature = {} K", num(k));
            }
            Bath::Occupancy(n) => {
                let _ = writeln!(m, "n_th = {}", num(n));
            }
        }
        if let Some(g0) = sp.bare_coupling {
            let _ = writeln!(m, "bare_coupling = {}", f(g0));
        }
        if let Some(w) = sp.omega_eff {
            let _ = writeln!(m, "omega_eff = {}", f(w));
        }
        let topo = match self.topology {
            Topology::Pair => "pair",
            Topology::Single => "single",
        };
        let _ = writeln!(m, "\n[pair]\ntopology = {topo}\ndelta = {}\nphi = {} rad", f(self.delta), self.phi);
        let j = &self.jumps;
        let _ = writeln!(
            m,
            "\n[jumps]\nn_max = {}\neta = {}\ntrajectories = {}\nduration = {}\nbin = {}\ntau_max = {}\nbootstrap = {}\nwrite_records = {}",
            j.n_max,
            j.eta,
            j.trajectories,
            t(j.duration),
            t(j.bin),
            t(j.tau_max),
            j.bootstrap,
            j.write_records
        );
        if let Some(b) = j.burn_in {
            let _ = writeln!(m, "burn_in = {}", t(b));
        }
        let h = &self.heterodyne;
        let taus: Vec<String> = h.tau.iter().map(|&v| t(v)).collect();
        let _ = writeln!(
            m,
            "\n[heterodyne]\nsource = {}\nduration = {}\ndt = {}\ndecimate = {}\nburn_in = {}\nn_max = {}\nlambda = {}\nwindow = {}\nshape = {}\nsegment = {}\ntau = {}",
            match h.source {
                Source::Qsd => "qsd",
                Source::Surrogate => "surrogate",
            },
            t(h.duration),
            t(h.dt),
            h.decimate,
            t(h.burn_in),
            h.n_max,
            f(h.lambda),
            f(h.window),
            match h.shape {
                FilterShape::Gaussian => "gaussian",
                FilterShape::RaisedCosine => "raised-cosine",
            },
            h.segment,
            taus.join(", ")
        );
        let a = &self.analyze;
        let _ = writeln!(m, "\n[analyze]");
        if !a.input.is_empty() {
            let paths: Vec<String> = a.input.iter().map(|p| p.display().to_string()).collect();
            let _ = writeln!(m, "input = {}", paths.join(", "));
        }
        let _ = writeln!(m, "tau_max = {}\nbin = {}\nbootstrap = {}", t(a.tau_max), t(a.bin), a.bootstrap);
        if let Some(s) = &self.sweep {
            let kind = kind_of("system", &s.param).unwrap_or(Kind::Number);
            let b = |v: f64| match (kind, si) {
                (Kind::Frequency, _) => f(v),
                (Kind::Temperature, _) => format!("{} K", num(v)),
                _ => num(v),
            };
            let _ = writeln!(
                m,
                "\n[sweep]\nparam = {}\nfrom = {}\nto = {}\npoints = {}\nscale = {}",
                s.param,
                b(s.from),
                b(s.to),
                s.points,
                if s.log { "log" } else { "lin" }
            );
        }
        let mp = &self.map;
        let _ = writeln!(
            m,
            "\n[map]\ntau_points = {}\nn_points = {}\ntau_max = {}\nn_top = {}",
            mp.tau_points, mp.n_points, mp.tau_max, mp.n_top
        );
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_units_become_angular() {
        let v = parse_quantity("2.0 MHz", Kind::Frequency, Units::Si, "x").unwrap();
        assert_eq!(v, TWO_PI * 2.0e6);
        assert_eq!(parse_quantity("5 rad/s", Kind::Frequency, Units::Si, "x").unwrap(), 5.0);
        assert_eq!(parse_quantity("20mK", Kind::Temperature, Units::Si, "x").unwrap(), 0.02);
        assert_eq!(parse_quantity("0.5 ms", Kind::Time, Units::Si, "x").unwrap(), 5e-4);
        assert_eq!(parse_quantity("1e-3", Kind::Time, Units::Scaled, "x").unwrap(), 1e-3);
    }

    #[test]
    fn ambiguous_or_mismatched_units_are_rejected() {
        assert!(parse_quantity("2.0", Kind::Frequency, Units::Si, "x").is_err());
        assert!(parse_quantity("2 ms", Kind::Frequency, Units::Si, "x").is_err());
        assert!(parse_quantity("2 MHz", Kind::Frequency, Units::Scaled, "x").is_err());
        assert!(parse_quantity("3 Hz", Kind::Number, Units::Si, "x").is_err());
        assert!(parse_quantity("20 mK", Kind::Temperature, Units::Scaled, "x").is_err());
        assert!(parse_quantity("fast", Kind::Time, Units::Scaled, "x").is_err());
    }

    #[test]
    fn unknown_keys_and_duplicates_fail() {
        assert!(RawConfig::parse("[system]\nomega = 1 Hz\n", "t").is_err());
        assert!(RawConfig::parse("[nowhere]\n", "t").is_err());
        assert!(RawConfig::parse("[system]\nkappa = 1 Hz\nkappa = 2 Hz\n", "t").is_err());
        assert!(RawConfig::parse("kappa = 1 Hz\n", "t").is_err());
    }

    #[test]
    fn manifest_resolves_to_the_same_run() {
        for text in ["[system]\npreset = paper\n", "[system]\npreset = desk\nn_m = 0.2\n[pair]\ndelta = 5\nphi = 45 deg\n"] {
            let raw = RawConfig::parse(text, "t").unwrap();
            let a = RunConfig::resolve(&raw, Mode::Derive).unwrap();
            let b = RunConfig::resolve(&RawConfig::parse(&a.manifest(), "m").unwrap(), Mode::Derive).unwrap();
            assert_eq!(a.system, b.system);
            assert_eq!(a.manifest(), b.manifest());
            assert_eq!((a.delta, a.phi, &a.jumps, &a.heterodyne), (b.delta, b.phi, &b.jumps, &b.heterodyne));
        }
    }
}
