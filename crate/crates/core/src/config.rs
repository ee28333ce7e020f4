//! Run configuration files.
//!
//! ```text
//! # comment
//! seed = 7
//!
//! [geometry]
//! trap = neumann            # neumann | dirichlet | parabolic
//! length = 50 um            # full extent, 2R for a parabolic trap
//! pixels = 25
//!
//! [params]
//! c = 1.5 um/ms
//! K = 30
//! density = 60 /um
//! temperature = 60 nK       # or: beta = 0.3 ms
//! J = 0.003 /ms
//! healing_length = 0.35 um
//! smear = 2 um
//!
//! [sampler]
//! model = sg                # tll | kg | sg
//! statistics = classical    # classical | quantum (tll, kg)
//! shots = 500
//! modes = 10
//! chains = 8
//! burn_in = 2000
//! thinning = 20
//! overrelaxation = 1
//! boundary = neumann        # neumann | periodic
//!
//! [dynamics]
//! modes = 10
//! dispersion = linear       # linear | bogoliubov | massive
//! times = 0:32.5:14 ms      # start:stop:count, or a comma list
//! zero_density = false
//!
//! [analysis]
//! window = 13
//! reference = 6             # pixel inside the window, default its centre
//! bootstrap = 200
//! bias_trials = 20
//! fcs_distance = 6
//! fcs_bins = 30
//! plateau_start = 6
//! plateau_distance = 12
//!
//! [tomography]
//! modes = 10
//! statistics = quantum
//! diagonal = false
//! max_iterations = 50000
//! tolerance = 1e-8
//! ```
//!
//! Dimensional values need a unit. Accepted suffixes:
//!
//! | quantity | canonical | also accepted |
//! |----------|-----------|---------------|
//! | length | `um` | `μm`, `nm`, `mm`, `m` |
//! | time | `ms` | `us`, `μs`, `s` |
//! | velocity | `um/ms` | `mm/s`, `m/s` |
//! | rate | `/ms` | `1/ms`, `Hz`, `kHz` |
//! | linear density | `/um` | `1/um`, `1/μm` |
//! | temperature | `nK` | `uK`, `μK` |
//!
//! Unknown sections, unknown keys, repeated keys and missing or wrong units
//! are errors that carry the line number.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{nanokelvin_to_inv_ms, Dispersion, Geometry, PhysParams, Trap};
use crate::sampler::{LatticeBoundary, McmcConfig, Statistics};
use crate::stats::Window;
use crate::tomography::ReconstructionOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Tll,
    Kg,
    Sg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionKind {
    Linear,
    Bogoliubov,
    Massive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub trap: Trap,
    /// μm
    pub length: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsConfig {
    /// μm/ms
    pub c: f64,
    pub luttinger_k: f64,
    /// 1/μm
    pub density: f64,
    /// ms; `None` is zero temperature.
    pub beta: Option<f64>,
    /// 1/ms
    pub tunnel_j: f64,
    /// μm; `None` derives ξ_h from c, K and n.
    pub healing_length: Option<f64>,
    /// μm
    pub smear: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub model: Model,
    pub statistics: Statistics,
    pub shots: usize,
    pub modes: usize,
    pub mcmc: McmcConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub modes: usize,
    pub dispersion: DispersionKind,
    /// ms
    pub times: Vec<f64>,
    pub zero_density: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub window: usize,
    pub reference: Option<usize>,
    pub bootstrap: usize,
    pub bias_trials: usize,
    pub fcs_distance: usize,
    pub fcs_bins: usize,
    /// First pixel of the interval whose phase difference enters the plateau fits.
    pub plateau_start: usize,
    /// Interval length in pixels.
    pub plateau_distance: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomographyConfig {
    pub modes: usize,
    pub statistics: Statistics,
    pub diagonal: bool,
    pub options: ReconstructionOptions,
}

/// Fully resolved settings of one command run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub format_version: u32,
    /// k_B × 1 nK / ħ in 1/ms, the temperature conversion in use.
    pub nanokelvin_in_inv_ms: f64,
    pub geometry: GeometryConfig,
    pub params: ParamsConfig,
    pub sampler: SamplerConfig,
    pub dynamics: DynamicsConfig,
    pub analysis: AnalysisConfig,
    pub tomography: TomographyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            format_version: crate::io::FORMAT_VERSION,
            nanokelvin_in_inv_ms: nanokelvin_to_inv_ms(1.0),
            geometry: GeometryConfig { trap: Trap::BoxNeumann, length: 50.0, pixels: 25 },
            params: ParamsConfig {
                c: 1.5,
                luttinger_k: 30.0,
                density: 60.0,
                beta: Some(0.3),
                tunnel_j: 0.0,
                healing_length: None,
                smear: 0.0,
            },
            sampler: SamplerConfig {
                model: Model::Tll,
                statistics: Statistics::Classical,
                shots: 1000,
                modes: 10,
                mcmc: McmcConfig::default(),
            },
            dynamics: DynamicsConfig { modes: 10, dispersion: DispersionKind::Linear, times: vec![0.0], zero_density: false },
            analysis: AnalysisConfig {
                window: 13,
                reference: None,
                bootstrap: 200,
                bias_trials: 20,
                fcs_distance: 6,
                fcs_bins: 30,
                plateau_start: 0,
                plateau_distance: 12,
            },
            tomography: TomographyConfig {
                modes: 10,
                statistics: Statistics::Quantum,
                diagonal: false,
                options: ReconstructionOptions::default(),
            },
        }
    }
}

#[derive(Clone, Copy)]
enum Unit {
    Length,
    Time,
    Velocity,
    Rate,
    LinearDensity,
    Temperature,
}

fn unit_factor(unit: Unit, suffix: &str) -> Option<f64> {
    let s = suffix.trim();
    match unit {
        Unit::Length => match s {
            "um" | "μm" => Some(1.0),
            "nm" => Some(1e-3),
            "mm" => Some(1e3),
            "m" => Some(1e6),
            _ => None,
        },
        Unit::Time => match s {
            "ms" => Some(1.0),
            "us" | "μs" => Some(1e-3),
            "s" => Some(1e3),
            _ => None,
        },
        Unit::Velocity => match s {
            "um/ms" | "μm/ms" | "mm/s" => Some(1.0),
            "m/s" => Some(1e3),
            _ => None,
        },
        Unit::Rate => match s {
            "/ms" | "1/ms" | "kHz" => Some(1.0),
            "Hz" => Some(1e-3),
            _ => None,
        },
        Unit::LinearDensity => match s {
            "/um" | "1/um" | "/μm" | "1/μm" => Some(1.0),
            _ => None,
        },
        Unit::Temperature => match s {
            "nK" => Some(1.0),
            "uK" | "μK" => Some(1e3),
            _ => None,
        },
    }
}

fn canonical(unit: Unit) -> &'static str {
    match unit {
        Unit::Length => "um",
        Unit::Time => "ms",
        Unit::Velocity => "um/ms",
        Unit::Rate => "/ms",
        Unit::LinearDensity => "/um",
        Unit::Temperature => "nK",
    }
}

/// Where a setting came from, for error messages.
#[derive(Clone, Copy, Debug)]
pub enum Origin {
    Line(usize),
    CommandLine,
}

impl Origin {
    fn err(self, msg: impl Into<String>) -> Error {
        let msg = msg.into();
        match self {
            Origin::Line(line) => Error::Config { line, msg },
            Origin::CommandLine => Error::Config { line: 0, msg: format!("command line: {msg}") },
        }
    }
}

fn split_number(text: &str) -> (&str, &str) {
    let t = text.trim();
    let end = t
        .char_indices()
        .find(|&(i, ch)| {
            !(ch.is_ascii_digit()
                || ch == '.'
                || ch == '+'
                || ch == '-'
                || ((ch == 'e' || ch == 'E') && i > 0 && t[i + 1..].starts_with(|d: char| d.is_ascii_digit() || d == '-' || d == '+')))
        })
        .map(|(i, _)| i)
        .unwrap_or(t.len());
    (&t[..end], t[end..].trim())
}

fn number(text: &str, origin: Origin, key: &str) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| origin.err(format!("`{key}`: `{text}` is not a number")))?;
    if !v.is_finite() {
        return Err(origin.err(format!("`{key}` must be finite")));
    }
    Ok(v)
}

fn quantity(text: &str, unit: Unit, origin: Origin, key: &str) -> Result<f64> {
    let (num, suffix) = split_number(text);
    if suffix.is_empty() {
        return Err(origin.err(format!("`{key}` needs a unit, e.g. `{} {}`", text.trim(), canonical(unit))));
    }
    let f = unit_factor(unit, suffix).ok_or_else(|| origin.err(format!("`{key}`: unknown unit `{suffix}`")))?;
    Ok(number(num, origin, key)? * f)
}

fn dimensionless(text: &str, origin: Origin, key: &str) -> Result<f64> {
    let (num, suffix) = split_number(text);
    if !suffix.is_empty() {
        return Err(origin.err(format!("`{key}` is dimensionless, found unit `{suffix}`")));
    }
    number(num, origin, key)
}

fn count(text: &str, origin: Origin, key: &str) -> Result<usize> {
    text.trim().parse().map_err(|_| origin.err(format!("`{key}`: `{}` is not a non-negative integer", text.trim())))
}

fn boolean(text: &str, origin: Origin, key: &str) -> Result<bool> {
    match text.trim() {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        other => Err(origin.err(format!("`{key}`: expected true or false, found `{other}`"))),
    }
}

fn statistics(text: &str, origin: Origin, key: &str) -> Result<Statistics> {
    match text.trim() {
        "classical" => Ok(Statistics::Classical),
        "quantum" => Ok(Statistics::Quantum),
        other => Err(origin.err(format!("`{key}`: expected classical or quantum, found `{other}`"))),
    }
}

/// Time grid `start:stop:count unit` or `t1, t2, ... unit`.
fn times(text: &str, origin: Origin, key: &str) -> Result<Vec<f64>> {
    let t = text.trim();
    let split = t.rfind(|ch: char| ch.is_ascii_digit() || ch == '.').map(|i| i + 1).unwrap_or(0);
    let (body, suffix) = (&t[..split], t[split..].trim());
    if suffix.is_empty() {
        return Err(origin.err(format!("`{key}` needs a time unit, e.g. `{t} ms`")));
    }
    let f = unit_factor(Unit::Time, suffix).ok_or_else(|| origin.err(format!("`{key}`: unknown unit `{suffix}`")))?;
    let grid = if body.contains(':') {
        let parts: Vec<&str> = body.split(':').collect();
        if parts.len() != 3 {
            return Err(origin.err(format!("`{key}`: range must be start:stop:count")));
        }
        let (a, b) = (number(parts[0], origin, key)?, number(parts[1], origin, key)?);
        let n = count(parts[2], origin, key)?;
        if n == 0 {
            return Err(origin.err(format!("`{key}`: range needs at least one point")));
        }
        if n == 1 {
            vec![a]
        } else {
            (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
        }
    } else {
        body.split(',').map(|p| number(p, origin, key)).collect::<Result<Vec<_>>>()?
    };
    let grid: Vec<f64> = grid.into_iter().map(|x| x * f).collect();
    if grid.iter().any(|&x| x < 0.0) {
        return Err(origin.err(format!("`{key}`: times must be non-negative")));
    }
    Ok(grid)
}

impl RunConfig {
    /// Parses a configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        let mut temperature_line = None;
        let mut beta_line = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let origin = Origin::Line(line_no);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| origin.err("section header must end with `]`"))?
                    .trim();
                if !["geometry", "params", "sampler", "dynamics", "analysis", "tomography"].contains(&name) {
                    return Err(origin.err(format!("unknown section `[{name}]`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| origin.err("expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(origin.err(format!("`{key}` is set twice")));
            }
            match (section.as_str(), key) {
                ("params", "temperature") => temperature_line = Some(line_no),
                ("params", "beta") => beta_line = Some(line_no),
                _ => {}
            }
            if let (Some(_), Some(b)) = (temperature_line, beta_line) {
                return Err(Error::Config { line: b.max(temperature_line.unwrap()), msg: "set either `temperature` or `beta`, not both".into() });
            }
            cfg.set(&section, key, value, origin)?;
        }
        Ok(cfg)
    }

    /// Applies a `section.key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let origin = Origin::CommandLine;
        let (path, value) = assignment.split_once('=').ok_or_else(|| origin.err(format!("`{assignment}` is not key=value")))?;
        let (section, key) = match path.trim().split_once('.') {
            Some((s, k)) => (s.trim(), k.trim()),
            None => ("", path.trim()),
        };
        self.set(section, key, value, origin)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, origin: Origin) -> Result<()> {
        let v = value.trim();
        match (section, key) {
            ("", "seed") => self.seed = v.parse().map_err(|_| origin.err(format!("`seed`: `{v}` is not a 64-bit unsigned integer")))?,
            ("geometry", "trap") => {
                self.geometry.trap = match v {
                    "neumann" => Trap::BoxNeumann,
                    "dirichlet" => Trap::BoxDirichlet,
                    "parabolic" => Trap::Parabolic,
                    other => return Err(origin.err(format!("`trap`: unknown trap `{other}`"))),
                }
            }
            ("geometry", "length") => self.geometry.length = quantity(v, Unit::Length, origin, key)?,
            ("geometry", "pixels") => self.geometry.pixels = count(v, origin, key)?,
            ("params", "c") => self.params.c = quantity(v, Unit::Velocity, origin, key)?,
            ("params", "K") => self.params.luttinger_k = dimensionless(v, origin, key)?,
            ("params", "density") => self.params.density = quantity(v, Unit::LinearDensity, origin, key)?,
            ("params", "beta") => {
                self.params.beta = match v {
                    "inf" | "infinite" => None,
                    _ => Some(quantity(v, Unit::Time, origin, key)?),
                }
            }
            ("params", "temperature") => {
                let t = quantity(v, Unit::Temperature, origin, key)?;
                self.params.beta = if t == 0.0 { None } else { Some(1.0 / nanokelvin_to_inv_ms(t)) };
            }
            ("params", "J") => self.params.tunnel_j = quantity(v, Unit::Rate, origin, key)?,
            ("params", "healing_length") => self.params.healing_length = Some(quantity(v, Unit::Length, origin, key)?),
            ("params", "smear") => self.params.smear = quantity(v, Unit::Length, origin, key)?,
            ("sampler", "model") => {
                self.sampler.model = match v {
                    "tll" => Model::Tll,
                    "kg" => Model::Kg,
                    "sg" => Model::Sg,
                    other => return Err(origin.err(format!("`model`: expected tll, kg or sg, found `{other}`"))),
                }
            }
            ("sampler", "statistics") => self.sampler.statistics = statistics(v, origin, key)?,
            ("sampler", "shots") => self.sampler.shots = count(v, origin, key)?,
            ("sampler", "modes") => self.sampler.modes = count(v, origin, key)?,
            ("sampler", "chains") => self.sampler.mcmc.n_chains = count(v, origin, key)?,
            ("sampler", "burn_in") => self.sampler.mcmc.burn_in_sweeps = count(v, origin, key)?,
            ("sampler", "thinning") => self.sampler.mcmc.thinning = count(v, origin, key)?,
            ("sampler", "overrelaxation") => self.sampler.mcmc.overrelaxation = count(v, origin, key)?,
            ("sampler", "boundary") => {
                self.sampler.mcmc.boundary = match v {
                    "neumann" => LatticeBoundary::Neumann,
                    "periodic" => LatticeBoundary::Periodic,
                    other => return Err(origin.err(format!("`boundary`: unknown boundary `{other}`"))),
                }
            }
            ("dynamics", "modes") => self.dynamics.modes = count(v, origin, key)?,
            ("dynamics", "dispersion") => {
                self.dynamics.dispersion = match v {
                    "linear" => DispersionKind::Linear,
                    "bogoliubov" => DispersionKind::Bogoliubov,
                    "massive" => DispersionKind::Massive,
                    other => return Err(origin.err(format!("`dispersion`: unknown dispersion `{other}`"))),
                }
            }
            ("dynamics", "times") => self.dynamics.times = times(v, origin, key)?,
            ("dynamics", "zero_density") => self.dynamics.zero_density = boolean(v, origin, key)?,
            ("analysis", "window") => self.analysis.window = count(v, origin, key)?,
            ("analysis", "reference") => self.analysis.reference = Some(count(v, origin, key)?),
            ("analysis", "bootstrap") => self.analysis.bootstrap = count(v, origin, key)?,
            ("analysis", "bias_trials") => self.analysis.bias_trials = count(v, origin, key)?,
            ("analysis", "fcs_distance") => self.analysis.fcs_distance = count(v, origin, key)?,
            ("analysis", "fcs_bins") => self.analysis.fcs_bins = count(v, origin, key)?,
            ("analysis", "plateau_start") => self.analysis.plateau_start = count(v, origin, key)?,
            ("analysis", "plateau_distance") => self.analysis.plateau_distance = count(v, origin, key)?,
            ("tomography", "modes") => self.tomography.modes = count(v, origin, key)?,
            ("tomography", "statistics") => self.tomography.statistics = statistics(v, origin, key)?,
            ("tomography", "diagonal") => self.tomography.diagonal = boolean(v, origin, key)?,
            ("tomography", "max_iterations") => self.tomography.options.max_iterations = count(v, origin, key)?,
            ("tomography", "tolerance") => self.tomography.options.relative_tolerance = dimensionless(v, origin, key)?,
            ("", other) => return Err(origin.err(format!("unknown top-level key `{other}`"))),
            (s, other) => return Err(origin.err(format!("unknown key `{other}` in [{s}]"))),
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.geometry.trap, self.geometry.length, self.geometry.pixels)
    }

    pub fn params(&self) -> Result<PhysParams> {
        let p = &self.params;
        let mut out = PhysParams::new(p.c, p.luttinger_k, p.density)?
            .with_beta(p.beta.unwrap_or(f64::INFINITY))?
            .with_tunneling(p.tunnel_j)?
            .with_smear(p.smear)?;
        if let Some(xi) = p.healing_length {
            out.healing_length = xi;
            out.validate()?;
        }
        Ok(out)
    }

    /// Dispersion selected in `[dynamics]`.
    pub fn dispersion(&self) -> Result<Dispersion> {
        let p = self.params()?;
        Ok(match self.dynamics.dispersion {
            DispersionKind::Linear => Dispersion::Linear,
            DispersionKind::Bogoliubov => Dispersion::Bogoliubov { healing_length: p.healing_length },
            DispersionKind::Massive => Dispersion::Massive { gap: p.kg_gap_sq().sqrt() },
        })
    }

    /// Analysis window centred on the grid, with the configured reference pixel.
    pub fn window(&self) -> Result<Window> {
        let w = Window::centered(self.geometry.pixels, self.analysis.window)?;
        match self.analysis.reference {
            Some(r) => Window::new(w.start, w.len, r),
            None => Ok(w),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config is plain data")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Config { line: 0, msg: format!("manifest config: {e}") })
    }
}
