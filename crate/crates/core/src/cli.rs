//! Command-line front end.
//!
//! Every command resolves a [`RunConfig`] from the optional `--config` file,
//! `--set section.key=value` overrides and its own flags, claims the output
//! directory with a lock file, writes its outputs and finally a
//! `manifest.json` holding the resolved configuration, the arguments and
//! SHA-256 digests of all inputs and outputs. `--from-manifest` repeats such
//! a run.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{Model, RunConfig};
use crate::dynamics::{delocalization_diagnostic, evolve_ensemble, propagators};
use crate::error::{Error, Result};
use crate::io::{
    digest, ensemble_table, load_ensemble, read_phase_table, save_ensemble, save_propagators, save_reconstruction,
    Manifest, OutputLock, Table,
};
use crate::model::{Dispersion, Geometry, ModeBasis, Trap};
use crate::sampler::{sample_gaussian_thermal, sample_sg_classical, FieldEnsemble, Provenance, Statistics};
use crate::stats::{
    ensemble_non_gaussianity, fourth_cumulant_of, odd_moment_warnings, full_counting_statistics, jackknife, m4_bias, phase_autocorrelation,
    plateau_analysis, power_sums, second_moments, unwrap_phase, variance_of, velocity_correlation,
    windowed_phase, Window,
};
use crate::tomography::{build_dataset, realspace_density_covariance, reconstruct, reconstruct_diagonal};

pub const OUT_DIR_ENV: &str = "GAUSSIFY_OUT_DIR";
pub const THREADS_ENV: &str = "GAUSSIFY_THREADS";

#[derive(Parser, Debug)]
#[command(name = "gaussify", version, about = "Sampling, evolution, statistics and tomography of relative-phase fields")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Configuration file with [section] headers and `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. --set "params.J=0.003 /ms". Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: ./gaussify-out).
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-file and per-time work.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Repeat the run recorded in this manifest; other arguments are ignored.
    #[arg(long, global = true)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Draw a thermal ensemble of phase and density profiles.
    Sample(SampleArgs),
    /// Evolve an ensemble to each time of a grid.
    Evolve(EvolveArgs),
    /// Non-Gaussianity, counting statistics, correlations and plateau fits.
    Analyze(AnalyzeArgs),
    /// Reconstruct the initial mode covariance from ensembles at several times.
    Tomograph(TomographArgs),
    /// Convert raw wrapped phase tables into an ensemble.
    Ingest(IngestArgs),
    /// Export propagator matrices and their spreading.
    Propagator(PropagatorArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sample(_) => "sample",
            Command::Evolve(_) => "evolve",
            Command::Analyze(_) => "analyze",
            Command::Tomograph(_) => "tomograph",
            Command::Ingest(_) => "ingest",
            Command::Propagator(_) => "propagator",
        }
    }

    fn arguments(&self) -> serde_json::Value {
        match self {
            Command::Sample(a) => serde_json::to_value(a),
            Command::Evolve(a) => serde_json::to_value(a),
            Command::Analyze(a) => serde_json::to_value(a),
            Command::Tomograph(a) => serde_json::to_value(a),
            Command::Ingest(a) => serde_json::to_value(a),
            Command::Propagator(a) => serde_json::to_value(a),
        }
        .expect("arguments are plain data")
    }

    fn from_arguments(name: &str, v: serde_json::Value) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config { line: 0, msg: format!("manifest arguments: {e}") };
        Ok(match name {
            "sample" => Command::Sample(serde_json::from_value(v).map_err(bad)?),
            "evolve" => Command::Evolve(serde_json::from_value(v).map_err(bad)?),
            "analyze" => Command::Analyze(serde_json::from_value(v).map_err(bad)?),
            "tomograph" => Command::Tomograph(serde_json::from_value(v).map_err(bad)?),
            "ingest" => Command::Ingest(serde_json::from_value(v).map_err(bad)?),
            "propagator" => Command::Propagator(serde_json::from_value(v).map_err(bad)?),
            other => return Err(Error::Config { line: 0, msg: format!("manifest names unknown command `{other}`") }),
        })
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelArg {
    Tll,
    Kg,
    Sg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatisticsArg {
    Classical,
    Quantum,
}

impl From<StatisticsArg> for Statistics {
    fn from(s: StatisticsArg) -> Self {
        match s {
            StatisticsArg::Classical => Statistics::Classical,
            StatisticsArg::Quantum => Statistics::Quantum,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrapArg {
    Neumann,
    Dirichlet,
    Parabolic,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SampleArgs {
    /// Field model: Luttinger liquid, Klein-Gordon or classical sine-Gordon.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long, value_enum)]
    pub statistics: Option<StatisticsArg>,
    /// Tunnel coupling J in 1/ms.
    #[arg(long = "J", value_name = "PER_MS")]
    pub tunnel_j: Option<f64>,
    /// Inverse temperature β in ms.
    #[arg(long, value_name = "MS", conflicts_with = "temperature")]
    pub beta: Option<f64>,
    /// Temperature in nK.
    #[arg(long, value_name = "NK")]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Modes of the Gaussian samplers.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Independent Metropolis chains of the sine-Gordon sampler.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Also write the ensemble as a text table.
    #[arg(long)]
    pub text: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvolveArgs {
    /// Ensemble container to evolve.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Time grid in ms: `start:stop:count` or a comma list.
    #[arg(long, value_name = "MS")]
    pub times: Option<String>,
    /// Modes kept in the evolution.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Set the density sector to zero before evolving (control run).
    #[arg(long)]
    pub zero_density: bool,
    #[arg(long)]
    pub text: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    /// Ensemble containers, one per time.
    pub inputs: Vec<PathBuf>,
    /// Window length in pixels.
    #[arg(long)]
    pub window: Option<usize>,
    /// Bootstrap resamples for error bars.
    #[arg(long)]
    pub bootstrap: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TomographArgs {
    /// Ensemble containers at three or more distinct times.
    pub inputs: Vec<PathBuf>,
    /// Restrict the reconstruction to one 2×2 block per mode.
    #[arg(long)]
    pub diagonal: bool,
    #[arg(long)]
    pub modes: Option<usize>,
    /// Window length in pixels.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct IngestArgs {
    /// Raw phase table: one shot per row, one pixel per column, in rad.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Optional density table of the same shape, in 1/μm.
    #[arg(long)]
    pub density: Option<PathBuf>,
    /// Pixel size in μm.
    #[arg(long, value_name = "UM")]
    pub dz: Option<f64>,
    /// Reference pixel; its phase is wrapped to [-π, π) and then subtracted.
    #[arg(long)]
    pub reference: Option<usize>,
    #[arg(long, value_enum, default_value = "neumann")]
    pub trap: TrapArg,
    /// Time tag in ms.
    #[arg(long, value_name = "MS", default_value_t = 0.0)]
    pub time: f64,
    #[arg(long)]
    pub text: bool,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PropagatorArgs {
    /// Time grid in ms: `start:stop:count` or a comma list.
    #[arg(long, value_name = "MS")]
    pub times: Option<String>,
    #[arg(long)]
    pub modes: Option<usize>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config { line: 0, msg: msg.into() }
}

/// Runs `f` on every item, spreading the work over `threads` scoped threads.
/// Results keep the input order, so output does not depend on `threads`.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    threads: usize,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Context {
    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn input(&mut self, p: &Path) -> Result<PathBuf> {
        let abs = fs::canonicalize(p)?;
        self.inputs.push(abs.clone());
        Ok(abs)
    }
}

fn apply_flags(cfg: &mut RunConfig, command: &Command) -> Result<()> {
    match command {
        Command::Sample(a) => {
            if let Some(m) = a.model {
                cfg.sampler.model = match m {
                    ModelArg::Tll => Model::Tll,
                    ModelArg::Kg => Model::Kg,
                    ModelArg::Sg => Model::Sg,
                };
            }
            if let Some(s) = a.statistics {
                cfg.sampler.statistics = s.into();
            }
            if let Some(j) = a.tunnel_j {
                cfg.apply_override(&format!("params.J={j} /ms"))?;
            }
            if let Some(b) = a.beta {
                cfg.apply_override(&format!("params.beta={b} ms"))?;
            }
            if let Some(t) = a.temperature {
                cfg.apply_override(&format!("params.temperature={t} nK"))?;
            }
            if let Some(n) = a.shots {
                cfg.sampler.shots = n;
            }
            if let Some(n) = a.modes {
                cfg.sampler.modes = n;
            }
            if let Some(n) = a.chains {
                cfg.sampler.mcmc.n_chains = n;
            }
        }
        Command::Evolve(a) => {
            if let Some(t) = &a.times {
                cfg.apply_override(&format!("dynamics.times={t} ms"))?;
            }
            if let Some(n) = a.modes {
                cfg.dynamics.modes = n;
            }
            if a.zero_density {
                cfg.dynamics.zero_density = true;
            }
        }
        Command::Analyze(a) => {
            if let Some(w) = a.window {
                cfg.analysis.window = w;
            }
            if let Some(b) = a.bootstrap {
                cfg.analysis.bootstrap = b;
            }
        }
        Command::Tomograph(a) => {
            if a.diagonal {
                cfg.tomography.diagonal = true;
            }
            if let Some(n) = a.modes {
                cfg.tomography.modes = n;
            }
            if let Some(w) = a.window {
                cfg.analysis.window = w;
            }
        }
        Command::Ingest(_) => {}
        Command::Propagator(a) => {
            if let Some(t) = &a.times {
                cfg.apply_override(&format!("dynamics.times={t} ms"))?;
            }
            if let Some(n) = a.modes {
                cfg.dynamics.modes = n;
            }
        }
    }
    Ok(())
}

fn absolutize_inputs(command: &mut Command) -> Result<()> {
    let abs = |p: &mut PathBuf| -> Result<()> {
        *p = fs::canonicalize(&*p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
        Ok(())
    };
    match command {
        Command::Evolve(a) => a.input.iter_mut().try_for_each(abs),
        Command::Analyze(a) => a.inputs.iter_mut().try_for_each(abs),
        Command::Tomograph(a) => a.inputs.iter_mut().try_for_each(abs),
        Command::Ingest(a) => a.input.iter_mut().chain(a.density.iter_mut()).try_for_each(abs),
        Command::Sample(_) | Command::Propagator(_) => Ok(()),
    }
}

/// Runs a parsed command line and returns the output directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let g = cli.global;
    let (mut cfg, command, expected_inputs) = match &g.from_manifest {
        Some(path) => {
            let m = Manifest::load(path)?;
            if m.command != cli.command.name() {
                return Err(usage(format!("manifest records `{}`, not `{}`", m.command, cli.command.name())));
            }
            (RunConfig::from_json(&m.config)?, Command::from_arguments(&m.command, m.arguments)?, Some(m.inputs))
        }
        None => {
            let mut cfg = match &g.config {
                Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
                None => RunConfig::default(),
            };
            for o in &g.overrides {
                cfg.apply_override(o)?;
            }
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let mut command = cli.command;
            absolutize_inputs(&mut command)?;
            (cfg, command, None)
        }
    };
    apply_flags(&mut cfg, &command)?;
    let out = g.out.unwrap_or_else(|| PathBuf::from("gaussify-out"));
    let threads = match g.threads {
        Some(0) => return Err(usage("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let _lock = OutputLock::acquire(&out)?;
    let mut ctx = Context { cfg, out: out.clone(), threads, inputs: Vec::new(), outputs: Vec::new() };
    let outcome = match &command {
        Command::Sample(a) => cmd_sample(&mut ctx, a),
        Command::Evolve(a) => cmd_evolve(&mut ctx, a),
        Command::Analyze(a) => cmd_analyze(&mut ctx, a),
        Command::Tomograph(a) => cmd_tomograph(&mut ctx, a),
        Command::Ingest(a) => cmd_ingest(&mut ctx, a),
        Command::Propagator(a) => cmd_propagator(&mut ctx, a),
    };
    let outcome = outcome.and_then(|deferred| {
        let inputs = ctx.inputs.iter().map(|p| digest(p, None)).collect::<Result<Vec<_>>>()?;
        if let Some(expected) = expected_inputs {
            for (a, b) in inputs.iter().zip(&expected) {
                if a.sha256 != b.sha256 {
                    return Err(Error::Format {
                        path: PathBuf::from(&a.path),
                        msg: "input differs from the one recorded in the manifest".into(),
                    });
                }
            }
        }
        let outputs = ctx.outputs.iter().map(|p| digest(p, Some(&ctx.out))).collect::<Result<Vec<_>>>()?;
        Manifest {
            tool: "gaussify".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            format_version: crate::io::FORMAT_VERSION,
            command: command.name().into(),
            seed: ctx.cfg.seed,
            config: ctx.cfg.to_json(),
            arguments: command.arguments(),
            inputs,
            outputs,
        }
        .save(&ctx.out)?;
        deferred.map_or(Ok(()), Err)
    });
    outcome.map(|_| out)
}

/// A numerical failure reported after all outputs are written.
type Deferred = Option<Error>;

fn write_ensemble(ctx: &mut Context, ens: &FieldEnsemble, stem: &str, text: bool) -> Result<()> {
    let p = ctx.output(&format!("{stem}.gsf"));
    save_ensemble(ens, &p)?;
    if text {
        let p = ctx.output(&format!("{stem}.tsv"));
        ensemble_table(ens)?.save(&p)?;
    }
    Ok(())
}

fn cmd_sample(ctx: &mut Context, a: &SampleArgs) -> Result<Deferred> {
    let cfg = ctx.cfg.clone();
    let geo = cfg.geometry()?;
    let params = cfg.params()?;
    let s = &cfg.sampler;
    let ens = match s.model {
        Model::Tll => {
            let basis = ModeBasis::new(&geo, params.c, Dispersion::Linear, s.modes)?;
            sample_gaussian_thermal(&basis, &params, s.statistics, s.shots, cfg.seed)?
        }
        Model::Kg => {
            if params.tunnel_j <= 0.0 {
                return Err(Error::InvalidArgument("the Klein-Gordon model needs J > 0".into()));
            }
            let basis = ModeBasis::new(&geo, params.c, Dispersion::Massive { gap: params.kg_gap_sq().sqrt() }, s.modes)?;
            sample_gaussian_thermal(&basis, &params, s.statistics, s.shots, cfg.seed)?
        }
        Model::Sg => {
            let (ens, diag) = sample_sg_classical(&geo, &params, &s.mcmc, s.shots, cfg.seed)?;
            let p = ctx.output("diagnostics.json");
            fs::write(&p, serde_json::to_string_pretty(&diag).expect("plain data") + "\n")?;
            ens
        }
    };
    write_ensemble(ctx, &ens, "ensemble", a.text)?;
    Ok(None)
}

fn cmd_evolve(ctx: &mut Context, a: &EvolveArgs) -> Result<Deferred> {
    let input = a.input.as_ref().ok_or_else(|| usage("evolve needs --input"))?;
    let input = ctx.input(input)?;
    let mut ens = load_ensemble(&input)?;
    if ctx.cfg.dynamics.zero_density {
        ens = ens.density_zeroed();
    }
    let params = ctx.cfg.params()?;
    let basis = ModeBasis::new(&ens.geometry, params.c, ctx.cfg.dispersion()?, ctx.cfg.dynamics.modes)?;
    let times = ctx.cfg.dynamics.times.clone();
    let evolved = parallel_map(&times, ctx.threads, |&t| {
        evolve_ensemble(&ens, &basis, &params, &[t]).map(|mut v| v.remove(0))
    })?;
    let mut index = Table::new(&["index", "time_ms"]);
    for (i, e) in evolved.iter().enumerate() {
        write_ensemble(ctx, e, &format!("ensemble_t{i:03}"), a.text)?;
        index.push(vec![i as f64, e.time]);
    }
    let p = ctx.output("times.tsv");
    index.save(&p)?;
    Ok(None)
}

fn analysis_window(cfg: &RunConfig, n_pixels: usize) -> Result<Window> {
    let w = Window::centered(n_pixels, cfg.analysis.window)?;
    match cfg.analysis.reference {
        Some(r) => Window::new(w.start, w.len, r),
        None => Ok(w),
    }
}

fn load_sorted(ctx: &mut Context, inputs: &[PathBuf]) -> Result<Vec<FieldEnsemble>> {
    if inputs.is_empty() {
        return Err(usage("no input ensembles given"));
    }
    let paths = inputs.iter().map(|p| ctx.input(p)).collect::<Result<Vec<_>>>()?;
    let mut ens = parallel_map(&paths, ctx.threads, |p| load_ensemble(p))?;
    ens.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(ens)
}

struct TimeAnalysis {
    time: f64,
    m4: (f64, f64),
    bias: (f64, f64),
    bias_unreliable: bool,
    fcs: crate::stats::Fcs,
    cphiphi: Vec<crate::stats::Estimate>,
    cuu: Vec<f64>,
    k2: (f64, f64),
    k4: (f64, f64),
}

fn cmd_analyze(ctx: &mut Context, a: &AnalyzeArgs) -> Result<Deferred> {
    let ens = load_sorted(ctx, &a.inputs)?;
    let cfg = ctx.cfg.clone();
    let an = &cfg.analysis;
    let results = parallel_map(&ens, ctx.threads, |e| {
        let w = analysis_window(&cfg, e.n_pixels())?;
        let m4 = ensemble_non_gaussianity(e.phase.view(), &w, an.bootstrap, cfg.seed)?;
        let windowed = windowed_phase(e.phase.view(), &w)?;
        for warning in odd_moment_warnings(windowed.view(), 4.0) {
            eprintln!("warning: t = {} ms, {warning}", e.time);
        }
        let phi2 = second_moments(windowed.view());
        let bias = m4_bias(&phi2, e.n_shots(), an.bias_trials.max(2), cfg.seed)?;
        let fcs = full_counting_statistics(e.phase.view(), w.range(), an.fcs_distance, an.fcs_bins, an.bootstrap, cfg.seed)?;
        let cphiphi = phase_autocorrelation(e.phase.view(), w.reference, w.range())?;
        let cuu = velocity_correlation(e.phase.view(), e.geometry.dz(), w.start..w.start + w.len - 1)?;
        let (i0, i1) = (an.plateau_start, an.plateau_start + an.plateau_distance);
        if i1 >= e.n_pixels() {
            return Err(usage(format!("plateau interval {i0}..={i1} exceeds {} pixels", e.n_pixels())));
        }
        let groups: Vec<_> = e.phase.rows().into_iter().map(|r| power_sums([r[i1] - r[i0]])).collect();
        let k2 = jackknife(&groups, variance_of)?;
        let k4 = jackknife(&groups, fourth_cumulant_of)?;
        Ok(TimeAnalysis {
            time: e.time,
            m4: (m4.m4, m4.error),
            bias: (bias.mean, bias.upper()),
            bias_unreliable: bias.unreliable,
            fcs,
            cphiphi,
            cuu,
            k2: (k2.value, k2.error),
            k4: (k4.value, k4.error),
        })
    })?;
    let mut m4 = Table::new(&["time_ms", "m4", "m4_error", "bias_mean", "bias_upper", "bias_unreliable"]).meta("window", an.window);
    let mut moments = Table::new(&["time_ms", "variance", "variance_error", "kurtosis", "kurtosis_error"])
        .meta("distance_px", an.fcs_distance);
    let mut fcs = Table::new(&["time_ms", "bin_low", "bin_high", "count"]);
    let mut cphi = Table::new(&["time_ms", "r_px", "c_phiphi", "c_phiphi_error"]);
    let mut cuu = Table::new(&["time_ms", "r_px", "c_uu"]);
    let mut cum = Table::new(&["time_ms", "k2", "k2_error", "k4", "k4_error"])
        .meta("interval_px", format!("{}..={}", an.plateau_start, an.plateau_start + an.plateau_distance));
    for r in &results {
        m4.push(vec![r.time, r.m4.0, r.m4.1, r.bias.0, r.bias.1, f64::from(u8::from(r.bias_unreliable))]);
        moments.push(vec![r.time, r.fcs.variance.value, r.fcs.variance.error, r.fcs.kurtosis.value, r.fcs.kurtosis.error]);
        for (b, &c) in r.fcs.counts.iter().enumerate() {
            fcs.push(vec![r.time, r.fcs.bin_edges[b], r.fcs.bin_edges[b + 1], c as f64]);
        }
        for (d, c) in r.cphiphi.iter().enumerate() {
            cphi.push(vec![r.time, d as f64, c.value, c.error]);
        }
        for (d, &c) in r.cuu.iter().enumerate() {
            cuu.push(vec![r.time, d as f64, c]);
        }
        cum.push(vec![r.time, r.k2.0, r.k2.1, r.k4.0, r.k4.1]);
    }
    for (name, t) in [("m4.tsv", m4), ("moments.tsv", moments), ("fcs.tsv", fcs), ("c_phiphi.tsv", cphi), ("c_uu.tsv", cuu), ("cumulants.tsv", cum)] {
        let p = ctx.output(name);
        t.save(&p)?;
    }
    if results.len() >= 4 {
        let times: Vec<f64> = results.iter().map(|r| r.time).collect();
        let mut plateau = Table::new(&["order", "initial", "plateau", "ratio", "expected_ratio", "knee_ms"]);
        for (order, series) in [(2u32, results.iter().map(|r| r.k2.0).collect::<Vec<_>>()), (4, results.iter().map(|r| r.k4.0).collect())] {
            let f = plateau_analysis(&times, &series, order)?;
            plateau.push(vec![order as f64, f.initial, f.plateau, f.ratio, f.expected_ratio, f.knee]);
        }
        let p = ctx.output("plateau.tsv");
        plateau.save(&p)?;
    }
    Ok(None)
}

fn cmd_tomograph(ctx: &mut Context, a: &TomographArgs) -> Result<Deferred> {
    let ens = load_sorted(ctx, &a.inputs)?;
    let cfg = ctx.cfg.clone();
    let params = cfg.params()?;
    let geo = ens[0].geometry.clone();
    let window = analysis_window(&cfg, geo.n_pixels())?;
    let dataset = build_dataset(&ens, &window, params.smear)?;
    let basis = ModeBasis::new(&geo, params.c, cfg.dispersion()?, cfg.tomography.modes)?;
    let t = &cfg.tomography;
    let result = if t.diagonal {
        reconstruct_diagonal(&dataset, &basis, &params, t.statistics, &t.options)?
    } else {
        reconstruct(&dataset, &basis, &params, t.statistics, &t.options)?
    };
    let p = ctx.output("reconstruction.gsf");
    save_reconstruction(&result, &p)?;
    let p = ctx.output("summary.tsv");
    fs::write(&p, result.summary())?;
    let mut cost = Table::new(&["iteration", "cost"]);
    for (i, c) in result.cost_log.iter().enumerate() {
        cost.push(vec![i as f64, *c]);
    }
    let p = ctx.output("cost.tsv");
    cost.save(&p)?;
    let rho = realspace_density_covariance(&result, &basis, &params)?;
    let mut c = crate::io::Container::new("density_covariance");
    c.set("geometry", &geo)?;
    c.push("density_density", rho);
    let p = ctx.output("density_covariance.gsf");
    c.save(&p)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok((!result.converged).then(|| {
        Error::Tolerance(format!("reconstruction stopped after {} iterations without converging", result.iterations))
    }))
}

/// Unwraps every row from `reference` and subtracts the reference phase.
pub fn unwrap_and_reference(raw: &Array2<f64>, reference: usize) -> Result<Array2<f64>> {
    let mut out = raw.clone();
    for mut row in out.rows_mut() {
        let u = unwrap_phase(row.as_slice().expect("rows of an owned array are contiguous"), reference)?;
        let r = u[reference];
        for (o, v) in row.iter_mut().zip(u) {
            *o = v - r;
        }
    }
    Ok(out)
}

fn cmd_ingest(ctx: &mut Context, a: &IngestArgs) -> Result<Deferred> {
    let input = a.input.as_ref().ok_or_else(|| usage("ingest needs --input"))?;
    let dz = a.dz.ok_or_else(|| usage("ingest needs --dz (pixel size in μm)"))?;
    let reference = a.reference.ok_or_else(|| usage("ingest needs --reference (pixel index)"))?;
    let input = ctx.input(input)?;
    let raw = read_phase_table(&input)?;
    let (shots, n) = raw.dim();
    if reference >= n {
        return Err(usage(format!("reference pixel {reference} outside {n} columns")));
    }
    let phase = unwrap_and_reference(&raw, reference)?;
    let density = match &a.density {
        Some(p) => {
            let p = ctx.input(p)?;
            let d = read_phase_table(&p)?;
            if d.dim() != (shots, n) {
                return Err(Error::Format { path: p, msg: format!("density table is {:?}, phase table is {:?}", d.dim(), (shots, n)) });
            }
            d
        }
        None => Array2::zeros((shots, n)),
    };
    let trap = match a.trap {
        TrapArg::Neumann => Trap::BoxNeumann,
        TrapArg::Dirichlet => Trap::BoxDirichlet,
        TrapArg::Parabolic => Trap::Parabolic,
    };
    let geo = Geometry::new(trap, dz * n as f64, n)?;
    let ens = FieldEnsemble::new(geo, phase, density, a.time)?.with_origin(ctx.cfg.seed, Provenance::Ingested);
    write_ensemble(ctx, &ens, "ensemble", a.text)?;
    Ok(None)
}

fn cmd_propagator(ctx: &mut Context, _a: &PropagatorArgs) -> Result<Deferred> {
    let cfg = ctx.cfg.clone();
    let geo = cfg.geometry()?;
    let params = cfg.params()?;
    let basis = ModeBasis::new(&geo, params.c, cfg.dispersion()?, cfg.dynamics.modes)?;
    let times = cfg.dynamics.times.clone();
    let props = parallel_map(&times, ctx.threads, |&t| Ok(propagators(&basis, t)))?;
    for (i, (p, &t)) in props.iter().zip(&times).enumerate() {
        let path = ctx.output(&format!("propagator_t{i:03}.gsf"));
        save_propagators(p, &geo, t, &path)?;
    }
    let d = delocalization_diagnostic(&basis, &times)?;
    let fmt = |a: Option<f64>| a.map_or("none".to_string(), |v| v.to_string());
    let mut table = Table::new(&["time_ms", "sup_phase_phase", "sup_phase_density"])
        .meta("alpha_phase_phase", fmt(d.alpha))
        .meta("alpha_phase_density", fmt(d.alpha_phase_density));
    for (i, &t) in times.iter().enumerate() {
        table.push(vec![t, d.sup_phase_phase[i], d.sup_phase_density[i]]);
    }
    let p = ctx.output("delocalization.tsv");
    table.save(&p)?;
    Ok(None)
}
