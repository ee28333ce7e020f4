//! Thermal ensembles of phase and density profiles.
//!
//! Two samplers are provided. [`sample_gaussian_thermal`] draws independent
//! mode amplitudes of a quadratic (Tomonaga-Luttinger) state.
//! [`sample_sg_classical`] runs single-site Metropolis chains on the
//! discretised classical sine-Gordon energy and attaches a white-noise
//! density sector. Every shot or chain owns an RNG stream derived from
//! `(seed, index)`, so results are bit-identical across runs.
//!
//! Phase profiles are returned unreferenced: with tunnelling the cosine term
//! pins the absolute phase, and `stats::reference_phase` subtracts a
//! reference pixel where only differences are wanted.

use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{Dispersion, Geometry, ModeBasis, PhysParams};

const DOMAIN_THERMAL: u64 = 1;
const DOMAIN_CHAIN: u64 = 2;
const DOMAIN_DENSITY: u64 = 3;
const DOMAIN_CLUSTER: u64 = 4;

/// Independent ChaCha8 stream keyed by `(seed, domain, index)`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Where an ensemble came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    TllThermal,
    KgThermal,
    SgClassical,
    Evolved,
    Ingested,
}

/// Shots of phase and density profiles sharing one geometry and time.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEnsemble {
    pub geometry: Geometry,
    /// Relative phase φ(z), shots × pixels, in rad.
    pub phase: Array2<f64>,
    /// Relative density fluctuation δρ(z), shots × pixels, in 1/μm.
    pub density: Array2<f64>,
    /// Evolution time in ms.
    pub time: f64,
    pub seed: u64,
    pub provenance: Provenance,
    /// Mode count the profiles were synthesised from, when mode-limited.
    pub modes: Option<usize>,
}

impl FieldEnsemble {
    /// Validated ensemble marked as externally supplied data with seed 0;
    /// see [`FieldEnsemble::with_origin`].
    pub fn new(geometry: Geometry, phase: Array2<f64>, density: Array2<f64>, time: f64) -> Result<Self> {
        ensure(phase.dim() == density.dim(), || {
            format!("phase {:?} and density {:?} shapes differ", phase.dim(), density.dim())
        })?;
        ensure(phase.ncols() == geometry.n_pixels(), || {
            format!("{} pixels in data but {} in geometry", phase.ncols(), geometry.n_pixels())
        })?;
        ensure(phase.nrows() >= 2, || format!("ensemble needs at least 2 shots, got {}", phase.nrows()))?;
        ensure(time.is_finite(), || format!("time tag must be finite, got {time}"))?;
        ensure(phase.iter().chain(density.iter()).all(|v| v.is_finite()), || {
            "ensemble contains non-finite values".into()
        })?;
        Ok(Self { geometry, phase, density, time, seed: 0, provenance: Provenance::Ingested, modes: None })
    }

    pub fn with_origin(mut self, seed: u64, provenance: Provenance) -> Self {
        self.seed = seed;
        self.provenance = provenance;
        self
    }

    pub fn with_modes(mut self, modes: usize) -> Self {
        self.modes = Some(modes);
        self
    }

    pub fn n_shots(&self) -> usize {
        self.phase.nrows()
    }

    pub fn n_pixels(&self) -> usize {
        self.phase.ncols()
    }

    /// Copy with the density sector set to zero, used as a control.
    pub fn density_zeroed(&self) -> Self {
        let mut out = self.clone();
        out.density.fill(0.0);
        out
    }

    /// Copy restricted to the first `n` shots.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_shots());
        Self {
            geometry: self.geometry.clone(),
            phase: self.phase.slice(ndarray::s![..n, ..]).to_owned(),
            density: self.density.slice(ndarray::s![..n, ..]).to_owned(),
            time: self.time,
            seed: self.seed,
            provenance: self.provenance,
            modes: self.modes,
        }
    }
}

/// Quantum (Bose-Einstein) or classical (Rayleigh-Jeans) occupation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Statistics {
    Quantum,
    Classical,
}

/// Canonical variances (⟨φ_k²⟩, ⟨δρ_k²⟩) of a thermal mode with frequency `omega`.
pub fn thermal_mode_variances(omega: f64, beta: f64, statistics: Statistics) -> (f64, f64) {
    match statistics {
        Statistics::Quantum => {
            let x = beta * omega;
            let coth = if x > 700.0 { 1.0 } else { 1.0 / (0.5 * x).tanh() };
            (coth / (2.0 * omega), omega * coth / 2.0)
        }
        Statistics::Classical => {
            if beta.is_infinite() {
                (0.0, 0.0)
            } else {
                (1.0 / (beta * omega * omega), 1.0 / beta)
            }
        }
    }
}

/// Gaussian thermal ensemble of a quadratic Hamiltonian with the frequencies of `basis`.
pub fn sample_gaussian_thermal(
    basis: &ModeBasis,
    params: &PhysParams,
    statistics: Statistics,
    shots: usize,
    seed: u64,
) -> Result<FieldEnsemble> {
    params.validate()?;
    ensure(shots >= 1, || "need at least one shot".into())?;
    let n = basis.n_modes();
    let scale = params.phase_scale();
    let sd: Vec<(f64, f64)> = basis
        .frequencies()
        .iter()
        .map(|&w| {
            let (vp, vr) = thermal_mode_variances(w, params.beta, statistics);
            (vp.sqrt() * scale, vr.sqrt() / scale)
        })
        .collect();
    let mut phi = Array2::<f64>::zeros((shots, n));
    let mut rho = Array2::<f64>::zeros((shots, n));
    for s in 0..shots {
        let mut rng = stream_rng(seed, DOMAIN_THERMAL, s as u64);
        for k in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            phi[[s, k]] = sd[k].0 * a;
            rho[[s, k]] = sd[k].1 * b;
        }
    }
    let provenance = match basis.dispersion() {
        Dispersion::Massive { .. } => Provenance::KgThermal,
        _ => Provenance::TllThermal,
    };
    Ok(FieldEnsemble::new(basis.geometry().clone(), basis.synthesize(phi.view()), basis.synthesize(rho.view()), 0.0)?
        .with_origin(seed, provenance)
        .with_modes(n))
}

/// White-noise classical density sector with per-pixel variance 1/(2βg δz).
pub fn sample_cfa_density(geometry: &Geometry, params: &PhysParams, shots: usize, seed: u64) -> Result<Array2<f64>> {
    ensure(params.beta.is_finite(), || "classical density sector needs finite temperature".into())?;
    let sd = (1.0 / (2.0 * params.beta * params.g() * geometry.dz())).sqrt();
    let mut out = Array2::<f64>::zeros((shots, geometry.n_pixels()));
    for (s, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = stream_rng(seed, DOMAIN_DENSITY, s as u64);
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sd * z;
        }
    }
    Ok(out)
}

/// Boundary condition of the Metropolis lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatticeBoundary {
    Neumann,
    Periodic,
}

/// Settings of the sine-Gordon Metropolis sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub burn_in_sweeps: usize,
    /// Sweeps between stored samples.
    pub thinning: usize,
    pub n_chains: usize,
    /// Overrelaxation sweeps after each Metropolis sweep.
    pub overrelaxation: usize,
    pub target_acceptance: f64,
    pub boundary: LatticeBoundary,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burn_in_sweeps: 2000,
            thinning: 20,
            n_chains: 8,
            overrelaxation: 1,
            target_acceptance: 0.44,
            boundary: LatticeBoundary::Neumann,
        }
    }
}

/// Health indicators of a sampler run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcDiagnostics {
    /// Metropolis acceptance rate after burn-in.
    pub acceptance: f64,
    /// Mean adapted proposal half-width in rad.
    pub proposal_width: f64,
    /// Integrated autocorrelation time of the energy, in sweeps.
    pub tau_int: f64,
    pub sweeps_per_chain: usize,
    /// Set when `tau_int` exceeds a fiftieth of the sweeps per chain.
    pub non_ergodic: bool,
}

/// Dimensionless couplings of β H_cl: `a Σ (φ_{i+1} - φ_i)² - b Σ cos φ_i`.
#[derive(Clone, Copy, Debug)]
struct Couplings {
    a: f64,
    b: f64,
}

impl Couplings {
    fn new(geometry: &Geometry, params: &PhysParams) -> Self {
        let dz = geometry.dz();
        let stiffness = params.c * params.luttinger_k / (2.0 * std::f64::consts::PI);
        Self {
            a: params.beta * stiffness / dz,
            b: params.beta * 2.0 * params.tunnel_j * params.density * dz,
        }
    }
}

struct Chain {
    phi: Vec<f64>,
    width: f64,
    periodic: bool,
    cp: Couplings,
}

impl Chain {
    fn neighbours(&self, i: usize) -> (Option<f64>, Option<f64>) {
        let n = self.phi.len();
        let left = if i > 0 {
            Some(self.phi[i - 1])
        } else if self.periodic {
            Some(self.phi[n - 1])
        } else {
            None
        };
        let right = if i + 1 < n {
            Some(self.phi[i + 1])
        } else if self.periodic {
            Some(self.phi[0])
        } else {
            None
        };
        (left, right)
    }

    fn local_energy(&self, i: usize, x: f64) -> f64 {
        let (l, r) = self.neighbours(i);
        let mut e = -self.cp.b * x.cos();
        if let Some(l) = l {
            e += self.cp.a * (x - l) * (x - l);
        }
        if let Some(r) = r {
            e += self.cp.a * (x - r) * (x - r);
        }
        e
    }

    fn metropolis_sweep(&mut self, rng: &mut ChaCha8Rng) -> usize {
        let mut accepted = 0;
        for i in 0..self.phi.len() {
            let old = self.phi[i];
            let new = old + self.width * (2.0 * rng.random::<f64>() - 1.0);
            let de = self.local_energy(i, new) - self.local_energy(i, old);
            if de <= 0.0 || rng.random::<f64>() < (-de).exp() {
                self.phi[i] = new;
                accepted += 1;
            }
        }
        accepted
    }

    /// Reflects each site about the mean of its neighbours; the gradient
    /// energy is unchanged, the cosine term is accepted by Metropolis.
    fn overrelax_sweep(&mut self, rng: &mut ChaCha8Rng) {
        for i in 0..self.phi.len() {
            let (l, r) = self.neighbours(i);
            let mu = match (l, r) {
                (Some(l), Some(r)) => 0.5 * (l + r),
                (Some(x), None) | (None, Some(x)) => x,
                (None, None) => continue,
            };
            let old = self.phi[i];
            let new = 2.0 * mu - old;
            let de = -self.cp.b * (new.cos() - old.cos());
            if de <= 0.0 || rng.random::<f64>() < (-de).exp() {
                self.phi[i] = new;
            }
        }
    }

    fn energy(&self) -> f64 {
        let n = self.phi.len();
        let mut e = -self.cp.b * self.phi.iter().map(|x| x.cos()).sum::<f64>();
        for i in 0..n - 1 {
            let d = self.phi[i + 1] - self.phi[i];
            e += self.cp.a * d * d;
        }
        if self.periodic {
            let d = self.phi[0] - self.phi[n - 1];
            e += self.cp.a * d * d;
        }
        e
    }
}

/// Integrated autocorrelation time with Sokal's self-consistent window (c = 5).
pub fn integrated_autocorrelation(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return 0.5;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return 0.5;
    }
    let mut tau = 0.5;
    for lag in 1..n / 2 {
        let c = series[..n - lag]
            .iter()
            .zip(&series[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / ((n - lag) as f64 * var);
        tau += c;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(0.5)
}

/// Classical sine-Gordon ensemble on the pixel grid of `geometry`.
///
/// The phase sector samples exp(-β H_cl) with
/// `H_cl = Σ δz [ (n/4m) ((φ_{i+1} - φ_i)/δz)² - 2 J n cos φ_i ]`; the
/// density sector is independent white noise (see [`sample_cfa_density`]).
/// Fails with [`Error::Diagnostics`] if the acceptance rate leaves [0.1, 0.9].
pub fn sample_sg_classical(
    geometry: &Geometry,
    params: &PhysParams,
    config: &McmcConfig,
    shots: usize,
    seed: u64,
) -> Result<(FieldEnsemble, McmcDiagnostics)> {
    params.validate()?;
    ensure(params.beta.is_finite(), || "classical sampling needs finite temperature".into())?;
    ensure(shots >= 1 && config.n_chains >= 1 && config.thinning >= 1, || {
        "shots, chains and thinning must be positive".into()
    })?;
    ensure(config.target_acceptance > 0.0 && config.target_acceptance < 1.0, || {
        "target acceptance must lie in (0, 1)".into()
    })?;
    let n = geometry.n_pixels();
    let cp = Couplings::new(geometry, params);
    let chains = config.n_chains.min(shots);
    let per_chain = shots.div_ceil(chains);
    let sweeps_per_chain = per_chain * config.thinning;
    let mut phase = Array2::<f64>::zeros((shots, n));
    let (mut acc, mut props, mut width_sum, mut tau_sum) = (0usize, 0usize, 0.0, 0.0);

    for c in 0..chains {
        let mut rng = stream_rng(seed, DOMAIN_CHAIN, c as u64);
        let offset = if cp.b > 0.0 { 0.0 } else { std::f64::consts::PI * (2.0 * rng.random::<f64>() - 1.0) };
        let mut chain = Chain {
            phi: vec![offset; n],
            width: (1.0 / cp.a.max(1e-12)).sqrt().min(std::f64::consts::PI),
            periodic: config.boundary == LatticeBoundary::Periodic,
            cp,
        };
        let (mut win_acc, mut win_props) = (0usize, 0usize);
        for sweep in 0..config.burn_in_sweeps {
            win_acc += chain.metropolis_sweep(&mut rng);
            win_props += n;
            for _ in 0..config.overrelaxation {
                chain.overrelax_sweep(&mut rng);
            }
            if (sweep + 1) % 25 == 0 {
                let rate = win_acc as f64 / win_props as f64;
                let factor = (rate / config.target_acceptance).clamp(0.5, 2.0);
                chain.width = (chain.width * factor).clamp(1e-6, 2.0 * std::f64::consts::PI);
                win_acc = 0;
                win_props = 0;
            }
        }
        let first = c * shots / chains;
        let last = (c + 1) * shots / chains;
        let mut energies = Vec::with_capacity(sweeps_per_chain);
        for sweep in 0..(last - first) * config.thinning {
            acc += chain.metropolis_sweep(&mut rng);
            props += n;
            for _ in 0..config.overrelaxation {
                chain.overrelax_sweep(&mut rng);
            }
            energies.push(chain.energy());
            if (sweep + 1) % config.thinning == 0 {
                let s = first + sweep / config.thinning;
                phase.row_mut(s).iter_mut().zip(&chain.phi).for_each(|(d, v)| *d = *v);
            }
        }
        width_sum += chain.width;
        tau_sum += integrated_autocorrelation(&energies);
    }

    let acceptance = acc as f64 / props.max(1) as f64;
    let tau_int = tau_sum / chains as f64;
    let diagnostics = McmcDiagnostics {
        acceptance,
        proposal_width: width_sum / chains as f64,
        tau_int,
        sweeps_per_chain,
        non_ergodic: tau_int > sweeps_per_chain as f64 / 50.0,
    };
    if !(0.1..=0.9).contains(&acceptance) {
        return Err(Error::Diagnostics(format!(
            "acceptance rate {acceptance:.3} outside [0.1, 0.9]"
        )));
    }
    let density = sample_cfa_density(geometry, params, shots, seed)?;
    Ok((FieldEnsemble::new(geometry.clone(), phase, density, 0.0)?.with_origin(seed, Provenance::SgClassical), diagnostics))
}

/// Shot-noise construction of a clustered, non-Gaussian velocity field.
///
/// Each pixel independently receives a kick ±`amplitude` with probability
/// `kick_probability`; each kick decays along the positive direction as
/// `exp(-d / correlation_length)` with periodic wrap-around. The connected
/// two-point function is then exactly `∝ exp(-|d| / correlation_length)`,
/// and connected correlations of every order decay on the same scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteredField {
    /// Exponential decay length ξ of the connected two-point function, in pixels.
    pub correlation_length: f64,
    pub kick_probability: f64,
    pub amplitude: f64,
}

/// Samples `shots` periodic velocity profiles of `n_pixels` pixels.
pub fn sample_clustered_velocity(
    n_pixels: usize,
    shots: usize,
    field: &ClusteredField,
    seed: u64,
) -> Result<Array2<f64>> {
    ensure(field.correlation_length > 0.0, || "correlation length must be positive".into())?;
    ensure(field.kick_probability > 0.0 && field.kick_probability <= 1.0, || {
        "kick probability must lie in (0, 1]".into()
    })?;
    ensure(n_pixels >= 2, || "need at least 2 pixels".into())?;
    let reach = ((30.0 * field.correlation_length).ceil() as usize).min(n_pixels - 1);
    let kernel: Vec<f64> = (0..=reach)
        .map(|d| (-(d as f64) / field.correlation_length).exp())
        .collect();
    let mut out = Array2::<f64>::zeros((shots, n_pixels));
    for (s, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = stream_rng(seed, DOMAIN_CLUSTER, s as u64);
        for j in 0..n_pixels {
            if rng.random::<f64>() >= field.kick_probability {
                continue;
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let a = sign * field.amplitude;
            for (d, k) in kernel.iter().enumerate() {
                row[(j + d) % n_pixels] += a * k;
            }
        }
    }
    Ok(out)
}

/// Mean and standard error of ⟨cos φ⟩ over a pixel window.
pub fn coherence_factor(ensemble: &FieldEnsemble, window: Range<usize>) -> Result<(f64, f64)> {
    ensure(window.start < window.end && window.end <= ensemble.n_pixels(), || {
        format!("window {window:?} does not fit {} pixels", ensemble.n_pixels())
    })?;
    let per_shot: Vec<f64> = ensemble
        .phase
        .axis_iter(Axis(0))
        .map(|row| row.slice(ndarray::s![window.clone()]).iter().map(|p| p.cos()).sum::<f64>() / window.len() as f64)
        .collect();
    let n = per_shot.len() as f64;
    let mean = per_shot.iter().sum::<f64>() / n;
    let var = per_shot.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}
