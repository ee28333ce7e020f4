//! Covariance tomography from time series of phase two-point functions.
//!
//! The forward model is linear in the initial quadrature covariance Γ₀:
//! each snapshot is `Φ₂(t) = K_t Γ₀ K_tᵀ` with `K_t` built from the mode
//! rotation to time `t`, the phase map to pixels, a Gaussian smear and the
//! referencing `Δφ = φ - φ(z₀)` restricted to the analysis window.
//! Reconstruction minimises the weighted mean squared deviation over the set
//! of physical covariances with an accelerated projected gradient method.

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{density_covariance, phase_map, project_physical, rotation_matrix, symmetrize, QuadratureCovariance};
use crate::error::{ensure, invalid, Error, Result};
use crate::model::{Geometry, ModeBasis, PhysParams};
use crate::sampler::{stream_rng, FieldEnsemble, Statistics};
use crate::stats::{smoothing_matrix, windowed_phase, Window};

const DOMAIN_NOISE: u64 = 21;

/// One measured two-point function with its entrywise standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub phi2: Array2<f64>,
    pub sigma: Array2<f64>,
}

/// Time-stamped referenced phase covariances over one window.
#[derive(Clone, Debug, PartialEq)]
pub struct TomographyDataset {
    pub geometry: Geometry,
    pub window: Window,
    /// Imaging smear σ in μm.
    pub smear: f64,
    pub snapshots: Vec<Snapshot>,
}

impl TomographyDataset {
    pub fn new(geometry: Geometry, window: Window, smear: f64, snapshots: Vec<Snapshot>) -> Result<Self> {
        ensure(!snapshots.is_empty(), || "dataset has no snapshots".into())?;
        ensure(window.start + window.len <= geometry.n_pixels(), || "window exceeds the geometry".into())?;
        ensure(smear >= 0.0 && smear.is_finite(), || format!("smear must be non-negative, got {smear}"))?;
        ensure(snapshots[0].time == 0.0, || "first snapshot must be at t = 0".into())?;
        for w in snapshots.windows(2) {
            ensure(w[1].time > w[0].time, || format!("snapshot times must increase strictly ({} after {})", w[1].time, w[0].time))?;
        }
        let n = window.len;
        for snap in &snapshots {
            ensure(snap.phi2.dim() == (n, n) && snap.sigma.dim() == (n, n), || {
                format!("snapshot at t = {} is not {n}x{n}", snap.time)
            })?;
            ensure(snap.sigma.iter().all(|v| *v >= 0.0 && v.is_finite()), || "errors must be finite and non-negative".into())?;
            ensure(snap.phi2.iter().all(|v| v.is_finite()), || "snapshot has non-finite entries".into())?;
            let scale = snap.phi2.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            for i in 0..n {
                for j in 0..i {
                    ensure((snap.phi2[[i, j]] - snap.phi2[[j, i]]).abs() <= 1e-10 * scale, || {
                        format!("snapshot at t = {} is not symmetric", snap.time)
                    })?;
                }
            }
        }
        Ok(Self { geometry, window, smear, snapshots })
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    /// Number of independent data entries (upper triangle without the reference).
    pub fn degrees_of_freedom(&self) -> usize {
        let m = self.window.len - 1;
        self.snapshots.len() * m * (m + 1) / 2
    }
}

/// Dataset from ensembles at distinct times; errors are jackknife standard
/// errors of each product mean.
pub fn build_dataset(ensembles: &[FieldEnsemble], window: &Window, smear: f64) -> Result<TomographyDataset> {
    ensure(ensembles.len() >= 3, || format!("need at least 3 snapshots, got {}", ensembles.len()))?;
    let geometry = ensembles[0].geometry.clone();
    ensure(ensembles.iter().all(|e| e.geometry == geometry), || "ensembles have different geometries".into())?;
    let mut snapshots = Vec::with_capacity(ensembles.len());
    for e in ensembles {
        ensure(e.n_shots() >= 2, || "each ensemble needs at least two shots".into())?;
        let d = windowed_phase(e.phase.view(), window)?;
        let (phi2, sigma) = moment_with_error(d.view());
        snapshots.push(Snapshot { time: e.time, phi2, sigma });
    }
    for w in snapshots.windows(2) {
        if w[1].time == w[0].time {
            return Err(invalid(format!("duplicate snapshot time {}", w[0].time)));
        }
    }
    TomographyDataset::new(geometry, window.clone(), smear, snapshots)
}

fn moment_with_error(d: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (shots, w) = d.dim();
    let n = shots as f64;
    let mean = d.t().dot(&d) / n;
    let sq = d.mapv(|v| v * v);
    let second = sq.t().dot(&sq) / n;
    let sigma = Array2::from_shape_fn((w, w), |(i, j)| {
        ((second[[i, j]] - mean[[i, j]].powi(2)).max(0.0) / (n - 1.0)).sqrt()
    });
    (mean, sigma)
}

/// Referencing and windowing operator applied to pixel-space profiles.
fn window_operator(n_pixels: usize, window: &Window) -> Array2<f64> {
    let mut p = Array2::zeros((window.len, n_pixels));
    for (row, pix) in window.range().enumerate() {
        p[[row, pix]] += 1.0;
        p[[row, window.reference]] -= 1.0;
    }
    p
}

/// Precomputed linear map from φ̃ to the windowed, smeared, referenced phase.
struct ForwardModel {
    /// `n_w × N` map from phase quadratures.
    m: Array2<f64>,
    omega: Vec<f64>,
}

impl ForwardModel {
    fn new(basis: &ModeBasis, params: &PhysParams, window: &Window, smear: f64) -> Result<Self> {
        let geo = basis.geometry();
        ensure(window.start + window.len <= geo.n_pixels(), || "window exceeds the geometry".into())?;
        let a = phase_map(basis, params);
        let sm = smoothing_matrix(geo.n_pixels(), smear / geo.dz());
        let p = window_operator(geo.n_pixels(), window);
        Ok(Self { m: p.dot(&sm).dot(&a), omega: basis.frequencies().to_vec() })
    }

    /// `K_t = M · (first N rows of the rotation to t)`.
    fn kernel(&self, t: f64) -> Array2<f64> {
        let n = self.omega.len();
        let r = rotation_matrix(&self.omega, t);
        self.m.dot(&r.slice(s![..n, ..]))
    }
}

/// Predicted referenced phase covariance at time `t` in the window.
pub fn forward_predict(
    gamma0: &QuadratureCovariance,
    basis: &ModeBasis,
    params: &PhysParams,
    window: &Window,
    smear: f64,
    t: f64,
) -> Result<Array2<f64>> {
    ensure(gamma0.omega() == basis.frequencies(), || "covariance and basis frequencies differ".into())?;
    let fm = ForwardModel::new(basis, params, window, smear)?;
    let k = fm.kernel(t);
    Ok(symmetrize(&k.dot(gamma0.matrix()).dot(&k.t())))
}

/// Synthetic dataset from a known Γ₀.
///
/// `sigma = relative_error · |Φ₂|`; with a `noise_seed` each entry of the
/// upper triangle is multiplied by `1 + relative_error · ε`, `ε ~ N(0, 1)`.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_dataset(
    gamma0: &QuadratureCovariance,
    basis: &ModeBasis,
    params: &PhysParams,
    window: &Window,
    smear: f64,
    times: &[f64],
    relative_error: f64,
    noise_seed: Option<u64>,
) -> Result<TomographyDataset> {
    ensure(relative_error > 0.0, || "relative error must be positive".into())?;
    let fm = ForwardModel::new(basis, params, window, smear)?;
    let mut snapshots = Vec::with_capacity(times.len());
    for (idx, &t) in times.iter().enumerate() {
        let k = fm.kernel(t);
        let truth = symmetrize(&k.dot(gamma0.matrix()).dot(&k.t()));
        let sigma = truth.mapv(|v| relative_error * v.abs());
        let mut phi2 = truth.clone();
        if let Some(seed) = noise_seed {
            let mut rng = stream_rng(seed, DOMAIN_NOISE, idx as u64);
            let n = phi2.nrows();
            for i in 0..n {
                for j in i..n {
                    let eps: f64 = rng.sample(StandardNormal);
                    let v = truth[[i, j]] * (1.0 + relative_error * eps);
                    phi2[[i, j]] = v;
                    phi2[[j, i]] = v;
                }
            }
        }
        snapshots.push(Snapshot { time: t, phi2, sigma });
    }
    TomographyDataset::new(basis.geometry().clone(), window.clone(), smear, snapshots)
}

/// Weighted least-squares objective over a dataset.
struct Objective {
    kernels: Vec<Array2<f64>>,
    data: Vec<Array2<f64>>,
    weights: Vec<Array2<f64>>,
    n_terms: f64,
}

impl Objective {
    fn new(dataset: &TomographyDataset, basis: &ModeBasis, params: &PhysParams) -> Result<Self> {
        ensure(basis.geometry() == &dataset.geometry, || "basis and dataset geometries differ".into())?;
        let fm = ForwardModel::new(basis, params, &dataset.window, dataset.smear)?;
        let floor = sigma_floor(dataset);
        let r = dataset.window.reference - dataset.window.start;
        let mut kernels = Vec::new();
        let mut data = Vec::new();
        let mut weights = Vec::new();
        for snap in &dataset.snapshots {
            kernels.push(fm.kernel(snap.time));
            data.push(snap.phi2.clone());
            let mut w = snap.sigma.mapv(|s| 1.0 / s.max(floor).powi(2));
            w.row_mut(r).fill(0.0);
            w.column_mut(r).fill(0.0);
            weights.push(w);
        }
        let m = dataset.window.len - 1;
        Ok(Self { kernels, data, weights, n_terms: (dataset.snapshots.len() * m * m) as f64 })
    }

    fn value(&self, gamma: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        for ((k, d), w) in self.kernels.iter().zip(&self.data).zip(&self.weights) {
            let pred = k.dot(gamma).dot(&k.t());
            acc += ((&pred - d).mapv(|v| v * v) * w).sum();
        }
        acc / self.n_terms
    }

    fn value_and_gradient(&self, gamma: &Array2<f64>) -> (f64, Array2<f64>) {
        let mut acc = 0.0;
        let mut grad = Array2::zeros(gamma.dim());
        for ((k, d), w) in self.kernels.iter().zip(&self.data).zip(&self.weights) {
            let pred = k.dot(gamma).dot(&k.t());
            let res = &pred - d;
            acc += (res.mapv(|v| v * v) * w).sum();
            let wr = &res * w;
            grad += &k.t().dot(&wr).dot(k);
        }
        (acc / self.n_terms, symmetrize(&grad) * (2.0 / self.n_terms))
    }
}

fn sigma_floor(dataset: &TomographyDataset) -> f64 {
    let r = dataset.window.reference - dataset.window.start;
    let mut all: Vec<f64> = dataset
        .snapshots
        .iter()
        .flat_map(|s| {
            s.sigma
                .indexed_iter()
                .filter(|((i, j), _)| *i != r && *j != r)
                .map(|(_, v)| *v)
                .collect::<Vec<_>>()
        })
        .collect();
    all.sort_by(|a, b| a.total_cmp(b));
    let median = if all.is_empty() { 0.0 } else { all[all.len() / 2] };
    (1e-3 * median).max(f64::MIN_POSITIVE)
}

/// Mean weighted squared deviation ΔΦ of the forward prediction of Γ.
///
/// Entries of σ below 10⁻³ of the median error are raised to that floor; the
/// reference row and column are identically zero and excluded.
pub fn cost(gamma: &QuadratureCovariance, dataset: &TomographyDataset, basis: &ModeBasis, params: &PhysParams) -> Result<f64> {
    ensure(gamma.omega() == basis.frequencies(), || "covariance and basis frequencies differ".into())?;
    Ok(Objective::new(dataset, basis, params)?.value(gamma.matrix()))
}

/// Optimiser settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionOptions {
    pub max_iterations: usize,
    /// Stop when the cost improved by less than this fraction over `window` iterations.
    pub relative_tolerance: f64,
    pub window: usize,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self { max_iterations: 50_000, relative_tolerance: 1e-8, window: 20 }
    }
}

/// Reconstructed initial covariance and optimiser diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub gamma: QuadratureCovariance,
    pub v_phiphi: Array2<f64>,
    pub v_rhorho: Array2<f64>,
    pub v_phirho: Array2<f64>,
    /// Final ΔΦ.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted iteration, starting with the initial guess.
    pub cost_log: Vec<f64>,
    /// Modes with ω_k t_max < π/2.
    pub under_rotated: Vec<bool>,
    pub warnings: Vec<String>,
}

impl ReconstructionResult {
    /// Human-readable per-mode table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# residual {:.6e}  iterations {}  converged {}", self.residual, self.iterations, self.converged);
        for w in &self.warnings {
            let _ = writeln!(out, "# warning: {w}");
        }
        let _ = writeln!(out, "k\tomega\tV_phiphi\tV_rhorho\tV_phirho\tratio\tunder_rotated");
        for k in 0..self.gamma.n_modes() {
            let _ = writeln!(
                out,
                "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}",
                k + 1,
                self.gamma.omega()[k],
                self.v_phiphi[[k, k]],
                self.v_rhorho[[k, k]],
                self.v_phirho[[k, k]],
                self.gamma.sector_ratio(k),
                self.under_rotated[k]
            );
        }
        out
    }
}

/// Full reconstruction over all physical 2N × 2N covariances.
pub fn reconstruct(
    dataset: &TomographyDataset,
    basis: &ModeBasis,
    params: &PhysParams,
    statistics: Statistics,
    options: &ReconstructionOptions,
) -> Result<ReconstructionResult> {
    run(dataset, basis, params, statistics, options, false)
}

/// Reconstruction restricted to block-diagonal Γ (one 2 × 2 block per mode).
pub fn reconstruct_diagonal(
    dataset: &TomographyDataset,
    basis: &ModeBasis,
    params: &PhysParams,
    statistics: Statistics,
    options: &ReconstructionOptions,
) -> Result<ReconstructionResult> {
    run(dataset, basis, params, statistics, options, true)
}

fn block_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((2 * n, 2 * n), |(i, j)| if i % n == j % n { 1.0 } else { 0.0 })
}

fn run(
    dataset: &TomographyDataset,
    basis: &ModeBasis,
    params: &PhysParams,
    statistics: Statistics,
    options: &ReconstructionOptions,
    diagonal: bool,
) -> Result<ReconstructionResult> {
    let n = basis.n_modes();
    let unknowns = if diagonal { 3 * n } else { n * (2 * n + 1) };
    ensure(unknowns <= dataset.degrees_of_freedom(), || {
        format!("{unknowns} unknowns exceed {} data degrees of freedom", dataset.degrees_of_freedom())
    })?;
    ensure(options.window >= 1 && options.max_iterations >= 1, || "invalid optimiser options".into())?;
    let quantum = statistics == Statistics::Quantum;
    let obj = Objective::new(dataset, basis, params)?;
    let mask = diagonal.then(|| block_mask(n));
    let project = |g: &Array2<f64>| -> Result<Array2<f64>> {
        let g = match &mask {
            Some(m) => g * m,
            None => g.clone(),
        };
        project_physical(&g, quantum)
    };

    let mask_grad = |g: Array2<f64>| match &mask {
        Some(m) => g * m,
        None => g,
    };
    let mut x = project(&initial_guess(&obj, n)?)?;
    let mut fx = obj.value(&x);
    let mut y = x.clone();
    let mut theta = 1.0f64;
    let mut lip = lipschitz_guess(&obj, n);
    let mut log = vec![fx];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let (fy, gy) = obj.value_and_gradient(&y);
        let gy = mask_grad(gy);
        let (mut cand, mut fc) = backtrack(&obj, &project, &y, fy, &gy, &mut lip)?;
        if fc > fx {
            // momentum overshoot: restart from the current iterate
            theta = 1.0;
            let (f, g) = obj.value_and_gradient(&x);
            (cand, fc) = backtrack(&obj, &project, &x, f, &mask_grad(g), &mut lip)?;
            if fc > fx {
                log.push(fx);
                converged = stalled(&log, options);
                break;
            }
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        y = &cand + &((&cand - &x) * beta);
        if mask.is_none() {
            y = symmetrize(&y);
        }
        theta = theta_next;
        x = cand;
        fx = fc;
        lip *= 0.9;
        log.push(fx);
        if stalled(&log, options) {
            converged = true;
            break;
        }
    }

    let gamma = QuadratureCovariance::new(basis.frequencies().to_vec(), symmetrize(&x))?;
    let t_max = dataset.snapshots.last().map(|s| s.time).unwrap_or(0.0);
    let under_rotated: Vec<bool> = basis.frequencies().iter().map(|w| w * t_max < std::f64::consts::FRAC_PI_2).collect();
    let mut warnings = Vec::new();
    for (k, flag) in under_rotated.iter().enumerate() {
        if *flag {
            warnings.push(format!("mode {} is under-rotated; its density variance is unreliable", k + 1));
        }
    }
    if !converged {
        warnings.push(format!("optimiser stopped after {iterations} iterations without meeting the tolerance"));
    }
    let m = gamma.matrix();
    Ok(ReconstructionResult {
        v_phiphi: m.slice(s![..n, ..n]).to_owned(),
        v_rhorho: m.slice(s![n.., n..]).to_owned(),
        v_phirho: m.slice(s![..n, n..]).to_owned(),
        residual: fx,
        gamma,
        iterations,
        converged,
        cost_log: log,
        under_rotated,
        warnings,
    })
}

/// Projected gradient step from `y` with a sufficient-decrease backtracking on `lip`.
fn backtrack(
    obj: &Objective,
    project: &impl Fn(&Array2<f64>) -> Result<Array2<f64>>,
    y: &Array2<f64>,
    fy: f64,
    gy: &Array2<f64>,
    lip: &mut f64,
) -> Result<(Array2<f64>, f64)> {
    loop {
        let cand = project(&(y - &(gy / *lip)))?;
        let fc = obj.value(&cand);
        let d = &cand - y;
        let bound = fy + (gy * &d).sum() + 0.5 * *lip * d.mapv(|v| v * v).sum();
        if fc <= bound + 1e-14 * fy.abs() || *lip > 1e300 {
            return Ok((cand, fc));
        }
        *lip *= 2.0;
    }
}

fn stalled(log: &[f64], options: &ReconstructionOptions) -> bool {
    let len = log.len();
    if len <= options.window {
        return false;
    }
    let old = log[len - 1 - options.window];
    let new = log[len - 1];
    new == 0.0 || (old - new) <= options.relative_tolerance * old.abs()
}

/// Diagonal classical guess from the t = 0 snapshot: V^φφ_kk by weighted
/// least squares, V^ρρ = V^φφ, no cross terms.
fn initial_guess(obj: &Objective, n: usize) -> Result<Array2<f64>> {
    let k0 = &obj.kernels[0];
    let (d, w) = (&obj.data[0], &obj.weights[0]);
    let outer: Vec<Array2<f64>> = (0..n)
        .map(|k| {
            let c = k0.column(k).insert_axis(Axis(1)).to_owned();
            c.dot(&c.t())
        })
        .collect();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    for p in 0..n {
        for q in 0..n {
            a[(p, q)] = (&outer[p] * &outer[q] * w).sum();
        }
        b[p] = (&outer[p] * d * w).sum();
    }
    let trace = a.trace().max(f64::MIN_POSITIVE);
    for p in 0..n {
        a[(p, p)] += 1e-12 * trace;
    }
    let v = a
        .cholesky()
        .map(|c| c.solve(&b))
        .ok_or_else(|| Error::FitFailure("initial variance fit is singular".into()))?;
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(*x)).max(1e-12);
    let mut g = Array2::zeros((2 * n, 2 * n));
    for k in 0..n {
        let vk = v[k].max(1e-3 * vmax);
        g[[k, k]] = vk;
        g[[n + k, n + k]] = vk;
    }
    Ok(g)
}

/// Upper bound on the gradient Lipschitz constant from the kernel norms.
fn lipschitz_guess(obj: &Objective, n: usize) -> f64 {
    let mut acc = 0.0;
    for (k, w) in obj.kernels.iter().zip(&obj.weights) {
        let kk = k.mapv(|v| v * v).sum();
        let wmax = w.iter().fold(0.0f64, |m, v| m.max(*v));
        acc += 2.0 * wmax * kk * kk;
    }
    let l = acc / obj.n_terms;
    if l > 0.0 {
        l * 1e-3
    } else {
        1.0 / (2 * n) as f64
    }
}

/// Real-space density covariance ⟨δρ(z) δρ(z')⟩ of a reconstruction.
pub fn realspace_density_covariance(result: &ReconstructionResult, basis: &ModeBasis, params: &PhysParams) -> Result<Array2<f64>> {
    ensure(result.gamma.omega() == basis.frequencies(), || "result and basis frequencies differ".into())?;
    Ok(density_covariance(basis, params, &result.gamma))
}
