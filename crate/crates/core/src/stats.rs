//! Correlation functions, non-Gaussianity and full counting statistics.
//!
//! Correlation functions are raw moments of referenced phases
//! `Δφ(z) = φ(z) - φ(z₀)`. The connected four-point function subtracts the
//! Wick (Gaussian) part built from the two-point function of the same data,
//! and the non-Gaussianity measure is
//! `M⁽⁴⁾ = Σ|Φ_con| / Σ|Φ⁽⁴⁾|` over all ordered index tuples of a window,
//! repeated indices included.
//!
//! Error bars: leave-one-out jackknife for moments, bootstrap over shots
//! for nonlinear summaries.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::sampler::stream_rng;

const DOMAIN_BOOT: u64 = 11;
const DOMAIN_BIAS: u64 = 12;

/// Value with a one-standard-deviation error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    /// `|value - other| / combined error`.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        (self.value - other.value).abs() / self.error.hypot(other.error)
    }
}

/// Contiguous pixel window with the reference pixel used for Δφ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    /// Absolute pixel index of the reference, inside the window.
    pub reference: usize,
}

impl Window {
    pub fn new(start: usize, len: usize, reference: usize) -> Result<Self> {
        ensure(len >= 1, || "window must not be empty".into())?;
        ensure(reference >= start && reference < start + len, || {
            format!("reference {reference} outside window {start}..{}", start + len)
        })?;
        Ok(Self { start, len, reference })
    }

    /// Window of `len` pixels centred in `n_pixels`, referenced at its midpoint.
    pub fn centered(n_pixels: usize, len: usize) -> Result<Self> {
        ensure(len >= 1 && len <= n_pixels, || format!("window of {len} does not fit {n_pixels} pixels"))?;
        let start = (n_pixels - len) / 2;
        Self::new(start, len, start + len / 2)
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    fn check(&self, n_pixels: usize) -> Result<()> {
        ensure(self.start + self.len <= n_pixels, || {
            format!("window {:?} exceeds {n_pixels} pixels", self.range())
        })
    }
}

/// Δφ = φ - φ(z_ref) for every shot.
pub fn reference_phase(phase: ArrayView2<f64>, reference: usize) -> Result<Array2<f64>> {
    ensure(reference < phase.ncols(), || format!("reference pixel {reference} out of range"))?;
    let r = phase.column(reference).to_owned();
    let mut out = phase.to_owned();
    for mut col in out.axis_iter_mut(Axis(1)) {
        col -= &r;
    }
    Ok(out)
}

/// Referenced phases restricted to `window` (shots × window length).
pub fn windowed_phase(phase: ArrayView2<f64>, window: &Window) -> Result<Array2<f64>> {
    window.check(phase.ncols())?;
    let d = reference_phase(phase, window.reference)?;
    Ok(d.slice(s![.., window.range()]).to_owned())
}

/// Φ(z_{i1}, …, z_{in}) = ⟨Π Δφ(z_i)⟩ over shots.
pub fn full_moment(data: ArrayView2<f64>, indices: &[usize]) -> Result<f64> {
    ensure(indices.iter().all(|&i| i < data.ncols()), || "index out of range".into())?;
    ensure(data.nrows() >= 1, || "no shots".into())?;
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let total: f64 = data
        .axis_iter(Axis(0))
        .map(|row| sorted.iter().map(|&i| row[i]).product::<f64>())
        .sum();
    Ok(total / data.nrows() as f64)
}

/// Matrix of two-point moments Φ⁽²⁾_{ij} = ⟨Δφ_i Δφ_j⟩.
pub fn second_moments(data: ArrayView2<f64>) -> Array2<f64> {
    data.t().dot(&data) / data.nrows() as f64
}

/// Gaussian part Φ_ij Φ_kl + Φ_ik Φ_jl + Φ_il Φ_jk of a four-point function.
///
/// Indices are sorted first, so the result is bit-identical for every ordering.
pub fn wick4(phi2: &Array2<f64>, i: usize, j: usize, k: usize, l: usize) -> f64 {
    let mut q = [i, j, k, l];
    q.sort_unstable();
    let [i, j, k, l] = q;
    phi2[[i, j]] * phi2[[k, l]] + phi2[[i, k]] * phi2[[j, l]] + phi2[[i, l]] * phi2[[j, k]]
}

/// Connected four-point function Φ⁽⁴⁾ - wick4, independent of index order.
pub fn connected4(data: ArrayView2<f64>, mut idx: [usize; 4]) -> Result<f64> {
    idx.sort_unstable();
    let phi4 = full_moment(data, &idx)?;
    let phi2 = |a: usize, b: usize| full_moment(data, &[a, b]);
    let wick = phi2(idx[0], idx[1])? * phi2(idx[2], idx[3])?
        + phi2(idx[0], idx[2])? * phi2(idx[1], idx[3])?
        + phi2(idx[0], idx[3])? * phi2(idx[1], idx[2])?;
    Ok(phi4 - wick)
}

/// Sorted index tuples with the number of ordered tuples each represents.
struct Tuples {
    quads: Vec<[usize; 4]>,
    mult: Vec<f64>,
}

impl Tuples {
    fn new(w: usize) -> Self {
        let mut quads = Vec::new();
        let mut mult = Vec::new();
        for i in 0..w {
            for j in i..w {
                for k in j..w {
                    for l in k..w {
                        let q = [i, j, k, l];
                        let mut m = 24.0;
                        let mut run = 1;
                        for a in 1..4 {
                            if q[a] == q[a - 1] {
                                run += 1;
                                m /= run as f64;
                            } else {
                                run = 1;
                            }
                        }
                        quads.push(q);
                        mult.push(m);
                    }
                }
            }
        }
        Self { quads, mult }
    }
}

/// Moment sums of one or more weightings of the shots.
struct MomentSums {
    phi4: Array2<f64>,
    phi2: Vec<Array2<f64>>,
}

/// Accumulates Φ⁽⁴⁾ over sorted tuples and Φ⁽²⁾ for each weight column.
fn moment_sums(data: ArrayView2<f64>, tuples: &Tuples, weights: &Array2<f64>) -> MomentSums {
    let (shots, w) = data.dim();
    let nb = weights.ncols();
    let nt = tuples.quads.len();
    let mut phi4 = Array2::<f64>::zeros((nt, nb));
    let mut phi2 = vec![Array2::<f64>::zeros((w, w)); nb];
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < shots {
        let end = (start + CHUNK).min(shots);
        let c = end - start;
        let block = data.slice(s![start..end, ..]);
        let mut p = Array2::<f64>::zeros((nt, c));
        for (t, q) in tuples.quads.iter().enumerate() {
            let mut row = p.row_mut(t);
            for s in 0..c {
                row[s] = block[[s, q[0]]] * block[[s, q[1]]] * block[[s, q[2]]] * block[[s, q[3]]];
            }
        }
        let wchunk = weights.slice(s![start..end, ..]);
        phi4 += &p.dot(&wchunk);
        for (p2, wb) in phi2.iter_mut().zip(wchunk.columns()) {
            let scaled = &block * &wb.insert_axis(Axis(1));
            *p2 += &scaled.t().dot(&block);
        }
        start = end;
    }
    let total: Vec<f64> = (0..nb).map(|b| weights.column(b).sum()).collect();
    for b in 0..nb {
        phi4.column_mut(b).mapv_inplace(|v| v / total[b]);
        phi2[b].mapv_inplace(|v| v / total[b]);
    }
    MomentSums { phi4, phi2 }
}

fn m4_from_moments(tuples: &Tuples, phi4: impl Fn(usize) -> f64, phi2: &Array2<f64>) -> (f64, f64) {
    let (mut full, mut con) = (0.0, 0.0);
    for (t, q) in tuples.quads.iter().enumerate() {
        let f = phi4(t);
        let wick = wick4(phi2, q[0], q[1], q[2], q[3]);
        full += tuples.mult[t] * f.abs();
        con += tuples.mult[t] * (f - wick).abs();
    }
    (full, con)
}

/// Non-Gaussianity of referenced window data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonGaussianity {
    pub m4: f64,
    /// Bootstrap standard deviation (zero when no resamples were requested).
    pub error: f64,
    pub sum_full: f64,
    pub sum_connected: f64,
}

/// M⁽⁴⁾ of referenced data (shots × window), with `n_boot` bootstrap resamples.
pub fn non_gaussianity(data: ArrayView2<f64>, n_boot: usize, seed: u64) -> Result<NonGaussianity> {
    let (shots, w) = data.dim();
    ensure(shots >= 2, || "need at least two shots".into())?;
    ensure(w >= 1, || "empty window".into())?;
    let tuples = Tuples::new(w);
    let mut weights = Array2::<f64>::zeros((shots, n_boot + 1));
    weights.column_mut(0).fill(1.0);
    for b in 0..n_boot {
        let mut rng = stream_rng(seed, DOMAIN_BOOT, b as u64);
        for _ in 0..shots {
            weights[[rng.random_range(0..shots), b + 1]] += 1.0;
        }
    }
    let sums = moment_sums(data, &tuples, &weights);
    let (full, con) = m4_from_moments(&tuples, |t| sums.phi4[[t, 0]], &sums.phi2[0]);
    if full <= 0.0 {
        return Err(Error::Degenerate("all four-point functions vanish".into()));
    }
    let boots: Vec<f64> = (1..=n_boot)
        .map(|b| {
            let (f, c) = m4_from_moments(&tuples, |t| sums.phi4[[t, b]], &sums.phi2[b]);
            c / f
        })
        .collect();
    let error = if n_boot >= 2 { std_dev(&boots) } else { 0.0 };
    Ok(NonGaussianity { m4: con / full, error, sum_full: full, sum_connected: con })
}

/// M⁽⁴⁾ of an ensemble's phase restricted to `window`.
pub fn ensemble_non_gaussianity(phase: ArrayView2<f64>, window: &Window, n_boot: usize, seed: u64) -> Result<NonGaussianity> {
    non_gaussianity(windowed_phase(phase, window)?.view(), n_boot, seed)
}

/// M⁽⁴⁾ when the four-point function is exactly the Wick form of `phi2`.
pub fn m4_gaussian_analytic(phi2: &Array2<f64>) -> Result<f64> {
    let tuples = Tuples::new(phi2.nrows());
    let wick: Vec<f64> = tuples.quads.iter().map(|q| wick4(phi2, q[0], q[1], q[2], q[3])).collect();
    let (full, con) = m4_from_moments(&tuples, |t| wick[t], phi2);
    if full <= 0.0 {
        return Err(Error::Degenerate("two-point function vanishes".into()));
    }
    Ok(con / full)
}

/// Finite-statistics level of M⁽⁴⁾ for Gaussian data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasBand {
    pub mean: f64,
    /// Standard deviation over trials.
    pub spread: f64,
    pub trials: Vec<f64>,
    /// Fewer shots than window pixels: the surrogate Φ₂ is rank deficient and
    /// the bias sits near its ceiling.
    pub unreliable: bool,
}

impl BiasBand {
    /// Upper edge `mean + 2 spread`.
    pub fn upper(&self) -> f64 {
        self.mean + 2.0 * self.spread
    }
}

/// M⁽⁴⁾ of Gaussian surrogates with two-point function `phi2` and `shots` shots.
pub fn m4_bias(phi2: &Array2<f64>, shots: usize, trials: usize, seed: u64) -> Result<BiasBand> {
    ensure(shots >= 2 && trials >= 1, || "need at least two shots and one trial".into())?;
    let w = phi2.nrows();
    let root = psd_sqrt(phi2);
    let tuples = Tuples::new(w);
    let ones = Array2::<f64>::ones((shots, 1));
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = stream_rng(seed, DOMAIN_BIAS, trial as u64);
        let z = Array2::from_shape_simple_fn((shots, w), || rng.sample::<f64, _>(StandardNormal));
        let x = z.dot(&root.t());
        let sums = moment_sums(x.view(), &tuples, &ones);
        let (full, con) = m4_from_moments(&tuples, |t| sums.phi4[[t, 0]], &sums.phi2[0]);
        ensure(full > 0.0, || "surrogate has vanishing moments".into())?;
        out.push(con / full);
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let spread = if out.len() > 1 { std_dev(&out) } else { 0.0 };
    Ok(BiasBand { mean, spread, trials: out, unreliable: shots < w })
}

/// Symmetric square root of a positive semidefinite matrix (negative eigenvalues clipped).
pub fn psd_sqrt(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let e = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]])));
    Array2::from_shape_fn((n, n), |(i, j)| {
        (0..n)
            .map(|a| e.eigenvalues[a].max(0.0).sqrt() * e.eigenvectors[(i, a)] * e.eigenvectors[(j, a)])
            .sum()
    })
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Power sums `[count, Σx, Σx², Σx³, Σx⁴]` of one group of samples.
pub type PowerSums = [f64; 5];

pub fn power_sums(values: impl IntoIterator<Item = f64>) -> PowerSums {
    let mut p = [0.0; 5];
    for x in values {
        let x2 = x * x;
        p[0] += 1.0;
        p[1] += x;
        p[2] += x2;
        p[3] += x2 * x;
        p[4] += x2 * x2;
    }
    p
}

/// Central second and fourth moments from power sums.
pub fn central_moments(p: &PowerSums) -> (f64, f64) {
    let n = p[0];
    let m = p[1] / n;
    let (e2, e3, e4) = (p[2] / n, p[3] / n, p[4] / n);
    let m2 = e2 - m * m;
    let m4 = e4 - 4.0 * m * e3 + 6.0 * m * m * e2 - 3.0 * m.powi(4);
    (m2, m4)
}

/// Variance of the pooled samples.
pub fn variance_of(p: &PowerSums) -> f64 {
    central_moments(p).0
}

/// Fourth cumulant κ₄ = m₄ - 3 m₂².
pub fn fourth_cumulant_of(p: &PowerSums) -> f64 {
    let (m2, m4) = central_moments(p);
    m4 - 3.0 * m2 * m2
}

/// Kurtosis m₄ / m₂².
pub fn kurtosis_of(p: &PowerSums) -> f64 {
    let (m2, m4) = central_moments(p);
    m4 / (m2 * m2)
}

fn add(a: &PowerSums, b: &PowerSums, sign: f64) -> PowerSums {
    let mut o = *a;
    for i in 0..5 {
        o[i] += sign * b[i];
    }
    o
}

/// Leave-one-group-out jackknife of a statistic of pooled power sums.
pub fn jackknife(groups: &[PowerSums], stat: impl Fn(&PowerSums) -> f64) -> Result<Estimate> {
    ensure(groups.len() >= 2, || "jackknife needs at least two groups".into())?;
    let total = groups.iter().fold([0.0; 5], |acc, g| add(&acc, g, 1.0));
    let loo: Vec<f64> = groups.iter().map(|g| stat(&add(&total, g, -1.0))).collect();
    let n = loo.len() as f64;
    let mean = loo.iter().sum::<f64>() / n;
    let var = (n - 1.0) / n * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    Ok(Estimate { value: stat(&total), error: var.sqrt() })
}

/// Bootstrap over groups of a statistic of pooled power sums.
pub fn bootstrap(groups: &[PowerSums], stat: impl Fn(&PowerSums) -> f64, n_boot: usize, seed: u64) -> Result<Estimate> {
    ensure(groups.len() >= 2 && n_boot >= 2, || "bootstrap needs two groups and two resamples".into())?;
    let total = groups.iter().fold([0.0; 5], |acc, g| add(&acc, g, 1.0));
    let n = groups.len();
    let vals: Vec<f64> = (0..n_boot)
        .map(|b| {
            let mut rng = stream_rng(seed, DOMAIN_BOOT, b as u64);
            let mut acc = [0.0; 5];
            for _ in 0..n {
                acc = add(&acc, &groups[rng.random_range(0..n)], 1.0);
            }
            stat(&acc)
        })
        .collect();
    Ok(Estimate { value: stat(&total), error: std_dev(&vals) })
}

/// Jackknife estimate of the fourth cumulant of scalar samples.
pub fn fourth_cumulant(samples: &[f64]) -> Result<Estimate> {
    let groups: Vec<PowerSums> = samples.iter().map(|&x| power_sums([x])).collect();
    jackknife(&groups, fourth_cumulant_of)
}

/// Connected covariance ⟨φ_i φ_j⟩ - ⟨φ_i⟩⟨φ_j⟩ across shots.
pub fn covariance(data: ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure(data.nrows() >= 2, || "need at least two shots".into())?;
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let c = &data - &mean;
    Ok(c.t().dot(&c) / (data.nrows() as f64 - 1.0))
}

/// Average of `m[i, i+r]` over the pairs inside `range`, for r = 0..len.
pub fn distance_average(m: &Array2<f64>, range: Range<usize>) -> Vec<f64> {
    let len = range.len();
    (0..len)
        .map(|r| {
            let vals: Vec<f64> = (range.start..range.end - r).map(|i| 0.5 * (m[[i, i + r]] + m[[i + r, i]])).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

/// C^{φφ}(r) = ⟨(φ(z₀ + r) - φ(z₀))²⟩ for r = 0, 1, … pixels, with z₀ = `reference`.
///
/// Pixels on both sides of the reference inside `range` contribute to the
/// same distance. Errors are standard errors over shots.
pub fn phase_autocorrelation(phase: ArrayView2<f64>, reference: usize, range: Range<usize>) -> Result<Vec<Estimate>> {
    ensure(range.end <= phase.ncols() && range.contains(&reference), || {
        format!("reference {reference} must lie in range {range:?} within {} pixels", phase.ncols())
    })?;
    ensure(phase.nrows() >= 2, || "need at least two shots".into())?;
    let reach = (reference - range.start).max(range.end - 1 - reference);
    let shots = phase.nrows() as f64;
    Ok((0..=reach)
        .map(|r| {
            let pixels: Vec<usize> = [reference.checked_sub(r), Some(reference + r)]
                .into_iter()
                .flatten()
                .filter(|z| range.contains(z))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let per_shot: Vec<f64> = phase
                .axis_iter(Axis(0))
                .map(|row| pixels.iter().map(|&z| (row[z] - row[reference]).powi(2)).sum::<f64>() / pixels.len() as f64)
                .collect();
            let value = per_shot.iter().sum::<f64>() / shots;
            Estimate { value, error: std_dev(&per_shot) / shots.sqrt() }
        })
        .collect())
}

/// Weighted least-squares slope of `curve[r]` against `r · dz` over `r >= r_min`.
///
/// Points with zero error get unit weight. Returns `None` with fewer than two points.
pub fn correlation_slope(curve: &[Estimate], dz: f64, r_min: usize) -> Option<Estimate> {
    let pts: Vec<(f64, f64, f64)> = curve
        .iter()
        .enumerate()
        .skip(r_min)
        .map(|(r, e)| (r as f64 * dz, e.value, if e.error > 0.0 { e.error.powi(-2) } else { 1.0 }))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    Some(Estimate { value: sxy / sxx, error: sxx.powf(-0.5) })
}

/// C^{uu}(z_i, z_j) from the phase covariance by mixed finite differences,
/// on the `n - 1` bond midpoints.
pub fn velocity_correlation_matrix(cov: &Array2<f64>, dz: f64) -> Array2<f64> {
    let n = cov.nrows() - 1;
    Array2::from_shape_fn((n, n), |(i, j)| {
        (cov[[i + 1, j + 1]] - cov[[i + 1, j]] - cov[[i, j + 1]] + cov[[i, j]]) / (dz * dz)
    })
}

/// Velocity correlation C^{uu}(r) averaged over bonds in `range` (bond `i` joins pixels `i`, `i+1`).
pub fn velocity_correlation(phase: ArrayView2<f64>, dz: f64, range: Range<usize>) -> Result<Vec<f64>> {
    ensure(range.end < phase.ncols() && !range.is_empty(), || "bond range out of bounds".into())?;
    let cuu = velocity_correlation_matrix(&covariance(phase)?, dz);
    Ok(distance_average(&cuu, range))
}

/// Mean phase-difference variance D(r) = ⟨(φ_i - φ_{i+r})²⟩ over pairs in `range`.
pub fn phase_difference_profile(cov: &Array2<f64>, range: Range<usize>) -> Vec<f64> {
    let len = range.len();
    (0..len)
        .map(|r| {
            let vals: Vec<f64> = (range.start..range.end - r)
                .map(|i| cov[[i, i]] + cov[[i + r, i + r]] - 2.0 * cov[[i, i + r]])
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

/// Parameters of the Klein-Gordon velocity correlation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgTheory {
    pub c: f64,
    /// Gap Mc² in 1/ms.
    pub gap: f64,
    /// Inverse temperature in ms (infinite for the ground state).
    pub beta: f64,
    /// Gaussian momentum cutoff Λ in 1/μm.
    pub cutoff: f64,
    /// Interaction constant g; sets the overall scale 2g/(2π).
    pub g: f64,
}

/// C^{uu}(r) = (g/π) ∫ dk k² e^{ikr - (k/Λ)²/2} (½ + n_BE(E)) / E(k),
/// E = sqrt(c²k² + M²c⁴), evaluated by adaptive composite Gauss-Legendre.
pub fn kg_velocity_theory(theory: &KgTheory, r: &[f64]) -> Result<Vec<f64>> {
    ensure(theory.c > 0.0 && theory.cutoff > 0.0 && theory.g > 0.0, || "c, cutoff and g must be positive".into())?;
    ensure(theory.gap >= 0.0 && theory.beta > 0.0, || "gap must be non-negative and beta positive".into())?;
    let kmax = theory.cutoff * 72f64.sqrt();
    let (nodes, wts) = gauss_legendre(16);
    let integrand = |k: f64, r: f64| -> f64 {
        if k == 0.0 {
            return 0.0;
        }
        let e = (theory.c * theory.c * k * k + theory.gap * theory.gap).sqrt();
        let occ = if theory.beta.is_infinite() { 0.0 } else { 1.0 / (theory.beta * e).exp_m1() };
        k * k * (k * r).cos() * (-0.5 * (k / theory.cutoff).powi(2)).exp() * (0.5 + occ) / e
    };
    let integrate = |r: f64, panels: usize| -> f64 {
        let h = kmax / panels as f64;
        let mut acc = 0.0;
        for p in 0..panels {
            let a = p as f64 * h;
            for (x, w) in nodes.iter().zip(&wts) {
                acc += w * integrand(a + 0.5 * h * (x + 1.0), r);
            }
        }
        acc * 0.5 * h
    };
    let scale = theory.g / std::f64::consts::PI * 2.0;
    let peak = integrate(0.0, 64).abs().max(f64::MIN_POSITIVE);
    r.iter()
        .map(|&ri| {
            let mut panels = 16 + (kmax * ri.abs() / std::f64::consts::PI).ceil() as usize;
            let mut prev = integrate(ri, panels);
            for _ in 0..8 {
                panels *= 2;
                let next = integrate(ri, panels);
                if (next - prev).abs() <= 1e-10 * peak {
                    return Ok(scale * next);
                }
                prev = next;
            }
            Err(Error::Tolerance(format!("quadrature at r = {ri} did not converge")))
        })
        .collect()
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            let pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
                break;
            }
        }
    }
    (x, w)
}

/// Histogram and moments of phase differences at one distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fcs {
    pub distance: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub variance: Estimate,
    pub kurtosis: Estimate,
}

/// Full counting statistics of `φ(z+d) - φ(z)` pooled over all pairs in `range`.
pub fn full_counting_statistics(
    phase: ArrayView2<f64>,
    range: Range<usize>,
    distance: usize,
    bins: usize,
    n_boot: usize,
    seed: u64,
) -> Result<Fcs> {
    ensure(bins >= 5, || format!("need at least 5 bins, got {bins}"))?;
    ensure(range.end <= phase.ncols(), || "range out of bounds".into())?;
    ensure(distance >= 1 && distance < range.len(), || {
        format!("distance {distance} must be in 1..{}", range.len())
    })?;
    ensure(phase.nrows() >= 2, || "need at least two shots".into())?;
    let mut values = Vec::new();
    let groups: Vec<PowerSums> = phase
        .axis_iter(Axis(0))
        .map(|row| {
            let diffs: Vec<f64> = (range.start..range.end - distance).map(|i| row[i + distance] - row[i]).collect();
            values.extend_from_slice(&diffs);
            power_sums(diffs)
        })
        .collect();
    let total = groups.iter().fold([0.0; 5], |acc, g| add(&acc, g, 1.0));
    if variance_of(&total) <= 0.0 {
        return Err(Error::Degenerate("phase differences have zero variance".into()));
    }
    let lim = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let edges: Vec<f64> = (0..=bins).map(|b| -lim + 2.0 * lim * b as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for v in &values {
        let b = (((v + lim) / (2.0 * lim)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    Ok(Fcs {
        distance,
        bin_edges: edges,
        counts,
        variance: bootstrap(&groups, variance_of, n_boot, seed)?,
        kurtosis: bootstrap(&groups, kurtosis_of, n_boot, seed)?,
    })
}

/// Normalised Gaussian kernel truncated at 4σ (σ in pixels).
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let reach = (4.0 * sigma).ceil() as usize;
    let k: Vec<f64> = (0..=reach).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let norm = k[0] + 2.0 * k[1..].iter().sum::<f64>();
    k.into_iter().map(|v| v / norm).collect()
}

fn reflect(i: i64, n: i64) -> usize {
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Gaussian smoothing with mirrored edges; `sigma` in pixels, zero is the identity.
pub fn gaussian_smooth(profile: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return profile.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let n = profile.len() as i64;
    (0..n)
        .map(|i| {
            let mut acc = k[0] * profile[i as usize];
            for (d, w) in k.iter().enumerate().skip(1) {
                let d = d as i64;
                acc += w * (profile[reflect(i + d, n)] + profile[reflect(i - d, n)]);
            }
            acc
        })
        .collect()
}

/// Matrix S with `S x = gaussian_smooth(x, sigma)`.
pub fn smoothing_matrix(n: usize, sigma: f64) -> Array2<f64> {
    let mut s = Array2::<f64>::zeros((n, n));
    if sigma <= 0.0 {
        s.diag_mut().fill(1.0);
        return s;
    }
    let k = gaussian_kernel(sigma);
    for i in 0..n as i64 {
        s[[i as usize, i as usize]] += k[0];
        for (d, w) in k.iter().enumerate().skip(1) {
            let d = d as i64;
            s[[i as usize, reflect(i + d, n as i64)]] += w;
            s[[i as usize, reflect(i - d, n as i64)]] += w;
        }
    }
    s
}

/// Piecewise linear-then-constant fit of a cumulant time series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauFit {
    pub initial: f64,
    pub plateau: f64,
    pub ratio: f64,
    /// Time at which the linear part meets the plateau.
    pub knee: f64,
    /// 2^{-(n-1)} for cumulant order n.
    pub expected_ratio: f64,
}

/// Fits `a + b·min(t, τ)` by least squares over a fine grid of τ.
///
/// `initial` is the t = 0 value of the series, `plateau` the fitted constant.
pub fn plateau_analysis(times: &[f64], values: &[f64], order: u32) -> Result<PlateauFit> {
    ensure(times.len() == values.len() && times.len() >= 4, || "need at least four points".into())?;
    ensure(order >= 2, || "cumulant order must be at least 2".into())?;
    ensure(times.windows(2).all(|w| w[1] > w[0]), || "times must increase".into())?;
    let (t0, t1) = (times[0], times[times.len() - 1]);
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    let steps = 4000;
    for s in 1..steps {
        let tau = t0 + (t1 - t0) * s as f64 / steps as f64;
        let x: Vec<f64> = times.iter().map(|t| t.min(tau)).collect();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = values.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        if sxx <= 0.0 {
            continue;
        }
        let sxy: f64 = x.iter().zip(values).map(|(a, b)| (a - mx) * (b - my)).sum();
        let b = sxy / sxx;
        let a = my - b * mx;
        let rss: f64 = x.iter().zip(values).map(|(xi, y)| (y - a - b * xi).powi(2)).sum();
        if rss < best.0 {
            best = (rss, a, b, tau);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::FitFailure("no admissible knee position".into()));
    }
    let (_, a, b, tau) = best;
    let plateau = a + b * tau;
    let initial = values[0];
    if initial == 0.0 {
        return Err(Error::Degenerate("initial cumulant is zero".into()));
    }
    Ok(PlateauFit {
        initial,
        plateau,
        ratio: plateau / initial,
        knee: tau,
        expected_ratio: 0.5f64.powi(order as i32 - 1),
    })
}

/// Pixels whose mean or raw third moment differs from zero by more than
/// `z_max` standard errors. Odd moments are reported, never subtracted.
pub fn odd_moment_warnings(data: ArrayView2<f64>, z_max: f64) -> Vec<String> {
    let n = data.nrows() as f64;
    let mut out = Vec::new();
    if data.nrows() < 2 {
        return out;
    }
    let z = |vals: &mut dyn Iterator<Item = f64>| -> Option<(f64, f64)> {
        let p = power_sums(vals);
        let mean = p[1] / p[0];
        let var = variance_of(&p);
        (var > 0.0).then(|| (mean, mean / (var / n).sqrt()))
    };
    for (j, col) in data.axis_iter(Axis(1)).enumerate() {
        for (order, res) in [(1, z(&mut col.iter().copied())), (3, z(&mut col.iter().map(|x| x * x * x)))] {
            if let Some((m, score)) = res {
                if score.abs() > z_max {
                    out.push(format!("column {j}: moment of order {order} is {m:.3e} ({score:.1} standard errors from zero)"));
                }
            }
        }
    }
    out
}

/// Removes 2π jumps so that neighbouring pixels differ by less than π,
/// starting from `reference`, which is first mapped into [-π, π).
pub fn unwrap_phase(profile: &[f64], reference: usize) -> Result<Vec<f64>> {
    ensure(reference < profile.len(), || "reference pixel out of range".into())?;
    ensure(profile.iter().all(|v| v.is_finite()), || "profile has non-finite values".into())?;
    let tau = 2.0 * std::f64::consts::PI;
    let wrap = |x: f64| x - tau * ((x + std::f64::consts::PI) / tau).floor();
    let mut out = profile.to_vec();
    out[reference] = wrap(profile[reference]);
    for i in reference + 1..profile.len() {
        out[i] = out[i - 1] + wrap(profile[i] - out[i - 1]);
    }
    for i in (0..reference).rev() {
        out[i] = out[i + 1] + wrap(profile[i] - out[i + 1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn odd_moments_are_flagged_only_when_present() {
        let centred = gaussian_data(4000, 4, 5);
        assert!(odd_moment_warnings(centred.view(), 4.0).is_empty());
        let shifted = centred.mapv(|x| x + 1.0);
        assert!(!odd_moment_warnings(shifted.view(), 4.0).is_empty());
    }

    fn gaussian_data(shots: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 99, 0);
        let z = Array2::from_shape_simple_fn((shots, w), || rng.sample::<f64, _>(StandardNormal));
        // random-walk correlations
        let mut x = z.clone();
        for j in 1..w {
            let prev = x.column(j - 1).to_owned();
            x.column_mut(j).zip_mut_with(&prev, |a, b| *a += b);
        }
        x
    }

    #[test]
    fn tuple_multiplicities_cover_all_ordered_tuples() {
        for w in 1..6 {
            let t = Tuples::new(w);
            assert_relative_eq!(t.mult.iter().sum::<f64>(), (w as f64).powi(4));
        }
    }

    #[test]
    fn m4_matches_brute_force_sum() {
        let mut rng = stream_rng(3, 0, 0);
        let data = Array2::from_shape_simple_fn((40, 4), || rng.random::<f64>().powi(3));
        let phi2 = second_moments(data.view());
        let (mut full, mut con) = (0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    for l in 0..4 {
                        let f = full_moment(data.view(), &[i, j, k, l]).unwrap();
                        full += f.abs();
                        con += (f - wick4(&phi2, i, j, k, l)).abs();
                    }
                }
            }
        }
        let ng = non_gaussianity(data.view(), 0, 0).unwrap();
        assert_relative_eq!(ng.m4, con / full, max_relative = 1e-12);
        assert_relative_eq!(connected4(data.view(), [0, 1, 1, 3]).unwrap(),
            full_moment(data.view(), &[0, 1, 1, 3]).unwrap() - wick4(&phi2, 0, 1, 1, 3), max_relative = 1e-12);
    }

    #[test]
    fn analytic_gaussian_m4_is_zero() {
        let data = gaussian_data(100, 5, 1);
        assert_eq!(m4_gaussian_analytic(&second_moments(data.view())).unwrap(), 0.0);
    }

    #[test]
    fn bias_shrinks_with_shots() {
        let data = gaussian_data(4000, 5, 2);
        let phi2 = second_moments(data.view());
        let b1 = m4_bias(&phi2, 100, 8, 1).unwrap().mean;
        let b2 = m4_bias(&phi2, 1600, 8, 1).unwrap().mean;
        assert!(b2 < b1);
    }

    #[test]
    fn jackknife_of_mean_is_standard_error() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let groups: Vec<PowerSums> = x.iter().map(|&v| power_sums([v])).collect();
        let est = jackknife(&groups, |p| p[1] / p[0]).unwrap();
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let se = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert_relative_eq!(est.value, m, max_relative = 1e-12);
        assert_relative_eq!(est.error, se, max_relative = 1e-9);
    }

    #[test]
    fn cumulants_of_two_point_distribution() {
        // ±1 with equal weight: m2 = 1, m4 = 1, κ4 = -2, kurtosis 1.
        let p = power_sums([1.0, -1.0, 1.0, -1.0]);
        assert_relative_eq!(fourth_cumulant_of(&p), -2.0);
        assert_relative_eq!(kurtosis_of(&p), 1.0);
    }

    #[test]
    fn smoothing_preserves_constants_and_matches_matrix() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.4).cos()).collect();
        let s = smoothing_matrix(30, 2.5);
        let y = gaussian_smooth(&x, 2.5);
        let ym = s.dot(&ndarray::Array1::from(x.clone()));
        for (a, b) in y.iter().zip(ym.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        let c = gaussian_smooth(&[2.0; 12], 3.0);
        assert!(c.iter().all(|v| (v - 2.0).abs() < 1e-14));
        assert_eq!(gaussian_smooth(&x, 0.0), x);
    }

    #[test]
    fn plateau_fit_recovers_knee() {
        let t: Vec<f64> = (0..41).map(|i| i as f64).collect();
        let v: Vec<f64> = t.iter().map(|&t| 8.0 - 7.0 * (t.min(20.0) / 20.0)).collect();
        let f = plateau_analysis(&t, &v, 4).unwrap();
        assert!((f.knee - 20.0).abs() < 0.02);
        assert_relative_eq!(f.ratio, 0.125, max_relative = 1e-3);
        assert_eq!(f.expected_ratio, 0.125);
    }

    #[test]
    fn unwrap_removes_jumps() {
        let truth: Vec<f64> = (0..20).map(|i| 0.5 * i as f64 - 3.0).collect();
        let tau = 2.0 * std::f64::consts::PI;
        let wrapped: Vec<f64> = truth.iter().map(|x| x - tau * ((x + 3.2) / tau).floor()).collect();
        let u = unwrap_phase(&wrapped, 6).unwrap();
        for i in 1..20 {
            assert!((u[i] - u[i - 1] - 0.5).abs() < 1e-12);
        }
        assert!(u[6] >= -std::f64::consts::PI && u[6] < std::f64::consts::PI);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert_relative_eq!(i, 2.0 / 15.0, max_relative = 1e-13);
    }

    #[test]
    fn fcs_rejects_bad_input() {
        let data = gaussian_data(10, 8, 4);
        assert!(full_counting_statistics(data.view(), 0..8, 2, 4, 10, 0).is_err());
        assert!(full_counting_statistics(data.view(), 0..8, 8, 10, 10, 0).is_err());
        let zeros = Array2::<f64>::zeros((10, 8));
        assert!(matches!(full_counting_statistics(zeros.view(), 0..8, 2, 10, 10, 0), Err(Error::Degenerate(_))));
    }
}
