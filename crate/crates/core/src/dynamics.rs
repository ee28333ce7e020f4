//! Free phonon evolution in mode space and in real space.
//!
//! Mode-space evolution rotates each canonical pair `(φ_k, δρ_k)` by `ω_k t`.
//! Canonical variables relate to physical mode amplitudes through
//! `φ_k = sqrt(2g) φ'_k` and `δρ_k = δρ'_k / sqrt(2g)` with `2g = π c / K`.
//! The quadratures `φ̃ = φ' sqrt(ω)` and `δρ̃ = δρ' / sqrt(ω)` are ordered as
//! `(φ̃_1..φ̃_N, δρ̃_1..δρ̃_N)`.
//!
//! Real-space evolution uses the d'Alembert solution of the wave equation,
//! with the pixel grid extended by images (Neumann, Dirichlet), periodically,
//! or not at all.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, Axis};
use num_complex::Complex64;

use crate::error::{ensure, invalid, Error, Result};
use crate::model::{ModeBasis, PhysParams};
use crate::sampler::{thermal_mode_variances, FieldEnsemble, Provenance, Statistics};

/// Covariance Γ of the quadrature vector of N modes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureCovariance {
    omega: Vec<f64>,
    gamma: Array2<f64>,
}

/// Symplectic form Ω = [[0, I], [-I, 0]] for `n` modes.
pub fn symplectic_form(n: usize) -> Array2<f64> {
    let mut o = Array2::zeros((2 * n, 2 * n));
    for k in 0..n {
        o[[k, n + k]] = 1.0;
        o[[n + k, k]] = -1.0;
    }
    o
}

impl QuadratureCovariance {
    pub fn new(omega: Vec<f64>, gamma: Array2<f64>) -> Result<Self> {
        let n = omega.len();
        ensure(n >= 1, || "need at least one mode".into())?;
        ensure(omega.iter().all(|w| w.is_finite() && *w > 0.0), || "frequencies must be positive".into())?;
        ensure(gamma.dim() == (2 * n, 2 * n), || {
            format!("covariance must be {0}x{0}, got {1:?}", 2 * n, gamma.dim())
        })?;
        ensure(gamma.iter().all(|v| v.is_finite()), || "covariance has non-finite entries".into())?;
        let scale = gamma.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for i in 0..2 * n {
            for j in 0..i {
                if (gamma[[i, j]] - gamma[[j, i]]).abs() > 1e-10 * scale {
                    return Err(invalid(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { omega, gamma: symmetrize(&gamma) })
    }

    /// Thermal state of independent modes.
    pub fn thermal(omega: &[f64], beta: f64, statistics: Statistics) -> Result<Self> {
        let n = omega.len();
        let mut g = Array2::zeros((2 * n, 2 * n));
        for (k, &w) in omega.iter().enumerate() {
            let (vp, vr) = thermal_mode_variances(w, beta, statistics);
            g[[k, k]] = w * vp;
            g[[n + k, n + k]] = vr / w;
        }
        Self::new(omega.to_vec(), g)
    }

    /// Diagonal state with per-mode sector ratio `V^ρρ / V^φφ = ratio` and
    /// geometric mean of the two variances equal to `scale[k]`.
    pub fn squeezed(omega: &[f64], scale: &[f64], ratio: f64) -> Result<Self> {
        ensure(scale.len() == omega.len(), || "one scale per mode required".into())?;
        ensure(ratio > 0.0, || format!("ratio must be positive, got {ratio}"))?;
        let n = omega.len();
        let r = ratio.sqrt();
        let mut g = Array2::zeros((2 * n, 2 * n));
        for k in 0..n {
            g[[k, k]] = scale[k] / r;
            g[[n + k, n + k]] = scale[k] * r;
        }
        Self::new(omega.to_vec(), g)
    }

    /// Sample covariance of the canonical quadratures of an ensemble.
    pub fn from_ensemble(ensemble: &FieldEnsemble, basis: &ModeBasis, params: &PhysParams) -> Result<Self> {
        ensure(ensemble.n_shots() >= 2, || "need at least two shots".into())?;
        let q = quadratures(ensemble, basis, params)?;
        let shots = q.nrows() as f64;
        let mean = q.mean_axis(Axis(0)).expect("non-empty");
        let centred = &q - &mean;
        let cov = centred.t().dot(&centred) / (shots - 1.0);
        Self::new(basis.frequencies().to_vec(), cov)
    }

    pub fn n_modes(&self) -> usize {
        self.omega.len()
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.gamma
    }

    /// `V^φφ_kk = ω_k ⟨φ_k φ_k⟩` (0-based `k`).
    pub fn v_phiphi(&self, k: usize) -> f64 {
        self.gamma[[k, k]]
    }

    /// `V^ρρ_kk = ⟨δρ_k δρ_k⟩ / ω_k`.
    pub fn v_rhorho(&self, k: usize) -> f64 {
        let n = self.n_modes();
        self.gamma[[n + k, n + k]]
    }

    /// Symmetrised cross term `½⟨φ̃_k δρ̃_k + δρ̃_k φ̃_k⟩`.
    pub fn v_phirho(&self, k: usize) -> f64 {
        let n = self.n_modes();
        self.gamma[[k, n + k]]
    }

    /// `V^ρρ / V^φφ` of mode `k`.
    pub fn sector_ratio(&self, k: usize) -> f64 {
        self.v_rhorho(k) / self.v_phiphi(k)
    }

    /// Γ(t) = S Γ Sᵀ with S the per-mode rotation by ω_k t.
    pub fn rotated(&self, t: f64) -> Self {
        let s = rotation_matrix(&self.omega, t);
        let g = s.dot(&self.gamma).dot(&s.t());
        Self { omega: self.omega.clone(), gamma: symmetrize(&g) }
    }

    /// Smallest eigenvalue of Γ + (i/2) Ω (quantum) or of Γ (classical).
    pub fn min_physical_eigenvalue(&self, quantum: bool) -> f64 {
        if quantum {
            hermitian_eigen(&self.gamma, 0.5).0.iter().cloned().fold(f64::INFINITY, f64::min)
        } else {
            real_eigen(&self.gamma).0.iter().cloned().fold(f64::INFINITY, f64::min)
        }
    }

    pub fn is_physical(&self, quantum: bool, tol: f64) -> bool {
        self.min_physical_eigenvalue(quantum) >= -tol
    }

    /// Symplectic eigenvalues ν_1 ≤ … ≤ ν_N, the moduli of the eigenvalues of ΩΓ.
    ///
    /// A quantum state requires every ν ≥ 1/2.
    pub fn symplectic_eigenvalues(&self) -> Vec<f64> {
        let n = self.n_modes();
        let og = to_nalgebra(&symplectic_form(n).dot(&self.gamma));
        let mut nu: Vec<f64> = og.complex_eigenvalues().iter().map(|z| z.norm()).collect();
        nu.sort_by(f64::total_cmp);
        nu.into_iter().step_by(2).collect()
    }
}

/// Per-mode rotation `[[cos, -sin], [sin, cos]]` on `(φ̃_k, δρ̃_k)`.
pub fn rotation_matrix(omega: &[f64], t: f64) -> Array2<f64> {
    let n = omega.len();
    let mut s = Array2::zeros((2 * n, 2 * n));
    for (k, &w) in omega.iter().enumerate() {
        let (sn, cs) = (w * t).sin_cos();
        s[[k, k]] = cs;
        s[[k, n + k]] = -sn;
        s[[n + k, k]] = sn;
        s[[n + k, n + k]] = cs;
    }
    s
}

pub(crate) fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    (m + &m.t()) * 0.5
}

fn to_nalgebra(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn real_eigen(m: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(to_nalgebra(m));
    (e.eigenvalues.iter().cloned().collect(), e.eigenvectors)
}

/// Eigen-decomposition of the Hermitian matrix Γ + i·`weight`·Ω.
fn hermitian_eigen(gamma: &Array2<f64>, weight: f64) -> (Vec<f64>, DMatrix<Complex64>) {
    let n = gamma.nrows() / 2;
    let h = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
        let om = if j == i + n && i < n {
            1.0
        } else if i == j + n && j < n {
            -1.0
        } else {
            0.0
        };
        Complex64::new(gamma[[i, j]], weight * om)
    });
    let e = SymmetricEigen::new(h);
    (e.eigenvalues.iter().cloned().collect(), e.eigenvectors)
}

/// Whether Γ + (i/2)Ω + shift·I admits a Cholesky factorisation.
fn quantum_cholesky_ok(gamma: &Array2<f64>, shift: f64) -> bool {
    let n2 = gamma.nrows();
    let n = n2 / 2;
    let omega_half = |i: usize, j: usize| {
        if j == i + n && i < n {
            0.5
        } else if i == j + n && j < n {
            -0.5
        } else {
            0.0
        }
    };
    let h = DMatrix::from_fn(2 * n2, 2 * n2, |i, j| {
        let (bi, ii) = (i / n2, i % n2);
        let (bj, jj) = (j / n2, j % n2);
        let d = if i == j { shift } else { 0.0 };
        match (bi, bj) {
            (0, 0) | (1, 1) => gamma[[ii, jj]] + d,
            (0, 1) => -omega_half(ii, jj),
            _ => omega_half(ii, jj),
        }
    });
    h.cholesky().is_some()
}

fn clip_hermitian(values: &[f64], vectors: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = values.len();
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    for (a, &lam) in values.iter().enumerate() {
        if lam <= 0.0 {
            continue;
        }
        let v = vectors.column(a);
        for i in 0..n {
            let vi = v[i] * lam;
            for j in 0..n {
                out[(i, j)] += vi * v[j].conj();
            }
        }
    }
    out
}

/// Nearest physical covariance in Frobenius norm.
///
/// Classical states: negative eigenvalues of Γ are clipped. Quantum states:
/// Γ + (i/2)Ω is made positive semidefinite by eigenvalue clipping while the
/// imaginary part is held at Ω/2; the two sets are intersected with
/// Dykstra's alternating projections, and the residual infeasibility left
/// at convergence (below 1e-9 of the largest entry) is removed by a uniform
/// diagonal shift. Inputs that are already physical
/// within 1e-12 are returned unchanged, which makes the map idempotent.
pub fn project_physical(gamma: &Array2<f64>, quantum: bool) -> Result<Array2<f64>> {
    let n2 = gamma.nrows();
    ensure(n2 == gamma.ncols() && n2.is_multiple_of(2), || "covariance must be square of even size".into())?;
    let g = symmetrize(gamma);
    if !quantum {
        let (vals, vecs) = real_eigen(&g);
        if vals.iter().all(|&v| v >= 0.0) {
            return Ok(g);
        }
        let mut out = Array2::zeros((n2, n2));
        for (a, &lam) in vals.iter().enumerate() {
            if lam <= 0.0 {
                continue;
            }
            for i in 0..n2 {
                for j in 0..n2 {
                    out[[i, j]] += lam * vecs[(i, a)] * vecs[(j, a)];
                }
            }
        }
        return Ok(symmetrize(&out));
    }
    let tol = 1e-12 * g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if quantum_cholesky_ok(&g, tol) {
        return Ok(g);
    }
    let n = n2 / 2;
    let omega_half = DMatrix::from_fn(n2, n2, |i, j| {
        if j == i + n && i < n {
            0.5
        } else if i == j + n && j < n {
            -0.5
        } else {
            0.0
        }
    });
    let mut x = DMatrix::from_fn(n2, n2, |i, j| Complex64::new(g[[i, j]], omega_half[(i, j)]));
    let mut p = DMatrix::<Complex64>::zeros(n2, n2);
    let mut q = DMatrix::<Complex64>::zeros(n2, n2);
    for _ in 0..20_000 {
        let xp = &x + &p;
        let e = SymmetricEigen::new(xp.clone());
        let vals: Vec<f64> = e.eigenvalues.iter().cloned().collect();
        let y = clip_hermitian(&vals, &e.eigenvectors);
        p = &xp - &y;
        let yq = &y + &q;
        let x_new = DMatrix::from_fn(n2, n2, |i, j| {
            let re = 0.5 * (yq[(i, j)].re + yq[(j, i)].re);
            Complex64::new(re, omega_half[(i, j)])
        });
        q = &yq - &x_new;
        let change = (&x_new - &x).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let gap = (&x_new - &y).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        x = x_new;
        let tol = 1e-11 * (1.0 + x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        if change < tol && gap < tol {
            break;
        }
    }
    let out = Array2::from_shape_fn((n2, n2), |(i, j)| x[(i, j)].re);
    let out = symmetrize(&out);
    let (vals, _) = hermitian_eigen(&out, 0.5);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-9 * g.iter().fold(1.0f64, |m, v| m.max(v.abs())) {
        return Err(Error::Tolerance(format!("physical projection stalled at eigenvalue {min:.3e}")));
    }
    let mut out = out;
    if min < 0.0 {
        out.diag_mut().mapv_inplace(|v| v - min);
    }
    Ok(out)
}

/// Canonical quadratures of every shot (shots × 2N).
pub fn quadratures(ensemble: &FieldEnsemble, basis: &ModeBasis, params: &PhysParams) -> Result<Array2<f64>> {
    ensure(ensemble.geometry == *basis.geometry(), || "ensemble and basis geometries differ".into())?;
    let n = basis.n_modes();
    let scale = params.phase_scale();
    let a = basis.project(ensemble.phase.view());
    let b = basis.project(ensemble.density.view());
    let mut q = Array2::zeros((ensemble.n_shots(), 2 * n));
    for (k, &w) in basis.frequencies().iter().enumerate() {
        let (sp, sr) = (w.sqrt() / scale, scale / w.sqrt());
        q.column_mut(k).assign(&(&a.column(k) * sp));
        q.column_mut(n + k).assign(&(&b.column(k) * sr));
    }
    Ok(q)
}

/// Rotates canonical mode variables: `φ(t) = cos φ - sin/ω δρ`, `δρ(t) = ω sin φ + cos δρ`.
pub fn rotate_modes(phi: &[f64], rho: &[f64], omega: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure(phi.len() == omega.len() && rho.len() == omega.len(), || "length mismatch".into())?;
    let mut p = Vec::with_capacity(phi.len());
    let mut r = Vec::with_capacity(phi.len());
    for k in 0..omega.len() {
        let (sn, cs) = (omega[k] * t).sin_cos();
        p.push(cs * phi[k] - sn / omega[k] * rho[k]);
        r.push(omega[k] * sn * phi[k] + cs * rho[k]);
    }
    Ok((p, r))
}

/// Evolves every shot to each of `times` by projecting on the mode basis.
///
/// The output lies in the span of the basis, so at `t = 0` it is the
/// mode-truncated initial ensemble.
pub fn evolve_ensemble(
    ensemble: &FieldEnsemble,
    basis: &ModeBasis,
    params: &PhysParams,
    times: &[f64],
) -> Result<Vec<FieldEnsemble>> {
    ensure(ensemble.geometry == *basis.geometry(), || "ensemble and basis geometries differ".into())?;
    ensure(times.iter().all(|t| t.is_finite()), || "times must be finite".into())?;
    let a = basis.project(ensemble.phase.view());
    let b = basis.project(ensemble.density.view());
    let two_g = 2.0 * params.g();
    times
        .iter()
        .map(|&t| {
            let mut pa = a.clone();
            let mut pb = b.clone();
            for (k, &w) in basis.frequencies().iter().enumerate() {
                let (sn, cs) = (w * (t - ensemble.time)).sin_cos();
                let ak = a.column(k);
                let bk = b.column(k);
                pa.column_mut(k).assign(&(&ak * cs - &bk * (two_g * sn / w)));
                pb.column_mut(k).assign(&(&ak * (w * sn / two_g) + &bk * cs));
            }
            Ok(FieldEnsemble::new(ensemble.geometry.clone(), basis.synthesize(pa.view()), basis.synthesize(pb.view()), t)?
                .with_origin(ensemble.seed, Provenance::Evolved)
                .with_modes(basis.n_modes()))
        })
        .collect()
}

/// How a profile is continued beyond the pixel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extension {
    /// Mirror images about the walls; phase and density even, velocity odd.
    Neumann,
    /// Mirror images about the walls; phase and density odd, velocity even.
    Dirichlet,
    Periodic,
    /// No continuation: only pixels whose light cone stays on the grid are returned.
    Infinite,
}

#[derive(Clone, Copy, PartialEq)]
enum Parity {
    Even,
    Odd,
}

/// Piecewise-linear profile on integer pixel coordinates with a continuation rule.
struct Extended<'a> {
    v: &'a [f64],
    ext: Extension,
    parity: Parity,
    /// Prefix integrals over one period (periodic or mirrored extensions).
    prefix: Vec<f64>,
}

impl<'a> Extended<'a> {
    fn new(v: &'a [f64], ext: Extension, parity: Parity) -> Self {
        let mut e = Self { v, ext, parity, prefix: Vec::new() };
        let period = e.period();
        let mut prefix = Vec::with_capacity(period + 1);
        prefix.push(0.0);
        for j in 0..period as i64 {
            let last = *prefix.last().unwrap();
            prefix.push(last + 0.5 * (e.node(j) + e.node(j + 1)));
        }
        e.prefix = prefix;
        e
    }

    /// Point evaluation only; [`Extended::integral`] is unavailable.
    fn plain(v: &'a [f64], ext: Extension) -> Self {
        Self { v, ext, parity: Parity::Even, prefix: Vec::new() }
    }

    fn period(&self) -> usize {
        match self.ext {
            Extension::Neumann | Extension::Dirichlet => 2 * self.v.len(),
            Extension::Periodic => self.v.len(),
            Extension::Infinite => self.v.len() - 1,
        }
    }

    fn node(&self, j: i64) -> f64 {
        let n = self.v.len() as i64;
        match self.ext {
            Extension::Periodic => self.v[j.rem_euclid(n) as usize],
            Extension::Infinite => self.v[j.clamp(0, n - 1) as usize],
            Extension::Neumann | Extension::Dirichlet => {
                let m = j.rem_euclid(2 * n);
                if m < n {
                    self.v[m as usize]
                } else {
                    let val = self.v[(2 * n - 1 - m) as usize];
                    if self.parity == Parity::Even {
                        val
                    } else {
                        -val
                    }
                }
            }
        }
    }

    fn at(&self, s: f64) -> f64 {
        let j = s.floor();
        let f = s - j;
        let j = j as i64;
        let a = self.node(j);
        if f == 0.0 {
            return a;
        }
        a + f * (self.node(j + 1) - a)
    }

    /// ∫_0^s of the interpolant, in pixel units.
    fn antiderivative(&self, s: f64) -> f64 {
        let period = self.period() as f64;
        let (cycles, rem) = if self.ext == Extension::Infinite {
            (0.0, s)
        } else {
            let c = (s / period).floor();
            (c, s - c * period)
        };
        let j = rem.floor();
        let f = rem - j;
        let ji = j as i64;
        let a = self.node(ji);
        let b = self.node(ji + 1);
        cycles * self.prefix[self.prefix.len() - 1] + self.prefix[ji as usize] + a * f + 0.5 * (b - a) * f * f
    }

    fn integral(&self, s0: f64, s1: f64) -> f64 {
        self.antiderivative(s1) - self.antiderivative(s0)
    }
}

fn parities(ext: Extension) -> (Parity, Parity) {
    match ext {
        Extension::Dirichlet => (Parity::Odd, Parity::Even),
        _ => (Parity::Even, Parity::Odd),
    }
}

/// Fields produced by [`dalembert_evolve`] on pixels `first_pixel..`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSpaceFields {
    pub first_pixel: usize,
    pub phase: Vec<f64>,
    pub velocity: Vec<f64>,
    pub density: Vec<f64>,
}

/// Central-difference gradient using the continuation rule at the edges.
fn gradient(phase: &[f64], dz: f64, ext: Extension) -> Vec<f64> {
    let (pp, _) = parities(ext);
    let e = Extended::new(phase, ext, pp);
    let n = phase.len();
    (0..n)
        .map(|i| {
            if ext == Extension::Infinite {
                if i == 0 {
                    (phase[1] - phase[0]) / dz
                } else if i == n - 1 {
                    (phase[n - 1] - phase[n - 2]) / dz
                } else {
                    (phase[i + 1] - phase[i - 1]) / (2.0 * dz)
                }
            } else {
                (e.node(i as i64 + 1) - e.node(i as i64 - 1)) / (2.0 * dz)
            }
        })
        .collect()
}

/// d'Alembert evolution of a single profile pair for a linear dispersion.
///
/// `φ(x,t) = ½[φ(x+ct) + φ(x-ct)] - (π/2K) ∫_{x-ct}^{x+ct} δρ`,
/// `u(x,t) = ½[u(x+ct) + u(x-ct)] - (π/2K)[δρ(x+ct) - δρ(x-ct)]`,
/// `δρ(x,t) = ½[δρ(x+ct) + δρ(x-ct)] - (K/2π)[u(x+ct) - u(x-ct)]`,
/// with sub-pixel shifts handled by linear interpolation.
pub fn dalembert_evolve(
    phase: &[f64],
    density: &[f64],
    dz: f64,
    c: f64,
    luttinger_k: f64,
    t: f64,
    ext: Extension,
) -> Result<RealSpaceFields> {
    let n = phase.len();
    ensure(n >= 2 && density.len() == n, || "phase and density must have equal length >= 2".into())?;
    ensure(dz > 0.0 && c > 0.0 && luttinger_k > 0.0, || "dz, c and K must be positive".into())?;
    ensure(t.is_finite() && t >= 0.0, || format!("time must be non-negative, got {t}"))?;
    let shift = c * t / dz;
    let (first, last) = if ext == Extension::Infinite {
        let m = shift.ceil() as usize;
        if 2 * m >= n {
            return Err(Error::OutOfDomain(format!(
                "light cone of {shift:.2} pixels leaves no causally determined pixel of {n}"
            )));
        }
        (m, n - 1 - m)
    } else {
        (0, n - 1)
    };
    let (pp, up) = parities(ext);
    let u0 = gradient(phase, dz, ext);
    let fp = Extended::new(phase, ext, pp);
    let fr = Extended::new(density, ext, pp);
    let fu = Extended::new(&u0, ext, up);
    let a = std::f64::consts::PI / (2.0 * luttinger_k);
    let b = luttinger_k / (2.0 * std::f64::consts::PI);
    let mut out = RealSpaceFields {
        first_pixel: first,
        phase: Vec::with_capacity(last + 1 - first),
        velocity: Vec::with_capacity(last + 1 - first),
        density: Vec::with_capacity(last + 1 - first),
    };
    for i in first..=last {
        let (sp, sm) = (i as f64 + shift, i as f64 - shift);
        out.phase.push(0.5 * (fp.at(sp) + fp.at(sm)) - a * dz * fr.integral(sm, sp));
        out.velocity.push(0.5 * (fu.at(sp) + fu.at(sm)) - a * (fr.at(sp) - fr.at(sm)));
        out.density.push(0.5 * (fr.at(sp) + fr.at(sm)) - b * (fu.at(sp) - fu.at(sm)));
    }
    Ok(out)
}

/// Counter-propagating components `ψ± = ½(u ∓ (π/K) δρ)`.
///
/// `ψ+` moves towards negative z and `ψ-` towards positive z:
/// `ψ±(x, t) = ψ±(x ± ct, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiralFields {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    luttinger_k: f64,
}

pub fn chiral_decompose(velocity: &[f64], density: &[f64], luttinger_k: f64) -> Result<ChiralFields> {
    ensure(velocity.len() == density.len(), || "length mismatch".into())?;
    ensure(luttinger_k > 0.0, || "K must be positive".into())?;
    let a = std::f64::consts::PI / luttinger_k;
    Ok(ChiralFields {
        plus: velocity.iter().zip(density).map(|(u, r)| 0.5 * (u - a * r)).collect(),
        minus: velocity.iter().zip(density).map(|(u, r)| 0.5 * (u + a * r)).collect(),
        luttinger_k,
    })
}

impl ChiralFields {
    /// `(u, δρ)` recovered from the two components.
    pub fn recombine(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.luttinger_k / std::f64::consts::PI;
        let u = self.plus.iter().zip(&self.minus).map(|(p, m)| p + m).collect();
        let r = self.plus.iter().zip(&self.minus).map(|(p, m)| b * (m - p)).collect();
        (u, r)
    }

    /// Components after moving each by `shift` pixels (`shift = ct/δz`).
    ///
    /// Mirror extensions reflect one component into the other at the walls.
    pub fn transport(&self, shift: f64, ext: Extension) -> Result<ChiralFields> {
        ensure(ext != Extension::Infinite, || "transport needs a closed continuation rule".into())?;
        if ext == Extension::Periodic && shift.fract() == 0.0 {
            let n = self.plus.len() as i64;
            let k = (shift as i64).rem_euclid(n) as usize;
            let mut plus = self.plus.clone();
            plus.rotate_left(k);
            let mut minus = self.minus.clone();
            minus.rotate_right(k);
            return Ok(ChiralFields { plus, minus, luttinger_k: self.luttinger_k });
        }
        if ext == Extension::Periodic {
            let plus = Extended::plain(&self.plus, ext);
            let minus = Extended::plain(&self.minus, ext);
            let n = self.plus.len();
            return Ok(ChiralFields {
                plus: (0..n).map(|i| plus.at(i as f64 + shift)).collect(),
                minus: (0..n).map(|i| minus.at(i as f64 - shift)).collect(),
                luttinger_k: self.luttinger_k,
            });
        }
        let (u, r) = self.recombine();
        let (rp, up) = parities(ext);
        let fu = Extended { v: &u, ext, parity: up, prefix: Vec::new() };
        let fr = Extended { v: &r, ext, parity: rp, prefix: Vec::new() };
        let a = std::f64::consts::PI / self.luttinger_k;
        let n = u.len();
        let plus = (0..n)
            .map(|i| {
                let s = i as f64 + shift;
                0.5 * (fu.at(s) - a * fr.at(s))
            })
            .collect();
        let minus = (0..n)
            .map(|i| {
                let s = i as f64 - shift;
                0.5 * (fu.at(s) + a * fr.at(s))
            })
            .collect();
        Ok(ChiralFields { plus, minus, luttinger_k: self.luttinger_k })
    }
}

/// Phase-phase and phase-density propagators acting on canonical pixel fields.
///
/// `G_φφ(x,y,t) = Σ_k f_k(x) f_k(y) cos(ω_k t) δz` and
/// `G_φρ(x,y,t) = -Σ_k f_k(x) f_k(y) sin(ω_k t)/ω_k δz`, so that
/// `φ'(x,t) = Σ_y G_φφ φ'(y) + G_φρ δρ'(y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagators {
    pub phase_phase: Array2<f64>,
    pub phase_density: Array2<f64>,
}

pub fn propagators(basis: &ModeBasis, t: f64) -> Propagators {
    let f = basis.matrix();
    let dz = basis.dz();
    let w = basis.frequencies();
    let mut fc = f.clone();
    let mut fs = f.clone();
    for (k, &wk) in w.iter().enumerate() {
        let (sn, cs) = (wk * t).sin_cos();
        fc.column_mut(k).mapv_inplace(|v| v * cs * dz);
        fs.column_mut(k).mapv_inplace(|v| -v * sn / wk * dz);
    }
    Propagators { phase_phase: fc.dot(&f.t()), phase_density: fs.dot(&f.t()) }
}

/// Spreading of the propagators over time.
#[derive(Clone, Debug, PartialEq)]
pub struct Delocalization {
    pub times: Vec<f64>,
    /// max |G_φφ| over an oversampled position grid.
    pub sup_phase_phase: Vec<f64>,
    /// max |G_φφ| strictly inside the light cone, `None` before it opens.
    pub bulk_phase_phase: Vec<Option<f64>>,
    pub sup_phase_density: Vec<f64>,
    pub bulk_phase_density: Vec<Option<f64>>,
    /// Exponent α of `sup |G_φφ| ~ t^{-α}` fitted over positive times.
    pub alpha: Option<f64>,
    pub alpha_phase_density: Option<f64>,
}

const OVERSAMPLE: usize = 8;

/// Sup-norm and bulk norm of both propagators, evaluated with the continuum
/// mode functions on a grid eight times finer than the pixels.
pub fn delocalization_diagnostic(basis: &ModeBasis, t_grid: &[f64]) -> Result<Delocalization> {
    ensure(!t_grid.is_empty(), || "time grid is empty".into())?;
    ensure(t_grid.iter().all(|t| t.is_finite() && *t >= 0.0), || "times must be non-negative".into())?;
    let geo = basis.geometry();
    let m = geo.n_pixels() * OVERSAMPLE;
    let l = geo.length();
    let xs: Vec<f64> = (0..m).map(|i| -0.5 * l + (i as f64 + 0.5) * l / m as f64).collect();
    let nm = basis.n_modes();
    let fx = Array2::from_shape_fn((m, nm), |(i, k)| basis.eval(k, xs[i]));
    let dz = basis.dz();
    let resolution = l / nm as f64;
    let c = basis.sound_velocity();
    let mut out = Delocalization {
        times: t_grid.to_vec(),
        sup_phase_phase: Vec::new(),
        bulk_phase_phase: Vec::new(),
        sup_phase_density: Vec::new(),
        bulk_phase_density: Vec::new(),
        alpha: None,
        alpha_phase_density: None,
    };
    for &t in t_grid {
        let mut fc = fx.clone();
        let mut fs = fx.clone();
        for (k, &wk) in basis.frequencies().iter().enumerate() {
            let (sn, cs) = (wk * t).sin_cos();
            fc.column_mut(k).mapv_inplace(|v| v * cs * dz);
            fs.column_mut(k).mapv_inplace(|v| -v * sn / wk * dz);
        }
        let gpp = fc.dot(&fx.t());
        let gpr = fs.dot(&fx.t());
        let inner = c * t - 2.0 * resolution;
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        let (mut b1, mut b2): (Option<f64>, Option<f64>) = (None, None);
        for i in 0..m {
            for j in 0..m {
                let (a1, a2) = (gpp[[i, j]].abs(), gpr[[i, j]].abs());
                s1 = s1.max(a1);
                s2 = s2.max(a2);
                if inner > 0.0 && (xs[i] - xs[j]).abs() < inner {
                    b1 = Some(b1.map_or(a1, |b| b.max(a1)));
                    b2 = Some(b2.map_or(a2, |b| b.max(a2)));
                }
            }
        }
        out.sup_phase_phase.push(s1);
        out.sup_phase_density.push(s2);
        out.bulk_phase_phase.push(b1);
        out.bulk_phase_density.push(b2);
    }
    out.alpha = power_law_exponent(t_grid, &out.sup_phase_phase);
    out.alpha_phase_density = power_law_exponent(t_grid, &out.sup_phase_density);
    Ok(out)
}

/// Least-squares exponent α of `y ~ t^{-α}` over points with `t > 0`, `y > 0`.
pub fn power_law_exponent(t: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(t, y)| **t > 0.0 && **y > 0.0)
        .map(|(t, y)| (t.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    if sxx <= 0.0 {
        return None;
    }
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    Some(-sxy / sxx)
}

/// Pixel-space phase covariance `⟨φ(z_i) φ(z_j)⟩` implied by Γ.
pub fn phase_covariance(basis: &ModeBasis, params: &PhysParams, gamma: &QuadratureCovariance) -> Array2<f64> {
    let a = phase_map(basis, params);
    let n = basis.n_modes();
    let g = gamma.matrix().slice(s![..n, ..n]);
    a.dot(&g).dot(&a.t())
}

/// Pixel-space density covariance `⟨δρ(z_i) δρ(z_j)⟩` implied by Γ.
pub fn density_covariance(basis: &ModeBasis, params: &PhysParams, gamma: &QuadratureCovariance) -> Array2<f64> {
    let n = basis.n_modes();
    let scale = params.phase_scale();
    let mut a = basis.matrix().clone();
    for (k, &w) in basis.frequencies().iter().enumerate() {
        a.column_mut(k).mapv_inplace(|v| v * w.sqrt() / scale);
    }
    let g = gamma.matrix().slice(s![n.., n..]);
    a.dot(&g).dot(&a.t())
}

/// Linear map from phase quadratures φ̃ to pixel phases: `f_k(z_i) sqrt(2g/ω_k)`.
pub fn phase_map(basis: &ModeBasis, params: &PhysParams) -> Array2<f64> {
    let scale = params.phase_scale();
    let mut a = basis.matrix().clone();
    for (k, &w) in basis.frequencies().iter().enumerate() {
        a.column_mut(k).mapv_inplace(|v| v * scale / w.sqrt());
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dispersion, Geometry, Trap};
    use crate::sampler::sample_gaussian_thermal;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn setup(n_pixels: usize, n_modes: usize) -> (ModeBasis, PhysParams) {
        let g = Geometry::new(Trap::BoxNeumann, n_pixels as f64, n_pixels).unwrap();
        let p = PhysParams::new(1.0, 10.0, 40.0).unwrap().with_beta(3.0).unwrap();
        (ModeBasis::new(&g, 1.0, Dispersion::Linear, n_modes).unwrap(), p)
    }

    #[test]
    fn rotation_by_quarter_period_swaps_sectors() {
        let (p, r) = rotate_modes(&[1.0], &[0.0], &[2.0], PI / 4.0).unwrap();
        assert!(p[0].abs() < 1e-15);
        assert_relative_eq!(r[0], 2.0, max_relative = 1e-15);
        let (p, _) = rotate_modes(&[0.0], &[3.0], &[2.0], PI / 4.0).unwrap();
        assert_relative_eq!(p[0], -1.5, max_relative = 1e-15);
    }

    #[test]
    fn thermal_covariance_is_stationary() {
        let w = [0.3, 0.7, 1.1];
        let g = QuadratureCovariance::thermal(&w, 2.0, Statistics::Quantum).unwrap();
        let gt = g.rotated(1.234);
        for (a, b) in g.matrix().iter().zip(gt.matrix().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(g.is_physical(true, 0.0));
    }

    #[test]
    fn vacuum_saturates_uncertainty() {
        let g = QuadratureCovariance::thermal(&[1.0, 2.0], f64::INFINITY, Statistics::Quantum).unwrap();
        assert!(g.min_physical_eigenvalue(true).abs() < 1e-12);
        assert_relative_eq!(g.v_phiphi(0), 0.5, max_relative = 1e-14);
    }

    #[test]
    fn zero_covariance_projects_onto_uncertainty_bound() {
        let w = [1.0, 2.0, 3.0];
        let p = project_physical(&Array2::zeros((6, 6)), true).unwrap();
        let q = QuadratureCovariance::new(w.to_vec(), p).unwrap();
        for nu in q.symplectic_eigenvalues() {
            assert!(nu >= 0.5 - 1e-10, "ν = {nu}");
        }
    }

    #[test]
    fn thermal_symplectic_eigenvalues_are_mode_occupations() {
        let w = [1.0, 2.0];
        let beta = 0.7;
        let g = QuadratureCovariance::thermal(&w, beta, Statistics::Quantum).unwrap();
        let nu = g.symplectic_eigenvalues();
        let mut expected: Vec<f64> = w.iter().map(|&x| 0.5 / (0.5 * beta * x).tanh()).collect();
        expected.sort_by(f64::total_cmp);
        for (a, b) in nu.iter().zip(&expected) {
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }
    }

    #[test]
    fn projection_fixes_unphysical_and_is_idempotent() {
        let w = [1.0, 1.5];
        let mut m = QuadratureCovariance::thermal(&w, f64::INFINITY, Statistics::Quantum).unwrap().matrix().clone();
        m[[0, 0]] = 0.1;
        m[[0, 1]] = 0.3;
        m[[1, 0]] = 0.3;
        let p1 = project_physical(&m, true).unwrap();
        let q = QuadratureCovariance::new(w.to_vec(), p1.clone()).unwrap();
        assert!(q.is_physical(true, 1e-9), "{}", q.min_physical_eigenvalue(true));
        let p2 = project_physical(&p1, true).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let c1 = project_physical(&m, false).unwrap();
        let c2 = project_physical(&c1, false).unwrap();
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ensemble_evolution_is_periodic_in_twice_recurrence() {
        let (b, p) = setup(32, 10);
        let e = sample_gaussian_thermal(&b, &p, Statistics::Classical, 5, 1).unwrap();
        let t2 = 2.0 * 32.0;
        let ev = evolve_ensemble(&e, &b, &p, &[0.0, t2]).unwrap();
        for (a, c) in ev[0].phase.iter().zip(ev[1].phase.iter()) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn dalembert_matches_mode_evolution_on_smooth_data() {
        let n = 512;
        let (b, p) = setup(n, 6);
        let geo = b.geometry().clone();
        let mut modes_p = Array2::zeros((2, 6));
        let mut modes_r = Array2::zeros((2, 6));
        for k in 0..3 {
            modes_p[[0, k]] = 0.5 / (k + 1) as f64;
            modes_r[[0, k]] = 0.02 * (k as f64 - 1.0);
        }
        let phi = b.synthesize(modes_p.view());
        let rho = b.synthesize(modes_r.view());
        let ens = FieldEnsemble::new(geo, phi.clone(), rho.clone(), 0.0).unwrap();
        for t in [37.0, 100.5, 300.0] {
            let ev = evolve_ensemble(&ens, &b, &p, &[t]).unwrap();
            let d = dalembert_evolve(
                phi.row(0).as_slice().unwrap(),
                rho.row(0).as_slice().unwrap(),
                1.0,
                p.c,
                p.luttinger_k,
                t,
                Extension::Neumann,
            )
            .unwrap();
            let err = ev[0].phase.row(0).iter().zip(&d.phase).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "t = {t}: {err}");
        }
    }

    #[test]
    fn delta_density_opens_a_phase_plateau() {
        let n = 101;
        let phi = vec![0.0; n];
        let mut rho = vec![0.0; n];
        rho[50] = 1.0;
        let d = dalembert_evolve(&phi, &rho, 1.0, 1.0, 5.0, 10.0, Extension::Infinite).unwrap();
        let plateau = -PI / (2.0 * 5.0);
        let at = |i: usize| d.phase[i - d.first_pixel];
        assert_relative_eq!(at(50), plateau, max_relative = 1e-12);
        assert_relative_eq!(at(45), plateau, max_relative = 1e-12);
        assert!(at(70).abs() < 1e-15);
    }

    #[test]
    fn infinite_extension_rejects_too_long_times() {
        let v = vec![0.0; 10];
        assert!(matches!(
            dalembert_evolve(&v, &v, 1.0, 1.0, 1.0, 5.0, Extension::Infinite),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn chiral_components_translate_rigidly() {
        let n = 64;
        let u: Vec<f64> = (0..n).map(|i| (2.0 * PI * i as f64 / n as f64).sin()).collect();
        let r: Vec<f64> = (0..n).map(|i| (4.0 * PI * i as f64 / n as f64).cos()).collect();
        let ch = chiral_decompose(&u, &r, 3.0).unwrap();
        let moved = ch.transport(5.0, Extension::Periodic).unwrap();
        for i in 0..n {
            assert_relative_eq!(moved.plus[i], ch.plus[(i + 5) % n], epsilon = 1e-14);
            assert_relative_eq!(moved.minus[(i + 5) % n], ch.minus[i], epsilon = 1e-14);
        }
        let (u2, r2) = ch.recombine();
        for i in 0..n {
            assert_relative_eq!(u2[i], u[i], epsilon = 1e-14);
            assert_relative_eq!(r2[i], r[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn propagators_start_as_projector() {
        let (b, _) = setup(16, 15);
        let g = propagators(&b, 0.0);
        for i in 0..16 {
            for j in 0..16 {
                let proj: f64 = (0..15).map(|k| b.matrix()[[i, k]] * b.matrix()[[j, k]]).sum::<f64>() * b.dz();
                assert_relative_eq!(g.phase_phase[[i, j]], proj, epsilon = 1e-14);
                assert!(g.phase_density[[i, j]].abs() < 1e-15);
            }
        }
    }

    #[test]
    fn power_law_fit() {
        let t = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = t.iter().map(|t: &f64| 3.0 * t.powf(-0.5)).collect();
        assert_relative_eq!(power_law_exponent(&t, &y).unwrap(), 0.5, max_relative = 1e-12);
        assert!(power_law_exponent(&[0.0], &[1.0]).is_none());
    }
}
