//! Trap geometry, physical parameters and the phonon mode basis.
//!
//! Units: ħ = k_B = 1, lengths in μm, times in ms, energies in 1/ms.
//! Profiles live on a pixel-centred grid: pixel `i` sits at
//! `z_i = -L/2 + (i + 1/2) δz` with `δz = L / n_pixels`, and spatial
//! integrals are evaluated with the uniform weight `δz`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};

const HBAR_SI: f64 = 1.054_571_817e-34;
const KB_SI: f64 = 1.380_649e-23;

/// Converts a temperature in nK to an energy in 1/ms.
pub fn nanokelvin_to_inv_ms(t_nk: f64) -> f64 {
    t_nk * 1e-9 * KB_SI / HBAR_SI * 1e-3
}

/// Trap shape and, for box traps, the boundary condition on the phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trap {
    BoxNeumann,
    BoxDirichlet,
    Parabolic,
}

/// Spatial extent of the system and its pixel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    trap: Trap,
    length: f64,
    n_pixels: usize,
}

impl Geometry {
    /// For a parabolic trap `length` is the full Thomas-Fermi extent `2R`.
    pub fn new(trap: Trap, length: f64, n_pixels: usize) -> Result<Self> {
        ensure(length.is_finite() && length > 0.0, || {
            format!("length must be positive and finite, got {length}")
        })?;
        ensure(n_pixels >= 2, || format!("need at least 2 pixels, got {n_pixels}"))?;
        Ok(Self { trap, length, n_pixels })
    }

    /// Box of length `length` split into pixels of size `dz` (rounded to the nearest count).
    pub fn with_pixel_size(trap: Trap, length: f64, dz: f64) -> Result<Self> {
        ensure(dz > 0.0 && dz.is_finite(), || format!("pixel size must be positive, got {dz}"))?;
        let n = (length / dz).round() as usize;
        Self::new(trap, n as f64 * dz, n)
    }

    pub fn trap(&self) -> Trap {
        self.trap
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn dz(&self) -> f64 {
        self.length / self.n_pixels as f64
    }

    /// Half the extent; the Thomas-Fermi radius for a parabolic trap.
    pub fn radius(&self) -> f64 {
        0.5 * self.length
    }

    pub fn position(&self, pixel: usize) -> f64 {
        -0.5 * self.length + (pixel as f64 + 0.5) * self.dz()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n_pixels).map(|i| self.position(i)).collect()
    }

    /// Index of the pixel on the other side of the trap centre.
    pub fn mirror_pixel(&self, pixel: usize) -> usize {
        self.n_pixels - 1 - pixel
    }
}

/// Single-particle dispersion used for the mode frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Dispersion {
    /// ω = c κ
    Linear,
    /// ω = sqrt(c² κ² + Δ²) with the gap Δ = M c² in 1/ms.
    Massive { gap: f64 },
    /// ω = c κ sqrt(1 + (ξ_h κ / 2)²)
    Bogoliubov { healing_length: f64 },
}

impl Dispersion {
    pub fn omega(&self, c: f64, kappa: f64) -> f64 {
        match *self {
            Dispersion::Linear => c * kappa,
            Dispersion::Massive { gap } => (c * c * kappa * kappa + gap * gap).sqrt(),
            Dispersion::Bogoliubov { healing_length } => {
                let x = 0.5 * healing_length * kappa;
                c * kappa * (1.0 + x * x).sqrt()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Dispersion::Linear => Ok(()),
            Dispersion::Massive { gap } => ensure(gap.is_finite() && gap >= 0.0, || {
                format!("mass gap must be non-negative, got {gap}")
            }),
            Dispersion::Bogoliubov { healing_length } => {
                ensure(healing_length.is_finite() && healing_length >= 0.0, || {
                    format!("healing length must be non-negative, got {healing_length}")
                })
            }
        }
    }
}

/// Effective wavenumber of mode `k` (1-based, zero mode excluded).
pub fn mode_wavenumber(geometry: &Geometry, k: usize) -> f64 {
    match geometry.trap {
        Trap::BoxNeumann | Trap::BoxDirichlet => std::f64::consts::PI * k as f64 / geometry.length,
        Trap::Parabolic => ((k * (k + 1)) as f64).sqrt() / geometry.radius(),
    }
}

/// Frequencies ω_1..ω_N in 1/ms.
pub fn mode_frequencies(
    geometry: &Geometry,
    c: f64,
    dispersion: Dispersion,
    n_modes: usize,
) -> Result<Vec<f64>> {
    ensure(c.is_finite() && c > 0.0, || format!("sound velocity must be positive, got {c}"))?;
    ensure(n_modes >= 1, || "need at least one mode".into())?;
    dispersion.validate()?;
    Ok((1..=n_modes)
        .map(|k| dispersion.omega(c, mode_wavenumber(geometry, k)))
        .collect())
}

/// Continuum mode function `k` (1-based) evaluated at position `z`.
pub fn mode_function_at(geometry: &Geometry, k: usize, z: f64) -> f64 {
    let l = geometry.length;
    match geometry.trap {
        Trap::BoxNeumann => {
            (2.0 / l).sqrt() * (k as f64 * std::f64::consts::PI * (z + 0.5 * l) / l).cos()
        }
        Trap::BoxDirichlet => {
            (2.0 / l).sqrt() * (k as f64 * std::f64::consts::PI * (z + 0.5 * l) / l).sin()
        }
        Trap::Parabolic => {
            let r = geometry.radius();
            ((2 * k + 1) as f64 / (2.0 * r)).sqrt() * legendre(k, z / r)
        }
    }
}

fn legendre(n: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return p0;
    }
    for m in 1..n {
        let m = m as f64;
        let p2 = ((2.0 * m + 1.0) * x * p1 - m * p0) / (m + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Mode matrix `F[i, k] = f_{k+1}(z_i)` with columns orthonormal under the weight δz.
///
/// Box modes are exactly orthogonal on the pixel-centred grid. Legendre
/// modes are re-orthonormalised (Gram-Schmidt against the constant and all
/// lower orders) so that the discrete basis is orthonormal to machine
/// precision while converging to the continuum functions as δz → 0.
pub fn mode_functions(geometry: &Geometry, n_modes: usize) -> Result<Array2<f64>> {
    ensure(n_modes >= 1, || "need at least one mode".into())?;
    let n = geometry.n_pixels;
    if n_modes > n {
        return Err(Error::IllConditionedBasis(format!(
            "{n_modes} modes cannot be resolved on {n} pixels"
        )));
    }
    let dz = geometry.dz();
    let z = geometry.positions();
    let mut f = Array2::<f64>::zeros((n, n_modes));
    match geometry.trap {
        Trap::BoxNeumann | Trap::BoxDirichlet => {
            for k in 0..n_modes {
                for i in 0..n {
                    f[[i, k]] = mode_function_at(geometry, k + 1, z[i]);
                }
            }
        }
        Trap::Parabolic => {
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n_modes + 1);
            for k in 0..=n_modes {
                let mut v: Vec<f64> = z.iter().map(|&zi| mode_function_at(geometry, k, zi)).collect();
                let norm0 = dot(&v, &v, dz).sqrt();
                for _pass in 0..2 {
                    for prev in &cols {
                        let p = dot(&v, prev, dz);
                        v.iter_mut().zip(prev).for_each(|(a, b)| *a -= p * b);
                    }
                }
                let norm = dot(&v, &v, dz).sqrt();
                if norm.is_nan() || norm <= 1e-8 * norm0 {
                    return Err(Error::IllConditionedBasis(format!(
                        "Legendre mode {k} is linearly dependent on lower modes at {n} pixels"
                    )));
                }
                v.iter_mut().for_each(|a| *a /= norm);
                cols.push(v);
            }
            for k in 0..n_modes {
                for i in 0..n {
                    f[[i, k]] = cols[k + 1][i];
                }
            }
        }
    }
    let err = orthonormality_error(&f, dz);
    let tol = match geometry.trap {
        Trap::Parabolic => 1e-6,
        _ => 1e-8,
    };
    if err > tol {
        return Err(Error::IllConditionedBasis(format!(
            "mode matrix deviates from orthonormality by {err:.3e}"
        )));
    }
    Ok(f)
}

fn dot(a: &[f64], b: &[f64], w: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * w
}

/// Largest entry of `|Fᵀ F δz - I|`.
pub fn orthonormality_error(f: &Array2<f64>, dz: f64) -> f64 {
    let g = f.t().dot(f) * dz;
    let mut err: f64 = 0.0;
    for ((i, j), v) in g.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        err = err.max((v - target).abs());
    }
    err
}

/// Mode functions, frequencies and the grid they live on.
#[derive(Clone, Debug)]
pub struct ModeBasis {
    geometry: Geometry,
    dispersion: Dispersion,
    c: f64,
    frequencies: Vec<f64>,
    matrix: Array2<f64>,
}

impl ModeBasis {
    pub fn new(geometry: &Geometry, c: f64, dispersion: Dispersion, n_modes: usize) -> Result<Self> {
        let frequencies = mode_frequencies(geometry, c, dispersion, n_modes)?;
        let matrix = mode_functions(geometry, n_modes)?;
        Ok(Self { geometry: geometry.clone(), dispersion, c, frequencies, matrix })
    }

    /// Linear-dispersion basis with the default ten modes.
    pub fn linear(geometry: &Geometry, c: f64) -> Result<Self> {
        Self::new(geometry, c, Dispersion::Linear, 10)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dispersion(&self) -> Dispersion {
        self.dispersion
    }

    pub fn sound_velocity(&self) -> f64 {
        self.c
    }

    pub fn n_modes(&self) -> usize {
        self.frequencies.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// `n_pixels × n_modes` matrix of mode functions on the grid.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn dz(&self) -> f64 {
        self.geometry.dz()
    }

    /// Mode `k` (0-based) at an arbitrary position, using the continuum form.
    pub fn eval(&self, k: usize, z: f64) -> f64 {
        mode_function_at(&self.geometry, k + 1, z)
    }

    /// Mode amplitudes of each row of `profiles` (shots × pixels → shots × modes).
    pub fn project(&self, profiles: ArrayView2<f64>) -> Array2<f64> {
        profiles.dot(&self.matrix) * self.dz()
    }

    /// Profiles from mode amplitudes (shots × modes → shots × pixels).
    pub fn synthesize(&self, amplitudes: ArrayView2<f64>) -> Array2<f64> {
        amplitudes.dot(&self.matrix.t())
    }
}

/// Microscopic description of one of the two coupled condensates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    /// Sound velocity c in μm/ms.
    pub c: f64,
    /// Luttinger parameter K.
    pub luttinger_k: f64,
    /// Mean linear density n in 1/μm.
    pub density: f64,
    /// Inverse temperature β in ms; `f64::INFINITY` means zero temperature.
    pub beta: f64,
    /// Tunnel coupling J in 1/ms.
    pub tunnel_j: f64,
    /// Healing length ξ_h in μm.
    pub healing_length: f64,
    /// Imaging resolution σ in μm.
    pub smear: f64,
}

/// Sound velocity, Luttinger parameter and healing length from g, n, m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivedParams {
    pub c: f64,
    pub luttinger_k: f64,
    pub healing_length: f64,
}

/// c = sqrt(g n / m), K = (π/2) sqrt(n / (m g)), ξ_h = 1 / sqrt(g n m).
pub fn derive_params(g: f64, n: f64, m: f64) -> Result<DerivedParams> {
    for (name, v) in [("g", g), ("n", n), ("m", m)] {
        ensure(v.is_finite() && v > 0.0, || format!("{name} must be positive, got {v}"))?;
    }
    Ok(DerivedParams {
        c: (g * n / m).sqrt(),
        luttinger_k: 0.5 * std::f64::consts::PI * (n / (m * g)).sqrt(),
        healing_length: 1.0 / (g * n * m).sqrt(),
    })
}

impl PhysParams {
    /// Parameters from c, K and n; g and m follow from these.
    pub fn new(c: f64, luttinger_k: f64, density: f64) -> Result<Self> {
        let mut p = Self {
            c,
            luttinger_k,
            density,
            beta: f64::INFINITY,
            tunnel_j: 0.0,
            healing_length: 0.0,
            smear: 0.0,
        };
        p.validate()?;
        p.healing_length = p.c / (p.g() * p.density);
        Ok(p)
    }

    pub fn from_microscopic(g: f64, n: f64, m: f64) -> Result<Self> {
        let d = derive_params(g, n, m)?;
        let mut p = Self::new(d.c, d.luttinger_k, n)?;
        p.healing_length = d.healing_length;
        Ok(p)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        self.beta = beta;
        self.validate().map(|_| self)
    }

    pub fn with_temperature_nk(self, t_nk: f64) -> Result<Self> {
        ensure(t_nk > 0.0, || format!("temperature must be positive, got {t_nk}"))?;
        self.with_beta(1.0 / nanokelvin_to_inv_ms(t_nk))
    }

    pub fn with_tunneling(mut self, j: f64) -> Result<Self> {
        self.tunnel_j = j;
        self.validate().map(|_| self)
    }

    pub fn with_smear(mut self, sigma: f64) -> Result<Self> {
        self.smear = sigma;
        self.validate().map(|_| self)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            ensure(v.is_finite() && v > 0.0, || format!("{name} must be positive and finite, got {v}"))
        };
        pos("c", self.c)?;
        pos("K", self.luttinger_k)?;
        pos("n", self.density)?;
        ensure(self.beta > 0.0 && !self.beta.is_nan(), || {
            format!("beta must be positive, got {}", self.beta)
        })?;
        for (name, v) in [("J", self.tunnel_j), ("xi_h", self.healing_length), ("sigma", self.smear)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Interaction constant g = π c / (2K).
    pub fn g(&self) -> f64 {
        0.5 * std::f64::consts::PI * self.c / self.luttinger_k
    }

    /// Atomic mass m = g n / c².
    pub fn mass(&self) -> f64 {
        self.g() * self.density / (self.c * self.c)
    }

    /// Factor between physical and canonical mode variables, sqrt(2g).
    pub fn phase_scale(&self) -> f64 {
        (2.0 * self.g()).sqrt()
    }

    /// Squared Klein-Gordon gap M²c⁴ = 4 g J n from expanding -2Jn cos φ.
    pub fn kg_gap_sq(&self) -> f64 {
        4.0 * self.g() * self.tunnel_j * self.density
    }

    /// Temperature in 1/ms (zero when β is infinite).
    pub fn temperature(&self) -> f64 {
        1.0 / self.beta
    }
}

/// Time after which the mode phases realign, and whether that is only approximate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recurrence {
    pub time: f64,
    pub approximate: bool,
}

/// L / c for box traps; 2πR / c for the parabolic trap, flagged approximate.
pub fn recurrence_time(geometry: &Geometry, c: f64) -> Result<Recurrence> {
    ensure(c.is_finite() && c > 0.0, || format!("sound velocity must be positive, got {c}"))?;
    Ok(match geometry.trap {
        Trap::BoxNeumann | Trap::BoxDirichlet => Recurrence { time: geometry.length / c, approximate: false },
        Trap::Parabolic => Recurrence {
            time: 2.0 * std::f64::consts::PI * geometry.radius() / c,
            approximate: true,
        },
    })
}
