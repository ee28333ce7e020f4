use std::f64::consts::PI;

use approx::assert_relative_eq;
use gaussify::dynamics::{
    chiral_decompose, dalembert_evolve, delocalization_diagnostic, evolve_ensemble, phase_covariance, project_physical,
    propagators, rotate_modes, Extension, QuadratureCovariance,
};
use gaussify::model::{
    derive_params, mode_frequencies, mode_functions, orthonormality_error, recurrence_time, Dispersion, Geometry,
    ModeBasis, PhysParams, Trap,
};
use gaussify::sampler::{
    coherence_factor, sample_gaussian_thermal, sample_sg_classical, stream_rng, FieldEnsemble, LatticeBoundary,
    McmcConfig, Statistics,
};
use gaussify::stats::{
    connected4, correlation_slope, ensemble_non_gaussianity, fourth_cumulant, full_counting_statistics, full_moment,
    gaussian_smooth, jackknife, kg_velocity_theory, m4_bias, phase_autocorrelation, power_sums, reference_phase,
    second_moments, velocity_correlation, wick4, windowed_phase, KgTheory, Window,
};
use gaussify::tomography::{
    build_dataset, cost, forward_predict, realspace_density_covariance, reconstruct, reconstruct_diagonal,
    synthetic_dataset, ReconstructionOptions,
};
use gaussify::Error;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

fn box_geometry(length: f64, pixels: usize) -> Geometry {
    Geometry::new(Trap::BoxNeumann, length, pixels).unwrap()
}

fn default_params() -> PhysParams {
    PhysParams::new(1.5, 30.0, 60.0).unwrap().with_beta(0.3).unwrap()
}

fn gaussian_rows(shots: usize, cov: &Array2<f64>, seed: u64) -> Array2<f64> {
    let root = gaussify::stats::psd_sqrt(cov);
    let n = cov.nrows();
    let mut rng = stream_rng(seed, 900, 0);
    let z = Array2::from_shape_simple_fn((shots, n), || rng.sample::<f64, _>(StandardNormal));
    z.dot(&root.t())
}

// ---------------------------------------------------------------- model

#[test]
fn neumann_fundamental_is_pi_over_length() {
    let w = mode_frequencies(&box_geometry(50.0, 50), 1.0, Dispersion::Linear, 1).unwrap();
    assert_relative_eq!(w[0], PI / 50.0, max_relative = 1e-15);
}

#[test]
fn parabolic_fundamental_is_sqrt_two_over_radius() {
    let g = Geometry::new(Trap::Parabolic, 100.0, 200).unwrap();
    let w = mode_frequencies(&g, 1.0, Dispersion::Linear, 1).unwrap();
    assert_relative_eq!(w[0], 2f64.sqrt() / 50.0, max_relative = 1e-14);
}

#[test]
fn bogoliubov_to_linear_ratio_follows_closed_form() {
    let g = box_geometry(50.0, 50);
    let xi = 0.35;
    let lin = mode_frequencies(&g, 1.0, Dispersion::Linear, 5).unwrap();
    let bog = mode_frequencies(&g, 1.0, Dispersion::Bogoliubov { healing_length: xi }, 5).unwrap();
    for k in 1..=5 {
        let expected = (1.0 + (xi * PI * k as f64 / 100.0).powi(2)).sqrt();
        let ratio = bog[k - 1] / lin[k - 1];
        assert_relative_eq!(ratio, expected, max_relative = 1e-14);
        assert!((1.0..1.002).contains(&ratio));
    }
    assert!(bog[0] / lin[0] <= 1.0002);
}

#[test]
fn neumann_gram_matrix_is_identity() {
    let g = box_geometry(50.0, 26);
    let f = mode_functions(&g, 10).unwrap();
    let dz = g.dz();
    let mut worst: f64 = 0.0;
    for a in 0..10 {
        for b in 0..10 {
            let q: f64 = (0..26).map(|i| f[[i, a]] * f[[i, b]] * dz).sum();
            worst = worst.max((q - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    assert!(worst < 1e-8, "{worst}");
    assert!(orthonormality_error(&f, dz) < 1e-8);
}

#[test]
fn unit_and_scaled_microscopic_parameters() {
    let d = derive_params(1.0, 1.0, 1.0).unwrap();
    assert_relative_eq!(d.c, 1.0);
    assert_relative_eq!(d.luttinger_k, PI / 2.0, max_relative = 1e-15);
    assert_relative_eq!(d.healing_length, 1.0);
    let d = derive_params(4.0, 1.0, 1.0).unwrap();
    assert_relative_eq!(d.c, 2.0);
    assert_relative_eq!(d.luttinger_k, PI / 4.0, max_relative = 1e-15);
    assert_relative_eq!(d.healing_length, 0.5);
}

#[test]
fn recurrence_time_examples() {
    assert_eq!(recurrence_time(&box_geometry(50.0, 25), 1.0).unwrap().time, 50.0);
    assert_eq!(recurrence_time(&box_geometry(75.0, 25), 1.5).unwrap().time, 50.0);
    let p = recurrence_time(&Geometry::new(Trap::Parabolic, 100.0, 50).unwrap(), 1.0).unwrap();
    assert!(p.approximate);
    assert!((p.time - 314.16).abs() < 0.01);
}

// ---------------------------------------------------------------- sampler

#[test]
fn classical_mode_variance_at_unit_frequency() {
    let g = box_geometry(PI, 16);
    let params = PhysParams::new(1.0, 30.0, 60.0).unwrap().with_beta(2.0).unwrap();
    let basis = ModeBasis::new(&g, 1.0, Dispersion::Linear, 1).unwrap();
    assert_relative_eq!(basis.frequencies()[0], 1.0, max_relative = 1e-14);
    let shots = 100_000;
    let ens = sample_gaussian_thermal(&basis, &params, Statistics::Classical, shots, 3).unwrap();
    let scale = params.phase_scale();
    let amp = basis.project(ens.phase.view());
    let var = amp.column(0).iter().map(|a| (a / scale).powi(2)).sum::<f64>() / shots as f64;
    let mc = 0.5 * (2.0 / shots as f64).sqrt();
    assert!((var - 0.5).abs() <= 5.0 * mc, "variance {var}");
}

#[test]
fn classical_sampler_satisfies_equipartition_per_mode() {
    let g = box_geometry(50.0, 25);
    let params = default_params();
    let basis = ModeBasis::new(&g, params.c, Dispersion::Linear, 8).unwrap();
    let shots = 20_000;
    let ens = sample_gaussian_thermal(&basis, &params, Statistics::Classical, shots, 5).unwrap();
    let scale = params.phase_scale();
    let a = basis.project(ens.phase.view());
    let b = basis.project(ens.density.view());
    for (k, &w) in basis.frequencies().iter().enumerate() {
        let vp = a.column(k).iter().map(|x| (x / scale).powi(2)).sum::<f64>() / shots as f64;
        let vr = b.column(k).iter().map(|x| (x * scale).powi(2)).sum::<f64>() / shots as f64;
        assert!((w * w * vp / vr - 1.0).abs() < 0.05, "mode {k}: {}", w * w * vp / vr);
    }
}

#[test]
fn sine_gordon_without_tunnelling_is_gaussian() {
    let g = box_geometry(40.0, 20);
    let params = default_params();
    let cfg = McmcConfig { n_chains: 64, ..Default::default() };
    let (ens, _) = sample_sg_classical(&g, &params, &cfg, 2000, 11).unwrap();
    let w = Window::centered(20, 12).unwrap();
    let m = ensemble_non_gaussianity(ens.phase.view(), &w, 50, 1).unwrap();
    let d = windowed_phase(ens.phase.view(), &w).unwrap();
    let band = m4_bias(&second_moments(d.view()), 2000, 20, 2).unwrap();
    assert!(m.m4 <= band.upper() + 3.0 * m.error, "M4 {} ± {} vs bias upper {}", m.m4, m.error, band.upper());
}

#[test]
fn strong_tunnelling_matches_harmonic_lattice() {
    let n = 16;
    let g = box_geometry(32.0, n);
    let params = default_params().with_tunneling(1.0).unwrap();
    let cfg = McmcConfig { n_chains: 16, ..Default::default() };
    let shots = 4000;
    let (ens, _) = sample_sg_classical(&g, &params, &cfg, shots, 12).unwrap();
    let (coh, _) = coherence_factor(&ens, 0..n).unwrap();
    assert!(coh > 0.98, "⟨cos φ⟩ = {coh}");

    // β H ≈ a Σ (φ_{i+1} - φ_i)² + (b / 2) Σ φ_i²
    let dz = g.dz();
    let a = params.beta * params.c * params.luttinger_k / (2.0 * PI) / dz;
    let b = params.beta * 2.0 * params.tunnel_j * params.density * dz;
    let mut precision = DMatrix::<f64>::identity(n, n) * b;
    for i in 0..n - 1 {
        precision[(i, i)] += 2.0 * a;
        precision[(i + 1, i + 1)] += 2.0 * a;
        precision[(i, i + 1)] -= 2.0 * a;
        precision[(i + 1, i)] -= 2.0 * a;
    }
    let cov = precision.try_inverse().unwrap();
    let expected = cov.diagonal().mean();
    let measured = ens.phase.iter().map(|p| p * p).sum::<f64>() / ens.phase.len() as f64;
    assert!((measured / expected - 1.0).abs() < 0.05, "{measured} vs {expected}");
}

#[test]
fn coherence_of_trivial_ensembles() {
    let g = box_geometry(20.0, 10);
    let zero = FieldEnsemble::new(g.clone(), Array2::zeros((5, 10)), Array2::zeros((5, 10)), 0.0).unwrap();
    assert_eq!(coherence_factor(&zero, 0..10).unwrap().0, 1.0);
    let mut rng = stream_rng(4, 901, 0);
    let uniform = Array2::from_shape_simple_fn((4000, 10), || PI * (2.0 * rng.random::<f64>() - 1.0));
    let ens = FieldEnsemble::new(g, uniform, Array2::zeros((4000, 10)), 0.0).unwrap();
    let (c, e) = coherence_factor(&ens, 0..10).unwrap();
    assert!(c.abs() < 3.0 * e, "{c} ± {e}");
}

#[test]
fn coherence_is_reproducible_across_seeds() {
    let g = box_geometry(40.0, 20);
    let params = default_params().with_tunneling(0.02).unwrap();
    let cfg = McmcConfig { n_chains: 32, ..Default::default() };
    let (a, _) = sample_sg_classical(&g, &params, &cfg, 3000, 21).unwrap();
    let (b, _) = sample_sg_classical(&g, &params, &cfg, 3000, 22).unwrap();
    let (ca, ea) = coherence_factor(&a, 4..16).unwrap();
    let (cb, eb) = coherence_factor(&b, 4..16).unwrap();
    assert!(ca > 0.6 && ca < 0.95, "⟨cos φ⟩ = {ca}");
    assert!((ca - cb).abs() < 3.0 * ea.hypot(eb), "{ca} ± {ea} vs {cb} ± {eb}");
}

#[test]
fn chains_need_not_divide_the_shot_count() {
    let g = box_geometry(20.0, 10);
    let params = default_params().with_tunneling(0.05).unwrap();
    let cfg = McmcConfig { n_chains: 64, burn_in_sweeps: 100, thinning: 2, boundary: LatticeBoundary::Periodic, ..Default::default() };
    let (ens, _) = sample_sg_classical(&g, &params, &cfg, 500, 1).unwrap();
    assert_eq!(ens.n_shots(), 500);
    assert!(ens.phase.rows().into_iter().all(|r| r.iter().any(|v| *v != 0.0)));
}

// ---------------------------------------------------------------- dynamics

#[test]
fn quarter_period_transmutes_and_full_period_is_identity() {
    let omega = [0.7, 1.3];
    let phi = [0.4, -1.1];
    let rho = [2.0, 0.3];
    for k in 0..2 {
        let (p, _) = rotate_modes(&phi, &rho, &omega, PI / (2.0 * omega[k])).unwrap();
        assert_relative_eq!(p[k], -rho[k] / omega[k], epsilon = 1e-14);
        let (p, r) = rotate_modes(&phi, &rho, &omega, 2.0 * PI / omega[k]).unwrap();
        assert_relative_eq!(p[k], phi[k], epsilon = 1e-13);
        assert_relative_eq!(r[k], rho[k], epsilon = 1e-13);
    }
}

#[test]
fn evolution_at_zero_is_the_mode_truncated_input() {
    let g = box_geometry(50.0, 25);
    let params = default_params();
    let basis = ModeBasis::new(&g, params.c, Dispersion::Linear, 6).unwrap();
    let mut rng = stream_rng(8, 902, 0);
    let phase = Array2::from_shape_simple_fn((7, 25), || rng.random::<f64>());
    let density = Array2::from_shape_simple_fn((7, 25), || rng.random::<f64>());
    let ens = FieldEnsemble::new(g, phase, density, 0.0).unwrap();
    let out = &evolve_ensemble(&ens, &basis, &params, &[0.0]).unwrap()[0];
    let expect = basis.synthesize(basis.project(ens.phase.view()).view());
    let err = (&out.phase - &expect).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-14, "{err}");
}

#[test]
fn single_pixel_bump_splits_into_two_half_bumps() {
    let n = 101;
    let mut phase = vec![0.0; n];
    phase[50] = 1.0;
    let out = dalembert_evolve(&phase, &vec![0.0; n], 1.0, 1.0, 10.0, 10.0, Extension::Periodic).unwrap();
    for (i, v) in out.phase.iter().enumerate() {
        let expected = if i == 40 || i == 60 { 0.5 } else { 0.0 };
        assert!((v - expected).abs() < 1e-12, "pixel {i}: {v}");
    }
}

#[test]
fn propagator_at_recurrence_is_mirrored_projector() {
    let g = box_geometry(50.0, 40);
    let basis = ModeBasis::new(&g, 1.25, Dispersion::Linear, 12).unwrap();
    let trec = recurrence_time(&g, 1.25).unwrap().time;
    let p0 = propagators(&basis, 0.0).phase_phase;
    let pt = propagators(&basis, trec).phase_phase;
    for x in 0..40 {
        for y in 0..40 {
            assert!((pt[[x, y]] - p0[[x, g.mirror_pixel(y)]]).abs() < 1e-10);
        }
    }
}

#[test]
fn parabolic_propagator_follows_curved_characteristics() {
    let radius = 50.0;
    let g = Geometry::new(Trap::Parabolic, 2.0 * radius, 401).unwrap();
    let basis = ModeBasis::new(&g, 1.0, Dispersion::Linear, 60).unwrap();
    let centre = 200;
    let mut last = 0.0;
    for step in 1..=6 {
        let t = 0.2 * step as f64 * radius;
        let p = propagators(&basis, t).phase_phase;
        let (ipk, _) = (centre + 1..401).fold((centre, 0.0f64), |best, i| {
            let v = p[[i, centre]].abs();
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
        let front = g.position(ipk);
        let expected = radius * (t / radius).sin();
        assert!(front > last, "front did not advance at t = {t}");
        assert!((front - expected).abs() < 0.08 * radius, "t = {t}: front {front}, characteristic {expected}");
        last = front;
    }
}

#[test]
fn single_time_has_no_decay_exponent() {
    let basis = ModeBasis::new(&box_geometry(50.0, 50), 1.0, Dispersion::Linear, 20).unwrap();
    assert!(delocalization_diagnostic(&basis, &[0.0]).unwrap().alpha.is_none());
}

#[test]
fn dispersive_propagators_delocalize() {
    let g = box_geometry(100.0, 100);
    let basis = ModeBasis::new(&g, 1.0, Dispersion::Bogoliubov { healing_length: 2.0 }, 99).unwrap();
    let times: Vec<f64> = (2..=15).map(|t| t as f64).collect();
    assert!(delocalization_diagnostic(&basis, &times).unwrap().alpha.unwrap() > 0.0);
}

#[test]
fn chiral_components_of_pure_sectors() {
    let u = [0.3, -1.2, 2.0];
    let c = chiral_decompose(&u, &[0.0; 3], 7.0).unwrap();
    for (i, &v) in u.iter().enumerate() {
        assert_eq!(c.plus[i], v / 2.0);
        assert_eq!(c.minus[i], v / 2.0);
    }
    let c = chiral_decompose(&[0.0; 3], &u, 7.0).unwrap();
    for i in 0..3 {
        assert_eq!(c.plus[i], -c.minus[i]);
    }
}

// ---------------------------------------------------------------- stats

#[test]
fn referencing_examples() {
    let mut rng = stream_rng(9, 903, 0);
    let offsets: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
    let constant = Array2::from_shape_fn((6, 8), |(s, _)| offsets[s]);
    assert!(reference_phase(constant.view(), 3).unwrap().iter().all(|v| *v == 0.0));

    let phase = Array2::from_shape_simple_fn((6, 8), || rng.random::<f64>());
    let once = reference_phase(phase.view(), 3).unwrap();
    assert_eq!(reference_phase(once.view(), 3).unwrap(), once);
    let back = reference_phase(reference_phase(once.view(), 6).unwrap().view(), 3).unwrap();
    for (a, b) in once.iter().zip(back.iter()) {
        assert!((a - b).abs() <= 4.0 * f64::EPSILON);
    }
}

#[test]
fn low_order_full_moments() {
    let cov = Array2::from_shape_fn((6, 6), |(i, j)| (-((i as f64 - j as f64).abs()) / 2.0).exp());
    let data = gaussian_rows(20_000, &cov, 1);
    let referenced = reference_phase(data.view(), 2).unwrap();
    for z in 0..6 {
        let col: Vec<f64> = referenced.column(z).to_vec();
        let groups: Vec<_> = col.iter().map(|&x| power_sums([x])).collect();
        let mean = jackknife(&groups, |p| p[1] / p[0]).unwrap();
        assert!(full_moment(referenced.view(), &[z]).unwrap().abs() <= 3.0 * mean.error.max(1e-300));
    }
    assert_eq!(full_moment(referenced.view(), &[2, 2]).unwrap(), 0.0);
}

#[test]
fn gaussian_four_point_function_matches_wick() {
    let cov = Array2::from_shape_fn((4, 4), |(i, j)| 1.0 / (1.0 + (i as f64 - j as f64).powi(2)));
    let shots = 40_000;
    let data = gaussian_rows(shots, &cov, 2);
    for idx in [[0usize, 1, 2, 3], [0, 0, 1, 1], [2, 2, 2, 2], [0, 1, 1, 3]] {
        let samples: Vec<f64> = data.axis_iter(Axis(0)).map(|r| idx.iter().map(|&i| r[i]).product()).collect();
        let groups: Vec<_> = samples.iter().map(|&x| power_sums([x])).collect();
        let est = jackknife(&groups, |p| p[1] / p[0]).unwrap();
        assert_relative_eq!(est.value, full_moment(data.view(), &idx).unwrap(), max_relative = 1e-12);
        let oracle = wick4(&cov, idx[0], idx[1], idx[2], idx[3]);
        assert!((est.value - oracle).abs() < 3.0 * est.error, "{idx:?}: {} ± {} vs {oracle}", est.value, est.error);
    }
}

#[test]
fn wick_pairings() {
    assert_eq!(wick4(&Array2::ones((4, 4)), 0, 1, 2, 3), 3.0);
    let mut p = Array2::zeros((4, 4));
    for (a, b) in [(0, 1), (2, 3)] {
        p[[a, b]] = 2.0;
        p[[b, a]] = 2.0;
    }
    assert_eq!(wick4(&p, 0, 1, 2, 3), 4.0);
}

#[test]
fn quartic_perturbed_cumulant_matches_quadrature() {
    let lambda = 0.1;
    let weight = |x: f64| (-0.5 * x * x - lambda * x.powi(4)).exp();
    let moment = |p: i32| -> f64 {
        let h = 1e-3;
        (-10_000..=10_000).map(|i| (i as f64 * h).powi(p) * weight(i as f64 * h) * h).sum()
    };
    let z = moment(0);
    let (m2, m4) = (moment(2) / z, moment(4) / z);
    let oracle = m4 - 3.0 * m2 * m2;
    assert!(oracle < -0.05);

    let shots = 1_000_000;
    let mut rng = stream_rng(5, 904, 0);
    let mut samples = Vec::with_capacity(shots);
    while samples.len() < shots {
        let x: f64 = rng.sample(StandardNormal);
        if rng.random::<f64>() < (-lambda * x.powi(4)).exp() {
            samples.push(x);
        }
    }
    let data = Array2::from_shape_vec((shots, 1), samples.clone()).unwrap();
    let k4 = connected4(data.view(), [0, 0, 0, 0]).unwrap();
    let err = fourth_cumulant(&samples).unwrap().error;
    assert!((k4 - oracle).abs() < 3.0 * err, "{k4} vs {oracle} ± {err}");
}

#[test]
fn gaussian_sample_m4_is_a_small_positive_bias() {
    let cov = Array2::from_shape_fn((21, 21), |(i, j)| (i.min(j) as f64 + 1.0) * 0.05);
    let data = gaussian_rows(300, &cov, 3);
    let w = Window::new(0, 20, 0).unwrap();
    let m = ensemble_non_gaussianity(data.view(), &w, 0, 0).unwrap();
    assert!(m.m4 > 0.0 && m.m4 < 0.2, "{}", m.m4);
}

#[test]
fn bias_examples() {
    let white = Array2::<f64>::eye(20);
    let a = m4_bias(&white, 300, 20, 1).unwrap();
    let b = m4_bias(&white, 300, 20, 2).unwrap();
    assert!(!a.unreliable);
    assert!((a.mean - b.mean).abs() < a.spread.max(b.spread), "{} vs {}", a.mean, b.mean);
    let brownian = Array2::from_shape_fn((20, 20), |(i, j)| (i.min(j) + 1) as f64);
    let many = m4_bias(&brownian, 300, 20, 1).unwrap();
    let two = m4_bias(&brownian, 2, 20, 1).unwrap();
    assert!(two.unreliable);
    assert!(two.mean > 5.0 * many.mean, "{} vs {}", two.mean, many.mean);
}

#[test]
fn phase_difference_variance_of_thermal_and_gapped_fields() {
    let g = box_geometry(50.0, 50);
    let params = default_params();
    let shots = 20_000;
    let tll = ModeBasis::new(&g, params.c, Dispersion::Linear, 49).unwrap();
    let ens = sample_gaussian_thermal(&tll, &params, Statistics::Classical, shots, 6).unwrap();
    let curve = phase_autocorrelation(ens.phase.view(), 10, 10..40).unwrap();
    assert_eq!(curve[0].value, 0.0);
    let slope = correlation_slope(&curve, g.dz(), 3).unwrap();
    let expected = PI / (params.beta * params.c * params.luttinger_k);
    assert!((slope.value / expected - 1.0).abs() < 0.1, "slope {} vs {expected}", slope.value);
    let mut worst: f64 = 0.0;
    for (r, e) in curve.iter().enumerate().skip(3) {
        worst = worst.max((e.value - expected * r as f64 * g.dz()).abs() / (expected * r as f64 * g.dz()));
    }
    assert!(worst < 0.1, "{worst}");

    let gap = 2.0 * params.c;
    let kg = ModeBasis::new(&g, params.c, Dispersion::Massive { gap }, 49).unwrap();
    let ens = sample_gaussian_thermal(&kg, &params, Statistics::Classical, shots, 7).unwrap();
    let curve = phase_autocorrelation(ens.phase.view(), 10, 10..40).unwrap();
    let flat = correlation_slope(&curve, g.dz(), 10).unwrap();
    assert!(flat.value.abs() < 0.05 * expected, "saturated slope {}", flat.value);
}

#[test]
fn white_noise_velocity_correlation_is_laplacian_stencil() {
    let shots = 50_000;
    let sigma = 0.7;
    let dz = 2.0;
    let mut rng = stream_rng(2, 905, 0);
    let phase = Array2::from_shape_simple_fn((shots, 12), || sigma * rng.sample::<f64, _>(StandardNormal));
    let c = velocity_correlation(phase.view(), dz, 0..11).unwrap();
    let unit = sigma * sigma / (dz * dz);
    let tol = 0.03 * unit;
    assert!((c[0] - 2.0 * unit).abs() < tol, "{}", c[0]);
    assert!((c[1] + unit).abs() < tol, "{}", c[1]);
    for v in &c[2..] {
        assert!(v.abs() < tol, "{v}");
    }
}

#[test]
fn kg_velocity_correlation_peaks_at_zero_and_tails_as_inverse_square() {
    let massive = KgTheory { c: 1.5, gap: 1.0, beta: 0.3, cutoff: 1.0, g: 0.1 };
    let r: Vec<f64> = (0..40).map(|i| 0.5 * i as f64).collect();
    let c = kg_velocity_theory(&massive, &r).unwrap();
    assert!(c.iter().skip(1).all(|v| *v < c[0]));

    let massless = KgTheory { c: 1.0, gap: 0.0, beta: f64::INFINITY, cutoff: 20.0, g: 0.1 };
    let r: Vec<f64> = (0..=10).map(|i| 1.0 + 0.9 * i as f64).collect();
    let c = kg_velocity_theory(&massless, &r).unwrap();
    let tail: Vec<f64> = c.iter().zip(&r).map(|(v, x)| v * x * x).collect();
    assert!(tail.iter().all(|v| *v < 0.0));
    for v in &tail {
        assert!((v / tail[0] - 1.0).abs() < 0.05, "{tail:?}");
    }
}

#[test]
fn counting_statistics_of_gaussian_and_frozen_phases() {
    let cov = Array2::from_shape_fn((20, 20), |(i, j)| (i.min(j) as f64 + 1.0) * 0.1);
    let data = gaussian_rows(5000, &cov, 4);
    let f = full_counting_statistics(data.view(), 0..20, 6, 30, 200, 1).unwrap();
    assert!((f.kurtosis.value - 3.0).abs() < 3.0 * f.kurtosis.error, "{:?}", f.kurtosis);
    let frozen = Array2::from_elem((50, 20), 0.4);
    assert!(matches!(full_counting_statistics(frozen.view(), 0..20, 6, 30, 10, 1), Err(Error::Degenerate(_))));
}

#[test]
fn smoothing_an_impulse_reproduces_the_kernel() {
    let (sigma_um, dz) = (3.5, 2.0);
    let sigma = sigma_um / dz;
    let n = 41;
    let mut impulse = vec![0.0; n];
    impulse[20] = 1.0;
    let out = gaussian_smooth(&impulse, sigma);
    let reach = (4.0 * sigma).ceil() as i64;
    let shape = |d: i64| (-((d as f64 * dz).powi(2)) / (2.0 * sigma_um * sigma_um)).exp();
    let norm: f64 = (-reach..=reach).map(shape).sum();
    for (i, v) in out.iter().enumerate() {
        let d = i as i64 - 20;
        let expected = if d.abs() <= reach { shape(d) / norm } else { 0.0 };
        assert!((v - expected).abs() < 1e-10, "pixel {i}");
    }
    assert_eq!(gaussian_smooth(&impulse, 0.0), impulse);
    for v in gaussian_smooth(&[1.7; 15], 2.0) {
        assert!((v - 1.7).abs() < 1e-14);
    }
}

// ---------------------------------------------------------------- tomography

fn tomography_setup(n_modes: usize) -> (ModeBasis, PhysParams, Window) {
    let geo = box_geometry(50.0, 25);
    let basis = ModeBasis::new(&geo, 2.5, Dispersion::Linear, n_modes).unwrap();
    let params = PhysParams::new(2.5, 40.0, 60.0).unwrap().with_beta(2.0).unwrap();
    (basis, params, Window::centered(25, 25).unwrap())
}

#[test]
fn sampled_snapshots_agree_with_forward_model() {
    let (basis, params, win) = tomography_setup(5);
    let gamma = QuadratureCovariance::thermal(basis.frequencies(), params.beta, Statistics::Classical).unwrap();
    let ens = sample_gaussian_thermal(&basis, &params, Statistics::Classical, 4000, 13).unwrap();
    let times: Vec<f64> = (0..13).map(|t| t as f64).collect();
    let evolved = evolve_ensemble(&ens, &basis, &params, &times).unwrap();
    let ds = build_dataset(&evolved, &win, 0.0).unwrap();
    assert_eq!(ds.snapshots.len(), 13);
    let (mut chi2, mut count) = (0.0, 0.0);
    for snap in &ds.snapshots {
        let pred = forward_predict(&gamma, &basis, &params, &win, 0.0, snap.time).unwrap();
        for i in 0..25 {
            for j in i..25 {
                if snap.sigma[[i, j]] > 0.0 {
                    chi2 += ((snap.phi2[[i, j]] - pred[[i, j]]) / snap.sigma[[i, j]]).powi(2);
                    count += 1.0;
                }
            }
        }
    }
    let reduced = chi2 / count;
    assert!(reduced > 0.3 && reduced < 3.0, "reduced χ² = {reduced}");
}

#[test]
fn noisy_cost_at_truth_is_about_one() {
    let (basis, params, win) = tomography_setup(5);
    let gamma = QuadratureCovariance::thermal(basis.frequencies(), params.beta, Statistics::Classical).unwrap();
    let times = [0.0, 2.0, 4.0, 6.0];
    let costs: Vec<f64> = (0..20)
        .map(|s| {
            let ds = synthetic_dataset(&gamma, &basis, &params, &win, 0.0, &times, 0.05, Some(s)).unwrap();
            cost(&gamma, &ds, &basis, &params).unwrap()
        })
        .collect();
    let mean = costs.iter().sum::<f64>() / 20.0;
    let spread = (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * spread.max(0.02), "mean cost {mean} ± {spread}");
}

#[test]
fn projection_leaves_physical_states_and_lifts_squeezed_blocks() {
    let omega = vec![0.5, 1.0, 1.5];
    let thermal = QuadratureCovariance::thermal(&omega, 1.0, Statistics::Quantum).unwrap();
    let same = project_physical(thermal.matrix(), true).unwrap();
    let err = (&same - thermal.matrix()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-12, "{err}");

    let mut g = thermal.matrix().clone();
    g[[1, 1]] = 0.1;
    g[[4, 4]] = 0.1;
    let p = project_physical(&g, true).unwrap();
    let det = p[[1, 1]] * p[[4, 4]] - p[[1, 4]] * p[[4, 1]];
    assert!(det >= 0.25 - 1e-9, "block determinant {det}");
}

#[test]
fn diagonal_reconstruction_is_lossless_for_product_states() {
    let (basis, params, win) = tomography_setup(4);
    let scale: Vec<f64> = basis.frequencies().iter().map(|w| 1.0 / (params.beta * w)).collect();
    let gamma = QuadratureCovariance::squeezed(basis.frequencies(), &scale, 3.0).unwrap();
    let times: Vec<f64> = (0..13).map(|t| t as f64).collect();
    let ds = synthetic_dataset(&gamma, &basis, &params, &win, 0.0, &times, 0.05, None).unwrap();
    let opts = ReconstructionOptions::default();
    let full = reconstruct(&ds, &basis, &params, Statistics::Classical, &opts).unwrap();
    let diag = reconstruct_diagonal(&ds, &basis, &params, Statistics::Classical, &opts).unwrap();
    for k in 0..4 {
        assert!((diag.v_phiphi[[k, k]] / full.v_phiphi[[k, k]] - 1.0).abs() < 0.01);
        assert!((diag.v_rhorho[[k, k]] / full.v_rhorho[[k, k]] - 1.0).abs() < 0.01);
    }
}

#[test]
fn diagonal_reconstruction_misses_mode_correlations() {
    let (basis, params, win) = tomography_setup(4);
    let thermal = QuadratureCovariance::thermal(basis.frequencies(), params.beta, Statistics::Classical).unwrap();
    let mut g = thermal.matrix().clone();
    let x = 0.8 * (g[[0, 0]] * g[[1, 1]]).sqrt();
    g[[0, 1]] = x;
    g[[1, 0]] = x;
    let gamma = QuadratureCovariance::new(basis.frequencies().to_vec(), g).unwrap();
    let times: Vec<f64> = (0..13).map(|t| t as f64).collect();
    let ds = synthetic_dataset(&gamma, &basis, &params, &win, 0.0, &times, 0.05, None).unwrap();
    let opts = ReconstructionOptions::default();
    let full = reconstruct(&ds, &basis, &params, Statistics::Classical, &opts).unwrap();
    let diag = reconstruct_diagonal(&ds, &basis, &params, Statistics::Classical, &opts).unwrap();
    assert!(diag.residual > full.residual, "{} vs {}", diag.residual, full.residual);
}

#[test]
fn more_modes_localize_the_density_covariance() {
    let geo = box_geometry(50.0, 50);
    let params = default_params();
    let concentration = |n: usize| -> f64 {
        let basis = ModeBasis::new(&geo, params.c, Dispersion::Linear, n).unwrap();
        let omega = basis.frequencies().to_vec();
        let mut g = Array2::zeros((2 * n, 2 * n));
        for k in 0..n {
            g[[k, k]] = 1.0;
            g[[n + k, n + k]] = 1.0 / omega[k];
        }
        let gamma = QuadratureCovariance::new(omega, g).unwrap();
        let res = gaussify::tomography::ReconstructionResult {
            v_phiphi: Array2::eye(n),
            v_rhorho: Array2::from_diag(&Array1::from_shape_fn(n, |k| gamma.v_rhorho(k))),
            v_phirho: Array2::zeros((n, n)),
            gamma,
            residual: 0.0,
            iterations: 0,
            converged: true,
            cost_log: vec![],
            under_rotated: vec![false; n],
            warnings: vec![],
        };
        let d = realspace_density_covariance(&res, &basis, &params).unwrap();
        let diag: f64 = d.diag().iter().map(|v| v * v).sum();
        diag / d.iter().map(|v| v * v).sum::<f64>()
    };
    let (c10, c20) = (concentration(10), concentration(20));
    assert!(c20 > c10, "{c20} vs {c10}");
}

#[test]
fn phase_covariance_of_recurred_state_is_mirrored() {
    let (basis, params, _) = tomography_setup(6);
    let geo = basis.geometry().clone();
    let thermal = QuadratureCovariance::thermal(basis.frequencies(), params.beta, Statistics::Classical).unwrap();
    let mut g = thermal.matrix().clone();
    g[[0, 7]] = 0.3 * (g[[0, 0]] * g[[7, 7]]).sqrt();
    g[[7, 0]] = g[[0, 7]];
    let gamma = QuadratureCovariance::new(basis.frequencies().to_vec(), g).unwrap();
    let trec = recurrence_time(&geo, params.c).unwrap().time;
    let a = phase_covariance(&basis, &params, &gamma);
    let b = phase_covariance(&basis, &params, &gamma.rotated(trec));
    for i in 0..25 {
        for j in 0..25 {
            assert!((b[[i, j]] - a[[geo.mirror_pixel(i), geo.mirror_pixel(j)]]).abs() < 1e-10 * a[[i, i]].abs().max(1.0));
        }
    }
}
