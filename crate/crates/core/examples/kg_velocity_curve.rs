//! Velocity correlation of a thermal Klein-Gordon state: sampled versus
//! the momentum-space integral.
//!
//! The sampled profiles are blurred with a Gaussian of width σ, which
//! multiplies the velocity spectrum by exp(-k²σ²); the theory curve uses
//! the matching cutoff Λ = 1/(σ√2).

use gaussify::model::{Dispersion, Geometry, ModeBasis, PhysParams, Trap};
use gaussify::sampler::{sample_gaussian_thermal, Statistics};
use gaussify::stats::{gaussian_smooth, kg_velocity_theory, velocity_correlation, KgTheory};
use ndarray::Array2;

fn main() -> gaussify::Result<()> {
    let geo = Geometry::new(Trap::BoxNeumann, 200.0, 200)?;
    let params = PhysParams::new(1.5, 30.0, 60.0)?.with_beta(0.3)?.with_tunneling(0.01)?;
    let gap = params.kg_gap_sq().sqrt();
    let basis = ModeBasis::new(&geo, params.c, Dispersion::Massive { gap }, 150)?;
    let ens = sample_gaussian_thermal(&basis, &params, Statistics::Classical, 4000, 4)?;
    let dz = geo.dz();
    let sigma_px = 3.0;
    let mut blurred = Array2::zeros(ens.phase.dim());
    for (mut out, row) in blurred.rows_mut().into_iter().zip(ens.phase.rows()) {
        out.assign(&ndarray::Array1::from(gaussian_smooth(&row.to_vec(), sigma_px)));
    }
    let sampled = velocity_correlation(blurred.view(), dz, 40..160)?;
    let cutoff = 1.0 / (sigma_px * dz * 2f64.sqrt());
    let theory = KgTheory { c: params.c, gap, beta: params.beta, cutoff, g: params.g() };
    let r: Vec<f64> = (0..16).map(|d| d as f64 * dz).collect();
    let curve = kg_velocity_theory(&theory, &r)?;
    println!("gap Mc² = {gap:.4} /ms, decay length c/gap = {:.1} μm, σ = {:.1} μm", params.c / gap, sigma_px * dz);
    println!("r [μm]   sampled C^uu   theory C^uu");
    for d in 0..16 {
        println!("{:<8.1} {:<14.5} {:.5}", r[d], sampled[d], curve[d]);
    }
    Ok(())
}
