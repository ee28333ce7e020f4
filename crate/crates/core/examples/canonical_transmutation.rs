//! Non-Gaussianity of the phase flowing into the density sector and back.
//!
//! A sine-Gordon thermal state is evolved with the linear phonon dynamics.
//! The control run zeroes the initial density so only the phase rotates.

use gaussify::dynamics::{evolve_ensemble, QuadratureCovariance};
use gaussify::model::{recurrence_time, Dispersion, Geometry, ModeBasis, PhysParams, Trap};
use gaussify::sampler::{sample_sg_classical, McmcConfig};
use gaussify::stats::{ensemble_non_gaussianity, Window};

fn main() -> gaussify::Result<()> {
    let geo = Geometry::new(Trap::BoxNeumann, 50.0, 25)?;
    let params = PhysParams::new(1.5, 30.0, 60.0)?.with_beta(0.3)?.with_tunneling(0.007)?;
    let basis = ModeBasis::new(&geo, params.c, Dispersion::Linear, 10)?;
    let cfg = McmcConfig { n_chains: 32, ..McmcConfig::default() };
    let (ens, _) = sample_sg_classical(&geo, &params, &cfg, 2000, 5)?;

    let gamma = QuadratureCovariance::from_ensemble(&ens, &basis, &params)?;
    println!("sector ratio V^ρρ/V^φφ of the lowest modes:");
    for k in 0..4 {
        println!("  k = {}: {:.2}", k + 1, gamma.sector_ratio(k));
    }

    let trec = recurrence_time(&geo, params.c)?.time;
    let times: Vec<f64> = (0..=16).map(|i| trec * i as f64 / 16.0).collect();
    let window = Window::centered(25, 13)?;
    let full = evolve_ensemble(&ens, &basis, &params, &times)?;
    let control = evolve_ensemble(&ens.density_zeroed(), &basis, &params, &times)?;
    println!("\n  t [ms]   M4 full   M4 control");
    for ((t, a), b) in times.iter().zip(&full).zip(&control) {
        let ma = ensemble_non_gaussianity(a.phase.view(), &window, 0, 0)?.m4;
        let mb = ensemble_non_gaussianity(b.phase.view(), &window, 0, 0)?.m4;
        println!("  {t:<8.2} {ma:<9.3} {mb:.3}");
    }
    Ok(())
}
