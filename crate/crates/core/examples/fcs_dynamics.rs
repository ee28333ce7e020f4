//! Counting statistics of phase differences before and after evolution.

use gaussify::dynamics::evolve_ensemble;
use gaussify::model::{Dispersion, Geometry, ModeBasis, PhysParams, Trap};
use gaussify::sampler::{sample_sg_classical, McmcConfig};
use gaussify::stats::full_counting_statistics;

fn main() -> gaussify::Result<()> {
    let geo = Geometry::new(Trap::BoxNeumann, 50.0, 25)?;
    let params = PhysParams::new(1.5, 30.0, 60.0)?.with_beta(0.3)?.with_tunneling(0.003)?;
    let basis = ModeBasis::new(&geo, params.c, Dispersion::Linear, 10)?;
    let (ens, _) = sample_sg_classical(&geo, &params, &McmcConfig { n_chains: 32, ..McmcConfig::default() }, 2000, 11)?;
    let times = [0.0, 5.0, 10.0, 20.0];
    for e in evolve_ensemble(&ens, &basis, &params, &times)? {
        let f = full_counting_statistics(e.phase.view(), 6..19, 6, 24, 100, 3)?;
        println!(
            "t = {:>4} ms: variance {:.3} ± {:.3}, kurtosis {:.3} ± {:.3}",
            e.time, f.variance.value, f.variance.error, f.kurtosis.value, f.kurtosis.error
        );
        let max = *f.counts.iter().max().unwrap_or(&1) as f64;
        for (b, &n) in f.counts.iter().enumerate() {
            let mid = 0.5 * (f.bin_edges[b] + f.bin_edges[b + 1]);
            println!("  {mid:>6.2} {}", "#".repeat((40.0 * n as f64 / max).round() as usize));
        }
    }
    Ok(())
}
