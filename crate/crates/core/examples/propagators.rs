//! Phase-phase and phase-density propagators and how fast they delocalise.

use gaussify::dynamics::{delocalization_diagnostic, propagators};
use gaussify::model::{Dispersion, Geometry, ModeBasis, Trap};

fn main() -> gaussify::Result<()> {
    let geo = Geometry::new(Trap::BoxNeumann, 100.0, 101)?;
    for (name, dispersion) in [("linear", Dispersion::Linear), ("Bogoliubov", Dispersion::Bogoliubov { healing_length: 1.0 })] {
        let basis = ModeBasis::new(&geo, 1.5, dispersion, 60)?;
        let times: Vec<f64> = (1..=10).map(|i| 3.0 * i as f64).collect();
        let d = delocalization_diagnostic(&basis, &times)?;
        println!("{name}: α = {:?}", d.alpha);
        for (i, t) in times.iter().enumerate() {
            println!("  t = {t:>4} ms  sup|G_φφ| = {:.4}  sup|G_φρ| = {:.4}", d.sup_phase_phase[i], d.sup_phase_density[i]);
        }
        let p = propagators(&basis, 15.0);
        let row = p.phase_phase.row(50);
        let peak = row.iter().enumerate().fold((0, 0.0), |m, (i, v)| if v.abs() > m.1 { (i, v.abs()) } else { m });
        println!("  G_φφ(z = 50, t = 15 ms) peaks at pixel {} with |G| = {:.4}", peak.0, peak.1);
    }
    Ok(())
}
