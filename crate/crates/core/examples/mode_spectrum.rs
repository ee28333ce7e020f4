//! Mode frequencies and recurrence times for the three trap geometries.
//!
//! Run with `cargo run --example mode_spectrum`.

use gaussify::model::{mode_frequencies, orthonormality_error, recurrence_time, Dispersion, Geometry, ModeBasis, Trap};

fn main() -> gaussify::Result<()> {
    let c = 1.5;
    for trap in [Trap::BoxNeumann, Trap::BoxDirichlet, Trap::Parabolic] {
        let geo = Geometry::new(trap, 100.0, 101)?;
        let rec = recurrence_time(&geo, c)?;
        let linear = mode_frequencies(&geo, c, Dispersion::Linear, 6)?;
        let bogo = mode_frequencies(&geo, c, Dispersion::Bogoliubov { healing_length: 0.35 }, 6)?;
        let basis = ModeBasis::new(&geo, c, Dispersion::Linear, 6)?;
        println!("{trap:?}: recurrence {:.2} ms{}", rec.time, if rec.approximate { " (approximate)" } else { "" });
        println!("  orthonormality error on the grid: {:.1e}", orthonormality_error(basis.matrix(), geo.dz()));
        println!("  k   ω_k [1/ms]   ω_k/ω_1   Bogoliubov/linear");
        for k in 0..6 {
            println!("  {:<3} {:<12.5} {:<9.4} {:.6}", k + 1, linear[k], linear[k] / linear[0], bogo[k] / linear[k]);
        }
    }
    Ok(())
}
