//! Exact mirror recurrence in a box and its approximate analogue in a
//! parabolic trap, seen through the referenced phase covariance.

use gaussify::dynamics::{phase_covariance, QuadratureCovariance};
use gaussify::model::{recurrence_time, Dispersion, Geometry, ModeBasis, PhysParams, Trap};

fn mirror_error(trap: Trap) -> gaussify::Result<(f64, Vec<(f64, f64)>)> {
    let geo = Geometry::new(trap, 100.0, 101)?;
    let params = PhysParams::new(1.5, 30.0, 60.0)?.with_beta(0.3)?;
    let basis = ModeBasis::new(&geo, params.c, Dispersion::Linear, 20)?;
    let omega = basis.frequencies();
    let scale: Vec<f64> = omega.iter().map(|w| 1.0 / (params.beta * w)).collect();
    let gamma = QuadratureCovariance::squeezed(omega, &scale, 4.0)?;
    let c0 = phase_covariance(&basis, &params, &gamma);
    let n = geo.n_pixels();
    let mirrored = ndarray::Array2::from_shape_fn((n, n), |(i, j)| c0[[n - 1 - i, n - 1 - j]]);
    let norm = mirrored.iter().map(|v| v * v).sum::<f64>().sqrt();
    let trec = recurrence_time(&geo, params.c)?.time;
    let curve = [0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|f| {
            let ct = phase_covariance(&basis, &params, &gamma.rotated(f * trec));
            let err = (&ct - &mirrored).iter().map(|v| v * v).sum::<f64>().sqrt() / norm;
            (f * trec, err)
        })
        .collect();
    Ok((trec, curve))
}

fn main() -> gaussify::Result<()> {
    for trap in [Trap::BoxNeumann, Trap::Parabolic] {
        let (trec, curve) = mirror_error(trap)?;
        println!("{trap:?}, T_rec = {trec:.2} ms");
        for (t, e) in curve {
            println!("  t = {t:>7.2} ms   ‖C(t) − mirror(C(0))‖ / ‖C(0)‖ = {e:.2e}");
        }
    }
    Ok(())
}
