//! A localised density bump splits into two phase fronts moving at ±c.

use gaussify::dynamics::{dalembert_evolve, Extension};

fn main() -> gaussify::Result<()> {
    let (n, dz, c, k) = (201, 1.0, 1.5, 30.0);
    let mut density = vec![0.0; n];
    for (i, d) in density.iter_mut().enumerate() {
        let x = (i as f64 - 100.0) / 2.0;
        *d = (-x * x).exp();
    }
    let phase = vec![0.0; n];
    println!("t [ms]  left front  right front  expected ±ct");
    for t in [10.0, 20.0, 40.0] {
        let f = dalembert_evolve(&phase, &density, dz, c, k, t, Extension::Periodic)?;
        let peak = f.density.iter().cloned().fold(0.0, f64::max);
        let above: Vec<usize> = (0..n).filter(|&i| f.density[i] > 0.5 * peak).collect();
        let left = (above.iter().filter(|&&i| i < 100).sum::<usize>() as f64) / (above.iter().filter(|&&i| i < 100).count() as f64);
        let right = (above.iter().filter(|&&i| i > 100).sum::<usize>() as f64) / (above.iter().filter(|&&i| i > 100).count() as f64);
        println!("{t:<7} {:<11.1} {:<12.1} {:.1}", (left - 100.0) * dz, (right - 100.0) * dz, c * t);
    }
    Ok(())
}
