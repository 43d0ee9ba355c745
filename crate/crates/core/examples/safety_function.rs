//! Computes the grid safety function over the default region and labels one
//! trajectory with it.
//!
//! Usage: `cargo run --release --example safety_function -- [res] [noise]`

use koopman_lorenz::safety::{compute_safety, Interpolation, NoiseModel, SafetyGrid, SafetyRegion, SculptConfig};
use koopman_lorenz::sim::{integrate, IntegratorConfig, LorenzParams, State3};

fn main() -> koopman_lorenz::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let res: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let xi: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let integ = IntegratorConfig::default();
    let p = LorenzParams::default();
    let grid = SafetyGrid::new(SafetyRegion::default(), [res; 3])?;
    let noise = NoiseModel::axis_extremes(State3::new(xi, xi, xi));
    let t0 = std::time::Instant::now();
    let field = compute_safety(&grid, &noise, &SculptConfig::default(), &integ, &p, 1)?;
    println!(
        "{} nodes, {} noise samples, {} iterations, converged {}, {:.2}s",
        grid.len(),
        noise.samples.len(),
        field.deltas.len(),
        field.converged,
        t0.elapsed().as_secs_f64()
    );
    let (lo, hi) = field.u.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    println!("U ranges over [{lo:.4}, {hi:.4}]");

    let traj = integrate(State3::new(5.0, 5.0, 20.0), 200, &integ, &p)?;
    let labels = field.label(&traj, Interpolation::Trilinear);
    let inside = labels.iter().flatten().count();
    println!("trajectory: {inside}/{} states inside the region", traj.len());
    for (k, (s, u)) in traj.iter().zip(&labels).step_by(40).enumerate() {
        match u {
            Some(u) => println!("  t={:5.2} ({:7.2},{:7.2},{:7.2}) U = {u:.4}", k as f64 * 0.4, s.x, s.y, s.z),
            None => println!("  t={:5.2} outside", k as f64 * 0.4),
        }
    }
    Ok(())
}
