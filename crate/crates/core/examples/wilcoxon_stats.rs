//! Per-trajectory metrics, the Bonferroni-corrected pairwise Wilcoxon table
//! and an error density map on synthetic predictions.
//!
//! cargo run --release --example wilcoxon_stats

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use koopman_lorenz::rng::stream_rng;
use koopman_lorenz::sim::{LorenzParams, State3};
use koopman_lorenz::stats::{error_density, pairwise_table, per_trajectory, summarize, ErrorPoint, QUADRANT_NAMES};

fn main() -> koopman_lorenz::Result<()> {
    let mut rng = stream_rng(11, 0);
    let noise_levels = [("sharp", 0.05), ("medium", 0.1), ("blurry", 0.4)];
    let mut models = Vec::new();
    let mut points = Vec::new();
    for (name, sigma) in noise_levels {
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut samples = Vec::new();
        for traj in 0..30 {
            for k in 0..40 {
                let truth = (k as f64 * 0.2 + traj as f64).sin() + 2.0;
                let pred = truth + noise.sample(&mut rng);
                samples.push((traj, truth, pred));
                if name == "medium" {
                    let s = State3::new(rng.random_range(0.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(5.0..45.0));
                    points.push(ErrorPoint { state: s, truth, prediction: pred });
                }
            }
        }
        let m = per_trajectory(&samples);
        let s = summarize(&m)?;
        println!("{name:7} MSE {:.4} +- {:.4}  R2 {:.3}", s.mse.mean, s.mse.std, s.r2.mean);
        models.push((name.to_string(), m));
    }

    println!();
    for row in pairwise_table(&models, 0.05)? {
        println!(
            "{:7} vs {:7} {:?}: W {:6.1}  p {:.2e}  alpha {:.4}  winner {}",
            row.model_a,
            row.model_b,
            row.metric,
            row.statistic,
            row.p_value,
            row.alpha,
            row.winner.as_deref().unwrap_or("-")
        );
    }

    let map = error_density(&points, 20, 20, &LorenzParams::default())?;
    println!();
    println!("density map conserved exactly: {}", map.is_conserved());
    for (name, q) in QUADRANT_NAMES.iter().zip(&map.quadrants) {
        println!("{name:12} {:4} points  mean error {:?}", q.count, q.mean_error);
    }
    Ok(())
}
