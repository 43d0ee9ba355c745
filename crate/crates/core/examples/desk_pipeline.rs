//! Runs every stage of the desk preset for all four variants and prints the
//! headline numbers.
//!
//! Usage: `cargo run --release --example desk_pipeline -- [seed] [out-dir]`

use std::time::Instant;

use koopman_lorenz::config::RunConfig;
use koopman_lorenz::embed::EmbedderKind;
use koopman_lorenz::pipeline::{self, RunLayout};
use koopman_lorenz::transfer::Variant;

fn main() -> koopman_lorenz::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.get(2).cloned().unwrap_or_else(|| format!("runs/desk-seed{seed}"));
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    let layout = RunLayout::new(&out);
    let all = Variant::ALL;

    let t = Instant::now();
    pipeline::simulate(&cfg, &layout)?;
    println!("simulate        {:6.1}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let s1 = pipeline::train_ae(&cfg, &layout)?;
    println!(
        "train-ae        {:6.1}s  val recon {:.3e}, bandwidth {}, skew {}",
        t.elapsed().as_secs_f64(),
        s1.val_recon,
        s1.bandwidth,
        s1.skew
    );

    let t = Instant::now();
    let roll = pipeline::pretrain(&cfg, &layout, &all)?;
    println!("pretrain        {:6.1}s", t.elapsed().as_secs_f64());
    for (k, w) in &roll {
        println!("  {k:8} validation rollout windows {w:.3?}");
    }

    let t = Instant::now();
    let field = pipeline::compute_safety(&cfg, &layout)?;
    println!(
        "compute-safety  {:6.1}s  {} iterations, converged {}",
        t.elapsed().as_secs_f64(),
        field.deltas.len(),
        field.converged
    );

    let t = Instant::now();
    let ft = pipeline::finetune(&cfg, &layout, &all)?;
    println!("finetune        {:6.1}s", t.elapsed().as_secs_f64());
    for (v, l) in &ft {
        println!("  {:12} best validation MSE {l:.4e}", v.label());
    }

    let t = Instant::now();
    let ev = pipeline::evaluate(&cfg, &layout, &all)?;
    println!("evaluate        {:6.1}s", t.elapsed().as_secs_f64());
    for (v, s) in &ev {
        println!(
            "  {:12} MSE {:.3e} ± {:.3e}  MAE {:.3e}  R² {:.4} ({} trajectories)",
            v.label(),
            s.mse.mean,
            s.mse.std,
            s.mae.mean,
            s.r2.mean,
            s.n_traj
        );
    }
    for k in EmbedderKind::ALL {
        println!("  {:8} test rollout windows {:.3?}", k.label(), pipeline::read_rollout(&layout, k)?);
    }

    let dir = pipeline::report(&cfg, &layout)?;
    println!("report written to {}", dir.display());
    Ok(())
}
