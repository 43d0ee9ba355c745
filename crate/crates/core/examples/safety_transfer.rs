//! Transfers a pre-trained Koopman transformer to safety-value prediction
//! with a frozen and an unfrozen backbone, on a reduced desk configuration.
//!
//! cargo run --release --example safety_transfer -- [out-dir]

use std::time::Instant;

use koopman_lorenz::config::RunConfig;
use koopman_lorenz::embed::EmbedderKind;
use koopman_lorenz::pipeline::{self, RunLayout};
use koopman_lorenz::transfer::Variant;

fn main() -> koopman_lorenz::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/safety-transfer".into());
    let mut cfg = RunConfig::desk();
    cfg.name = "safety-transfer".into();
    cfg.dataset.n_train = 48;
    cfg.dataset.n_val = 8;
    cfg.dataset.n_test = 8;
    cfg.stage1.epochs = 15;
    cfg.stage2.koopman.train.epochs = 10;
    cfg.stage3.koopman_frozen.epochs = 20;
    cfg.stage3.koopman_unfrozen.epochs = 5;
    let layout = RunLayout::new(&out);
    let variants = [Variant::KoopmanFrozen, Variant::KoopmanUnfrozen];

    let t = Instant::now();
    pipeline::simulate(&cfg, &layout)?;
    pipeline::train_ae(&cfg, &layout)?;
    pipeline::pretrain(&cfg, &layout, &variants)?;
    pipeline::compute_safety(&cfg, &layout)?;
    println!("backbone ready in {:.1}s", t.elapsed().as_secs_f64());

    let frozen = std::fs::read(layout.transformer_ckpt(EmbedderKind::Koopman))?;
    let t = Instant::now();
    for (v, loss) in pipeline::finetune(&cfg, &layout, &variants)? {
        println!("{:12} best validation MSE {loss:.3e}", v.label());
    }
    println!("fine-tuned in {:.1}s", t.elapsed().as_secs_f64());
    let unchanged = frozen == std::fs::read(layout.transformer_ckpt(EmbedderKind::Koopman))?;
    println!("pre-trained transformer checkpoint unchanged: {unchanged}");

    for (v, s) in pipeline::evaluate(&cfg, &layout, &variants)? {
        println!(
            "{:12} test MSE {:.3e} +- {:.3e}  R2 {:.3}  over {} trajectories",
            v.label(),
            s.mse.mean,
            s.mse.std,
            s.r2.mean,
            s.n_traj
        );
    }
    Ok(())
}
