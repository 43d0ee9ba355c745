//! Trains a small Koopman autoencoder on a handful of Lorenz trajectories
//! and reports reconstruction error and the operator structure.
//!
//! cargo run --release --example koopman_autoencoder

use std::time::Instant;

use koopman_lorenz::dataset::{generate_splits, DatasetSpec, Normalizer};
use koopman_lorenz::koopman::{
    bandwidth, off_diagonal_skew, train_stage1, KoopmanAutoencoder, KoopmanConfig, Stage1Config,
};
use koopman_lorenz::rng::stream_rng;
use koopman_lorenz::sim::{IntegratorConfig, LorenzParams};

fn main() -> koopman_lorenz::Result<()> {
    let spec = DatasetSpec {
        n_train: 128,
        n_val: 16,
        n_test: 4,
        ..DatasetSpec::default()
    };
    let t0 = Instant::now();
    let data = generate_splits(&spec, &IntegratorConfig::default(), &LorenzParams::default())?;
    println!("simulated in {:.1}s", t0.elapsed().as_secs_f64());
    let norm = Normalizer::fit(&data.train)?;
    let cfg = Stage1Config {
        epochs: std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10),
        batch: 32,
        stride: 64,
        ..Stage1Config::default()
    };
    let model = KoopmanAutoencoder::new(KoopmanConfig::default(), &mut stream_rng(1, 0));
    let t0 = Instant::now();
    let out = train_stage1(model, &data.train, &data.val, &norm, &cfg, 1, &mut ())?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    for e in &out.curve {
        println!("epoch {:3}  train {:10.4}  val {:10.4}  lr {:.2e}", e.epoch, e.train_loss, e.val_loss, e.lr);
    }
    println!("validation reconstruction MSE (normalised): {:.3e}", out.val_recon);
    let k = out.model.materialize();
    println!("operator bandwidth {} skew {}", bandwidth(&k), off_diagonal_skew(&k));
    Ok(())
}
