//! Pre-trains a small decoder-only transformer on PCA embeddings with
//! teacher forcing and measures a 256-step autoregressive rollout in four
//! 64-step windows.
//!
//! cargo run --release --example transformer_rollout -- [epochs]

use std::time::Instant;

use koopman_lorenz::dataset::{generate_splits, DatasetSpec, Normalizer};
use koopman_lorenz::embed::fit_pca_embedder;
use koopman_lorenz::rng::stream_rng;
use koopman_lorenz::sim::{IntegratorConfig, LorenzParams, State3};
use koopman_lorenz::transformer::{embed_trajectories, mean_window_mse, pretrain, rollout, Stage2Config, Transformer, TransformerConfig};

fn main() -> koopman_lorenz::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let spec = DatasetSpec {
        n_train: 64,
        n_val: 8,
        n_test: 8,
        ..DatasetSpec::default()
    };
    let data = generate_splits(&spec, &IntegratorConfig::default(), &LorenzParams::default())?;
    let norm = Normalizer::fit(&data.train)?;
    let states: Vec<State3> = data.train.iter().flat_map(|t| t.states.iter().copied()).collect();
    let emb = fit_pca_embedder(&states, norm)?;

    let train = embed_trajectories(&emb, &data.train)?;
    let val = embed_trajectories(&emb, &data.val)?;
    let model = Transformer::new(TransformerConfig::new(3, 3, 3), &mut stream_rng(3, 0))?;
    println!("{} parameters", model.store.num_scalars());
    let cfg = Stage2Config::new(1e-3, epochs, 16);
    let t0 = Instant::now();
    let out = pretrain(model, &emb, &train, &val, &data.val, &cfg, 3)?;
    for e in &out.curve {
        println!("epoch {:3}  train {:.4e}  val {:.4e}", e.epoch, e.train_loss, e.val_loss);
    }
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let starts: Vec<State3> = data.test.iter().map(|t| t.states[0]).collect();
    let preds = rollout(&out.model, &emb, &starts, 256)?;
    let truths: Vec<&[State3]> = data.test.iter().map(|t| &t.states[1..]).collect();
    let w = mean_window_mse(&preds, &truths, 64);
    println!("test rollout window MSE (raw units): {w:.2?}");
    Ok(())
}
