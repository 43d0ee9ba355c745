//! Fits the plain PCA and physics-informed PCA embedders on simulated
//! states and reports their spectra and reconstruction error.
//!
//! cargo run --release --example pca_embeddings

use koopman_lorenz::dataset::{generate_splits, DatasetSpec, Normalizer};
use koopman_lorenz::embed::{fit_pca_embedder, fit_pi_embedder};
use koopman_lorenz::sim::{IntegratorConfig, LorenzParams, State3};

fn main() -> koopman_lorenz::Result<()> {
    let p = LorenzParams::default();
    let spec = DatasetSpec {
        n_train: 32,
        n_val: 4,
        n_test: 8,
        ..DatasetSpec::default()
    };
    let data = generate_splits(&spec, &IntegratorConfig::default(), &p)?;
    let norm = Normalizer::fit(&data.train)?;
    let train: Vec<State3> = data.train.iter().flat_map(|t| t.states.iter().copied()).collect();
    let test: Vec<State3> = data.test.iter().flat_map(|t| t.states.iter().copied()).collect();

    for emb in [fit_pca_embedder(&train, norm)?, fit_pi_embedder(&train, norm, p)?] {
        let e = emb.embed(&test)?;
        let back = emb.decode(&e)?;
        let mse = test
            .iter()
            .zip(&back)
            .map(|(a, b)| {
                let d = *a - *b;
                (d.x * d.x + d.y * d.y + d.z * d.z) / 3.0
            })
            .sum::<f64>()
            / test.len() as f64;
        let cols = e.cols();
        let var: Vec<f64> = (0..cols)
            .map(|c| e.data().iter().skip(c).step_by(cols).map(|v| v * v).sum::<f64>() / e.rows() as f64)
            .collect();
        println!("{:8} dim {cols}  round-trip MSE {mse:.2e}", emb.kind().label());
        println!("         per-component second moment {var:.3?}");
    }
    Ok(())
}
