//! Integrates the Lorenz system with the adaptive Dormand-Prince stepper,
//! checks the equilibria and tolerance self-convergence, and generates a
//! small dataset.
//!
//! cargo run --release --example lorenz_simulation -- [out.csv]

use koopman_lorenz::dataset::{generate_splits, write_csv, DatasetSpec, Normalizer};
use koopman_lorenz::sim::{integrate, lorenz_deriv, IntegratorConfig, LorenzParams, State3};

fn main() -> koopman_lorenz::Result<()> {
    let p = LorenzParams::default();
    let cfg = IntegratorConfig::default();

    let (cp, cm) = p.wing_equilibria();
    for (name, s0) in [("origin", State3::ORIGIN), ("C+", cp), ("C-", cm)] {
        let drift = integrate(s0, 1024, &cfg, &p)?
            .iter()
            .map(|s| (*s - s0).max_abs())
            .fold(0.0, f64::max);
        println!("{name:6} |f| = {:.1e}  drift over 1024 samples {drift:.1e}", lorenz_deriv(s0, &p).norm());
    }

    let start = State3::new(1.0, 1.0, 1.0);
    let coarse = integrate(start, 256, &cfg.with_tolerances(1e-10, 1e-10), &p)?;
    let fine = integrate(start, 256, &cfg.with_tolerances(1e-12, 1e-12), &p)?;
    let gap = coarse.iter().zip(&fine).map(|(a, b)| (*a - *b).max_abs()).fold(0.0, f64::max);
    println!("tolerance 1e-10 vs 1e-12 over 256 samples: max gap {gap:.2e}");

    let spec = DatasetSpec {
        n_train: 16,
        n_val: 4,
        n_test: 4,
        ..DatasetSpec::default()
    };
    let data = generate_splits(&spec, &cfg, &p)?;
    let norm = Normalizer::fit(&data.train)?;
    let states: Vec<State3> = data.train.iter().flat_map(|t| t.states.iter().copied()).collect();
    let max = states.iter().fold([f64::MIN; 3], |m, s| [m[0].max(s.x), m[1].max(s.y), m[2].max(s.z)]);
    let min = states.iter().fold([f64::MAX; 3], |m, s| [m[0].min(s.x), m[1].min(s.y), m[2].min(s.z)]);
    println!(
        "{} train trajectories of {} steps; x in [{:.1}, {:.1}], y in [{:.1}, {:.1}], z in [{:.1}, {:.1}]",
        data.train.len(),
        data.train[0].steps(),
        min[0],
        max[0],
        min[1],
        max[1],
        min[2],
        max[2]
    );
    println!("normalised first state: {:?}", norm.apply(data.train[0].states[0]));
    if let Some(path) = std::env::args().nth(1) {
        write_csv(path.as_ref(), &data.train)?;
        println!("wrote {path}");
    }
    Ok(())
}
