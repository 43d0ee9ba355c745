//! Command line front end for the staged pipeline.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use koopman_lorenz::config::{Preset, RunConfig};
use koopman_lorenz::pipeline::{self, RunLayout};
use koopman_lorenz::transfer::Variant;
use koopman_lorenz::Error;

#[derive(Parser)]
#[command(name = "ktl", version, about = "Koopman transfer on the Lorenz system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the train, validation and test trajectories.
    Simulate(Common),
    /// Train the Koopman autoencoder and fit the PCA embedders.
    TrainAe(Common),
    /// Pre-train the transformers on next-state prediction.
    Pretrain(Common),
    /// Sculpt the grid safety function.
    ComputeSafety(Common),
    /// Fit safety heads on the pretrained transformers.
    Finetune(Common),
    /// Predict on the test split and run the rollout protocol.
    Evaluate(Common),
    /// Assemble the summary, pairwise, rollout and density tables.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file overriding preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Restrict to one variant; all four by default.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Run directory; defaults to runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn env_override<T: std::str::FromStr>(name: &str) -> Result<Option<T>, Error> {
    match std::env::var(name) {
        Ok(v) => v.parse().map(Some).map_err(|_| Error::ConfigInvalid {
            field: name.into(),
            reason: format!("cannot parse {v:?}"),
        }),
        Err(_) => Ok(None),
    }
}

/// Preset, then file, then environment, then flags.
fn resolve(c: &Common) -> Result<(RunConfig, RunLayout, Vec<Variant>), Error> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path, c.preset)?,
        None => RunConfig::preset(c.preset.unwrap_or(Preset::Desk)),
    };
    let mut out = env_override::<PathBuf>("KTL_OUT")?;
    if let Some(t) = env_override::<usize>("KTL_THREADS")? {
        cfg.threads = t;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if c.out.is_some() {
        out = c.out.clone();
    }
    cfg.validate()?;
    let root = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let variants = match c.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    Ok((cfg, RunLayout::new(root), variants))
}

fn run(command: Command) -> Result<(), Error> {
    let (name, common) = match &command {
        Command::Simulate(c) => ("simulate", c),
        Command::TrainAe(c) => ("train-ae", c),
        Command::Pretrain(c) => ("pretrain", c),
        Command::ComputeSafety(c) => ("compute-safety", c),
        Command::Finetune(c) => ("finetune", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Report(c) => ("report", c),
    };
    let (cfg, layout, variants) = resolve(common)?;
    let t0 = Instant::now();
    match command {
        Command::Simulate(_) => {
            let d = pipeline::simulate(&cfg, &layout)?;
            println!("{} / {} / {} trajectories", d.train.len(), d.val.len(), d.test.len());
        }
        Command::TrainAe(_) => {
            let s = pipeline::train_ae(&cfg, &layout)?;
            println!(
                "validation reconstruction MSE {:.4e}, operator bandwidth {}, skew-symmetric {}",
                s.val_recon, s.bandwidth, s.skew
            );
        }
        Command::Pretrain(_) => {
            for (k, w) in pipeline::pretrain(&cfg, &layout, &variants)? {
                println!("{k}: validation rollout window MSE {w:.4?}");
            }
        }
        Command::ComputeSafety(_) => {
            let f = pipeline::compute_safety(&cfg, &layout)?;
            println!("{} nodes, {} iterations, converged {}", f.u.len(), f.deltas.len(), f.converged);
        }
        Command::Finetune(_) => {
            for (v, l) in pipeline::finetune(&cfg, &layout, &variants)? {
                println!("{}: best validation MSE {l:.4e}", v.label());
            }
        }
        Command::Evaluate(_) => {
            for (v, s) in pipeline::evaluate(&cfg, &layout, &variants)? {
                println!(
                    "{}: MSE {:.4e}  MAE {:.4e}  R2 {:.4}  ({} trajectories)",
                    v.label(),
                    s.mse.mean,
                    s.mae.mean,
                    s.r2.mean,
                    s.n_traj
                );
            }
        }
        Command::Report(_) => {
            let dir = pipeline::report(&cfg, &layout)?;
            println!("{}", dir.display());
        }
    }
    eprintln!("{name} finished in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
