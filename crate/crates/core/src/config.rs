//! Run configuration: one TOML document covering every stage.
//!
//! A run starts from a preset; a user file only needs the keys it changes
//! and is merged over the preset table by table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::embed::EmbedderKind;
use crate::error::{Error, Result};
use crate::koopman::{KoopmanConfig, Stage1Config};
use crate::safety::{SafetyRegion, SculptConfig};
use crate::sim::{IntegratorConfig, LorenzParams, State3};
use crate::tensor::OptimizerKind;
use crate::transfer::{HeadConfig, Stage3Config, Variant};
use crate::transformer::{Stage2Config, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::ConfigInvalid {
                field: "preset".into(),
                reason: format!("unknown preset {s:?}"),
            }),
        }
    }
}

/// Transformer shape and pre-training schedule for one embedder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub transformer: TransformerConfig,
    pub train: Stage2Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Set {
    pub koopman: PretrainConfig,
    pub pi: PretrainConfig,
    pub pca: PretrainConfig,
}

impl Stage2Set {
    pub fn get(&self, kind: EmbedderKind) -> &PretrainConfig {
        match kind {
            EmbedderKind::Koopman => &self.koopman,
            EmbedderKind::Pi => &self.pi,
            EmbedderKind::Pca => &self.pca,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Stage3Set {
    pub koopman_frozen: Stage3Config,
    pub koopman_unfrozen: Stage3Config,
    pub pca_pi: Stage3Config,
    pub pca: Stage3Config,
}

impl Stage3Set {
    pub fn get(&self, v: Variant) -> &Stage3Config {
        match v {
            Variant::KoopmanFrozen => &self.koopman_frozen,
            Variant::KoopmanUnfrozen => &self.koopman_unfrozen,
            Variant::PcaPi => &self.pca_pi,
            Variant::Pca => &self.pca,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    pub region: SafetyRegion,
    pub res: [usize; 3],
    /// Per-axis noise bound; zero gives the deterministic safety function.
    pub noise_bound: State3,
    pub sculpt: SculptConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub alpha: f64,
    pub density_bins: usize,
    pub rollout_steps: usize,
    pub rollout_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub preset: Preset,
    pub seed: u64,
    pub threads: usize,
    pub normalize: bool,
    pub lorenz: LorenzParams,
    pub integrator: IntegratorConfig,
    pub dataset: DatasetSpec,
    pub koopman: KoopmanConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Set,
    pub stage3: Stage3Set,
    pub safety: SafetyConfig,
    pub eval: EvalConfig,
}

fn stage3(lr: f64, epochs: usize, batch: usize, opt: OptimizerKind, wd: f64, frozen: bool, h1: usize, h2: usize) -> Stage3Config {
    Stage3Config {
        weight_decay: wd,
        frozen,
        ..Stage3Config::new(lr, epochs, batch, opt, HeadConfig { h1, h2 })
    }
}

impl RunConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        let tf = |d, l, h, lr, epochs| PretrainConfig {
            transformer: TransformerConfig::new(d, l, h),
            train: Stage2Config::new(lr, epochs, 16),
        };
        Self {
            name: "paper".into(),
            preset: Preset::Paper,
            seed: 0,
            threads: 1,
            normalize: true,
            lorenz: LorenzParams::default(),
            integrator: IntegratorConfig::default(),
            dataset: DatasetSpec::default(),
            koopman: KoopmanConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Set {
                koopman: tf(32, 4, 4, 1e-4, 200),
                pi: tf(9, 11, 9, 2.15e-3, 300),
                pca: tf(3, 3, 3, 1e-3, 5),
            },
            stage3: Stage3Set {
                koopman_frozen: stage3(6.83e-3, 80, 16, OptimizerKind::Adam, 0.0, true, 128, 64),
                koopman_unfrozen: stage3(1.04e-3, 50, 16, OptimizerKind::AdamW, 1e-10, false, 112, 64),
                pca_pi: stage3(7.52e-3, 90, 512, OptimizerKind::AdamW, 1e-10, true, 112, 64),
                pca: stage3(6.89e-3, 90, 512, OptimizerKind::Adam, 0.0, true, 32, 32),
            },
            safety: SafetyConfig {
                region: SafetyRegion::default(),
                res: [30, 30, 30],
                noise_bound: State3::ORIGIN,
                sculpt: SculptConfig::default(),
            },
            eval: EvalConfig {
                alpha: 0.05,
                density_bins: 100,
                rollout_steps: 256,
                rollout_window: 64,
            },
        }
    }

    /// Laptop-scale settings: every code path of the full run with fewer
    /// trajectories, a coarser safety grid and at most a fifth of the
    /// epochs.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.name = "desk".into();
        c.preset = Preset::Desk;
        c.dataset.n_train = 128;
        c.dataset.n_val = 16;
        c.dataset.n_test = 32;
        c.stage1.epochs = 30;
        c.stage1.batch = 32;
        c.stage1.stride = 64;
        c.stage2.koopman.train.epochs = 30;
        c.stage2.pi.train.epochs = 20;
        c.stage2.pca.train.epochs = 1;
        c.stage3.koopman_frozen.epochs = 30;
        c.stage3.koopman_unfrozen.epochs = 10;
        c.stage3.pca_pi.epochs = 18;
        c.stage3.pca.epochs = 18;
        c.safety.res = [12, 12, 12];
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// `preset` with the keys of `overlay` replaced.
    pub fn from_toml_over(preset: Preset, overlay: &str) -> Result<Self> {
        let base = toml::Value::try_from(Self::preset(preset)).map_err(|e| invalid("<preset>", e))?;
        let over: toml::Value = toml::from_str(overlay).map_err(|e| invalid("<file>", e))?;
        let merged = merge(base, over);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| invalid("<file>", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an overlay file. A `preset` key inside the file selects the
    /// base unless one is given explicitly.
    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ConfigInvalid {
                field: "--config".into(),
                reason: format!("{} does not exist", path.display()),
            });
        }
        let text = std::fs::read_to_string(path)?;
        let file_preset = toml::from_str::<toml::Value>(&text)
            .ok()
            .and_then(|v| v.get("preset").and_then(|p| p.as_str()).map(str::to_owned));
        let base = match (preset, file_preset) {
            (Some(p), _) => p,
            (None, Some(s)) => s.parse()?,
            (None, None) => Preset::Desk,
        };
        let mut cfg = Self::from_toml_over(base, &text)?;
        cfg.preset = base;
        Ok(cfg)
    }

    /// Dataset settings seeded from the run seed.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            master_seed: self.seed,
            ..self.dataset.clone()
        }
    }

    /// Seed of a named stage, derived from the run seed.
    pub fn stage_seed(&self, tag: &str) -> u64 {
        crate::rng::derive_seed(self.seed, tag, 0)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.safety.region.validate()?;
        if self.threads == 0 {
            return Err(field("threads", "at least one"));
        }
        if !(self.safety.sculpt.tau > 0.0) {
            return Err(field("safety.sculpt.tau", "must be positive"));
        }
        if self.safety.res.iter().any(|n| *n < 2) {
            return Err(field("safety.res", "at least two nodes per axis"));
        }
        for kind in EmbedderKind::ALL {
            let p = self.stage2.get(kind);
            p.transformer.validate()?;
            let want = match kind {
                EmbedderKind::Koopman => self.koopman.latent,
                EmbedderKind::Pi => crate::pca::PiEmbedder::DIM,
                EmbedderKind::Pca => 3,
            };
            if p.transformer.embed_dim != want {
                return Err(field(
                    &format!("stage2.{}.transformer.embed_dim", kind.as_str()),
                    &format!("must equal the embedding width {want}"),
                ));
            }
            if p.train.window > p.transformer.context_length {
                return Err(field(&format!("stage2.{}.train.window", kind.as_str()), "exceeds context length"));
            }
        }
        for v in Variant::ALL {
            let s = self.stage3.get(v);
            s.validate()?;
            if s.window > self.stage2.get(v.embedder()).transformer.context_length {
                return Err(field(&format!("stage3.{}.window", v.as_str()), "exceeds context length"));
            }
        }
        if self.eval.density_bins == 0 || self.eval.rollout_window == 0 {
            return Err(field("eval", "bins and rollout window must be positive"));
        }
        Ok(())
    }
}

fn field(name: &str, reason: &str) -> Error {
    Error::ConfigInvalid {
        field: name.into(),
        reason: reason.into(),
    }
}

fn invalid(at: &str, e: impl std::fmt::Display) -> Error {
    Error::ConfigInvalid {
        field: at.into(),
        reason: e.to_string(),
    }
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Desk, Preset::Paper] {
            let c = RunConfig::preset(p);
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml_over(p, &c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn paper_values() {
        let c = RunConfig::paper();
        assert_eq!((c.stage1.lr, c.stage1.epochs, c.stage1.batch), (1e-3, 300, 512));
        assert_eq!((c.stage1.lambda0, c.stage1.lambda1, c.stage1.lambda2), (1e4, 1.0, 0.1));
        assert_eq!(c.stage3.koopman_frozen.head, HeadConfig { h1: 128, h2: 64 });
        assert_eq!(c.stage3.pca.head, HeadConfig { h1: 32, h2: 32 });
        assert_eq!(c.stage3.pca_pi.batch, 512);
        assert_eq!(c.safety.res, [30, 30, 30]);
        assert!(!c.stage3.koopman_unfrozen.frozen);
    }

    #[test]
    fn desk_epochs_are_reduced() {
        let (d, p) = (RunConfig::desk(), RunConfig::paper());
        assert!(d.stage1.epochs * 5 <= p.stage1.epochs);
        for k in EmbedderKind::ALL {
            assert!(d.stage2.get(k).train.epochs * 5 <= p.stage2.get(k).train.epochs.max(5));
        }
        for v in Variant::ALL {
            assert!(d.stage3.get(v).epochs * 2 <= p.stage3.get(v).epochs);
        }
    }

    #[test]
    fn overlay_changes_only_named_keys() {
        let c = RunConfig::from_toml_over(Preset::Desk, "seed = 7\n[stage1]\nepochs = 3\n").unwrap();
        assert_eq!((c.seed, c.stage1.epochs), (7, 3));
        assert_eq!(c.stage1.lr, 1e-3);
    }

    #[test]
    fn bad_overlays_are_config_errors() {
        for text in ["[stage1]\nepochz = 3\n", "threads = 0\n", "[stage2.pi.transformer]\nn_heads = 4\n", "x = ["] {
            assert!(matches!(
                RunConfig::from_toml_over(Preset::Desk, text),
                Err(Error::ConfigInvalid { .. })
            ), "{text}");
        }
    }
}
