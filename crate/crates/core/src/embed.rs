//! The three state embedders behind one interface.

use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::error::{Error, Result};
use crate::koopman::{KoopmanAutoencoder, KoopmanConfig};
use crate::pca::{PcaModel, PiEmbedder};
use crate::sim::{LorenzParams, State3};
use crate::tensor::{Checkpoint, Tensor};
use crate::train::states_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Koopman,
    Pi,
    Pca,
}

impl EmbedderKind {
    pub const ALL: [EmbedderKind; 3] = [EmbedderKind::Koopman, EmbedderKind::Pi, EmbedderKind::Pca];

    pub fn as_str(&self) -> &'static str {
        match self {
            EmbedderKind::Koopman => "koopman",
            EmbedderKind::Pi => "pi",
            EmbedderKind::Pca => "pca",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EmbedderKind::Koopman => "Koopman",
            EmbedderKind::Pi => "PCA(PI)",
            EmbedderKind::Pca => "PCA",
        }
    }
}

#[derive(Debug, Clone)]
pub enum EmbedderModel {
    Koopman(Box<KoopmanAutoencoder>),
    Pi(PiEmbedder),
    Pca(PcaModel),
}

/// A fitted embedder together with the state normaliser it expects.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub norm: Normalizer,
    pub model: EmbedderModel,
}

const ROWS_PER_CHUNK: usize = 4096;

impl Embedder {
    pub fn kind(&self) -> EmbedderKind {
        match self.model {
            EmbedderModel::Koopman(_) => EmbedderKind::Koopman,
            EmbedderModel::Pi(_) => EmbedderKind::Pi,
            EmbedderModel::Pca(_) => EmbedderKind::Pca,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            EmbedderModel::Koopman(m) => m.cfg.latent,
            EmbedderModel::Pi(_) => PiEmbedder::DIM,
            EmbedderModel::Pca(p) => p.k(),
        }
    }

    /// Embeds raw states as rows of an `n x dim` tensor.
    pub fn embed(&self, states: &[State3]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(states.len() * d);
        match &self.model {
            EmbedderModel::Koopman(m) => {
                for chunk in states.chunks(ROWS_PER_CHUNK) {
                    let xs: Vec<State3> = chunk.iter().map(|s| self.norm.apply(*s)).collect();
                    data.extend_from_slice(m.encode(&states_tensor(&xs))?.data());
                }
            }
            EmbedderModel::Pi(p) => {
                for s in states {
                    data.extend(p.embed(*s, &self.norm));
                }
            }
            EmbedderModel::Pca(p) => {
                for s in states {
                    data.extend(p.transform(&self.norm.apply(*s).to_array()));
                }
            }
        }
        Tensor::new(&[states.len(), d], data)
    }

    /// Maps embedding rows back to raw states.
    pub fn decode(&self, e: &Tensor) -> Result<Vec<State3>> {
        if e.cols() != self.dim() {
            return Err(Error::shape("Embedder::decode", e.shape(), &[e.rows(), self.dim()]));
        }
        let rows = e.rows();
        Ok(match &self.model {
            EmbedderModel::Koopman(m) => {
                let s = m.decode(e)?;
                (0..rows)
                    .map(|i| {
                        let r = s.row(i);
                        self.norm.invert(State3::new(r[0], r[1], r[2]))
                    })
                    .collect()
            }
            EmbedderModel::Pi(p) => (0..rows).map(|i| p.decode(e.row(i), &self.norm)).collect(),
            EmbedderModel::Pca(p) => (0..rows)
                .map(|i| {
                    let x = p.inverse_transform(e.row(i));
                    self.norm.invert(State3::new(x[0], x[1], x[2]))
                })
                .collect(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = match &self.model {
            EmbedderModel::Koopman(m) => m.to_checkpoint(),
            EmbedderModel::Pi(p) => {
                let mut c = Checkpoint::new();
                p.pca1.write_to(&mut c, "PCA1");
                p.pca2.write_to(&mut c, "PCA2");
                c
            }
            EmbedderModel::Pca(p) => {
                let mut c = Checkpoint::new();
                p.write_to(&mut c, "PCA1");
                c
            }
        };
        let n = &self.norm;
        c.insert("NORMALIZER/mean", Tensor::new(&[3], n.mean.to_array().to_vec()).expect("sized"));
        c.insert("NORMALIZER/std", Tensor::new(&[3], n.std.to_array().to_vec()).expect("sized"));
        c.insert("NORMALIZER/enabled", Tensor::scalar(if n.enabled { 1.0 } else { 0.0 }));
        c
    }

    pub fn from_checkpoint(
        kind: EmbedderKind,
        ckpt: &Checkpoint,
        koopman: KoopmanConfig,
        params: LorenzParams,
    ) -> Result<Self> {
        let get = |k: &str| {
            ckpt.get(k)
                .ok_or_else(|| Error::format("<checkpoint>", format!("missing tensor {k}")))
        };
        let m = get("NORMALIZER/mean")?.data();
        let s = get("NORMALIZER/std")?.data();
        let norm = Normalizer {
            mean: State3::new(m[0], m[1], m[2]),
            std: State3::new(s[0], s[1], s[2]),
            enabled: get("NORMALIZER/enabled")?.item() != 0.0,
        };
        let model = match kind {
            EmbedderKind::Koopman => {
                EmbedderModel::Koopman(Box::new(KoopmanAutoencoder::from_checkpoint(koopman, ckpt)?))
            }
            EmbedderKind::Pi => EmbedderModel::Pi(PiEmbedder {
                pca1: PcaModel::read_from(ckpt, "PCA1")?,
                pca2: PcaModel::read_from(ckpt, "PCA2")?,
                params,
            }),
            EmbedderKind::Pca => EmbedderModel::Pca(PcaModel::read_from(ckpt, "PCA1")?),
        };
        Ok(Self { norm, model })
    }
}

/// Fits the standard 3-component PCA embedder on normalised states.
pub fn fit_pca_embedder(states: &[State3], norm: Normalizer) -> Result<Embedder> {
    let xs: Vec<Vec<f64>> = states.iter().map(|s| norm.apply(*s).to_array().to_vec()).collect();
    Ok(Embedder {
        norm,
        model: EmbedderModel::Pca(PcaModel::fit(&xs, 3)?),
    })
}

/// Fits the 9-dimensional physics-informed embedder.
pub fn fit_pi_embedder(states: &[State3], norm: Normalizer, params: LorenzParams) -> Result<Embedder> {
    Ok(Embedder {
        norm,
        model: EmbedderModel::Pi(PiEmbedder::fit(states, &norm, params)?),
    })
}
