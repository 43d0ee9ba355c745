//! Koopman autoencoder with a banded operator.
//!
//! The operator is `K = diag(d) + S` where `S` is skew-symmetric with
//! nonzero entries only on the first `bandwidth` off-diagonals. Latent rows
//! advance as `z_next = z K^T`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{window_all, Normalizer, Trajectory, WindowSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Rng};
use crate::tensor::{
    init_kaiming_uniform, init_uniform, Bound, Checkpoint, Graph, Optimizer, OptimizerConfig,
    ParamId, ParamStore, SparseTerm, Tensor, Var,
};
use crate::train::{decayed_lr, shuffled, window_pairs, EpochLog};

pub const NAMESPACE: &str = "KOOPMAN";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KoopmanConfig {
    pub latent: usize,
    pub hidden: usize,
    pub bandwidth: usize,
}

impl Default for KoopmanConfig {
    fn default() -> Self {
        Self {
            latent: 32,
            hidden: 500,
            bandwidth: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub window: usize,
    pub stride: usize,
    pub val_window: usize,
    pub val_stride: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 300,
            batch: 512,
            lr_decay: 0.95,
            weight_decay: 1e-8,
            lambda0: 1e4,
            lambda1: 1.0,
            lambda2: 0.1,
            window: 64,
            stride: 16,
            val_window: 64,
            val_stride: 32,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    enc_w1: ParamId,
    enc_b1: ParamId,
    enc_w2: ParamId,
    enc_b2: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    dec_w1: ParamId,
    dec_b1: ParamId,
    dec_w2: ParamId,
    dec_b2: ParamId,
    diag: ParamId,
}

/// Encoder, decoder and structured operator sharing one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct KoopmanAutoencoder {
    pub cfg: KoopmanConfig,
    pub store: ParamStore,
    ids: Ids,
    bands: Vec<ParamId>,
}

/// Scalar parts of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub dynamics: f64,
    pub operator: f64,
}

impl KoopmanAutoencoder {
    pub fn new(cfg: KoopmanConfig, rng: &mut Rng) -> Self {
        let (n, h) = (cfg.latent, cfg.hidden);
        let mut s = ParamStore::new();
        let ids = Ids {
            enc_w1: s.add("enc.w1", init_kaiming_uniform(&[3, h], rng)),
            enc_b1: s.add("enc.b1", Tensor::zeros(&[h])),
            enc_w2: s.add("enc.w2", init_kaiming_uniform(&[h, n], rng)),
            enc_b2: s.add("enc.b2", Tensor::zeros(&[n])),
            ln_g: s.add("enc.ln.g", Tensor::full(&[n], 1.0)),
            ln_b: s.add("enc.ln.b", Tensor::zeros(&[n])),
            dec_w1: s.add("dec.w1", init_kaiming_uniform(&[n, h], rng)),
            dec_b1: s.add("dec.b1", Tensor::zeros(&[h])),
            dec_w2: s.add("dec.w2", init_kaiming_uniform(&[h, 3], rng)),
            dec_b2: s.add("dec.b2", Tensor::zeros(&[3])),
            diag: s.add("k.diag", diag_ramp(n)),
        };
        let bands = (1..=cfg.bandwidth.min(n.saturating_sub(1)))
            .map(|k| s.add(format!("k.band{k}"), init_uniform(&[n - k], 0.0, 0.1, rng)))
            .collect();
        Self {
            cfg,
            store: s,
            ids,
            bands,
        }
    }

    pub fn diag(&self) -> &[f64] {
        self.store.get(self.ids.diag).data()
    }

    pub fn band(&self, k: usize) -> &[f64] {
        self.store.get(self.bands[k - 1]).data()
    }

    pub fn set_operator(&mut self, diag: &[f64], bands: &[Vec<f64>]) -> Result<()> {
        let n = self.cfg.latent;
        self.store.set(self.ids.diag, Tensor::new(&[n], diag.to_vec())?)?;
        for (k, b) in bands.iter().enumerate() {
            self.store.set(self.bands[k], Tensor::new(&[n - k - 1], b.clone())?)?;
        }
        Ok(())
    }

    /// The operator as a dense `latent x latent` matrix.
    pub fn materialize(&self) -> Tensor {
        let bands: Vec<&[f64]> = (1..=self.bands.len()).map(|k| self.band(k)).collect();
        materialize(self.diag(), &bands)
    }

    fn operator_terms(&self) -> Vec<SparseTerm> {
        let n = self.cfg.latent;
        let mut terms: Vec<SparseTerm> = (0..n)
            .map(|i| SparseTerm {
                input: 0,
                src: i,
                dst: i * n + i,
                coeff: 1.0,
            })
            .collect();
        for k in 1..=self.bands.len() {
            for i in 0..n - k {
                terms.push(SparseTerm {
                    input: k,
                    src: i,
                    dst: i * n + i + k,
                    coeff: 1.0,
                });
                terms.push(SparseTerm {
                    input: k,
                    src: i,
                    dst: (i + k) * n + i,
                    coeff: -1.0,
                });
            }
        }
        terms
    }

    /// Operator node assembled from the bound diagonal and band leaves.
    pub fn operator_graph(&self, g: &mut Graph, b: &Bound) -> Result<Var> {
        let mut inputs = vec![b[self.ids.diag]];
        inputs.extend(self.bands.iter().map(|id| b[*id]));
        let n = self.cfg.latent;
        g.sparse_assemble(&inputs, self.operator_terms(), &[n, n])
    }

    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let i = &self.ids;
        let h = g.linear(x, b[i.enc_w1], b[i.enc_b1])?;
        let h = g.relu(h);
        let z = g.linear(h, b[i.enc_w2], b[i.enc_b2])?;
        g.layer_norm(z, b[i.ln_g], b[i.ln_b])
    }

    pub fn decode_graph(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
        let i = &self.ids;
        let h = g.linear(z, b[i.dec_w1], b[i.dec_b1])?;
        let h = g.relu(h);
        g.linear(h, b[i.dec_w2], b[i.dec_b2])
    }

    /// Encodes rows of normalised states.
    pub fn encode(&self, states: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let x = g.constant(states.clone());
        let z = self.encode_graph(&mut g, &b, x)?;
        Ok(g.value(z).clone())
    }

    /// Decodes latent rows into normalised states.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let z = g.constant(z.clone());
        let s = self.decode_graph(&mut g, &b, z)?;
        Ok(g.value(s).clone())
    }

    /// One application of the operator to latent rows.
    pub fn advance_latent(&self, z: &Tensor) -> Result<Tensor> {
        z.matmul(&self.materialize().transpose())
    }

    /// Builds the composite loss on `g`. Returns the scalar and its parts.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        s: Var,
        s_next: Var,
        lambdas: [f64; 3],
    ) -> Result<(Var, [Var; 3])> {
        let z = self.encode_graph(g, b, s)?;
        let recon = self.decode_graph(g, b, z)?;
        let k = self.operator_graph(g, b)?;
        let kt = g.transpose(k);
        let z1 = g.matmul(z, kt)?;
        let pred = self.decode_graph(g, b, z1)?;
        let l0 = g.mse_loss(recon, s)?;
        let l1 = g.mse_loss(pred, s_next)?;
        let l2 = g.sum_squares(k);
        let a = g.scale(l0, lambdas[0]);
        let c = g.scale(l1, lambdas[1]);
        let d = g.scale(l2, lambdas[2]);
        let ac = g.add(a, c)?;
        Ok((g.add(ac, d)?, [l0, l1, l2]))
    }

    /// Evaluates the composite loss without recording gradients.
    pub fn loss(&self, s: &Tensor, s_next: &Tensor, lambdas: [f64; 3]) -> Result<LossParts> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let (x, y) = (g.constant(s.clone()), g.constant(s_next.clone()));
        let (total, parts) = self.loss_graph(&mut g, &b, x, y, lambdas)?;
        Ok(LossParts {
            total: g.value(total).item(),
            recon: g.value(parts[0]).item(),
            dynamics: g.value(parts[1]).item(),
            operator: g.value(parts[2]).item(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_store(NAMESPACE, &self.store);
        c
    }

    /// Rebuilds a model of shape `cfg` from `ckpt`.
    pub fn from_checkpoint(cfg: KoopmanConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg, &mut stream_rng(0, 0));
        ckpt.load_store(NAMESPACE, &mut m.store)?;
        Ok(m)
    }
}

/// `d[k] = 1 - k/(n-1)`.
pub fn diag_ramp(n: usize) -> Tensor {
    let denom = (n.max(2) - 1) as f64;
    Tensor::new(&[n], (0..n).map(|k| 1.0 - k as f64 / denom).collect()).expect("sized")
}

/// Dense `diag(d) + S` with `S[i,i+k] = band_k[i] = -S[i+k,i]`.
pub fn materialize(diag: &[f64], bands: &[&[f64]]) -> Tensor {
    let n = diag.len();
    let mut k = Tensor::zeros(&[n, n]);
    let m = k.data_mut();
    for (i, v) in diag.iter().enumerate() {
        m[i * n + i] = *v;
    }
    for (off, band) in bands.iter().enumerate() {
        let off = off + 1;
        for (i, v) in band.iter().enumerate() {
            m[i * n + i + off] = *v;
            m[(i + off) * n + i] = -*v;
        }
    }
    k
}

/// Largest `|i - j|` over nonzero entries.
pub fn bandwidth(k: &Tensor) -> usize {
    let n = k.cols();
    let mut bw = 0;
    for i in 0..k.rows() {
        for j in 0..n {
            if k.get2(i, j) != 0.0 {
                bw = bw.max(i.abs_diff(j));
            }
        }
    }
    bw
}

/// True when `K - diag(K)` is exactly antisymmetric.
pub fn off_diagonal_skew(k: &Tensor) -> bool {
    let n = k.cols();
    (0..n).all(|i| (0..n).all(|j| i == j || k.get2(i, j) == -k.get2(j, i)))
}

pub struct Stage1Result {
    pub model: KoopmanAutoencoder,
    pub curve: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    /// Reconstruction MSE of the returned model on normalised validation states.
    pub val_recon: f64,
}

/// Observer of training progress.
pub trait StepHook {
    /// Called after every optimizer step. Returning false stops training.
    fn after_step(&mut self, model: &KoopmanAutoencoder, step: usize) -> bool;
}

impl StepHook for () {
    fn after_step(&mut self, _: &KoopmanAutoencoder, _: usize) -> bool {
        true
    }
}

/// Trains the autoencoder on normalised windows of `train` and keeps the
/// parameters with the lowest validation loss.
pub fn train_stage1(
    model: KoopmanAutoencoder,
    train: &[Trajectory],
    val: &[Trajectory],
    norm: &Normalizer,
    cfg: &Stage1Config,
    seed: u64,
    hook: &mut dyn StepHook,
) -> Result<Stage1Result> {
    let lambdas = [cfg.lambda0, cfg.lambda1, cfg.lambda2];
    let train_w = window_all(train, WindowSpec::new(cfg.window, cfg.stride))?;
    let val_w = window_all(val, WindowSpec::new(cfg.val_window, cfg.val_stride))?;
    if train_w.is_empty() || val_w.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (vx, vy) = window_pairs(val, &val_w, norm);
    let mut model = model;
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr, cfg.weight_decay), &model.store);
    let mut rng = stream_rng(derive_seed(seed, "stage1/shuffle", 0), 0);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.lr_decay, epoch);
        opt.set_lr(lr);
        let order = shuffled(train_w.len(), &mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut stopped = false;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let ws: Vec<_> = chunk.iter().map(|i| train_w[*i]).collect();
            let (x, y) = window_pairs(train, &ws, norm);
            let mut g = Graph::new();
            let b = model.store.bind(&mut g);
            let (xv, yv) = (g.constant(x), g.constant(y));
            let (loss, _) = model.loss_graph(&mut g, &b, xv, yv, lambdas)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, &b, &grads);
            sum += lv * chunk.len() as f64;
            count += chunk.len();
            step += 1;
            if !hook.after_step(&model, step) {
                stopped = true;
                break;
            }
        }
        let val_loss = model.loss(&vx, &vy, lambdas)?.total;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        curve.push(EpochLog {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss,
            lr,
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, model.store.clone()));
        }
        if stopped {
            break 'epochs;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, store)) = best {
        model.store = store;
    }
    let val_recon = model.loss(&vx, &vy, lambdas)?.recon;
    Ok(Stage1Result {
        model,
        curve,
        best_epoch,
        val_recon,
    })
}

/// Writes the dense operator, one comma-separated row per line.
pub fn dump_operator(path: &Path, model: &KoopmanAutoencoder) -> Result<()> {
    let k = model.materialize();
    let mut out = String::new();
    for i in 0..k.rows() {
        let row: Vec<String> = k.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn materialize_trivial_cases() {
        let z = materialize(&[0.0; 4], &[&[0.0; 3], &[0.0; 2]]);
        assert!(z.data().iter().all(|v| *v == 0.0));
        let id = materialize(&[1.0; 4], &[&[0.0; 3], &[0.0; 2]]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(id.get2(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn init_ramp_and_bands() {
        let m = KoopmanAutoencoder::new(KoopmanConfig::default(), &mut stream_rng(1, 0));
        let d = m.diag();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[31], 0.0);
        assert!((d[15] - (1.0 - 15.0 / 31.0)).abs() < 1e-15);
        assert!((d[15] - 0.516129).abs() < 1e-6);
        for k in 1..=2 {
            assert_eq!(m.band(k).len(), 32 - k);
            assert!(m.band(k).iter().all(|v| (0.0..0.1).contains(v)));
        }
        let k = m.materialize();
        assert_eq!(bandwidth(&k), 2);
        assert!(off_diagonal_skew(&k));
    }

    #[test]
    fn graph_operator_equals_dense() {
        let m = KoopmanAutoencoder::new(KoopmanConfig::default(), &mut stream_rng(2, 0));
        let mut g = Graph::new();
        let b = m.store.bind(&mut g);
        let k = m.operator_graph(&mut g, &b).unwrap();
        assert_eq!(g.value(k), &m.materialize());
    }

    fn identity_1d() -> KoopmanAutoencoder {
        // hidden width 2 realises the identity through relu(x) - relu(-x)
        let cfg = KoopmanConfig {
            latent: 1,
            hidden: 2,
            bandwidth: 0,
        };
        let mut m = KoopmanAutoencoder::new(cfg, &mut stream_rng(0, 0));
        let set = |m: &mut KoopmanAutoencoder, name: &str, shape: &[usize], v: Vec<f64>| {
            let id = m.store.find(name).unwrap();
            m.store.set(id, Tensor::new(shape, v).unwrap()).unwrap();
        };
        set(&mut m, "k.diag", &[1], vec![1.0]);
        set(&mut m, "dec.w1", &[1, 2], vec![1.0, -1.0]);
        set(&mut m, "dec.w2", &[2, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        m
    }

    #[test]
    fn constant_zero_trajectory_has_zero_loss() {
        let m = identity_1d();
        let s = Tensor::zeros(&[4, 3]);
        let l = m.loss(&s, &s, [1e4, 1.0, 0.0]).unwrap();
        // layer norm of a single latent is beta = 0, decoded to 0
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn loss_is_linear_in_lambdas() {
        let m = KoopmanAutoencoder::new(
            KoopmanConfig {
                latent: 4,
                hidden: 8,
                bandwidth: 2,
            },
            &mut stream_rng(5, 0),
        );
        let s = Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.1]).unwrap();
        let t = Tensor::new(&[2, 3], vec![0.2, -0.1, 0.2, 0.6, 0.3, 0.0]).unwrap();
        let a = m.loss(&s, &t, [0.0, 1.0, 0.0]).unwrap().total;
        let b = m.loss(&s, &t, [0.0, 2.0, 0.0]).unwrap().total;
        assert!((b - 2.0 * a).abs() < 1e-15 * b.abs().max(1.0));
    }

    #[test]
    fn frobenius_term_counts_bands_twice() {
        let mut m = KoopmanAutoencoder::new(
            KoopmanConfig {
                latent: 3,
                hidden: 4,
                bandwidth: 2,
            },
            &mut stream_rng(5, 0),
        );
        m.set_operator(&[1.0, 2.0, 3.0], &[vec![0.5, 0.25], vec![0.1]]).unwrap();
        let s = Tensor::zeros(&[1, 3]);
        let l = m.loss(&s, &s, [0.0, 0.0, 1.0]).unwrap();
        let expect = 1.0 + 4.0 + 9.0 + 2.0 * (0.25 + 0.0625 + 0.01);
        assert!((l.total - expect).abs() < 1e-14);
    }
}
