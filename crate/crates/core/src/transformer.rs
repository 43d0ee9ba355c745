//! Pre-LayerNorm decoder-only transformer over embedding sequences.
//!
//! Each block computes `h = x + Attn(LN1(x))` then
//! `x' = h + Dropout(W2 GELU(W1 LN2(h)))`. A final LayerNorm yields the
//! hidden state, and a square projection maps it back to embedding space.

use serde::{Deserialize, Serialize};

use crate::dataset::{Trajectory, WindowSpec};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Rng};
use crate::sim::State3;
use crate::tensor::{
    init_normal, Bound, Checkpoint, Graph, Optimizer, OptimizerConfig, ParamId, ParamStore, Tensor,
    Var,
};
use crate::train::{shuffled, EpochLog};

pub const NAMESPACE: &str = "TRANSFORMER";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub context_length: usize,
    pub init_std: f64,
}

impl TransformerConfig {
    pub fn new(embed_dim: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            embed_dim,
            n_layers,
            n_heads,
            dropout: 0.1,
            context_length: 64,
            init_std: 0.05,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// `L (12 d^2 + 13 d) + d^2 + 3 d`.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        self.n_layers * (12 * d * d + 13 * d) + d * d + 3 * d
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::ConfigInvalid {
                field: "transformer.n_heads".into(),
                reason: format!("{} heads do not divide embed_dim {}", self.n_heads, self.embed_dim),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::ConfigInvalid {
                field: "transformer.dropout".into(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub store: ParamStore,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    pe: Tensor,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// After the final LayerNorm.
    pub hidden: Var,
    /// After the output projection.
    pub output: Var,
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_table(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    let data = t.data_mut();
    for pos in 0..len {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

impl Transformer {
    pub fn new(cfg: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.embed_dim, cfg.ffn_dim());
        let mut s = ParamStore::new();
        let mut w = |s: &mut ParamStore, name: String, shape: &[usize]| {
            s.add(name, init_normal(shape, cfg.init_std, rng))
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            blocks.push(Block {
                ln1_g: s.add(p("ln1.g"), Tensor::full(&[d], 1.0)),
                ln1_b: s.add(p("ln1.b"), Tensor::zeros(&[d])),
                wq: w(&mut s, p("attn.wq"), &[d, d]),
                bq: s.add(p("attn.bq"), Tensor::zeros(&[d])),
                wk: w(&mut s, p("attn.wk"), &[d, d]),
                bk: s.add(p("attn.bk"), Tensor::zeros(&[d])),
                wv: w(&mut s, p("attn.wv"), &[d, d]),
                bv: s.add(p("attn.bv"), Tensor::zeros(&[d])),
                wo: w(&mut s, p("attn.wo"), &[d, d]),
                bo: s.add(p("attn.bo"), Tensor::zeros(&[d])),
                ln2_g: s.add(p("ln2.g"), Tensor::full(&[d], 1.0)),
                ln2_b: s.add(p("ln2.b"), Tensor::zeros(&[d])),
                w1: w(&mut s, p("ffn.w1"), &[d, f]),
                b1: s.add(p("ffn.b1"), Tensor::zeros(&[f])),
                w2: w(&mut s, p("ffn.w2"), &[f, d]),
                b2: s.add(p("ffn.b2"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = s.add("lnf.g", Tensor::full(&[d], 1.0));
        let lnf_b = s.add("lnf.b", Tensor::zeros(&[d]));
        let w_out = w(&mut s, "out.w".into(), &[d, d]);
        let b_out = s.add("out.b", Tensor::zeros(&[d]));
        Ok(Self {
            cfg,
            store: s,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            pe: positional_table(cfg.context_length, d),
        })
    }

    /// Runs `batch` sequences of length `seq` stacked as rows of `x`.
    /// Dropout is active only when `g` is a training graph.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Forward> {
        if seq > self.cfg.context_length {
            return Err(Error::ContextOverflow {
                len: seq,
                max: self.cfg.context_length,
            });
        }
        let d = self.cfg.embed_dim;
        if g.shape(x) != [batch * seq, d] {
            return Err(Error::shape("transformer", g.shape(x), &[batch * seq, d]));
        }
        let mut pe = Vec::with_capacity(batch * seq * d);
        for _ in 0..batch {
            pe.extend_from_slice(&self.pe.data()[..seq * d]);
        }
        let pe = g.constant(Tensor::new(&[batch * seq, d], pe)?);
        let mut h = g.add(x, pe)?;
        for blk in &self.blocks {
            let a = g.layer_norm(h, b[blk.ln1_g], b[blk.ln1_b])?;
            let q = g.linear(a, b[blk.wq], b[blk.bq])?;
            let k = g.linear(a, b[blk.wk], b[blk.bk])?;
            let v = g.linear(a, b[blk.wv], b[blk.bv])?;
            let att = g.causal_attention(q, k, v, batch, seq, self.cfg.n_heads)?;
            let att = g.linear(att, b[blk.wo], b[blk.bo])?;
            h = g.add(h, att)?;
            let f = g.layer_norm(h, b[blk.ln2_g], b[blk.ln2_b])?;
            let f = g.linear(f, b[blk.w1], b[blk.b1])?;
            let f = g.gelu(f);
            let f = g.linear(f, b[blk.w2], b[blk.b2])?;
            let f = g.dropout(f, self.cfg.dropout);
            h = g.add(h, f)?;
        }
        let hidden = g.layer_norm(h, b[self.lnf_g], b[self.lnf_b])?;
        let output = g.linear(hidden, b[self.w_out], b[self.b_out])?;
        Ok(Forward { hidden, output })
    }

    /// Evaluation-mode forward. Returns `(hidden, output)`.
    pub fn forward(&self, x: &Tensor, batch: usize, seq: usize) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let xv = g.constant(x.clone());
        let f = self.forward_graph(&mut g, &b, xv, batch, seq)?;
        Ok((g.value(f.hidden).clone(), g.value(f.output).clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_store(NAMESPACE, &self.store);
        c
    }

    pub fn from_checkpoint(cfg: TransformerConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(cfg, &mut stream_rng(0, 0))?;
        ckpt.load_store(NAMESPACE, &mut m.store)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    pub weight_decay: f64,
    pub window: usize,
    pub stride: usize,
    /// Length of the autoregressive validation rollout.
    pub val_rollout: usize,
}

impl Stage2Config {
    pub fn new(lr: f64, epochs: usize, batch: usize) -> Self {
        Self {
            lr,
            epochs,
            batch,
            weight_decay: 1e-10,
            window: 64,
            stride: 64,
            val_rollout: 256,
        }
    }
}

/// Embedding sequence of one trajectory, `(steps + 1) x d`.
pub type EmbeddedTrajectory = Tensor;

/// Input and target rows for a set of `(trajectory, start)` windows.
fn gather_windows(seqs: &[EmbeddedTrajectory], idx: &[(usize, usize)], len: usize) -> (Tensor, Tensor) {
    let d = seqs[0].cols();
    let mut x = Vec::with_capacity(idx.len() * len * d);
    let mut y = Vec::with_capacity(idx.len() * len * d);
    for &(t, start) in idx {
        let data = seqs[t].data();
        x.extend_from_slice(&data[start * d..(start + len) * d]);
        y.extend_from_slice(&data[(start + 1) * d..(start + 1 + len) * d]);
    }
    let n = idx.len() * len;
    (
        Tensor::new(&[n, d], x).expect("sized"),
        Tensor::new(&[n, d], y).expect("sized"),
    )
}

fn window_index(seqs: &[EmbeddedTrajectory], spec: WindowSpec) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let steps = s.rows() - 1;
        if spec.length > steps {
            return Err(Error::WindowTooLong {
                length: spec.length,
                steps,
            });
        }
        out.extend(((0..=(steps - spec.length) / spec.stride).map(|k| (i, k * spec.stride))).collect::<Vec<_>>());
    }
    Ok(out)
}

/// Mean teacher-forced loss over all windows of `seqs`.
pub fn teacher_forced_loss(
    model: &Transformer,
    seqs: &[EmbeddedTrajectory],
    spec: WindowSpec,
    batch: usize,
) -> Result<f64> {
    let idx = window_index(seqs, spec)?;
    let mut sum = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = gather_windows(seqs, chunk, spec.length);
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let (xv, yv) = (g.constant(x), g.constant(y));
        let f = model.forward_graph(&mut g, &b, xv, chunk.len(), spec.length)?;
        let l = g.mse_loss(f.output, yv)?;
        sum += g.value(l).item() * chunk.len() as f64;
    }
    Ok(sum / idx.len() as f64)
}

pub struct Stage2Result {
    pub model: Transformer,
    pub curve: Vec<EpochLog>,
    /// Window MSEs of the autoregressive validation rollout, raw coordinates.
    pub val_rollout: Vec<f64>,
}

/// Teacher-forced pre-training on embedding sequences with Adam. The
/// embedder is only read.
pub fn pretrain(
    model: Transformer,
    embedder: &Embedder,
    train: &[EmbeddedTrajectory],
    val: &[EmbeddedTrajectory],
    val_trajs: &[Trajectory],
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Result> {
    let spec = WindowSpec::new(cfg.window, cfg.stride);
    let idx = window_index(train, spec)?;
    if idx.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model = model;
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr, cfg.weight_decay), &model.store);
    let mut rng = stream_rng(derive_seed(seed, "stage2/shuffle", 0), 0);
    let dropout_seed = derive_seed(seed, "stage2/dropout", 0);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = shuffled(idx.len(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let w: Vec<(usize, usize)> = chunk.iter().map(|i| idx[*i]).collect();
            let (x, y) = gather_windows(train, &w, cfg.window);
            let mut g = Graph::training(dropout_seed, step);
            let b = model.store.bind(&mut g);
            let (xv, yv) = (g.constant(x), g.constant(y));
            let f = model.forward_graph(&mut g, &b, xv, w.len(), cfg.window)?;
            let loss = g.mse_loss(f.output, yv)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, &b, &grads);
            sum += lv * w.len() as f64;
            step += 1;
        }
        let val_loss = teacher_forced_loss(&model, val, spec, cfg.batch.max(16))?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        curve.push(EpochLog {
            epoch,
            train_loss: sum / idx.len() as f64,
            val_loss,
            lr: cfg.lr,
        });
    }
    let val_rollout = if val_trajs.is_empty() || cfg.val_rollout == 0 {
        Vec::new()
    } else {
        let starts: Vec<State3> = val_trajs.iter().map(|t| t.states[0]).collect();
        let preds = rollout(&model, embedder, &starts, cfg.val_rollout)?;
        let truths: Vec<&[State3]> = val_trajs.iter().map(|t| &t.states[1..]).collect();
        mean_window_mse(&preds, &truths, cfg.window)
    };
    Ok(Stage2Result {
        model,
        curve,
        val_rollout,
    })
}

/// Autoregressive prediction of `steps` states after each of `starts`,
/// feeding predictions back with a sliding context. All sequences advance
/// together as one batch.
pub fn rollout(
    model: &Transformer,
    embedder: &Embedder,
    starts: &[State3],
    steps: usize,
) -> Result<Vec<Vec<State3>>> {
    let n = starts.len();
    let d = model.cfg.embed_dim;
    let ctx = model.cfg.context_length;
    let first = embedder.embed(starts)?;
    let mut hist: Vec<Vec<f64>> = (0..n).map(|i| first.row(i).to_vec()).collect();
    let mut out = vec![Vec::with_capacity(steps); n];
    for _ in 0..steps {
        let len = hist[0].len() / d;
        let seq = len.min(ctx);
        let mut x = Vec::with_capacity(n * seq * d);
        for h in &hist {
            x.extend_from_slice(&h[(len - seq) * d..]);
        }
        let (_, y) = model.forward(&Tensor::new(&[n * seq, d], x)?, n, seq)?;
        let mut next = Vec::with_capacity(n * d);
        for i in 0..n {
            next.extend_from_slice(y.row(i * seq + seq - 1));
        }
        let next = Tensor::new(&[n, d], next)?;
        let states = embedder.decode(&next)?;
        for i in 0..n {
            hist[i].extend_from_slice(next.row(i));
            out[i].push(states[i]);
        }
    }
    Ok(out)
}

/// Mean squared state error over consecutive windows of `width` steps;
/// the mean runs over steps and the three components.
pub fn window_mse(pred: &[State3], truth: &[State3], width: usize) -> Vec<f64> {
    let n = pred.len().min(truth.len());
    (0..n / width)
        .map(|w| {
            let r = w * width..(w + 1) * width;
            pred[r.clone()]
                .iter()
                .zip(&truth[r])
                .map(|(p, t)| {
                    let e = *p - *t;
                    (e.x * e.x + e.y * e.y + e.z * e.z) / 3.0
                })
                .sum::<f64>()
                / width as f64
        })
        .collect()
}

/// Window MSEs averaged over trajectories.
pub fn mean_window_mse(preds: &[Vec<State3>], truths: &[&[State3]], width: usize) -> Vec<f64> {
    let per: Vec<Vec<f64>> = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| window_mse(p, t, width))
        .collect();
    let k = per.iter().map(Vec::len).min().unwrap_or(0);
    (0..k)
        .map(|w| per.iter().map(|v| v[w]).sum::<f64>() / per.len() as f64)
        .collect()
}

/// Embeds every trajectory of a split.
pub fn embed_trajectories(embedder: &Embedder, trajs: &[Trajectory]) -> Result<Vec<EmbeddedTrajectory>> {
    trajs.iter().map(|t| embedder.embed(&t.states)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: usize, l: usize, h: usize) -> Transformer {
        Transformer::new(TransformerConfig::new(d, l, h), &mut stream_rng(7, 0)).unwrap()
    }

    #[test]
    fn param_count_matches_formula() {
        for (d, l, h) in [(32, 4, 4), (9, 11, 9), (3, 3, 3), (6, 2, 3)] {
            let m = small(d, l, h);
            assert_eq!(m.store.num_scalars(), m.cfg.param_count(), "{d}/{l}/{h}");
        }
    }

    #[test]
    fn positional_encoding_at_origin() {
        let pe = positional_table(4, 5);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((pe.get2(1, 0) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn causal_in_eval_and_train() {
        let m = small(6, 2, 3);
        let x = init_normal(&[10, 6], 1.0, &mut stream_rng(1, 2));
        for train in [false, true] {
            let run = |x: &Tensor| {
                let mut g = if train { Graph::training(5, 0) } else { Graph::new() };
                let b = m.store.bind(&mut g);
                let xv = g.constant(x.clone());
                let f = m.forward_graph(&mut g, &b, xv, 1, 10).unwrap();
                g.value(f.output).clone()
            };
            let base = run(&x);
            for t in [0, 4, 9] {
                let mut x2 = x.clone();
                x2.data_mut()[t * 6 + 2] += 0.5;
                let y = run(&x2);
                for pos in 0..10 {
                    let changed = base.row(pos) != y.row(pos);
                    assert_eq!(changed, pos >= t, "train={train} t={t} pos={pos}");
                }
            }
        }
    }

    #[test]
    fn context_overflow() {
        let m = small(3, 1, 3);
        let x = Tensor::zeros(&[65, 3]);
        assert!(matches!(m.forward(&x, 1, 65), Err(Error::ContextOverflow { len: 65, max: 64 })));
    }

    #[test]
    fn zero_prediction_window_mse_is_mean_square() {
        let truth: Vec<State3> = (0..8).map(|i| State3::new(i as f64, 1.0, -2.0)).collect();
        let zero = vec![State3::ORIGIN; 8];
        let w = window_mse(&zero, &truth, 4);
        let expect0 = (0..4).map(|i| (i * i + 1 + 4) as f64 / 3.0).sum::<f64>() / 4.0;
        assert!((w[0] - expect0).abs() < 1e-12);
        assert_eq!(w.len(), 2);
    }
}
