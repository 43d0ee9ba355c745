//! Safety-value fine-tuning on top of a pretrained transformer.
//!
//! A window of 64 embedded states runs through the transformer; the hidden
//! vector at its last position is concatenated with the raw query state and
//! fed to a small ReLU network that predicts `U(query)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::embed::EmbedderKind;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Rng};
use crate::safety::{Interpolation, SafetyField};
use crate::sim::State3;
use crate::tensor::{
    init_kaiming_uniform, Bound, Checkpoint, Graph, Optimizer, OptimizerConfig, OptimizerKind, ParamId,
    ParamStore, Tensor, Var,
};
use crate::train::{shuffled, EpochLog};
use crate::transformer::{EmbeddedTrajectory, Transformer};

pub const NAMESPACE: &str = "HEAD";

/// The four compared models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    KoopmanFrozen,
    KoopmanUnfrozen,
    PcaPi,
    Pca,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::KoopmanFrozen,
        Variant::KoopmanUnfrozen,
        Variant::PcaPi,
        Variant::Pca,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::KoopmanFrozen => "koopman-frozen",
            Variant::KoopmanUnfrozen => "koopman-unfrozen",
            Variant::PcaPi => "pca-pi",
            Variant::Pca => "pca",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::KoopmanFrozen => "Koopman (F)",
            Variant::KoopmanUnfrozen => "Koopman (U)",
            Variant::PcaPi => "PCA (PI)",
            Variant::Pca => "PCA",
        }
    }

    pub fn embedder(&self) -> EmbedderKind {
        match self {
            Variant::KoopmanFrozen | Variant::KoopmanUnfrozen => EmbedderKind::Koopman,
            Variant::PcaPi => EmbedderKind::Pi,
            Variant::Pca => EmbedderKind::Pca,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::ConfigInvalid {
                field: "variant".into(),
                reason: format!("unknown variant {s:?}"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub h1: usize,
    pub h2: usize,
}

impl HeadConfig {
    /// `(d + 3) h1 + h1 + h1 h2 + h2 + h2 + 1`.
    pub fn param_count(&self, embed_dim: usize) -> usize {
        (embed_dim + 3) * self.h1 + self.h1 + self.h1 * self.h2 + self.h2 + self.h2 + 1
    }
}

#[derive(Debug, Clone)]
pub struct SafetyHead {
    pub cfg: HeadConfig,
    pub input_dim: usize,
    pub store: ParamStore,
    w: [ParamId; 3],
    b: [ParamId; 3],
}

impl SafetyHead {
    /// Kaiming-uniform weights and zero biases; `input_dim` includes the
    /// three query coordinates.
    pub fn new(input_dim: usize, cfg: HeadConfig, rng: &mut Rng) -> Self {
        let dims = [input_dim, cfg.h1, cfg.h2, 1];
        let mut store = ParamStore::new();
        let mut w = Vec::new();
        let mut b = Vec::new();
        for k in 0..3 {
            w.push(store.add(format!("w{}", k + 1), init_kaiming_uniform(&[dims[k], dims[k + 1]], rng)));
            b.push(store.add(format!("b{}", k + 1), Tensor::zeros(&[dims[k + 1]])));
        }
        Self {
            cfg,
            input_dim,
            store,
            w: [w[0], w[1], w[2]],
            b: [b[0], b[1], b[2]],
        }
    }

    /// `n x input_dim` rows to `n x 1` predictions.
    pub fn forward_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = g.linear(x, b[self.w[0]], b[self.b[0]])?;
        let h = g.relu(h);
        let h = g.linear(h, b[self.w[1]], b[self.b[1]])?;
        let h = g.relu(h);
        g.linear(h, b[self.w[2]], b[self.b[2]])
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, &b, xv)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_store(NAMESPACE, &self.store);
        c
    }

    pub fn from_checkpoint(input_dim: usize, cfg: HeadConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut h = Self::new(input_dim, cfg, &mut stream_rng(0, 0));
        ckpt.load_store(NAMESPACE, &mut h.store)?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage3Config {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Transformer weights stay fixed.
    pub frozen: bool,
    pub head: HeadConfig,
    pub window: usize,
    pub train_stride: usize,
    pub val_stride: usize,
    pub test_stride: usize,
    pub interpolation: Interpolation,
}

impl Stage3Config {
    pub fn new(lr: f64, epochs: usize, batch: usize, optimizer: OptimizerKind, head: HeadConfig) -> Self {
        Self {
            lr,
            epochs,
            batch,
            optimizer,
            weight_decay: 0.0,
            frozen: true,
            head,
            window: 64,
            train_stride: 16,
            val_stride: 32,
            test_stride: 16,
            interpolation: Interpolation::Trilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::ConfigInvalid {
                field: format!("stage3.{field}"),
                reason: reason.into(),
            })
        };
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.batch == 0 || self.window == 0 {
            return bad("batch", "batch and window must be positive");
        }
        if self.train_stride == 0 || self.val_stride == 0 || self.test_stride == 0 {
            return bad("stride", "strides must be positive");
        }
        if self.head.h1 == 0 || self.head.h2 == 0 {
            return bad("head", "layer widths must be positive");
        }
        Ok(())
    }
}

/// A context window with the labelled state right after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    /// Index within the split.
    pub traj: usize,
    /// First context step; the query is step `start + window`.
    pub start: usize,
    pub query: State3,
    pub target: f64,
}

/// Windows of `window` states every `stride` steps whose query lies inside
/// the safety region.
pub fn labeled_windows(
    trajs: &[Trajectory],
    field: &SafetyField,
    window: usize,
    stride: usize,
    mode: Interpolation,
) -> Vec<LabeledWindow> {
    let mut out = Vec::new();
    for (t, traj) in trajs.iter().enumerate() {
        let mut start = 0;
        while start + window < traj.states.len() {
            let q = traj.states[start + window];
            if let Some(u) = field.value(q, mode) {
                out.push(LabeledWindow {
                    traj: t,
                    start,
                    query: q,
                    target: u,
                });
            }
            start += stride;
        }
    }
    out
}

fn require_labels(windows: &[LabeledWindow], what: &str) -> Result<()> {
    if windows.is_empty() {
        Err(Error::MissingLabels(format!("no {what} window has its query inside the region")))
    } else {
        Ok(())
    }
}

/// Stacked context rows of `windows`, `(n window) x d`.
pub fn gather_contexts(seqs: &[EmbeddedTrajectory], windows: &[LabeledWindow], window: usize) -> Tensor {
    let d = seqs[0].cols();
    let mut x = Vec::with_capacity(windows.len() * window * d);
    for w in windows {
        x.extend_from_slice(&seqs[w.traj].data()[w.start * d..(w.start + window) * d]);
    }
    Tensor::new(&[windows.len() * window, d], x).expect("sized")
}

fn queries(windows: &[LabeledWindow]) -> Tensor {
    let data = windows.iter().flat_map(|w| w.query.to_array()).collect();
    Tensor::new(&[windows.len(), 3], data).expect("sized")
}

fn targets(windows: &[LabeledWindow]) -> Tensor {
    Tensor::new(&[windows.len(), 1], windows.iter().map(|w| w.target).collect()).expect("sized")
}

/// Last-position hidden vectors of `batch` stacked contexts.
pub fn context_features_graph(
    g: &mut Graph,
    model: &Transformer,
    b: &Bound,
    ctx: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let f = model.forward_graph(g, b, ctx, batch, seq)?;
    let last: Vec<usize> = (0..batch).map(|i| i * seq + seq - 1).collect();
    g.select_rows(f.hidden, &last)
}

/// Mean squared error of the head on `[features | query]` rows.
pub fn head_loss_graph(
    g: &mut Graph,
    head: &SafetyHead,
    hb: &Bound,
    features: Var,
    query: Var,
    target: Var,
) -> Result<Var> {
    let x = g.concat_cols(&[features, query])?;
    let y = head.forward_graph(g, hb, x)?;
    g.mse_loss(y, target)
}

/// Evaluation-mode last-position hidden vectors for every window.
pub fn context_features(
    model: &Transformer,
    seqs: &[EmbeddedTrajectory],
    windows: &[LabeledWindow],
    window: usize,
) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let d = model.cfg.embed_dim;
    let mut out = Vec::with_capacity(windows.len() * d);
    for chunk in windows.chunks(CHUNK) {
        let x = gather_contexts(seqs, chunk, window);
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let xv = g.constant(x);
        let f = context_features_graph(&mut g, model, &b, xv, chunk.len(), window)?;
        out.extend_from_slice(g.value(f).data());
    }
    Tensor::new(&[windows.len(), d], out)
}

fn head_inputs(features: &Tensor, windows: &[LabeledWindow]) -> Tensor {
    let d = features.cols();
    let mut x = Vec::with_capacity(windows.len() * (d + 3));
    for (i, w) in windows.iter().enumerate() {
        x.extend_from_slice(features.row(i));
        x.extend(w.query.to_array());
    }
    Tensor::new(&[windows.len(), d + 3], x).expect("sized")
}

/// A fine-tuned model: the head plus the backbone it was trained with.
#[derive(Debug, Clone)]
pub struct SafetyModel {
    pub variant: Variant,
    pub backbone: Transformer,
    pub head: SafetyHead,
    pub window: usize,
}

impl SafetyModel {
    /// Safety predictions for labelled windows of embedded trajectories.
    pub fn predict(&self, seqs: &[EmbeddedTrajectory], windows: &[LabeledWindow]) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let f = context_features(&self.backbone, seqs, windows, self.window)?;
        self.head.predict(&head_inputs(&f, windows))
    }

    /// Prediction for one context of embedded states and a query.
    pub fn predict_one(&self, context: &Tensor, query: State3) -> Result<f64> {
        let seq = context.rows();
        let (h, _) = self.backbone.forward(context, 1, seq)?;
        let mut x = h.row(seq - 1).to_vec();
        x.extend(query.to_array());
        Ok(self.head.predict(&Tensor::new(&[1, x.len()], x)?)?[0])
    }
}

pub struct Stage3Result {
    pub model: SafetyModel,
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn mse(pred: &[f64], windows: &[LabeledWindow]) -> f64 {
    pred.iter().zip(windows).map(|(p, w)| (p - w.target).powi(2)).sum::<f64>() / windows.len() as f64
}

/// Trains a fresh head (and, unless `cfg.frozen`, the transformer) on the
/// labelled windows. The embedder never changes: sequences arrive already
/// embedded. Returns the weights of the epoch with the lowest validation
/// loss.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    variant: Variant,
    backbone: &Transformer,
    train_seqs: &[EmbeddedTrajectory],
    train: &[LabeledWindow],
    val_seqs: &[EmbeddedTrajectory],
    val: &[LabeledWindow],
    cfg: &Stage3Config,
    seed: u64,
) -> Result<Stage3Result> {
    cfg.validate()?;
    require_labels(train, "training")?;
    require_labels(val, "validation")?;
    let d = backbone.cfg.embed_dim;
    let mut init = stream_rng(derive_seed(seed, "stage3/head", 0), 0);
    let mut model = SafetyModel {
        variant,
        backbone: backbone.clone(),
        head: SafetyHead::new(d + 3, cfg.head, &mut init),
        window: cfg.window,
    };
    model.backbone.store.freeze_all(cfg.frozen);
    let opt_cfg = OptimizerConfig::of_kind(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut head_opt = Optimizer::new(opt_cfg, &model.head.store);
    let mut body_opt = Optimizer::new(opt_cfg, &model.backbone.store);
    let mut rng = stream_rng(derive_seed(seed, "stage3/shuffle", 0), 0);
    let dropout_seed = derive_seed(seed, "stage3/dropout", 0);

    // With a fixed backbone the features never change.
    let cached = if cfg.frozen {
        Some(context_features(&model.backbone, train_seqs, train, cfg.window)?)
    } else {
        None
    };
    let val_features = |m: &SafetyModel| context_features(&m.backbone, val_seqs, val, cfg.window);
    let mut val_cache = None;

    let mut best: Option<(f64, usize, SafetyModel)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let ws: Vec<LabeledWindow> = chunk.iter().map(|i| train[*i]).collect();
            let mut g = if cfg.frozen {
                Graph::new()
            } else {
                Graph::training(dropout_seed, step)
            };
            let hb = model.head.store.bind(&mut g);
            let (features, bb) = match &cached {
                Some(f) => {
                    let rows: Vec<f64> = chunk.iter().flat_map(|i| f.row(*i).to_vec()).collect();
                    (g.constant(Tensor::new(&[ws.len(), d], rows)?), None)
                }
                None => {
                    let bb = model.backbone.store.bind(&mut g);
                    let ctx = g.constant(gather_contexts(train_seqs, &ws, cfg.window));
                    let f = context_features_graph(&mut g, &model.backbone, &bb, ctx, ws.len(), cfg.window)?;
                    (f, Some(bb))
                }
            };
            let q = g.constant(queries(&ws));
            let y = g.constant(targets(&ws));
            let loss = head_loss_graph(&mut g, &model.head, &hb, features, q, y)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = g.backward(loss)?;
            head_opt.step(&mut model.head.store, &hb, &grads);
            if let Some(bb) = &bb {
                body_opt.step(&mut model.backbone.store, bb, &grads);
            }
            sum += lv * ws.len() as f64;
            step += 1;
        }
        let vf = match (&cached, &val_cache) {
            (Some(_), Some(vf)) => Tensor::clone(vf),
            _ => val_features(&model)?,
        };
        if cfg.frozen && val_cache.is_none() {
            val_cache = Some(vf.clone());
        }
        let val_loss = mse(&model.head.predict(&head_inputs(&vf, val))?, val);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        curve.push(EpochLog {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
            lr: cfg.lr,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (best_epoch, mut model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    model.backbone.store.freeze_all(false);
    Ok(Stage3Result {
        model,
        curve,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::safety::{SafetyGrid, SafetyRegion};
    use crate::transformer::TransformerConfig;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("bogus".parse::<Variant>(), Err(Error::ConfigInvalid { .. })));
    }

    #[test]
    fn head_widths_and_param_counts() {
        let cases = [(32, 128, 64), (32, 112, 64), (9, 112, 64), (3, 32, 32)];
        for (d, h1, h2) in cases {
            let cfg = HeadConfig { h1, h2 };
            let h = SafetyHead::new(d + 3, cfg, &mut stream_rng(1, 0));
            assert_eq!(h.store.num_scalars(), cfg.param_count(d));
            assert_eq!(h.store.get(h.w[0]).shape(), &[d + 3, h1]);
        }
        assert_eq!(SafetyHead::new(35, HeadConfig { h1: 128, h2: 64 }, &mut stream_rng(1, 0)).input_dim, 35);
    }

    #[test]
    fn zero_weight_head_returns_bias() {
        let mut h = SafetyHead::new(5, HeadConfig { h1: 4, h2: 3 }, &mut stream_rng(2, 0));
        for id in h.w {
            let shape = h.store.get(id).shape().to_vec();
            h.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        h.store.set(h.b[2], Tensor::new(&[1], vec![0.75]).unwrap()).unwrap();
        let x = Tensor::new(&[2, 5], (0..10).map(|v| v as f64 - 3.0).collect()).unwrap();
        assert_eq!(h.predict(&x).unwrap(), vec![0.75, 0.75]);
    }

    fn field(u: f64) -> SafetyField {
        let grid = SafetyGrid::new(SafetyRegion::default(), [2, 2, 2]).unwrap();
        SafetyField {
            u: vec![u; grid.len()],
            grid,
            deltas: vec![],
            converged: true,
        }
    }

    fn line(id: usize, x0: f64, n: usize) -> Trajectory {
        Trajectory {
            id,
            states: (0..n).map(|k| State3::new(x0 + k as f64, 0.0, 10.0)).collect(),
            dt: 0.01,
            seed: 0,
            split: Split::Train,
        }
    }

    #[test]
    fn query_follows_context_and_outside_is_dropped() {
        let trajs = [line(0, 0.0, 12), line(1, -20.0, 12)];
        let w = labeled_windows(&trajs, &field(2.0), 4, 3, Interpolation::Trilinear);
        // first trajectory: starts 0, 3, 6; second: queries at x = -16, -13, -10
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].start, 3);
        assert_eq!(w[1].query, trajs[0].states[7]);
        assert_eq!(w[1].target, 2.0);
        assert!(w.iter().all(|w| w.traj == 0));
    }

    fn fixture() -> (Transformer, Vec<EmbeddedTrajectory>, Vec<LabeledWindow>) {
        let tf = Transformer::new(TransformerConfig::new(3, 1, 1), &mut stream_rng(3, 0)).unwrap();
        let trajs = [line(0, 1.0, 30), line(1, 5.0, 30)];
        let seqs: Vec<Tensor> = trajs
            .iter()
            .map(|t| crate::train::states_tensor(&t.states).map(|v| v / 10.0))
            .collect();
        let grid = SafetyGrid::new(SafetyRegion::default(), [3, 3, 3]).unwrap();
        let f = SafetyField {
            u: (0..27).map(|i| i as f64 * 0.1).collect(),
            grid,
            deltas: vec![],
            converged: true,
        };
        let w = labeled_windows(&trajs, &f, 8, 2, Interpolation::Trilinear);
        (tf, seqs, w)
    }

    #[test]
    fn frozen_finetune_leaves_backbone_bitwise() {
        let (tf, seqs, w) = fixture();
        let mut cfg = Stage3Config::new(1e-2, 3, 4, OptimizerKind::Adam, HeadConfig { h1: 8, h2: 4 });
        cfg.window = 8;
        let before = tf.to_checkpoint().to_bytes();
        let r = finetune(Variant::KoopmanFrozen, &tf, &seqs, &w, &seqs, &w, &cfg, 9).unwrap();
        assert_eq!(r.model.backbone.to_checkpoint().to_bytes(), before);
        assert_eq!(r.curve.len(), 3);

        cfg.frozen = false;
        cfg.optimizer = OptimizerKind::AdamW;
        let r = finetune(Variant::KoopmanUnfrozen, &tf, &seqs, &w, &seqs, &w, &cfg, 9).unwrap();
        assert_ne!(r.model.backbone.to_checkpoint().to_bytes(), before);
    }

    #[test]
    fn frozen_backbone_receives_no_gradient() {
        let (mut tf, seqs, w) = fixture();
        tf.store.freeze_all(true);
        let head = SafetyHead::new(6, HeadConfig { h1: 8, h2: 4 }, &mut stream_rng(4, 0));
        let mut g = Graph::new();
        let bb = tf.store.bind(&mut g);
        let hb = head.store.bind(&mut g);
        let ctx = g.constant(gather_contexts(&seqs, &w, 8));
        let f = context_features_graph(&mut g, &tf, &bb, ctx, w.len(), 8).unwrap();
        let q = g.constant(queries(&w));
        let y = g.constant(targets(&w));
        let loss = head_loss_graph(&mut g, &head, &hb, f, q, y).unwrap();
        let grads = g.backward(loss).unwrap();
        let max = bb
            .vars()
            .iter()
            .map(|v| grads.get(*v).map_or(0.0, |g| g.iter().fold(0.0f64, |m, x| m.max(x.abs()))))
            .fold(0.0, f64::max);
        assert_eq!(max, 0.0);
        assert!(hb.vars().iter().any(|v| grads.get(*v).is_some()));
    }

    #[test]
    fn predictions_are_deterministic() {
        let (tf, seqs, w) = fixture();
        let m = SafetyModel {
            variant: Variant::Pca,
            backbone: tf,
            head: SafetyHead::new(6, HeadConfig { h1: 8, h2: 4 }, &mut stream_rng(5, 0)),
            window: 8,
        };
        let a = m.predict(&seqs, &w).unwrap();
        assert_eq!(a, m.predict(&seqs, &w).unwrap());
        let ctx = gather_contexts(&seqs, &w[..1], 8);
        assert!((m.predict_one(&ctx, w[0].query).unwrap() - a[0]).abs() < 1e-12);
    }
}
