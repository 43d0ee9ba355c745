//! Stage orchestration over a run directory.
//!
//! ```text
//! <run>/data         trajectories per split
//! <run>/checkpoints  embedders, transformers, safety heads
//! <run>/safety       grid safety function
//! <run>/results      curves, predictions, metrics and report tables
//! <run>/manifest     one file per stage: config hash, output hashes, timing
//! ```
//!
//! Every stage reads its inputs from disk, so stages can run as separate
//! processes. All randomness derives from the run seed; rerunning a stage
//! with the same configuration rewrites identical bytes, manifests aside.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::dataset::{self, Dataset, Normalizer, Trajectory};
use crate::embed::{fit_pca_embedder, fit_pi_embedder, Embedder, EmbedderKind, EmbedderModel};
use crate::error::{Error, Result};
use crate::koopman::{train_stage1, KoopmanAutoencoder};
use crate::rng::stream_rng;
use crate::safety::{compute_safety as sculpt, NoiseModel, SafetyField, SafetyGrid};
use crate::sim::State3;
use crate::stats::{self, ErrorPoint, TrajectoryMetrics};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::train::write_curve;
use crate::transfer::{self, labeled_windows, LabeledWindow, SafetyHead, SafetyModel, Variant};
use crate::transformer::{self, embed_trajectories, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    TrainAe,
    Pretrain,
    ComputeSafety,
    Finetune,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Simulate,
        Stage::TrainAe,
        Stage::Pretrain,
        Stage::ComputeSafety,
        Stage::Finetune,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainAe => "train-ae",
            Stage::Pretrain => "pretrain",
            Stage::ComputeSafety => "compute-safety",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn safety(&self) -> PathBuf {
        self.root.join("safety")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest")
    }

    pub fn embedder_ckpt(&self, k: EmbedderKind) -> PathBuf {
        self.checkpoints().join(format!("embedder_{}.ckpt", k.as_str()))
    }

    pub fn transformer_ckpt(&self, k: EmbedderKind) -> PathBuf {
        self.checkpoints().join(format!("transformer_{}.ckpt", k.as_str()))
    }

    pub fn head_ckpt(&self, v: Variant) -> PathBuf {
        self.checkpoints().join(format!("head_{}.ckpt", v.as_str()))
    }

    /// Backbone after fine-tuning; only written for unfrozen variants.
    pub fn backbone_ckpt(&self, v: Variant) -> PathBuf {
        self.checkpoints().join(format!("backbone_{}.ckpt", v.as_str()))
    }

    pub fn safety_cache(&self) -> PathBuf {
        self.safety().join("u.bin")
    }

    pub fn predictions(&self, v: Variant) -> PathBuf {
        self.results().join(format!("predictions_{}.csv", v.as_str()))
    }

    pub fn metrics(&self, v: Variant) -> PathBuf {
        self.results().join(format!("metrics_{}.csv", v.as_str()))
    }

    pub fn rollout(&self, k: EmbedderKind) -> PathBuf {
        self.results().join(format!("rollout_{}.csv", k.as_str()))
    }

    pub fn report(&self) -> PathBuf {
        self.results().join("report")
    }
}

fn create_dirs(layout: &RunLayout) -> Result<()> {
    for d in [layout.data(), layout.checkpoints(), layout.safety(), layout.results(), layout.manifest()] {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(path.to_path_buf()))
    }
}

/// Writes via a temporary file so readers never see partial content.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Records the configuration hash, output hashes and wall time of a stage.
fn write_manifest(cfg: &RunConfig, layout: &RunLayout, stage: &str, outputs: &[PathBuf], started: Instant) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "stage = {stage:?}");
    let _ = writeln!(s, "version = {:?}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "config_sha256 = {:?}", sha256_hex(cfg.to_toml().as_bytes()));
    let _ = writeln!(s, "wall_seconds = {:.3}", started.elapsed().as_secs_f64());
    let _ = writeln!(s, "\n[outputs]");
    for p in outputs {
        let rel = p.strip_prefix(&layout.root).unwrap_or(p);
        let _ = writeln!(s, "{:?} = {:?}", rel.display().to_string(), dataset::sha256_file(p)?);
    }
    write_atomic(&layout.manifest().join("config.toml"), cfg.to_toml().as_bytes())?;
    write_atomic(&layout.manifest().join(format!("{stage}.toml")), s.as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Integrates all splits and writes them to `data/`.
pub fn simulate(cfg: &RunConfig, layout: &RunLayout) -> Result<Dataset> {
    let t0 = Instant::now();
    create_dirs(layout)?;
    let spec = cfg.dataset_spec();
    let data = dataset::generate_splits(&spec, &cfg.integrator, &cfg.lorenz)?;
    dataset::save(&layout.data(), &data, &spec, &normalizer(cfg, &data)?)?;
    let outputs: Vec<PathBuf> = ["train", "val", "test"]
        .iter()
        .map(|s| layout.data().join(format!("{s}.csv")))
        .chain([layout.data().join("manifest.txt")])
        .collect();
    write_manifest(cfg, layout, Stage::Simulate.as_str(), &outputs, t0)?;
    Ok(data)
}

pub fn load_data(cfg: &RunConfig, layout: &RunLayout) -> Result<Dataset> {
    dataset::load(&layout.data(), &cfg.dataset_spec())
}

pub fn normalizer(cfg: &RunConfig, data: &Dataset) -> Result<Normalizer> {
    if cfg.normalize {
        Normalizer::fit(&data.train)
    } else {
        Ok(Normalizer::identity())
    }
}

fn train_states(data: &Dataset) -> Vec<State3> {
    data.train.iter().flat_map(|t| t.states.iter().copied()).collect()
}

/// Trains the Koopman autoencoder and fits both PCA embedders.
pub fn train_ae(cfg: &RunConfig, layout: &RunLayout) -> Result<Stage1Summary> {
    let t0 = Instant::now();
    create_dirs(layout)?;
    let data = load_data(cfg, layout)?;
    let norm = normalizer(cfg, &data)?;
    let model = KoopmanAutoencoder::new(cfg.koopman, &mut stream_rng(cfg.stage_seed("stage1/init"), 0));
    let r = train_stage1(model, &data.train, &data.val, &norm, &cfg.stage1, cfg.stage_seed("stage1"), &mut ())?;
    let summary = Stage1Summary {
        val_recon: r.val_recon,
        best_epoch: r.best_epoch,
        bandwidth: crate::koopman::bandwidth(&r.model.materialize()),
        skew: crate::koopman::off_diagonal_skew(&r.model.materialize()),
    };
    let curve = layout.results().join("stage1_koopman.csv");
    write_curve(&curve, &r.curve)?;
    let op = layout.results().join("koopman_operator.csv");
    crate::koopman::dump_operator(&op, &r.model)?;
    let embedders = [
        Embedder {
            norm,
            model: EmbedderModel::Koopman(Box::new(r.model)),
        },
        fit_pi_embedder(&train_states(&data), norm, cfg.lorenz)?,
        fit_pca_embedder(&train_states(&data), norm)?,
    ];
    let mut outputs = vec![curve, op];
    for e in &embedders {
        let p = layout.embedder_ckpt(e.kind());
        write_checkpoint(&p, &e.to_checkpoint())?;
        outputs.push(p);
    }
    write_manifest(cfg, layout, Stage::TrainAe.as_str(), &outputs, t0)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Summary {
    /// Reconstruction MSE on normalised validation states.
    pub val_recon: f64,
    pub best_epoch: Option<usize>,
    pub bandwidth: usize,
    pub skew: bool,
}

pub fn load_embedder(cfg: &RunConfig, layout: &RunLayout, kind: EmbedderKind) -> Result<Embedder> {
    let ckpt = read_checkpoint(&layout.embedder_ckpt(kind))?;
    Embedder::from_checkpoint(kind, &ckpt, cfg.koopman, cfg.lorenz)
}

pub fn load_transformer(cfg: &RunConfig, layout: &RunLayout, kind: EmbedderKind) -> Result<Transformer> {
    let ckpt = read_checkpoint(&layout.transformer_ckpt(kind))?;
    Transformer::from_checkpoint(cfg.stage2.get(kind).transformer, &ckpt)
}

fn embedders_of(variants: &[Variant]) -> Vec<EmbedderKind> {
    let mut out: Vec<EmbedderKind> = Vec::new();
    for v in variants {
        if !out.contains(&v.embedder()) {
            out.push(v.embedder());
        }
    }
    out.sort_by_key(|k| EmbedderKind::ALL.iter().position(|a| a == k));
    out
}

/// Validation rollout window MSEs per embedder.
pub type RolloutTable = BTreeMap<&'static str, Vec<f64>>;

/// Pre-trains one transformer per embedder used by `variants`.
pub fn pretrain(cfg: &RunConfig, layout: &RunLayout, variants: &[Variant]) -> Result<RolloutTable> {
    let t0 = Instant::now();
    create_dirs(layout)?;
    let data = load_data(cfg, layout)?;
    let mut out = RolloutTable::new();
    let mut outputs = Vec::new();
    for kind in embedders_of(variants) {
        let emb = load_embedder(cfg, layout, kind)?;
        let pc = cfg.stage2.get(kind);
        let tag = format!("stage2/{}", kind.as_str());
        let model = Transformer::new(pc.transformer, &mut stream_rng(cfg.stage_seed(&format!("{tag}/init")), 0))?;
        let train = embed_trajectories(&emb, &data.train)?;
        let val = embed_trajectories(&emb, &data.val)?;
        let r = transformer::pretrain(model, &emb, &train, &val, &data.val, &pc.train, cfg.stage_seed(&tag))?;
        let ckpt = layout.transformer_ckpt(kind);
        write_checkpoint(&ckpt, &r.model.to_checkpoint())?;
        let curve = layout.results().join(format!("stage2_{}.csv", kind.as_str()));
        write_curve(&curve, &r.curve)?;
        outputs.extend([ckpt, curve]);
        out.insert(kind.as_str(), r.val_rollout);
    }
    write_manifest(cfg, layout, Stage::Pretrain.as_str(), &outputs, t0)?;
    Ok(out)
}

/// Sculpts the safety function on the configured grid.
pub fn compute_safety(cfg: &RunConfig, layout: &RunLayout) -> Result<SafetyField> {
    let t0 = Instant::now();
    create_dirs(layout)?;
    let s = &cfg.safety;
    let grid = SafetyGrid::new(s.region, s.res)?;
    let noise = NoiseModel::axis_extremes(s.noise_bound);
    let field = sculpt(&grid, &noise, &s.sculpt, &cfg.integrator, &cfg.lorenz, cfg.threads)?;
    let paths = [layout.safety().join("u.csv"), layout.safety_cache(), layout.safety().join("log.csv")];
    field.write_csv(&paths[0])?;
    field.write_cache(&paths[1])?;
    field.write_log(&paths[2])?;
    write_manifest(cfg, layout, Stage::ComputeSafety.as_str(), &paths, t0)?;
    Ok(field)
}

pub fn load_safety(layout: &RunLayout) -> Result<SafetyField> {
    SafetyField::read_cache(&layout.safety_cache())
}

/// Labelled windows of a split for one variant's settings.
pub fn windows_for(cfg: &RunConfig, v: Variant, field: &SafetyField, trajs: &[Trajectory], stride: usize) -> Vec<LabeledWindow> {
    let s = cfg.stage3.get(v);
    labeled_windows(trajs, field, s.window, stride, s.interpolation)
}

/// Best validation loss per fine-tuned variant.
pub type FinetuneSummary = BTreeMap<Variant, f64>;

/// Fits a safety head for each variant.
pub fn finetune(cfg: &RunConfig, layout: &RunLayout, variants: &[Variant]) -> Result<FinetuneSummary> {
    let t0 = Instant::now();
    create_dirs(layout)?;
    for v in variants {
        require(&layout.transformer_ckpt(v.embedder()))?;
        require(&layout.embedder_ckpt(v.embedder()))?;
    }
    require(&layout.safety_cache())?;
    let data = load_data(cfg, layout)?;
    let field = load_safety(layout)?;
    let mut out = FinetuneSummary::new();
    let mut outputs = Vec::new();
    for &v in variants {
        let kind = v.embedder();
        let emb = load_embedder(cfg, layout, kind)?;
        let backbone = load_transformer(cfg, layout, kind)?;
        let s = cfg.stage3.get(v);
        let train = windows_for(cfg, v, &field, &data.train, s.train_stride);
        let val = windows_for(cfg, v, &field, &data.val, s.val_stride);
        let train_seqs = embed_trajectories(&emb, &data.train)?;
        let val_seqs = embed_trajectories(&emb, &data.val)?;
        let tag = format!("stage3/{}", v.as_str());
        let r = transfer::finetune(v, &backbone, &train_seqs, &train, &val_seqs, &val, s, cfg.stage_seed(&tag))?;
        let head = layout.head_ckpt(v);
        write_checkpoint(&head, &r.model.head.to_checkpoint())?;
        outputs.push(head);
        if !s.frozen {
            let b = layout.backbone_ckpt(v);
            write_checkpoint(&b, &r.model.backbone.to_checkpoint())?;
            outputs.push(b);
        }
        let curve = layout.results().join(format!("stage3_{}.csv", v.as_str()));
        write_curve(&curve, &r.curve)?;
        outputs.push(curve);
        out.insert(v, r.curve[r.best_epoch].val_loss);
    }
    write_manifest(cfg, layout, Stage::Finetune.as_str(), &outputs, t0)?;
    Ok(out)
}

/// The fine-tuned model of a variant as stored on disk.
pub fn load_safety_model(cfg: &RunConfig, layout: &RunLayout, v: Variant) -> Result<SafetyModel> {
    let s = cfg.stage3.get(v);
    let backbone = if s.frozen {
        load_transformer(cfg, layout, v.embedder())?
    } else {
        let ckpt = read_checkpoint(&layout.backbone_ckpt(v))?;
        Transformer::from_checkpoint(cfg.stage2.get(v.embedder()).transformer, &ckpt)?
    };
    let head = SafetyHead::from_checkpoint(backbone.cfg.embed_dim + 3, s.head, &read_checkpoint(&layout.head_ckpt(v))?)?;
    Ok(SafetyModel {
        variant: v,
        backbone,
        head,
        window: s.window,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct PredictionRow {
    traj: usize,
    start: usize,
    x: f64,
    y: f64,
    z: f64,
    truth: f64,
    prediction: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
struct RolloutRow {
    window: usize,
    mse: f64,
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    require(path)?;
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Test-set predictions, per-trajectory metrics and Task A rollouts.
pub fn evaluate(cfg: &RunConfig, layout: &RunLayout, variants: &[Variant]) -> Result<BTreeMap<Variant, stats::ModelSummary>> {
    let t0 = Instant::now();
    create_dirs(layout)?;
    for v in variants {
        require(&layout.head_ckpt(*v))?;
    }
    require(&layout.safety_cache())?;
    let data = load_data(cfg, layout)?;
    let field = load_safety(layout)?;
    let mut outputs = Vec::new();
    let mut out = BTreeMap::new();
    for &v in variants {
        let emb = load_embedder(cfg, layout, v.embedder())?;
        let model = load_safety_model(cfg, layout, v)?;
        let windows = windows_for(cfg, v, &field, &data.test, cfg.stage3.get(v).test_stride);
        let seqs = embed_trajectories(&emb, &data.test)?;
        let pred = model.predict(&seqs, &windows)?;
        let rows: Vec<PredictionRow> = windows
            .iter()
            .zip(&pred)
            .map(|(w, p)| PredictionRow {
                traj: w.traj,
                start: w.start,
                x: w.query.x,
                y: w.query.y,
                z: w.query.z,
                truth: w.target,
                prediction: *p,
            })
            .collect();
        if rows.iter().any(|r| !r.prediction.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch: 0 });
        }
        write_rows(&layout.predictions(v), &rows)?;
        let samples: Vec<(usize, f64, f64)> = rows.iter().map(|r| (r.traj, r.truth, r.prediction)).collect();
        let metrics = stats::per_trajectory(&samples);
        write_rows(&layout.metrics(v), &metrics)?;
        outputs.extend([layout.predictions(v), layout.metrics(v)]);
        if !metrics.is_empty() {
            out.insert(v, stats::summarize(&metrics)?);
        }
    }
    outputs.extend(evaluate_rollouts(cfg, layout, &embedders_of(variants))?);
    write_manifest(cfg, layout, Stage::Evaluate.as_str(), &outputs, t0)?;
    Ok(out)
}

/// Task A rollouts on the test split, averaged per window. Returns the
/// written paths.
pub fn evaluate_rollouts(cfg: &RunConfig, layout: &RunLayout, kinds: &[EmbedderKind]) -> Result<Vec<PathBuf>> {
    create_dirs(layout)?;
    let data = load_data(cfg, layout)?;
    let mut outputs = Vec::new();
    for &kind in kinds {
        let emb = load_embedder(cfg, layout, kind)?;
        let model = load_transformer(cfg, layout, kind)?;
        let steps = cfg.eval.rollout_steps;
        let usable: Vec<&Trajectory> = data.test.iter().filter(|t| t.states.len() > steps).collect();
        let starts: Vec<State3> = usable.iter().map(|t| t.states[0]).collect();
        let preds = transformer::rollout(&model, &emb, &starts, steps)?;
        let truths: Vec<&[State3]> = usable.iter().map(|t| &t.states[1..]).collect();
        let w = transformer::mean_window_mse(&preds, &truths, cfg.eval.rollout_window);
        let rows: Vec<RolloutRow> = w.iter().enumerate().map(|(i, m)| RolloutRow { window: i + 1, mse: *m }).collect();
        write_rows(&layout.rollout(kind), &rows)?;
        outputs.push(layout.rollout(kind));
    }
    Ok(outputs)
}

pub fn read_metrics(layout: &RunLayout, v: Variant) -> Result<Vec<TrajectoryMetrics>> {
    read_rows(&layout.metrics(v))
}

/// Test predictions with their query states.
pub fn read_error_points(layout: &RunLayout, v: Variant) -> Result<Vec<ErrorPoint>> {
    let rows: Vec<PredictionRow> = read_rows(&layout.predictions(v))?;
    Ok(rows
        .into_iter()
        .map(|r| ErrorPoint {
            state: State3::new(r.x, r.y, r.z),
            truth: r.truth,
            prediction: r.prediction,
        })
        .collect())
}

pub fn read_rollout(layout: &RunLayout, k: EmbedderKind) -> Result<Vec<f64>> {
    let rows: Vec<RolloutRow> = read_rows(&layout.rollout(k))?;
    Ok(rows.into_iter().map(|r| r.mse).collect())
}

/// Files written by [`report`].
/// Files written by [`report`].
pub const REPORT_FILES: [&str; 7] = [
    "summary.csv",
    "pairwise.csv",
    "rollout.csv",
    "density.csv",
    "density_marginals.csv",
    "quadrants.csv",
    "density_totals.csv",
];

/// Assembles the summary, pairwise, rollout and density tables from the
/// evaluation outputs of every variant present.
pub fn report(cfg: &RunConfig, layout: &RunLayout) -> Result<PathBuf> {
    let t0 = Instant::now();
    create_dirs(layout)?;
    let dir = layout.report();
    std::fs::create_dir_all(&dir)?;
    let present: Vec<Variant> = Variant::ALL.into_iter().filter(|v| layout.metrics(*v).exists()).collect();
    if present.is_empty() {
        return Err(Error::MissingPrerequisite(layout.metrics(Variant::KoopmanFrozen)));
    }
    let mut outputs = Vec::new();

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["model", "n_traj", "mse_e4_mean", "mse_e4_std", "mae_e2_mean", "mae_e2_std", "r2_mean", "r2_std"])?;
    let mut models = Vec::new();
    for &v in &present {
        let m = read_metrics(layout, v)?;
        if m.is_empty() {
            continue;
        }
        let s = stats::summarize(&m)?;
        w.write_record(&[
            v.label().to_string(),
            s.n_traj.to_string(),
            (s.mse.mean * 1e4).to_string(),
            (s.mse.std * 1e4).to_string(),
            (s.mae.mean * 1e2).to_string(),
            (s.mae.std * 1e2).to_string(),
            s.r2.mean.to_string(),
            s.r2.std.to_string(),
        ])?;
        models.push((v.label().to_string(), m));
    }
    w.flush()?;
    outputs.push(dir.join("summary.csv"));

    let mut w = csv::Writer::from_path(dir.join("pairwise.csv"))?;
    w.write_record(["model_a", "model_b", "metric", "mean_a", "mean_b", "n", "statistic", "p_value", "alpha", "significant", "winner"])?;
    if models.len() >= 2 {
        let common = common_ids(&models);
        let aligned: Vec<(String, Vec<TrajectoryMetrics>)> = models
            .iter()
            .map(|(n, m)| (n.clone(), m.iter().filter(|t| common.contains(&t.traj_id)).copied().collect()))
            .collect();
        for r in stats::pairwise_table(&aligned, cfg.eval.alpha)? {
            w.write_record(&[
                r.model_a,
                r.model_b,
                r.metric.as_str().to_string(),
                r.mean_a.to_string(),
                r.mean_b.to_string(),
                r.n.to_string(),
                r.statistic.to_string(),
                r.p_value.to_string(),
                r.alpha.to_string(),
                r.significant.to_string(),
                r.winner.unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    outputs.push(dir.join("pairwise.csv"));

    let mut w = csv::Writer::from_path(dir.join("rollout.csv"))?;
    w.write_record(["model", "window", "mse"])?;
    for kind in EmbedderKind::ALL {
        if layout.rollout(kind).exists() {
            for (i, m) in read_rollout(layout, kind)?.iter().enumerate() {
                w.write_record(&[kind.label().to_string(), (i + 1).to_string(), m.to_string()])?;
            }
        }
    }
    w.flush()?;
    outputs.push(dir.join("rollout.csv"));

    let mut dens = csv::Writer::from_path(dir.join("density.csv"))?;
    dens.write_record(["model", "x_bin", "z_bin", "x_lo", "x_hi", "z_lo", "z_hi", "l1"])?;
    let mut marg = csv::Writer::from_path(dir.join("density_marginals.csv"))?;
    marg.write_record(["model", "axis", "bin", "lo", "hi", "l1"])?;
    let mut quad = csv::Writer::from_path(dir.join("quadrants.csv"))?;
    quad.write_record(["model", "quadrant", "count", "centroid_x", "centroid_z", "velocity_x", "velocity_z", "mean_l1"])?;
    let mut tot = csv::Writer::from_path(dir.join("density_totals.csv"))?;
    tot.write_record(["model", "points", "total_l1", "conserved"])?;
    for &v in &present {
        let pts = read_error_points(layout, v)?;
        if pts.is_empty() {
            continue;
        }
        let n = cfg.eval.density_bins;
        let m = stats::error_density(&pts, n, n, &cfg.lorenz)?;
        let label = v.label().to_string();
        for i in 0..m.nx() {
            for j in 0..m.nz() {
                let e = m.bins[i * m.nz() + j];
                if e != 0 {
                    dens.write_record(&[
                        label.clone(),
                        i.to_string(),
                        j.to_string(),
                        m.x_edges[i].to_string(),
                        m.x_edges[i + 1].to_string(),
                        m.z_edges[j].to_string(),
                        m.z_edges[j + 1].to_string(),
                        stats::from_fixed(e).to_string(),
                    ])?;
                }
            }
        }
        for (axis, edges, values) in [("x", &m.x_edges, &m.x_marginal), ("z", &m.z_edges, &m.z_marginal)] {
            for (k, e) in values.iter().enumerate() {
                marg.write_record(&[
                    label.clone(),
                    axis.to_string(),
                    k.to_string(),
                    edges[k].to_string(),
                    edges[k + 1].to_string(),
                    stats::from_fixed(*e).to_string(),
                ])?;
            }
        }
        for (q, name) in m.quadrants.iter().zip(stats::QUADRANT_NAMES) {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            quad.write_record(&[
                label.clone(),
                name.to_string(),
                q.count.to_string(),
                opt(q.centroid.map(|c| c.0)),
                opt(q.centroid.map(|c| c.1)),
                opt(q.mean_velocity.map(|c| c.0)),
                opt(q.mean_velocity.map(|c| c.1)),
                opt(q.mean_error),
            ])?;
        }
        tot.write_record(&[
            label,
            pts.len().to_string(),
            stats::from_fixed(m.total).to_string(),
            m.is_conserved().to_string(),
        ])?;
    }
    for w in [&mut dens, &mut marg, &mut quad, &mut tot] {
        w.flush()?;
    }
    for f in ["density.csv", "density_marginals.csv", "quadrants.csv", "density_totals.csv"] {
        outputs.push(dir.join(f));
    }
    write_manifest(cfg, layout, Stage::Report.as_str(), &outputs, t0)?;
    Ok(dir)
}

fn common_ids(models: &[(String, Vec<TrajectoryMetrics>)]) -> Vec<usize> {
    let mut ids: Vec<usize> = models[0].1.iter().map(|m| m.traj_id).collect();
    for (_, m) in &models[1..] {
        ids.retain(|i| m.iter().any(|t| t.traj_id == *i));
    }
    ids
}

/// Every stage in order for the given variants.
pub fn run_all(cfg: &RunConfig, layout: &RunLayout, variants: &[Variant]) -> Result<PathBuf> {
    simulate(cfg, layout)?;
    train_ae(cfg, layout)?;
    pretrain(cfg, layout, variants)?;
    compute_safety(cfg, layout)?;
    finetune(cfg, layout, variants)?;
    evaluate(cfg, layout, variants)?;
    report(cfg, layout)
}

/// Checkpoint bytes of a file, for freezing audits.
pub fn checkpoint_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(read_checkpoint(path)?.to_bytes())
}
