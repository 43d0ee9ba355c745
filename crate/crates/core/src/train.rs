//! Pieces shared by the three training loops.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Normalizer, Trajectory, Window};
use crate::error::Result;
use crate::rng::Rng;
use crate::sim::State3;
use crate::tensor::Tensor;

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_curve(path: &Path, rows: &[EpochLog]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Indices `0..n` in a fresh random order.
pub fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Stacks states as rows of an `n x 3` tensor.
pub fn states_tensor<'a>(states: impl IntoIterator<Item = &'a State3>) -> Tensor {
    let data: Vec<f64> = states.into_iter().flat_map(|s| s.to_array()).collect();
    let n = data.len() / 3;
    Tensor::new(&[n, 3], data).expect("three columns")
}

/// Normalised inputs and one-step targets of `windows`, stacked row-wise.
pub fn window_pairs(
    trajs: &[Trajectory],
    windows: &[Window],
    norm: &Normalizer,
) -> (Tensor, Tensor) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for w in windows {
        let t = &trajs[w.traj];
        xs.extend(w.inputs(t).iter().map(|s| norm.apply(*s)));
        ys.extend(w.targets(t).iter().map(|s| norm.apply(*s)));
    }
    (states_tensor(&xs), states_tensor(&ys))
}

/// `lr0 * decay^epoch`.
pub fn decayed_lr(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}
