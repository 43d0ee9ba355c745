//! Trajectory splits, windowing, normalisation and on-disk formats.
//!
//! The canonical storage is one CSV per split with columns
//! `traj_id,step,x,y,z`. A little-endian binary cache (`LZTRJ1`) mirrors
//! the CSV for fast reloads; the CSV stays the ground truth.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};
use crate::sim::{advance, integrate, IntegratorConfig, LorenzParams, State3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub states: Vec<State3>,
    pub dt: f64,
    pub seed: u64,
    pub split: Split,
}

impl Trajectory {
    /// Number of sample intervals (states minus one).
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// How initial conditions are drawn before burn-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSampler {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub burn_in: f64,
}

impl Default for InitSampler {
    fn default() -> Self {
        Self {
            lo: [-20.0, -25.0, 5.0],
            hi: [20.0, 25.0, 45.0],
            burn_in: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub len_train: usize,
    pub n_val: usize,
    pub len_val: usize,
    pub n_test: usize,
    pub len_test: usize,
    pub dt: f64,
    pub init_sampler: InitSampler,
    /// Set from the run seed rather than read from configuration files.
    #[serde(skip)]
    pub master_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 2048,
            len_train: 256,
            n_val: 64,
            len_val: 1024,
            n_test: 256,
            len_test: 1024,
            dt: 0.01,
            init_sampler: InitSampler::default(),
            master_seed: 0,
        }
    }
}

impl DatasetSpec {
    fn split_shape(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (self.n_train, self.len_train),
            Split::Val => (self.n_val, self.len_val),
            Split::Test => (self.n_test, self.len_test),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            let (n, len) = self.split_shape(split);
            if n == 0 || len == 0 {
                return Err(Error::ConfigInvalid {
                    field: format!("dataset.{}", split.as_str()),
                    reason: "counts and lengths must be positive".into(),
                });
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::ConfigInvalid {
                field: "dataset.dt".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Seed of trajectory `index` in `split`.
    pub fn trajectory_seed(&self, split: Split, index: usize) -> u64 {
        derive_seed(self.master_seed, split.as_str(), index as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Trajectory] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Simulates one trajectory from its seed.
pub fn simulate_trajectory(
    seed: u64,
    steps: usize,
    sampler: &InitSampler,
    cfg: &IntegratorConfig,
    p: &LorenzParams,
) -> Result<Vec<State3>> {
    let mut rng = stream_rng(seed, 0);
    let mut s = [0.0; 3];
    for (i, v) in s.iter_mut().enumerate() {
        *v = rng.random_range(sampler.lo[i]..sampler.hi[i]);
    }
    let start = advance(State3::from_array(s), sampler.burn_in, cfg, p)?;
    integrate(start, steps, cfg, p)
}

/// Generates all three splits. Every trajectory seed is derived from the
/// master seed, the split name and the trajectory index.
pub fn generate_splits(
    spec: &DatasetSpec,
    cfg: &IntegratorConfig,
    p: &LorenzParams,
) -> Result<Dataset> {
    spec.validate()?;
    let cfg = IntegratorConfig {
        dt_sample: spec.dt,
        ..*cfg
    };
    let build = |split: Split| -> Result<Vec<Trajectory>> {
        let (n, len) = spec.split_shape(split);
        (0..n)
            .map(|id| {
                let seed = spec.trajectory_seed(split, id);
                let states = simulate_trajectory(seed, len, &spec.init_sampler, &cfg, p)
                    .map_err(|e| Error::Trajectory {
                        seed,
                        source: Box::new(e),
                    })?;
                Ok(Trajectory {
                    id,
                    states,
                    dt: spec.dt,
                    seed,
                    split,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: build(Split::Train)?,
        val: build(Split::Val)?,
        test: build(Split::Test)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub const fn new(length: usize, stride: usize) -> Self {
        Self { length, stride }
    }
}

/// A window into a trajectory: inputs are states `start..start+length`,
/// targets are `start+1..=start+length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
    pub length: usize,
}

impl Window {
    pub fn inputs<'a>(&self, traj: &'a Trajectory) -> &'a [State3] {
        &traj.states[self.start..self.start + self.length]
    }

    pub fn targets<'a>(&self, traj: &'a Trajectory) -> &'a [State3] {
        &traj.states[self.start + 1..self.start + self.length + 1]
    }
}

pub fn window(traj: &Trajectory, w: WindowSpec) -> Result<Vec<Window>> {
    assert!(w.length >= 1 && w.stride >= 1, "window length and stride must be positive");
    let steps = traj.steps();
    if w.length > steps {
        return Err(Error::WindowTooLong {
            length: w.length,
            steps,
        });
    }
    let count = (steps - w.length) / w.stride + 1;
    Ok((0..count)
        .map(|k| Window {
            traj: traj.id,
            start: k * w.stride,
            length: w.length,
        })
        .collect())
}

/// Windows of every trajectory in a split.
pub fn window_all(trajs: &[Trajectory], w: WindowSpec) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for t in trajs {
        out.extend(window(t, w)?);
    }
    Ok(out)
}

/// Per-component standardisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: State3,
    pub std: State3,
    pub enabled: bool,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: State3::ORIGIN,
            std: State3::new(1.0, 1.0, 1.0),
            enabled: false,
        }
    }

    pub fn fit(train: &[Trajectory]) -> Result<Self> {
        let n: usize = train.iter().map(|t| t.states.len()).sum();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let mut mean = [0.0; 3];
        for s in train.iter().flat_map(|t| &t.states) {
            for i in 0..3 {
                mean[i] += s[i];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = [0.0; 3];
        for s in train.iter().flat_map(|t| &t.states) {
            for i in 0..3 {
                var[i] += (s[i] - mean[i]).powi(2);
            }
        }
        let std = var.map(|v| (v / n as f64).sqrt());
        if let Some(axis) = std.iter().position(|s| *s < 1e-12) {
            return Err(Error::DegenerateAxis {
                axis,
                std: std[axis],
            });
        }
        Ok(Self {
            mean: State3::from_array(mean),
            std: State3::from_array(std),
            enabled: true,
        })
    }

    pub fn apply(&self, s: State3) -> State3 {
        if !self.enabled {
            return s;
        }
        State3::new(
            (s.x - self.mean.x) / self.std.x,
            (s.y - self.mean.y) / self.std.y,
            (s.z - self.mean.z) / self.std.z,
        )
    }

    pub fn invert(&self, s: State3) -> State3 {
        if !self.enabled {
            return s;
        }
        State3::new(
            s.x * self.std.x + self.mean.x,
            s.y * self.std.y + self.mean.y,
            s.z * self.std.z + self.mean.z,
        )
    }

    /// Rescales a time derivative into normalised coordinates.
    pub fn apply_rate(&self, v: State3) -> State3 {
        if !self.enabled {
            return v;
        }
        State3::new(v.x / self.std.x, v.y / self.std.y, v.z / self.std.z)
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    traj_id: usize,
    step: usize,
    x: f64,
    y: f64,
    z: f64,
}

pub fn write_csv(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in trajs {
        for (step, s) in t.states.iter().enumerate() {
            w.serialize(CsvRow {
                traj_id: t.id,
                step,
                x: s.x,
                y: s.y,
                z: s.z,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a split CSV. Seeds are re-derived from `spec`.
pub fn read_csv(path: &Path, split: Split, spec: &DatasetSpec) -> Result<Vec<Trajectory>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<Trajectory> = Vec::new();
    for row in r.deserialize() {
        let row: CsvRow = row?;
        if out.last().map(|t| t.id) != Some(row.traj_id) {
            if row.traj_id != out.len() {
                return Err(Error::format(path, format!("unexpected traj_id {}", row.traj_id)));
            }
            out.push(Trajectory {
                id: row.traj_id,
                states: Vec::new(),
                dt: spec.dt,
                seed: spec.trajectory_seed(split, row.traj_id),
                split,
            });
        }
        let t = out.last_mut().expect("pushed above");
        if row.step != t.states.len() {
            return Err(Error::format(path, format!("step {} out of order", row.step)));
        }
        t.states.push(State3::new(row.x, row.y, row.z));
    }
    Ok(out)
}

const CACHE_MAGIC: &[u8; 6] = b"LZTRJ1";

/// Binary cache: magic, u32 trajectory count, then per trajectory
/// `u64 seed, u32 n_states, n_states * 3 f64`.
pub fn write_cache(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(trajs.len() as u32).to_le_bytes())?;
    for t in trajs {
        w.write_all(&t.seed.to_le_bytes())?;
        w.write_all(&(t.states.len() as u32).to_le_bytes())?;
        for s in &t.states {
            for v in s.to_array() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path, split: Split, dt: f64) -> Result<Vec<Trajectory>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = ByteCursor::new(&bytes, path);
    if cur.take(6)? != CACHE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let n = cur.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let seed = cur.u64()?;
        let len = cur.u32()? as usize;
        let mut states = Vec::with_capacity(len);
        for _ in 0..len {
            states.push(State3::new(cur.f64()?, cur.f64()?, cur.f64()?));
        }
        out.push(Trajectory {
            id,
            states,
            dt,
            seed,
            split,
        });
    }
    Ok(out)
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes the split CSVs, binary caches and a key-value manifest into `dir`.
pub fn save(dir: &Path, data: &Dataset, spec: &DatasetSpec, norm: &Normalizer) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "format = trajectories-csv-v1");
    let _ = writeln!(manifest, "master_seed = {}", spec.master_seed);
    let _ = writeln!(manifest, "dt = {}", spec.dt);
    for split in Split::ALL {
        let (n, len) = spec.split_shape(split);
        let _ = writeln!(manifest, "{}.count = {n}", split.as_str());
        let _ = writeln!(manifest, "{}.steps = {len}", split.as_str());
    }
    let _ = writeln!(manifest, "init.lo = {:?}", spec.init_sampler.lo);
    let _ = writeln!(manifest, "init.hi = {:?}", spec.init_sampler.hi);
    let _ = writeln!(manifest, "init.burn_in = {}", spec.init_sampler.burn_in);
    let _ = writeln!(manifest, "normalizer.enabled = {}", norm.enabled);
    let _ = writeln!(manifest, "normalizer.mean = {:?}", norm.mean.to_array());
    let _ = writeln!(manifest, "normalizer.std = {:?}", norm.std.to_array());
    for split in Split::ALL {
        let csv_path = dir.join(format!("{}.csv", split.as_str()));
        write_csv(&csv_path, data.split(split))?;
        write_cache(&dir.join(format!("{}.bin", split.as_str())), data.split(split))?;
        let _ = writeln!(
            manifest,
            "sha256.{}.csv = {}",
            split.as_str(),
            sha256_file(&csv_path)?
        );
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loads the CSVs written by [`save`].
pub fn load(dir: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let read = |split: Split| -> Result<Vec<Trajectory>> {
        let path = dir.join(format!("{}.csv", split.as_str()));
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path));
        }
        read_csv(&path, split, spec)
    };
    Ok(Dataset {
        train: read(Split::Train)?,
        val: read(Split::Val)?,
        test: read(Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(steps: usize) -> Trajectory {
        Trajectory {
            id: 0,
            states: (0..=steps)
                .map(|k| State3::new(k as f64, 2.0 * k as f64, -(k as f64)))
                .collect(),
            dt: 0.01,
            seed: 1,
            split: Split::Train,
        }
    }

    #[test]
    fn window_counts() {
        let t = toy(256);
        assert_eq!(window(&t, WindowSpec::new(64, 16)).unwrap().len(), 13);
        assert_eq!(window(&t, WindowSpec::new(64, 64)).unwrap().len(), 4);
        assert_eq!(window(&t, WindowSpec::new(256, 7)).unwrap().len(), 1);
        assert!(matches!(
            window(&t, WindowSpec::new(257, 1)),
            Err(Error::WindowTooLong { .. })
        ));
    }

    #[test]
    fn window_inputs_and_targets_are_shifted() {
        let t = toy(10);
        let w = window(&t, WindowSpec::new(4, 3)).unwrap();
        let starts: Vec<_> = w.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 3, 6]);
        assert_eq!(w[1].inputs(&t)[0].x, 3.0);
        assert_eq!(w[1].targets(&t)[3].x, 7.0);
        assert!(w.iter().all(|w| w.start + w.length < t.states.len()));
    }

    #[test]
    fn normalizer_standardises_and_round_trips() {
        let mut t = toy(50);
        t.states.iter_mut().for_each(|s| s.z = (s.x * 0.3).sin());
        let n = Normalizer::fit(std::slice::from_ref(&t)).unwrap();
        let z: Vec<State3> = t.states.iter().map(|s| n.apply(*s)).collect();
        for i in 0..3 {
            let m = z.iter().map(|s| s[i]).sum::<f64>() / z.len() as f64;
            let v = z.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v.sqrt() - 1.0).abs() < 1e-9);
        }
        for s in &t.states {
            assert!((n.invert(n.apply(*s)) - *s).max_abs() < 1e-12);
        }
        let id = Normalizer::identity();
        assert_eq!(id.apply(State3::new(3.0, 4.0, 5.0)), State3::new(3.0, 4.0, 5.0));
    }

    #[test]
    fn degenerate_axis_rejected() {
        let mut t = toy(5);
        t.states.iter_mut().for_each(|s| s.y = 1.0);
        assert!(matches!(
            Normalizer::fit(&[t]),
            Err(Error::DegenerateAxis { axis: 1, .. })
        ));
    }
}
